"""Exception types shared by every demaformer module."""


class DemaformerError(Exception):
    """Base class for all errors raised by the package."""


class ConfigError(DemaformerError, ValueError):
    """Invalid configuration (bad JSON, unknown key, broken invariant)."""


class ShapeError(ConfigError):
    """Operands with inconsistent dimensions."""


class ManifestError(DemaformerError, ValueError):
    """A manifest line failed to parse or validate."""

    def __init__(self, message, line=None, field=None):
        self.line = line
        self.field = field
        parts = []
        if line is not None:
            parts.append(f"line {line}")
        if field is not None:
            parts.append(field)
        parts.append(message)
        super().__init__(": ".join(parts))


class SamplingError(DemaformerError, FloatingPointError):
    """Langevin chain hit a non-finite energy gradient."""


class DivergenceError(DemaformerError, FloatingPointError):
    """Training loss became NaN/Inf. `report` holds the epochs completed so far."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report
