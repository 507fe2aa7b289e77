"""DemaFormer: damped-EMA attention with energy-based training for temporal language grounding."""

from .config import RunConfig, load_config
from .data import GroundingSample, GroundTruth, gen_synthetic, load_manifest
from .errors import (
    ConfigError,
    DemaformerError,
    DivergenceError,
    ManifestError,
    SamplingError,
    ShapeError,
)
from .model import DemaFormer, Span
from .training import fit, load_params, save_params

__version__ = "0.1.0"
