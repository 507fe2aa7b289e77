import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import List, Optional

from .errors import ConfigError

# =========================================================
# 1. DEFAULTS
# =========================================================

D_K = 256                 # key dimension of the DEMA attention
N_LAYERS = 2              # N_e = N_d
TOP_MOMENTS = 10          # L_m at test time

LANGEVIN_STEPS = 100      # K
LANGEVIN_NOISE = 0.1      # gamma (noise variance per coordinate)
POSITIVE_THRESHOLD = 4.0  # rho, QVHighlights value
ALPHA_MIN = 0.1
LAMBDA_NLL = 0.1

LAMBDA_CENTER = 1.0 / 3.0
LAMBDA_WIDTH = 0.01
LAMBDA_OFFSET = 1.0 / 3.0
LAMBDA_SALIENCE = 1.0     # listwise salience term over every moment
LAMBDA_SPAN = 1.0         # span regression at every in-span moment

LEARNING_RATE = 1e-3
WEIGHT_DECAY = 1e-4

HIT_TAU = 4.0

ACTIVATIONS = ("silu", "tanh", "relu", "gelu")
ENERGY_KINDS = ("salience", "elementwise_cosine", "pooled_cosine")
OFFSET_VARIANTS = ("appendix", "main_text")

# =========================================================
# 2. CONFIG SECTIONS
# =========================================================


@dataclass
class ModelConfig:
    d: int = 32
    d_k: int = D_K
    n_e: int = N_LAYERS
    n_d: int = N_LAYERS
    d_v: int = 16
    d_q: int = 16
    d_a: int = 16
    l_m_test: int = TOP_MOMENTS
    activation: str = "silu"
    use_tef: bool = True   # append [i/L_v, (i+1)/L_v] to each video row


@dataclass
class EbmConfig:
    k: int = LANGEVIN_STEPS
    gamma: float = LANGEVIN_NOISE
    rho: float = POSITIVE_THRESHOLD
    alpha_min: float = ALPHA_MIN
    lambda_nll: float = LAMBDA_NLL


@dataclass
class LossWeights:
    lambda1: float = LAMBDA_CENTER
    lambda2: float = LAMBDA_WIDTH
    lambda3: float = LAMBDA_OFFSET
    lambda_nll: float = LAMBDA_NLL
    lambda_sal: float = LAMBDA_SALIENCE
    lambda_span: float = LAMBDA_SPAN


@dataclass
class SynthConfig:
    l_v: int = 32
    l_q: int = 8
    d_v: int = 16
    d_q: int = 16
    d_a: int = 16
    n_moments: int = 1
    snr: float = 5.0
    seed: int = 0


@dataclass
class EvalConfig:
    ks: List[int] = field(default_factory=lambda: [1, 5])
    mus: List[float] = field(default_factory=lambda: [0.5, 0.7, 0.75])
    tau: float = HIT_TAU
    group_key: Optional[str] = None


@dataclass
class Ablations:
    no_damping: bool = False
    no_dema: bool = False
    no_ebm: bool = False
    no_offset: bool = False
    offset_variant: str = "appendix"


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    ebm: EbmConfig = field(default_factory=EbmConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    synth: SynthConfig = field(default_factory=SynthConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    ablations: Ablations = field(default_factory=Ablations)
    epochs: int = 100
    seed: int = 0
    energy_kind: str = "salience"
    batch_size: int = 4
    lr: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    clip_norm: Optional[float] = 1.0
    split: float = 0.2
    eval_every: int = 1
    track_mlflow: bool = False
    n_jobs: int = 1

    @property
    def lambda_nll(self):
        """Weight actually applied to L_NLL (zero under the no_ebm ablation)."""
        if self.ablations.no_ebm:
            return 0.0
        return self.loss.lambda_nll


SECTIONS = {
    "model": ModelConfig,
    "ebm": EbmConfig,
    "loss": LossWeights,
    "synth": SynthConfig,
    "eval": EvalConfig,
    "ablations": Ablations,
}

# =========================================================
# 3. LOADING
# =========================================================


def _build_section(cls, raw, name, errors):
    if not isinstance(raw, dict):
        errors.append(f"{name}: expected an object, got {type(raw).__name__}")
        return cls()
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    for key in unknown:
        errors.append(f"{name}.{key}: unknown key")
    return cls(**{k: v for k, v in raw.items() if k in known})


def config_from_dict(raw):
    """
    Builds a RunConfig from a parsed JSON object.
    Missing keys keep their defaults; unknown keys are collected as errors.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")

    errors = []
    top_known = {f.name for f in fields(RunConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key not in top_known:
            errors.append(f"{key}: unknown key")
        elif key in SECTIONS:
            kwargs[key] = _build_section(SECTIONS[key], value, key, errors)
        else:
            kwargs[key] = value

    # lambda_nll lives in two sections; a value given in only one is mirrored
    ebm_nll = isinstance(raw.get("ebm"), dict) and "lambda_nll" in raw["ebm"]
    loss_nll = isinstance(raw.get("loss"), dict) and "lambda_nll" in raw["loss"]
    if ebm_nll and not loss_nll:
        kwargs.setdefault("loss", LossWeights()).lambda_nll = raw["ebm"]["lambda_nll"]
    elif loss_nll and not ebm_nll:
        kwargs.setdefault("ebm", EbmConfig()).lambda_nll = raw["loss"]["lambda_nll"]

    if errors:
        raise ConfigError("\n".join(errors))

    cfg = RunConfig(**kwargs)
    validate_config(cfg)
    return cfg


def load_config(path=None):
    if path is None:
        return RunConfig()
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    except OSError as e:
        raise ConfigError(f"{path}: {e}") from e
    return config_from_dict(raw)


def config_to_dict(cfg):
    return asdict(cfg)


def save_config(cfg, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(config_to_dict(cfg), f, indent=2)


# =========================================================
# 4. VALIDATION (collects every problem, raises once)
# =========================================================


def _is_int(value):
    return isinstance(value, int) and not isinstance(value, bool)


def _is_real(value):
    return (_is_int(value) or isinstance(value, float)) and math.isfinite(value)


def validate_config(cfg):
    errors = []

    def need(ok, message):
        if not ok:
            errors.append(message)

    m = cfg.model
    for name in ("d", "d_k", "d_v", "d_q", "d_a", "l_m_test", "n_e", "n_d"):
        value = getattr(m, name)
        need(_is_int(value) and value >= 1, f"model.{name} must be an integer >= 1 (got {value!r})")
    need(m.activation in ACTIVATIONS, f"model.activation must be one of {ACTIVATIONS} (got {m.activation!r})")
    need(isinstance(m.use_tef, bool), "model.use_tef must be true/false")

    e = cfg.ebm
    need(_is_int(e.k) and e.k >= 1, f"ebm.k must be an integer >= 1 (got {e.k!r})")
    need(_is_real(e.gamma) and e.gamma > 0, f"ebm.gamma must be > 0 (got {e.gamma!r})")
    need(_is_real(e.rho) or e.rho == -math.inf, f"ebm.rho must be a real number (got {e.rho!r})")
    need(_is_real(e.alpha_min) and 0 < e.alpha_min <= 1, f"ebm.alpha_min must be in (0, 1] (got {e.alpha_min!r})")
    need(_is_real(e.lambda_nll) and e.lambda_nll >= 0, f"ebm.lambda_nll must be >= 0 (got {e.lambda_nll!r})")

    w = cfg.loss
    for name in ("lambda1", "lambda2", "lambda3", "lambda_nll", "lambda_sal", "lambda_span"):
        value = getattr(w, name)
        need(_is_real(value) and value >= 0, f"loss.{name} must be >= 0 (got {value!r})")
    need(e.lambda_nll == w.lambda_nll, f"ebm.lambda_nll ({e.lambda_nll}) and loss.lambda_nll ({w.lambda_nll}) disagree")

    s = cfg.synth
    for name in ("l_v", "l_q", "d_v", "d_q", "d_a", "n_moments"):
        value = getattr(s, name)
        need(_is_int(value) and value >= 1, f"synth.{name} must be an integer >= 1 (got {value!r})")
    if _is_int(s.n_moments) and _is_int(s.l_v):
        need(s.n_moments < s.l_v, f"synth.n_moments ({s.n_moments}) must be < synth.l_v ({s.l_v})")
    need(_is_real(s.snr) and s.snr >= 0, f"synth.snr must be >= 0 (got {s.snr!r})")
    need(_is_int(s.seed), f"synth.seed must be an integer (got {s.seed!r})")
    if all(_is_int(v) for v in (m.d_v, m.d_q, m.d_a, s.d_v, s.d_q, s.d_a)):
        need((m.d_v, m.d_q, m.d_a) == (s.d_v, s.d_q, s.d_a),
             "model feature dims (d_v, d_q, d_a) must match synth feature dims")

    ev = cfg.eval
    need(isinstance(ev.ks, list) and len(ev.ks) > 0 and all(_is_int(k) and k >= 1 for k in ev.ks),
         f"eval.ks must be a non-empty list of integers >= 1 (got {ev.ks!r})")
    need(isinstance(ev.mus, list) and len(ev.mus) > 0 and all(_is_real(mu) and 0 < mu <= 1 for mu in ev.mus),
         f"eval.mus must be a non-empty list inside (0, 1] (got {ev.mus!r})")
    need(_is_real(ev.tau), f"eval.tau must be a real number (got {ev.tau!r})")
    need(ev.group_key is None or isinstance(ev.group_key, str), "eval.group_key must be a string or null")

    a = cfg.ablations
    for name in ("no_damping", "no_dema", "no_ebm", "no_offset"):
        need(isinstance(getattr(a, name), bool), f"ablations.{name} must be true/false")
    need(a.offset_variant in OFFSET_VARIANTS, f"ablations.offset_variant must be one of {OFFSET_VARIANTS}")

    need(_is_int(cfg.epochs) and cfg.epochs >= 1, f"epochs must be an integer >= 1 (got {cfg.epochs!r})")
    need(_is_int(cfg.seed), f"seed must be an integer (got {cfg.seed!r})")
    need(cfg.energy_kind in ENERGY_KINDS, f"energy_kind must be one of {ENERGY_KINDS} (got {cfg.energy_kind!r})")
    need(_is_int(cfg.batch_size) and cfg.batch_size >= 1, f"batch_size must be an integer >= 1 (got {cfg.batch_size!r})")
    need(_is_real(cfg.lr) and cfg.lr > 0, f"lr must be > 0 (got {cfg.lr!r})")
    need(_is_real(cfg.weight_decay) and cfg.weight_decay >= 0, f"weight_decay must be >= 0 (got {cfg.weight_decay!r})")
    need(cfg.clip_norm is None or (_is_real(cfg.clip_norm) and cfg.clip_norm > 0),
         f"clip_norm must be > 0 or null (got {cfg.clip_norm!r})")
    need(_is_real(cfg.split) and 0 < cfg.split < 1, f"split must be in (0, 1) (got {cfg.split!r})")
    need(_is_int(cfg.eval_every) and cfg.eval_every >= 1, f"eval_every must be an integer >= 1 (got {cfg.eval_every!r})")
    need(isinstance(cfg.track_mlflow, bool), "track_mlflow must be true/false")
    need(_is_int(cfg.n_jobs) and cfg.n_jobs != 0, f"n_jobs must be a non-zero integer (got {cfg.n_jobs!r})")

    if errors:
        raise ConfigError("\n".join(errors))


def replace_section(cfg, section, **changes):
    """Returns a copy of cfg with some fields of one section changed."""
    raw = config_to_dict(cfg)
    if section is None:
        raw.update(changes)
    else:
        raw[section].update(changes)
        if section in ("ebm", "loss") and "lambda_nll" in changes:
            raw["ebm"]["lambda_nll"] = raw["loss"]["lambda_nll"] = changes["lambda_nll"]
    return config_from_dict(raw)