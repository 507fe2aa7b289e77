import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from .dema import DemaAttentionParams, dema_attention
from .errors import ShapeError
from .numerics import (
    LinearParams,
    Params,
    Tensor,
    concat_rows,
    layer_norm,
    linear_forward,
    matmul,
    no_tape,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_rows,
    softmax_rows,
    transpose,
)

# =========================================================
# 1. TYPES
# =========================================================


@dataclass
class Span:
    start: float
    end: float
    score: float
    index: int = -1


@dataclass
class HeadOutputs:
    s_hat: Tensor    # salience, unbounded
    c_hat: Tensor    # center in (0, 1)
    co_hat: Tensor   # center offset, unbounded
    w_hat: Tensor    # width in (0, 1)

    def __len__(self):
        return self.s_hat.data.shape[0]


@dataclass
class ForwardOutputs:
    o_e: Tensor
    o_d: Tensor
    heads: HeadOutputs
    l_v: int

    @property
    def query_rows(self):
        return slice_rows(self.o_e, self.l_v, self.o_e.data.shape[0])


@dataclass
class LayerParams(Params):
    """One encoder/decoder layer: H = Norm(Block(X)); X_next = Norm(ReLU(H) + H)."""
    block: DemaAttentionParams
    norm1_gain: Tensor
    norm1_shift: Tensor
    norm2_gain: Tensor
    norm2_shift: Tensor

    @classmethod
    def init(cls, d, d_k, rng, activation="silu", damping=True, use_dema=True):
        def ones():
            return Tensor(np.ones(d), requires_grad=True)

        def zeros():
            return Tensor(np.zeros(d), requires_grad=True)

        block = DemaAttentionParams.init(d, d_k, rng, activation=activation, damping=damping, use_dema=use_dema)
        return cls(block, ones(), zeros(), ones(), zeros())


@dataclass
class HeadParams(Params):
    salience: LinearParams
    center: LinearParams
    offset: LinearParams
    width: LinearParams

    @classmethod
    def init(cls, d, rng):
        return cls(*(LinearParams.init(d, 1, rng) for _ in range(4)))


@dataclass
class DemaFormerParams(Params):
    video_proj: LinearParams
    audio_proj: LinearParams
    text_proj: LinearParams
    encoder: List[LayerParams] = field(default_factory=list)
    decoder: List[LayerParams] = field(default_factory=list)
    heads: HeadParams = None


# =========================================================
# 2. LAYERS
# =========================================================


TEF_DIM = 2


def with_endpoints(video):
    """Appends the normalized start and end time of each moment to its feature row."""
    l_v = video.shape[0]
    start = np.arange(l_v, dtype=np.float64) / l_v
    return np.concatenate([video, start[:, None], (start + 1.0 / l_v)[:, None]], axis=1)


def audio_fuse(F, A_proj):
    """F' = F + softmax(A F^T / sqrt(d)) F."""
    if F.data.shape != A_proj.data.shape:
        raise ShapeError(f"audio_fuse needs matching video/audio shapes, got {F.shape} and {A_proj.shape}")
    d = F.data.shape[1]
    weights = softmax_rows(scale(matmul(A_proj, transpose(F)), 1.0 / math.sqrt(d)))
    return F + matmul(weights, F)


def apply_layer(X, layer):
    H = layer_norm(dema_attention(X, layer.block), layer.norm1_gain, layer.norm1_shift)
    return layer_norm(relu(H) + H, layer.norm2_gain, layer.norm2_shift)


def encode(F_fused, T, layers):
    """X_e = [F'; T] pushed through the encoder layers. Returns O_e."""
    if F_fused.data.shape[1] != T.data.shape[1]:
        raise ShapeError(f"video and text tokens must share dim d, got {F_fused.shape} and {T.shape}")
    X = concat_rows([F_fused, T])
    for layer in layers:
        X = apply_layer(X, layer)
    return X


def decode(O_e, l_v, layers):
    """Decoder input is the first l_v encoder outputs. Returns O_d."""
    if not 1 <= l_v <= O_e.data.shape[0]:
        raise ShapeError(f"l_v={l_v} outside the encoder output length {O_e.data.shape[0]}")
    X = slice_rows(O_e, 0, l_v)
    for layer in layers:
        X = apply_layer(X, layer)
    return X


def predict_heads(O_d, heads):
    def column(p):
        return reshape(linear_forward(O_d, p), (O_d.data.shape[0],))

    return HeadOutputs(
        s_hat=column(heads.salience),
        c_hat=sigmoid(column(heads.center)),
        co_hat=column(heads.offset),
        w_hat=sigmoid(column(heads.width)),
    )


# =========================================================
# 3. SPANS
# =========================================================


def spans_from_heads(h):
    s = h.s_hat.data
    center = h.c_hat.data + h.co_hat.data
    half = h.w_hat.data / 2.0
    start = np.clip(center - half, 0.0, 1.0)
    end = np.clip(center + half, 0.0, 1.0)
    return [Span(float(start[i]), float(end[i]), float(s[i]), i) for i in range(len(s))]


def top_moments(spans, l_m):
    """Highest score first; ties by earlier start, then smaller index."""
    if l_m < 1:
        raise ValueError("l_m must be >= 1")
    ranked = sorted(spans, key=lambda sp: (-sp.score, sp.start, sp.index))
    return ranked[:l_m]


# =========================================================
# 4. MODEL
# =========================================================


class DemaFormer:
    """
    Audio-dependent video encoding, DEMA encoder/decoder and the four
    prediction heads. Built from a ModelConfig plus the ablation flags.
    """

    def __init__(self, model_cfg, rng, damping=True, use_dema=True):
        self.cfg = model_cfg
        d, d_k, act = model_cfg.d, model_cfg.d_k, model_cfg.activation

        def layers(n):
            return [LayerParams.init(d, d_k, rng, activation=act, damping=damping, use_dema=use_dema)
                    for _ in range(n)]

        self.params = DemaFormerParams(
            video_proj=LinearParams.init(model_cfg.d_v + (TEF_DIM if model_cfg.use_tef else 0), d, rng),
            audio_proj=LinearParams.init(model_cfg.d_a, d, rng),
            text_proj=LinearParams.init(model_cfg.d_q, d, rng),
        )
        self.params.encoder = layers(model_cfg.n_e)
        self.params.decoder = layers(model_cfg.n_d)
        self.params.heads = HeadParams.init(d, rng)

    @classmethod
    def from_run_config(cls, cfg, seed=None):
        rng = np.random.default_rng((cfg.seed if seed is None else seed, 0))
        return cls(cfg.model, rng, damping=not cfg.ablations.no_damping, use_dema=not cfg.ablations.no_dema)

    def named_parameters(self):
        return dict(self.params.named_parameters())

    def parameters(self):
        return self.params.parameters()

    def zero_grad(self):
        self.params.zero_grad()

    def check_sample(self, sample):
        cfg = self.cfg
        got = (sample.video.shape[1], sample.audio.shape[1], sample.text.shape[1])
        if got != (cfg.d_v, cfg.d_a, cfg.d_q):
            raise ShapeError(
                f"sample {sample.id}: feature dims (video, audio, text) = {got}, "
                f"model expects {(cfg.d_v, cfg.d_a, cfg.d_q)}"
            )

    def forward(self, sample):
        self.check_sample(sample)
        p = self.params
        video = with_endpoints(sample.video) if self.cfg.use_tef else sample.video
        F = linear_forward(Tensor(video), p.video_proj)
        A = linear_forward(Tensor(sample.audio), p.audio_proj)
        T = linear_forward(Tensor(sample.text), p.text_proj)
        l_v = sample.video.shape[0]
        o_e = encode(audio_fuse(F, A), T, p.encoder)
        o_d = decode(o_e, l_v, p.decoder)
        return ForwardOutputs(o_e=o_e, o_d=o_d, heads=predict_heads(o_d, p.heads), l_v=l_v)

    def predict(self, sample, l_m=None):
        """Top-l_m spans plus the raw per-moment salience (inference, no tape)."""
        with no_tape():
            out = self.forward(sample)
        spans = top_moments(spans_from_heads(out.heads), l_m or self.cfg.l_m_test)
        return spans, out.heads.s_hat.data.copy()
