"""
Damped exponential moving average (DEMA) and the DEMA attention block.

    g_i = Linear(x_i)
    l_i = alpha * g_i + (1 - alpha * delta) * l_{i-1},   l_0 = 0
    x'_i = Linear(l_i)

alpha and delta are stored as unconstrained raws and squashed by a sigmoid,
so they stay inside (0, 1) whatever the optimizer does to them.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .numerics import (
    ACTIVATION_FNS,
    LinearParams,
    Params,
    Tensor,
    _make,
    linear_forward,
    matmul,
    scale,
    sigmoid,
    softmax_rows,
    transpose,
)

# =========================================================
# 1. PARAMETERS
# =========================================================


@dataclass
class DemaParams(Params):
    alpha_raw: Tensor
    delta_raw: Tensor
    in_proj: LinearParams
    out_proj: LinearParams
    damping: bool = True   # False pins delta to 1 (plain EMA)

    @classmethod
    def init(cls, d, rng, damping=True):
        alpha_raw = Tensor(rng.standard_normal(d), requires_grad=True)
        delta_raw = Tensor(rng.standard_normal(d), requires_grad=damping)
        return cls(alpha_raw, delta_raw, LinearParams.init(d, d, rng), LinearParams.init(d, d, rng), damping)

    @property
    def dim(self):
        return self.alpha_raw.data.shape[0]

    def alpha(self):
        return sigmoid(self.alpha_raw)

    def delta(self):
        if not self.damping:
            return Tensor(np.ones(self.dim))
        return sigmoid(self.delta_raw)


@dataclass
class DemaAttentionParams(Params):
    dema: DemaParams
    z_proj: LinearParams
    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams
    lambda_proj: LinearParams
    p_left: LinearParams
    p_right: LinearParams
    activation: str = "silu"
    use_dema: bool = True   # False: plain softmax attention over v_proj(X)

    @classmethod
    def init(cls, d, d_k, rng, activation="silu", damping=True, use_dema=True):
        return cls(
            dema=DemaParams.init(d, rng, damping=damping),
            z_proj=LinearParams.init(d, d, rng),
            q_proj=LinearParams.init(d, d_k, rng),
            k_proj=LinearParams.init(d, d_k, rng),
            v_proj=LinearParams.init(d, d, rng),
            lambda_proj=LinearParams.init(d, d, rng),
            p_left=LinearParams.init(d, d, rng),
            p_right=LinearParams.init(d, d, rng),
            activation=activation,
            use_dema=use_dema,
        )

    @property
    def d_k(self):
        return self.q_proj.out_dim


# =========================================================
# 2. RECURRENCE
# =========================================================


def ema_scan(g, alpha, delta):
    """
    l_i = alpha * g_i + (1 - alpha * delta) * l_{i-1} over the rows of g (L x d).
    Recorded as a single op; the backward pass runs the recurrence in reverse.
    """
    G, a, dl = g.data, alpha.data, delta.data
    if G.ndim != 2 or a.shape != (G.shape[1],) or dl.shape != (G.shape[1],):
        raise ShapeError(f"ema_scan expects g (L x d) and alpha/delta (d,), got {g.shape}, {alpha.shape}, {delta.shape}")
    L = G.shape[0]
    if L == 0:
        raise ShapeError("DEMA needs a non-empty sequence")

    decay = 1.0 - a * dl
    out = np.empty_like(G)
    prev = np.zeros_like(a)
    for i in range(L):
        prev = a * G[i] + decay * prev
        out[i] = prev

    def back(grad_out):
        adj = np.zeros_like(a)
        g_grad = np.empty_like(G)
        d_alpha = np.zeros_like(a)
        d_decay = np.zeros_like(a)
        for i in range(L - 1, -1, -1):
            adj = grad_out[i] + decay * adj
            g_grad[i] = a * adj
            d_alpha += adj * G[i]
            if i > 0:
                d_decay += adj * out[i - 1]
        d_alpha -= d_decay * dl
        d_delta = -d_decay * a
        return g_grad, d_alpha, d_delta

    return _make(out, (g, alpha, delta), back)


def dema_forward(X, p):
    """x'_i = out_proj(l_i); causal in the sequence index."""
    if X.data.ndim != 2 or X.data.shape[0] < 1:
        raise ShapeError(f"DEMA needs a non-empty L x d sequence, got shape {X.shape}")
    g = linear_forward(X, p.in_proj)
    hidden = ema_scan(g, p.alpha(), p.delta())
    return linear_forward(hidden, p.out_proj)


def _sigmoid_scalar(x):
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def dema_loop_oracle(X, p):
    """Element-by-element reference recurrence. Test use only."""
    x = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    L, d = x.shape
    W_in, b_in = p.in_proj.weight.data, p.in_proj.bias.data
    W_out, b_out = p.out_proj.weight.data, p.out_proj.bias.data
    alpha = [_sigmoid_scalar(v) for v in p.alpha_raw.data]
    delta = [_sigmoid_scalar(v) if p.damping else 1.0 for v in p.delta_raw.data]

    hidden = [0.0] * d
    out = np.zeros((L, W_out.shape[0]))
    for i in range(L):
        g = [sum(W_in[r, c] * x[i, c] for c in range(d)) + b_in[r] for r in range(W_in.shape[0])]
        hidden = [alpha[r] * g[r] + (1.0 - alpha[r] * delta[r]) * hidden[r] for r in range(len(g))]
        for r in range(W_out.shape[0]):
            out[i, r] = sum(W_out[r, c] * hidden[c] for c in range(len(hidden))) + b_out[r]
    return Tensor(out)


# =========================================================
# 3. DEMA ATTENTION
# =========================================================


def _attention(Q, K, V):
    d_k = Q.data.shape[1]
    scores = scale(matmul(Q, transpose(K)), 1.0 / math.sqrt(d_k))
    return matmul(softmax_rows(scores), V)


def dema_attention(X, p):
    """
    X' = DEMA(X);  Z = act(z_proj(X'))
    Z' = softmax(q_proj(X) k_proj(X)^T / sqrt(d_K)) v_proj(Z)
    lam = sigmoid(lambda_proj(X'));  P = act(p_left(X') + p_right(Z * Z'))
    H = lam * P + (1 - lam) * X
    """
    if X.data.ndim != 2 or X.data.shape[1] != p.q_proj.in_dim:
        raise ShapeError(f"DEMA attention expects L x {p.q_proj.in_dim} input, got {X.shape}")
    act = ACTIVATION_FNS[p.activation]
    Q = linear_forward(X, p.q_proj)
    K = linear_forward(X, p.k_proj)

    if not p.use_dema:
        return _attention(Q, K, linear_forward(X, p.v_proj))

    X_ema = dema_forward(X, p.dema)
    Z = act(linear_forward(X_ema, p.z_proj))
    Z_att = _attention(Q, K, linear_forward(Z, p.v_proj))
    lam = sigmoid(linear_forward(X_ema, p.lambda_proj))
    P = act(linear_forward(X_ema, p.p_left) + linear_forward(Z * Z_att, p.p_right))
    return lam * P + (1.0 - lam) * X
