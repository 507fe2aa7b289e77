"""
Energy-based modeling of moment-query representations.

Negatives are drawn with Langevin dynamics started at the decoder outputs,

    o_k = o_{k-1} - (gamma / 2) * dE/do(o_{k-1}) + eps_k,   eps_k ~ N(0, gamma I)

and detached from the parameter graph; L_NLL then differentiates E_theta at
the fixed sample points (contrastive divergence).
"""

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import EbmConfig
from .errors import DemaformerError, SamplingError
from .numerics import (
    LinearParams,
    Tape,
    Tensor,
    cosine_rows,
    linear_forward,
    max_rows,
    mean,
    reshape,
    scale,
    tsum,
)

SALIENCE = "salience"
ELEMENTWISE_COSINE = "elementwise_cosine"
POOLED_COSINE = "pooled_cosine"
ENERGY_KINDS = (SALIENCE, ELEMENTWISE_COSINE, POOLED_COSINE)

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

# =========================================================
# 1. ENERGY FUNCTIONS
# =========================================================


@dataclass
class EnergyContext:
    salience_head: LinearParams
    query_rows: Optional[Tensor] = None   # encoder outputs of the query tokens (L_q x d)


def energy(kind, o, context):
    """
    Energy of one representation (d,) or of each row of a matrix (n x d).

    salience           : E = -s_hat(o)
    elementwise_cosine : E = -(1/L_q) sum_j cos(o, q_j)
    pooled_cosine      : E = -cos(o, maxpool_j q_j)

    q_j are the query rows of the encoder output. In the cosine variants the
    candidate row o (a decoder output for positives, a Langevin sample for
    negatives) takes the place of the encoder row o_e,i of the moment.
    """
    single = o.data.ndim == 1
    rows = reshape(o, (1, o.data.shape[0])) if single else o
    n = rows.data.shape[0]

    if kind == SALIENCE:
        values = -reshape(linear_forward(rows, context.salience_head), (n,))
    elif kind in (ELEMENTWISE_COSINE, POOLED_COSINE):
        if context.query_rows is None:
            raise DemaformerError(f"{kind} energy needs the query rows of the encoder output")
        queries = context.query_rows
        if kind == POOLED_COSINE:
            pooled = max_rows(queries)
            queries = reshape(pooled, (1, pooled.data.shape[0]))
        values = -mean(cosine_rows(rows, queries), axis=1)
    else:
        raise DemaformerError(f"unknown energy kind {kind!r}")

    return reshape(values, ()) if single else values


def detached_context(context):
    """Copy of the context whose tensors carry no gradient (for sampling)."""
    head = LinearParams(context.salience_head.weight.detach(), context.salience_head.bias.detach())
    query = None if context.query_rows is None else context.query_rows.detach()
    return EnergyContext(head, query)


def energy_grad_fn(kind, context):
    """
    Returns o -> dE/do for a numpy array of rows (or a single vector).
    Model parameters are held fixed.
    """
    ctx = detached_context(context)

    if kind == SALIENCE:
        w = ctx.salience_head.weight.data[0]

        def grad_salience(o):
            return np.broadcast_to(-w, np.shape(o)).copy()

        return grad_salience

    def grad_tape(o):
        point = Tensor(o, requires_grad=True)
        with Tape() as tape:
            total = tsum(energy(kind, point, ctx))
        tape.backward(total)
        return np.zeros_like(point.data) if point.grad is None else point.grad

    return grad_tape


# =========================================================
# 2. LANGEVIN SAMPLER
# =========================================================


def langevin_sample(o0, energy_grad, cfg, rng, steps=None, on_step=None):
    """
    Runs K Langevin updates from o0 and returns a detached Tensor.

    o0          : Tensor or array, any shape; every entry is an independent coordinate
    energy_grad : o -> dE/do (same shape)
    cfg         : EbmConfig (k, gamma)
    steps       : overrides cfg.k
    on_step     : optional callback(step, o) after each update (step 0 = start)
    """
    o = np.array(o0.data if isinstance(o0, Tensor) else o0, dtype=np.float64)
    n_steps = cfg.k if steps is None else steps
    gamma = cfg.gamma
    noise_std = math.sqrt(gamma)

    if on_step is not None:
        on_step(0, o)
    for k in range(1, n_steps + 1):
        grad = energy_grad(o)
        if not np.all(np.isfinite(grad)):
            raise SamplingError(f"non-finite energy gradient at Langevin step {k}")
        o = o - (gamma / 2.0) * grad + rng.normal(0.0, noise_std, size=o.shape)
        if on_step is not None:
            on_step(k, o)
    return Tensor(o)


# =========================================================
# 3. POSITIVES, SCHEDULE, LOSS
# =========================================================


def select_positives(salience_gt, rho):
    """Positions whose groundtruth salience is strictly larger than rho."""
    return [i for i, s in enumerate(np.asarray(salience_gt, dtype=np.float64)) if s > rho]


def alpha_neg(n_epoch, alpha_min):
    return max(1.0 / (1.0 + 0.5 * n_epoch), alpha_min)


def nll_loss(positives, negatives, kind, context, cfg, n_epoch):
    """
    L_NLL = mean E(o+) - alpha_neg(n_epoch) * mean E(o-).

    positives : Tensor (n+ x d), part of the parameter graph
    negatives : Tensor (n- x d), Langevin samples (constants)
    Zero when there are no positives.
    """
    if positives is None or positives.data.shape[0] == 0:
        return Tensor(0.0)
    weight = alpha_neg(n_epoch, cfg.alpha_min)
    e_pos = mean(energy(kind, positives, context))
    if negatives is None or negatives.data.shape[0] == 0:
        return e_pos
    e_neg = mean(energy(kind, negatives, context))
    return e_pos - scale(e_neg, weight)


# =========================================================
# 4. 1-D EXACT GRADIENT ORACLE
# =========================================================


def _numeric_derivative(fn, h=1e-5):
    def deriv(o):
        return (fn(o + h) - fn(o - h)) / (2.0 * h)

    return deriv


def cd_gradient_oracle_1d(theta, feature_fn, data_samples, grid, rng, feature_grad=None,
                          n_samples=100_000, burn_in=1_000, gamma=0.1, max_widen=3):
    """
    For E_theta(o) = theta * f(o) on the real line:

        exact : mean_data f - E_model f   (trapezoid integral over `grid`)
        cd    : mean_data f - mean f(Langevin samples)

    Langevin uses n_samples independent chains of burn_in steps each.
    Returns (exact_grad, cd_grad).
    """
    grid = np.asarray(grid, dtype=np.float64)
    data_mean = float(np.mean(feature_fn(np.asarray(data_samples, dtype=np.float64))))

    for _ in range(max_widen + 1):
        f_grid = feature_fn(grid)
        log_w = -theta * f_grid
        # shift keeps exp() in range; it cancels in the ratio
        weights = np.exp(log_w - np.max(log_w))
        z = _trapezoid(weights, grid)
        if z > 0 and np.isfinite(z):
            break
        grid = grid * 2.0
    else:
        raise SamplingError("normalizing constant is numerically zero on the grid")
    model_mean = float(_trapezoid(f_grid * weights, grid) / z)
    exact = data_mean - model_mean

    f_prime = feature_grad or _numeric_derivative(feature_fn)

    chain_cfg = EbmConfig(k=burn_in, gamma=gamma)
    samples = langevin_sample(np.zeros(n_samples), lambda o: theta * f_prime(o), chain_cfg, rng)
    cd = data_mean - float(np.mean(feature_fn(samples.data)))
    return exact, cd
