"""
Finite-difference gradient suite on a tiny instance.

Every layer is reduced to a scalar through a fixed random weighting
(sum(out * R)) so no check passes by symmetry (softmax rows, say, always
sum to one).
"""

import numpy as np

from .config import EbmConfig, LossWeights, ModelConfig, SynthConfig
from .data import gen_synthetic
from .dema import DemaAttentionParams, DemaParams, dema_attention, dema_forward
from .ebm import ELEMENTWISE_COSINE, ENERGY_KINDS, EnergyContext, energy, nll_loss
from .model import DemaFormer, audio_fuse
from .numerics import (
    ACTIVATION_FNS,
    LinearParams,
    Tensor,
    cosine_rows,
    finite_diff_check,
    layer_norm,
    linear_forward,
    mul,
    softmax_rows,
    take,
    tsum,
)
from .training import assign_targets, dense_loss, matching_loss, total_loss

GRADCHECK_TOL = 1e-4

TINY_L_V = 6
TINY_L_Q = 3
TINY_D = 8
TINY_D_K = 5
TINY_FEATURES = 4


def tiny_model_config(activation="silu"):
    return ModelConfig(
        d=TINY_D, d_k=TINY_D_K, n_e=1, n_d=1,
        d_v=TINY_FEATURES, d_q=TINY_FEATURES, d_a=TINY_FEATURES,
        activation=activation,
    )


def tiny_sample(seed):
    synth = SynthConfig(
        l_v=TINY_L_V, l_q=TINY_L_Q,
        d_v=TINY_FEATURES, d_q=TINY_FEATURES, d_a=TINY_FEATURES,
        n_moments=1, snr=5.0, seed=seed,
    )
    return gen_synthetic(synth, 1)[0]


def _leaf(rng, shape, offset=0.0):
    return Tensor(rng.standard_normal(shape) + offset, requires_grad=True)


# =========================================================
# 1. LAYER CHECKS
# =========================================================


def layer_checks(seed=0, h=1e-5):
    rng = np.random.default_rng(seed)
    L, d = TINY_L_V, TINY_D
    results = {}

    x = _leaf(rng, (L, d))
    lin = LinearParams.init(d, TINY_D_K, rng)
    R = rng.standard_normal((L, TINY_D_K))
    results["linear"] = finite_diff_check(
        lambda: tsum(mul(linear_forward(x, lin), Tensor(R))), [x] + lin.parameters(), h)

    for name, fn in ACTIVATION_FNS.items():
        a = _leaf(rng, (L, d))
        # keep relu away from its kink
        a.data[np.abs(a.data) < 1e-2] += 0.1
        W = rng.standard_normal((L, d))
        results[f"activation_{name}"] = finite_diff_check(lambda fn=fn, a=a, W=W: tsum(mul(fn(a), Tensor(W))), [a], h)

    s = _leaf(rng, (L, L))
    W = rng.standard_normal((L, L))
    results["softmax_rows"] = finite_diff_check(lambda: tsum(mul(softmax_rows(s), Tensor(W))), [s], h)

    y = _leaf(rng, (L, d))
    gain, shift = _leaf(rng, (d,), 1.0), _leaf(rng, (d,))
    W = rng.standard_normal((L, d))
    results["layer_norm"] = finite_diff_check(
        lambda: tsum(mul(layer_norm(y, gain, shift), Tensor(W))), [y, gain, shift], h)

    a, b = _leaf(rng, (L, d)), _leaf(rng, (TINY_L_Q, d))
    W = rng.standard_normal((L, TINY_L_Q))
    results["cosine_rows"] = finite_diff_check(lambda: tsum(mul(cosine_rows(a, b), Tensor(W))), [a, b], h)

    X = _leaf(rng, (L, d))
    dema = DemaParams.init(d, rng)
    W = rng.standard_normal((L, d))
    results["dema_forward"] = finite_diff_check(
        lambda: tsum(mul(dema_forward(X, dema), Tensor(W))), [X] + dema.parameters(), h)

    for act in ACTIVATION_FNS:
        block = DemaAttentionParams.init(d, TINY_D_K, rng, activation=act)
        Xb = _leaf(rng, (L, d))
        W = rng.standard_normal((L, d))
        results[f"dema_attention_{act}"] = finite_diff_check(
            lambda block=block, Xb=Xb, W=W: tsum(mul(dema_attention(Xb, block), Tensor(W))),
            [Xb] + block.parameters(), h)

    F, A = _leaf(rng, (L, d)), _leaf(rng, (L, d))
    W = rng.standard_normal((L, d))
    results["audio_fuse"] = finite_diff_check(lambda: tsum(mul(audio_fuse(F, A), Tensor(W))), [F, A], h)

    head = LinearParams.init(d, 1, rng)
    query = _leaf(rng, (TINY_L_Q, d))
    for kind in ENERGY_KINDS:
        o = _leaf(rng, (L, d))
        ctx = EnergyContext(head, query)
        results[f"energy_{kind}"] = finite_diff_check(
            lambda o=o, ctx=ctx, kind=kind: _weighted_energy(kind, o, ctx, seed),
            [o, query] + head.parameters(), h)

    return results


def _weighted_energy(kind, o, ctx, seed):
    W = np.random.default_rng(seed + 1).standard_normal(o.data.shape[0])
    return tsum(mul(energy(kind, o, ctx), Tensor(W)))


# =========================================================
# 2. WHOLE-MODEL CHECKS
# =========================================================


def model_checks(seed=0, h=1e-5, max_coords=None, activation="silu", energy_kind=ELEMENTWISE_COSINE):
    """
    Matching loss and the whole objective (matching + dense supervision +
    NLL at fixed negatives) w.r.t. every model parameter.
    """
    rng = np.random.default_rng((seed, 2))
    model = DemaFormer(tiny_model_config(activation), np.random.default_rng((seed, 0)))
    sample = tiny_sample(seed)
    params = model.parameters()
    weights = LossWeights()
    ebm_cfg = EbmConfig()
    negatives = Tensor(rng.standard_normal((TINY_L_V, TINY_D)))

    def match():
        out = model.forward(sample)
        return matching_loss(out.heads, sample.gts, assign_targets(sample.gts, out.l_v), weights, verbose=False)

    def objective():
        out = model.forward(sample)
        assignment = assign_targets(sample.gts, out.l_v)
        l_match = matching_loss(out.heads, sample.gts, assignment, weights, verbose=False)
        l_dense = dense_loss(out.heads, sample.gts, sample.saliences, weights)
        context = EnergyContext(model.params.heads.salience, out.query_rows)
        l_nll = nll_loss(take(out.o_d, assignment.positions), negatives, energy_kind, context, ebm_cfg, 1)
        return total_loss(l_match + l_dense, l_nll, weights.lambda_nll)

    return {
        "model_matching_loss": finite_diff_check(match, params, h, max_coords, rng),
        "model_objective": finite_diff_check(objective, params, h, max_coords, rng),
    }


def run_gradcheck(seed=0, h=1e-5, max_coords=None, activation="silu", energy_kind=ELEMENTWISE_COSINE, verbose=True):
    """Runs every check; returns {check name: max relative error}."""
    results = layer_checks(seed, h)
    results.update(model_checks(seed, h, max_coords, activation=activation, energy_kind=energy_kind))
    if verbose:
        for name, err in results.items():
            flag = "" if err < GRADCHECK_TOL else "   <-- FAIL"
            print(f"--> {name:<32} rel err {err:.3e}{flag}")
    return results
