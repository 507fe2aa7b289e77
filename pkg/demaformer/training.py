import contextlib
import json
import math
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import mlflow
import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import config_from_dict, config_to_dict
from .ebm import (
    SALIENCE,
    EnergyContext,
    alpha_neg,
    energy_grad_fn,
    langevin_sample,
    nll_loss,
    select_positives,
)
from .errors import ConfigError, DivergenceError, SamplingError, ShapeError
from .inference import predict_dataset
from .metrics import compute_metrics, rank_k_at_mu
from .model import DemaFormer
from .numerics import Tape, Tensor, log_softmax_rows, mean, mul, scale, tabs, take, tsum

REPORT_COLUMNS = ["epoch", "l_match", "l_nll", "total", "rank1_05"]

# =========================================================
# 1. TARGET ASSIGNMENT
# =========================================================


@dataclass
class TargetAssignment:
    positions: List[int]      # matched decoder position per groundtruth
    positive: np.ndarray      # per-position flag: matched to some groundtruth

    def __len__(self):
        return len(self.positions)


def _span_positions(gt, l_v):
    span = gt.span()
    first = min(max(int(math.floor(span.start * l_v)), 0), l_v - 1)
    last = min(max(int(math.ceil(span.end * l_v)) - 1, first), l_v - 1)
    return first, last


def _nearest_free(candidates, anchor, taken):
    free = [q for q in candidates if q not in taken]
    if not free:
        return None
    return min(free, key=lambda q: (abs(q - anchor), q))


def assign_targets(gts, l_v):
    """
    Groundtruth i goes to position floor(c_i * l_v), clamped to [0, l_v - 1].
    On collision: nearest free position inside the groundtruth span, else the
    nearest free position overall; equal distances prefer the lower index.
    """
    if len(gts) > l_v:
        raise ConfigError(f"{len(gts)} groundtruths cannot be matched to {l_v} positions")
    taken = set()
    positions = []
    for gt in gts:
        pos = min(max(int(math.floor(gt.c * l_v)), 0), l_v - 1)
        if pos in taken:
            first, last = _span_positions(gt, l_v)
            inside = _nearest_free(range(first, last + 1), pos, taken)
            pos = inside if inside is not None else _nearest_free(range(l_v), pos, taken)
        taken.add(pos)
        positions.append(pos)
    positive = np.zeros(l_v, dtype=bool)
    positive[positions] = True
    return TargetAssignment(positions, positive)


# =========================================================
# 2. LOSSES
# =========================================================


def component_losses(heads, gts, assignment, offset_variant="appendix"):
    """
    (L_s, L_c, L_w, L_co) as means over the matched positions.
    offset_variant "appendix": |co - co_hat|; "main_text": |co - (co_hat - c_hat)|.
    """
    idx = assignment.positions
    s = take(heads.s_hat, idx)
    c_hat = take(heads.c_hat, idx)
    w_hat = take(heads.w_hat, idx)
    co_hat = take(heads.co_hat, idx)
    c = Tensor([gt.c for gt in gts])
    w = Tensor([gt.w for gt in gts])
    co = Tensor([gt.co for gt in gts])

    l_s = -mean(s)
    l_c = mean(tabs(c - c_hat))
    l_w = mean(tabs(w - w_hat))
    if offset_variant == "main_text":
        l_co = mean(tabs(co - (co_hat - c_hat)))
    else:
        l_co = mean(tabs(co - co_hat))
    return l_s, l_c, l_w, l_co


def matching_loss(heads, gts, assignment, weights, offset_variant="appendix", use_offset=True, verbose=True):
    """L_match = L_s + lambda1 L_c + lambda2 L_w + lambda3 L_co (zero without groundtruth)."""
    if not gts:
        if verbose:
            print("[TRAIN WARNING] sample without groundtruth: L_match set to 0")
        return Tensor(0.0)
    l_s, l_c, l_w, l_co = component_losses(heads, gts, assignment, offset_variant)
    loss = l_s + scale(l_c, weights.lambda1) + scale(l_w, weights.lambda2)
    if use_offset:
        loss = loss + scale(l_co, weights.lambda3)
    return loss


def salience_distribution(saliences):
    """Groundtruth saliences clipped at 0 and normalized to sum 1; None when nothing is salient."""
    clipped = np.clip(np.asarray(saliences, dtype=np.float64), 0.0, None)
    total = clipped.sum()
    if not total > 0:
        return None
    return clipped / total


def span_members(gts, l_v):
    """(position, groundtruth index) for every moment covered by a groundtruth span; first span wins."""
    owner = {}
    for i, gt in enumerate(gts):
        first, last = _span_positions(gt, l_v)
        for q in range(first, last + 1):
            owner.setdefault(q, i)
    return sorted(owner.items())


def dense_losses(heads, gts, saliences, offset_variant="appendix"):
    """
    Supervision outside the matched positions.

    L_rank : cross-entropy between softmax(s_hat) over all moments and the
             normalized groundtruth saliences (None without salient moments)
    L_c, L_w, L_co : the matching residuals averaged over every moment that
             lies inside a groundtruth span, each against its own span
    """
    l_v = len(heads)
    target = salience_distribution(saliences)
    l_rank = None
    if target is not None:
        l_rank = -tsum(mul(Tensor(target), log_softmax_rows(heads.s_hat)))

    members = span_members(gts, l_v)
    if not members:
        return l_rank, None, None, None
    idx = [q for q, _ in members]
    c = Tensor([gts[i].c for _, i in members])
    w = Tensor([gts[i].w for _, i in members])
    co = Tensor([gts[i].co for _, i in members])
    c_hat = take(heads.c_hat, idx)
    w_hat = take(heads.w_hat, idx)
    co_hat = take(heads.co_hat, idx)
    l_c = mean(tabs(c - c_hat))
    l_w = mean(tabs(w - w_hat))
    if offset_variant == "main_text":
        l_co = mean(tabs(co - (co_hat - c_hat)))
    else:
        l_co = mean(tabs(co - co_hat))
    return l_rank, l_c, l_w, l_co


def dense_loss(heads, gts, saliences, weights, offset_variant="appendix", use_offset=True):
    """lambda_sal L_rank + lambda_span (lambda1 L_c + lambda2 L_w + lambda3 L_co); None when both weights are 0."""
    if weights.lambda_sal == 0 and weights.lambda_span == 0:
        return None
    l_rank, l_c, l_w, l_co = dense_losses(heads, gts, saliences, offset_variant)
    loss = None
    if l_rank is not None and weights.lambda_sal > 0:
        loss = scale(l_rank, weights.lambda_sal)
    if l_c is not None and weights.lambda_span > 0:
        spans = scale(l_c, weights.lambda1) + scale(l_w, weights.lambda2)
        if use_offset:
            spans = spans + scale(l_co, weights.lambda3)
        spans = scale(spans, weights.lambda_span)
        loss = spans if loss is None else loss + spans
    return loss


def total_loss(l_match, l_nll, lambda_nll):
    if l_nll is None or lambda_nll == 0:
        return l_match
    return l_match + scale(l_nll, lambda_nll)


# =========================================================
# 3. OPTIMIZER
# =========================================================


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    skipped: int = 0


def collect_grads(params):
    return {name: (np.zeros_like(p.data) if p.grad is None else p.grad) for name, p in params.items()}


def clip_grad_norm(grads, max_norm):
    """Rescales grads in place to a global L2 norm of at most max_norm. Returns the norm before clipping."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm is not None and norm > max_norm:
        factor = max_norm / norm
        for name in grads:
            grads[name] = grads[name] * factor
    return norm


def adam_step(params, grads, state, verbose=True):
    """
    Adam with decoupled weight decay, updating params in place.
    Returns False (and leaves everything untouched) when a gradient is not finite.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            state.skipped += 1
            if verbose:
                print(f"[TRAIN WARNING] non-finite gradient in {name}; optimizer step skipped")
            return False

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        m_hat = m / (1 - b1 ** state.step)
        v_hat = v / (1 - b2 ** state.step)
        p.data -= state.lr * (m_hat / (np.sqrt(v_hat) + state.eps) + state.weight_decay * p.data)
    return True


# =========================================================
# 4. PER-SAMPLE OBJECTIVE
# =========================================================


@dataclass
class StepParts:
    l_match: float
    l_nll: Optional[float]
    total: float
    n_positives: int
    l_dense: Optional[float] = None


def sample_objective(model, sample, cfg, n_epoch, rng, verbose=True):
    """
    Full objective for one sample. Call inside an active Tape.
    Returns (total_loss_tensor, StepParts).
    """
    out = model.forward(sample)
    assignment = assign_targets(sample.gts, out.l_v)
    l_match = matching_loss(
        out.heads, sample.gts, assignment, cfg.loss,
        offset_variant=cfg.ablations.offset_variant,
        use_offset=not cfg.ablations.no_offset,
        verbose=verbose,
    )
    l_dense = dense_loss(
        out.heads, sample.gts, sample.saliences, cfg.loss,
        offset_variant=cfg.ablations.offset_variant,
        use_offset=not cfg.ablations.no_offset,
    )

    lam = cfg.lambda_nll
    positives = select_positives(sample.saliences, cfg.ebm.rho)
    l_nll = None
    if lam > 0 and positives:
        kind = cfg.energy_kind
        query = None if kind == SALIENCE else out.query_rows
        context = EnergyContext(model.params.heads.salience, query)
        try:
            negatives = langevin_sample(out.o_d.data, energy_grad_fn(kind, context), cfg.ebm, rng)
        except SamplingError as e:
            if verbose:
                print(f"[EBM WARNING] {sample.id}: {e}; NLL term skipped")
        else:
            l_nll = nll_loss(take(out.o_d, positives), negatives, kind, context, cfg.ebm, n_epoch)

    supervised = l_match if l_dense is None else l_match + l_dense
    total = total_loss(supervised, l_nll, lam)
    parts = StepParts(
        l_match=l_match.item(),
        l_nll=None if l_nll is None else l_nll.item(),
        total=total.item(),
        n_positives=len(positives),
        l_dense=None if l_dense is None else l_dense.item(),
    )
    return total, parts


# =========================================================
# 5. TRAINING LOOP
# =========================================================


@dataclass
class EpochRecord:
    epoch: int
    l_match: float
    l_nll: float
    total: float
    rank1_05: float
    alpha_neg: float = 1.0
    n_positives: int = 0
    skipped_steps: int = 0


@dataclass
class TrainingReport:
    records: List[EpochRecord] = field(default_factory=list)
    final_metrics: Dict[str, float] = field(default_factory=dict)
    steps: int = 0

    def to_frame(self):
        rows = [{col: getattr(r, col) for col in REPORT_COLUMNS} for r in self.records]
        return pd.DataFrame(rows, columns=REPORT_COLUMNS)

    def write_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g")

    def curve(self, column="l_match"):
        return [getattr(r, column) for r in self.records]


def _flat_params(cfg):
    flat = {}
    for key, value in config_to_dict(cfg).items():
        if isinstance(value, dict):
            for sub, v in value.items():
                flat[f"{key}.{sub}"] = v
        else:
            flat[key] = value
    return flat


def fit(train_samples, model, cfg, eval_samples=None, epochs=None, seed=None, csv_path=None, verbose=True):
    """
    Trains `model` in place.

    Every epoch: shuffle, then per mini-batch: forward, target assignment,
    L_match plus the dense salience and span terms, Langevin negatives +
    L_NLL weighted by alpha_neg(epoch), total loss, backward, optional
    global-norm clip, Adam. Held-out Rank1@0.5 is
    measured every cfg.eval_every epochs (on the training set when no
    eval_samples are given).
    """
    if not train_samples:
        raise ConfigError("training set is empty")
    epochs = cfg.epochs if epochs is None else epochs
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng((seed, 1))
    params = model.named_parameters()
    state = OptimState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    report = TrainingReport()
    scored = eval_samples if eval_samples else train_samples
    n = len(train_samples)

    tracking = mlflow.start_run(run_name="DemaFormer_Train") if cfg.track_mlflow else contextlib.nullcontext()
    with tracking:
        if cfg.track_mlflow:
            mlflow.log_params(_flat_params(cfg))

        for epoch in tqdm(range(epochs), desc="train", disable=not verbose):
            order = rng.permutation(n)
            sums = {"l_match": 0.0, "l_nll": 0.0, "total": 0.0}
            nll_count, n_pos, skipped_before = 0, 0, state.skipped

            for start in range(0, n, cfg.batch_size):
                batch = order[start:start + cfg.batch_size]
                model.zero_grad()
                for idx in batch:
                    sample = train_samples[int(idx)]
                    with Tape() as tape:
                        total, parts = sample_objective(model, sample, cfg, epoch, rng, verbose=verbose)
                        scaled = scale(total, 1.0 / len(batch))
                    if not math.isfinite(parts.total):
                        raise DivergenceError(
                            f"loss became {parts.total} at epoch {epoch} on sample {sample.id}", report
                        )
                    if scaled._tape is tape:
                        tape.backward(scaled)
                    sums["l_match"] += parts.l_match
                    sums["total"] += parts.total
                    if parts.l_nll is not None:
                        sums["l_nll"] += parts.l_nll
                        nll_count += 1
                    n_pos += parts.n_positives

                grads = collect_grads(params)
                if cfg.clip_norm is not None:
                    clip_grad_norm(grads, cfg.clip_norm)
                adam_step(params, grads, state, verbose=verbose)
                report.steps += 1

            last = epoch == epochs - 1
            rank1 = float("nan")
            if last or (epoch + 1) % cfg.eval_every == 0:
                spans, _ = predict_dataset(model, scored, n_jobs=cfg.n_jobs)
                rank1 = rank_k_at_mu(spans, [s.gt_spans() for s in scored], 1, 0.5)

            record = EpochRecord(
                epoch=epoch,
                l_match=sums["l_match"] / n,
                l_nll=sums["l_nll"] / nll_count if nll_count else 0.0,
                total=sums["total"] / n,
                rank1_05=rank1,
                alpha_neg=alpha_neg(epoch, cfg.ebm.alpha_min),
                n_positives=n_pos,
                skipped_steps=state.skipped - skipped_before,
            )
            report.records.append(record)

            if verbose:
                tqdm.write(
                    f"--> Epoch {epoch + 1}/{epochs} | l_match {record.l_match:.4f} | "
                    f"l_nll {record.l_nll:.4f} | total {record.total:.4f} | rank1@0.5 {rank1:.3f}"
                )
            if cfg.track_mlflow:
                for col in ("l_match", "l_nll", "total"):
                    mlflow.log_metric(col, getattr(record, col), step=epoch)
                if not math.isnan(rank1):
                    mlflow.log_metric("rank1_05", rank1, step=epoch)

        spans, saliences = predict_dataset(model, scored, n_jobs=cfg.n_jobs)
        report.final_metrics = compute_metrics(
            spans, [s.gt_spans() for s in scored], saliences, [s.saliences for s in scored], cfg.eval
        )

        if csv_path is not None:
            report.write_csv(csv_path)
            if cfg.track_mlflow:
                mlflow.log_artifact(csv_path)

    return report


# =========================================================
# 6. PARAMS FILE
# =========================================================


def save_params(model, cfg, path):
    """JSON: {"config": RunConfig dict, "params": {name: {"shape": [...], "values": [...]}}}."""
    payload = {
        "config": config_to_dict(cfg),
        "params": {
            name: {"shape": list(p.data.shape), "values": p.data.reshape(-1).tolist()}
            for name, p in model.named_parameters().items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(payload, f)


def load_params(path):
    """Rebuilds (model, cfg) from a save_params file."""
    if not os.path.exists(path):
        raise ConfigError(f"params file not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: malformed JSON ({e})") from e
    if not isinstance(payload, dict) or "config" not in payload or "params" not in payload:
        raise ConfigError(f"{path}: expected keys 'config' and 'params'")

    cfg = config_from_dict(payload["config"])
    model = DemaFormer.from_run_config(cfg)
    params = model.named_parameters()
    stored = payload["params"]

    missing = sorted(set(params) - set(stored))
    extra = sorted(set(stored) - set(params))
    if missing or extra:
        raise ConfigError(f"{path}: parameter names differ (missing {missing}, unexpected {extra})")
    for name, p in params.items():
        entry = stored[name]
        shape = tuple(entry.get("shape", ()))
        if shape != p.data.shape:
            raise ShapeError(f"{path}: {name} has shape {list(shape)}, model expects {list(p.data.shape)}")
        values = np.asarray(entry.get("values", []), dtype=np.float64)
        if values.size != p.data.size:
            raise ShapeError(f"{path}: {name} holds {values.size} values for shape {list(shape)}")
        p.data[...] = values.reshape(shape)
    return model, cfg
