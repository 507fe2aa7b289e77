"""Grounding metrics: IoU, Rank k@mu, mAP@mu, Hit@1."""

from collections import defaultdict

import numpy as np


def iou(a, b):
    """Temporal intersection over union. Identical zero-length spans count as 1."""
    inter = max(0.0, min(a.end, b.end) - max(a.start, b.start))
    union = (a.end - a.start) + (b.end - b.start) - inter
    if union <= 0.0:
        return 1.0 if (a.start, a.end) == (b.start, b.end) else 0.0
    return inter / union


# =========================================================
# 1. RANK k @ mu
# =========================================================


def rank_k_at_mu(preds_per_sample, gts_per_sample, k, mu):
    """
    Fraction of samples with at least one of the first k predictions at
    IoU > mu with some groundtruth. Predictions must already be score-ranked.
    """
    if not preds_per_sample:
        return 0.0
    hits = 0
    for preds, gts in zip(preds_per_sample, gts_per_sample):
        if any(iou(p, g) > mu for p in preds[:k] for g in gts):
            hits += 1
    return hits / len(preds_per_sample)


# =========================================================
# 2. mAP @ mu
# =========================================================


def average_precision(preds, gts, mu):
    """
    All-point AP over one ranked prediction list. Each groundtruth is matched
    at most once, greedily in score order, to its best unmatched IoU > mu.
    """
    if not gts:
        return None
    matched = [False] * len(gts)
    tp = 0
    precision_sum = 0.0
    for rank, p in enumerate(preds, start=1):
        best, best_iou = -1, mu
        for j, g in enumerate(gts):
            if matched[j]:
                continue
            overlap = iou(p, g)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            matched[best] = True
            tp += 1
            precision_sum += tp / rank
    return precision_sum / len(gts)


def map_at_mu(preds_per_sample, gts_per_sample, mu, verbose=False):
    aps = []
    skipped = 0
    for preds, gts in zip(preds_per_sample, gts_per_sample):
        ap = average_precision(preds, gts, mu)
        if ap is None:
            skipped += 1
            continue
        aps.append(ap)
    if skipped and verbose:
        print(f"[EVAL WARNING] {skipped} sample(s) without groundtruth skipped in mAP@{mu:g}")
    return float(np.mean(aps)) if aps else 0.0


# =========================================================
# 3. HIT @ 1
# =========================================================


def hit_at_1_single(pred_saliences, gt_saliences, tau):
    """1 if the groundtruth salience at the predicted argmax (first on ties) is >= tau."""
    pred = np.asarray(pred_saliences, dtype=np.float64)
    gt = np.asarray(gt_saliences, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"salience vectors differ in length: {pred.shape} vs {gt.shape}")
    return int(gt[int(np.argmax(pred))] >= tau)


def hit_at_1(pred_saliences_per_sample, gt_saliences_per_sample, tau):
    if not pred_saliences_per_sample:
        return 0.0
    hits = [hit_at_1_single(p, g, tau) for p, g in zip(pred_saliences_per_sample, gt_saliences_per_sample)]
    return float(np.mean(hits))


# =========================================================
# 4. REPORT
# =========================================================


def metric_key(kind, mu, k=None):
    return f"rank{k}@{mu:g}" if kind == "rank" else f"map@{mu:g}"


def compute_metrics(preds, gts, pred_saliences, gt_saliences, eval_cfg, verbose=False):
    """Flat metric dict: rank{k}@{mu}, map@{mu}, map_avg, hit@1."""
    report = {}
    for k in eval_cfg.ks:
        for mu in eval_cfg.mus:
            report[metric_key("rank", mu, k)] = rank_k_at_mu(preds, gts, k, mu)
    maps = []
    for mu in eval_cfg.mus:
        value = map_at_mu(preds, gts, mu, verbose=verbose)
        report[metric_key("map", mu)] = value
        maps.append(value)
    report["map_avg"] = float(np.mean(maps))
    report["hit@1"] = hit_at_1(pred_saliences, gt_saliences, eval_cfg.tau)
    return report


def grouped_metrics(groups, preds, gts, pred_saliences, gt_saliences, eval_cfg):
    """Same report per group label; samples with no label are left out."""
    members = defaultdict(list)
    for i, label in enumerate(groups):
        if label is not None:
            members[label].append(i)
    out = {}
    for label in sorted(members):
        idx = members[label]
        out[label] = compute_metrics(
            [preds[i] for i in idx], [gts[i] for i in idx],
            [pred_saliences[i] for i in idx], [gt_saliences[i] for i in idx], eval_cfg,
        )
    return out
