import itertools

import numpy as np
import pytest

from demaformer.config import EvalConfig
from demaformer.metrics import (
    average_precision,
    compute_metrics,
    grouped_metrics,
    hit_at_1,
    hit_at_1_single,
    iou,
    map_at_mu,
    rank_k_at_mu,
)
from demaformer.model import Span


def S(start, end, score=1.0, index=-1):
    return Span(start, end, score, index)


# ----- IoU -----

def test_iou_examples():
    assert iou(S(0.2, 0.6), S(0.2, 0.6)) == 1.0
    assert iou(S(0.0, 0.3), S(0.5, 0.9)) == 0.0
    assert iou(S(0, 2), S(1, 3)) == pytest.approx(1 / 3)
    assert iou(S(0.5, 0.5), S(0.5, 0.5)) == 1.0
    assert iou(S(0.5, 0.5), S(0.6, 0.6)) == 0.0


def test_iou_symmetric_and_monotone(rng):
    for _ in range(100):
        a, b = sorted(rng.uniform(0, 1, 2)), sorted(rng.uniform(0, 1, 2))
        assert iou(S(*a), S(*b)) == iou(S(*b), S(*a))
    # sliding a unit span towards a fixed one never lowers the overlap
    values = [iou(S(0.0, 1.0), S(gap, gap + 1.0)) for gap in np.linspace(1.5, 0.0, 16)]
    assert all(x <= y for x, y in zip(values, values[1:]))


# ----- oracles -----

def _rank_oracle(preds, gts, k, mu):
    hits = 0
    for sample_preds, sample_gts in zip(preds, gts):
        found = False
        for i in range(min(k, len(sample_preds))):
            for g in sample_gts:
                if iou(sample_preds[i], g) > mu:
                    found = True
        hits += found
    return hits / len(preds)


def _ap_oracle(preds, gts, mu):
    """Precision/recall curve from an explicit TP vector, all-point area."""
    overlaps = np.array([[iou(p, g) for g in gts] for p in preds]).reshape(len(preds), len(gts))
    free = np.ones(len(gts), dtype=bool)
    tp = np.zeros(len(preds))
    for i in range(len(preds)):
        candidates = np.where(free & (overlaps[i] > mu))[0]
        if candidates.size:
            j = candidates[np.argmax(overlaps[i, candidates])]
            free[j] = False
            tp[i] = 1
    precision = np.cumsum(tp) / np.arange(1, len(preds) + 1)
    return float(np.sum(precision * tp) / len(gts))


def _random_instance(rng):
    preds, gts = [], []
    for _ in range(int(rng.integers(1, 6))):
        grid = np.round(rng.uniform(0, 1, size=(int(rng.integers(0, 5)), 2)) * 8) / 8
        preds.append([S(min(a, b), max(a, b), 0.0, i) for i, (a, b) in enumerate(grid)])
        grid = np.round(rng.uniform(0, 1, size=(int(rng.integers(1, 3)), 2)) * 8) / 8
        gts.append([S(min(a, b), max(a, b)) for a, b in grid])
    return preds, gts


def test_rank_and_map_match_oracles(rng):
    for _ in range(200):
        preds, gts = _random_instance(rng)
        for k, mu in itertools.product([1, 2, 5], [0.3, 0.5, 0.7]):
            assert rank_k_at_mu(preds, gts, k, mu) == _rank_oracle(preds, gts, k, mu)
        for mu in (0.3, 0.5, 0.7):
            expected = np.mean([_ap_oracle(p, g, mu) for p, g in zip(preds, gts)])
            assert abs(map_at_mu(preds, gts, mu) - expected) < 1e-12


def test_rank_examples():
    gt = [[S(0.2, 0.6)]]
    assert rank_k_at_mu([[S(0.2, 0.6)]], gt, 1, 0.9) == 1.0
    assert rank_k_at_mu([[S(0.7, 0.9), S(0.0, 0.1)]], gt, 5, 0.1) == 0.0
    assert rank_k_at_mu([[]], gt, 1, 0.5) == 0.0


def test_rank_monotone(rng):
    for _ in range(50):
        preds, gts = _random_instance(rng)
        assert rank_k_at_mu(preds, gts, 1, 0.5) <= rank_k_at_mu(preds, gts, 5, 0.5)
        assert rank_k_at_mu(preds, gts, 2, 0.7) <= rank_k_at_mu(preds, gts, 2, 0.3)


def test_ap_examples():
    gt = [S(0.2, 0.6)]
    assert average_precision([S(0.2, 0.6), S(0.8, 0.9)], gt, 0.5) == 1.0
    assert average_precision([S(0.8, 0.9), S(0.2, 0.6)], gt, 0.5) == 0.5
    assert average_precision([S(0.2, 0.6)], [], 0.5) is None


def test_map_perfect_predictions_in_any_order():
    gts = [S(0.0, 0.1), S(0.3, 0.5), S(0.7, 0.9)]
    for order in itertools.permutations(gts):
        assert map_at_mu([list(order)], [gts], 0.5) == 1.0


def test_map_skips_samples_without_groundtruth(capsys):
    value = map_at_mu([[S(0.0, 1.0)], [S(0.0, 1.0)]], [[S(0.0, 1.0)], []], 0.5, verbose=True)
    assert value == 1.0
    assert "[EVAL WARNING]" in capsys.readouterr().out


# ----- Hit@1 -----

def test_hit_at_1_examples():
    assert hit_at_1_single([0.1, 0.9, 0.2], [0, 4.0, 0], 4.0) == 1
    assert hit_at_1_single([0.1, 0.9, 0.2], [0, 3.9, 0], 4.0) == 0
    assert hit_at_1_single([1.0, 1.0, 1.0], [4.0, 0, 0], 4.0) == 1
    assert hit_at_1_single([1.0, 1.0, 1.0], [0, 4.0, 4.0], 4.0) == 0


def test_hit_at_1_monotone_invariance(rng):
    transforms = [np.exp, np.arctan, lambda x: x ** 3, lambda x: 2 * x + 1, lambda x: -np.exp(-x)]
    preds = [rng.standard_normal(8) for _ in range(30)]
    gts = [rng.uniform(0, 6, 8) for _ in range(30)]
    base = hit_at_1(preds, gts, 4.0)
    for f in transforms:
        assert hit_at_1([f(p) for p in preds], gts, 4.0) == base


def test_hit_at_1_length_mismatch():
    with pytest.raises(ValueError):
        hit_at_1_single([1.0, 2.0], [1.0], 4.0)


# ----- report -----

def test_compute_metrics_keys():
    cfg = EvalConfig(ks=[1, 5], mus=[0.5, 0.7], tau=4.0)
    report = compute_metrics([[S(0.2, 0.6)]], [[S(0.2, 0.6)]], [[1.0, 0.0]], [[4.0, 0.0]], cfg)
    assert set(report) == {"rank1@0.5", "rank1@0.7", "rank5@0.5", "rank5@0.7", "map@0.5", "map@0.7", "map_avg", "hit@1"}
    assert report["map_avg"] == 1.0
    assert report["hit@1"] == 1.0


def test_grouped_metrics():
    cfg = EvalConfig(ks=[1], mus=[0.5])
    preds = [[S(0.2, 0.6)], [S(0.0, 0.1)], [S(0.0, 0.1)]]
    gts = [[S(0.2, 0.6)], [S(0.5, 0.9)], [S(0.0, 0.1)]]
    sal = [[1.0], [1.0], [1.0]]
    out = grouped_metrics(["a", "b", None], preds, gts, sal, [[4.0], [0.0], [4.0]], cfg)
    assert sorted(out) == ["a", "b"]
    assert out["a"]["rank1@0.5"] == 1.0
    assert out["b"]["rank1@0.5"] == 0.0
