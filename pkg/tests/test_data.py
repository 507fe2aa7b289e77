import json

import numpy as np
import pandas as pd
import pytest

from demaformer.config import SynthConfig
from demaformer.data import (
    GroundTruth,
    failing_rows,
    gen_synthetic,
    load_manifest,
    load_predictions,
    manifest_frames,
    parse_sample,
    sample_to_dict,
    save_manifest,
    save_predictions,
)
from demaformer.errors import DemaformerError, ManifestError
from demaformer.metrics import iou, rank_k_at_mu
from demaformer.model import Span


def _small(**changes):
    base = dict(l_v=16, l_q=4, d_v=6, d_q=6, d_a=6, n_moments=1, snr=5.0, seed=0)
    base.update(changes)
    return SynthConfig(**base)


# ----- generator -----

def test_zero_snr_is_information_free():
    for sample in gen_synthetic(_small(snr=0.0), 5):
        assert np.all(sample.saliences == 0.0)


def test_single_moment_is_one_contiguous_span():
    for sample in gen_synthetic(_small(), 20):
        positive = np.flatnonzero(sample.saliences > 0)
        assert len(sample.gts) == 1
        assert np.all(np.diff(positive) == 1)


def test_generator_invariants():
    samples, truths = gen_synthetic(_small(l_v=32, n_moments=2, seed=4), 1000, with_truth=True)
    for sample, truth in zip(samples, truths):
        for gt in sample.gts:
            assert 0.0 <= gt.c <= 1.0 and 0.0 < gt.w <= 1.0 and gt.co == 0.0
        (a0, a1), (b0, b1) = truth.spans
        assert a1 < b0
        assert sample.saliences.max() == pytest.approx(5.0, rel=0.2)


def test_saliences_straddle_threshold():
    sal = np.concatenate([s.saliences for s in gen_synthetic(_small(), 20)])
    assert np.any(sal > 4.0)
    assert np.any((sal > 0) & (sal <= 4.0))


def test_generator_is_deterministic():
    a = gen_synthetic(_small(seed=7), 3)
    b = gen_synthetic(_small(seed=7), 3)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.video, y.video) and np.array_equal(x.text, y.text)


def test_placement_failure():
    with pytest.raises(DemaformerError):
        gen_synthetic(_small(l_v=4, n_moments=5), 1)


def _best_window(values):
    """Contiguous (lo, hi) with the largest sum."""
    best, best_span = -np.inf, (0, 0)
    run, start = 0.0, 0
    for i, v in enumerate(values):
        if run <= 0:
            run, start = v, i
        else:
            run += v
        if run > best:
            best, best_span = run, (start, i)
    return best_span


def test_correlation_detector_solves_the_task():
    snr = 5.0
    samples, truths = gen_synthetic(_small(l_v=32, snr=snr, seed=2), 50, with_truth=True)
    preds = []
    for sample, truth in zip(samples, truths):
        corr = sample.video @ truth.video_signature
        lo, hi = _best_window(corr - snr / 2.0)
        preds.append([Span(lo / sample.l_v, (hi + 1) / sample.l_v, 1.0, 0)])
    assert rank_k_at_mu(preds, [s.gt_spans() for s in samples], 1, 0.5) == 1.0


def test_best_window():
    assert _best_window(np.array([-1.0, 2.0, -0.5, 3.0, -4.0])) == (1, 3)
    assert _best_window(np.array([-3.0, -1.0, -2.0])) == (1, 1)


# ----- manifest -----

def test_manifest_round_trip(tmp_path):
    samples = gen_synthetic(_small(), 4)
    samples[1].group = "news"
    path = tmp_path / "manifest.jsonl"
    save_manifest(samples, path)
    loaded = load_manifest(path)
    assert len(loaded) == 4
    for a, b in zip(samples, loaded):
        assert sample_to_dict(a) == sample_to_dict(b)
    assert loaded[1].group == "news"


def test_empty_manifest_warns(tmp_path, capsys):
    path = tmp_path / "empty.jsonl"
    path.write_text("")
    assert load_manifest(path) == []
    assert "[DATA WARNING]" in capsys.readouterr().out


def _raw():
    return sample_to_dict(gen_synthetic(_small(), 1)[0])


def _write(tmp_path, lines):
    path = tmp_path / "m.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_bad_width_names_field_and_line(tmp_path):
    good, bad = _raw(), _raw()
    bad["id"] = "other"
    bad["gt"][0]["w"] = 1.5
    with pytest.raises(ManifestError) as err:
        load_manifest(_write(tmp_path, [json.dumps(good), json.dumps(bad)]))
    assert err.value.line == 2
    assert err.value.field == "width"
    assert "line 2" in str(err.value) and "width" in str(err.value)


def test_malformed_json_line(tmp_path):
    with pytest.raises(ManifestError) as err:
        load_manifest(_write(tmp_path, [json.dumps(_raw()), "{not json"]))
    assert err.value.line == 2


def test_duplicate_ids(tmp_path):
    raw = json.dumps(_raw())
    with pytest.raises(ManifestError) as err:
        load_manifest(_write(tmp_path, [raw, raw]))
    assert err.value.field == "id"


@pytest.mark.parametrize("mutate, field", [
    (lambda r: r.pop("text"), "text"),
    (lambda r: r.__setitem__("salience", r["salience"][:-1]), "salience"),
    (lambda r: r.__setitem__("audio", r["audio"][:-1]), "audio"),
    (lambda r: r["gt"][0].__setitem__("c", -0.1), "center"),
    (lambda r: r["gt"][0].__setitem__("co", "x"), "offset"),
    (lambda r: r.__setitem__("gt", []), "gt"),
])
def test_invalid_samples(mutate, field):
    raw = _raw()
    mutate(raw)
    with pytest.raises(ManifestError) as err:
        parse_sample(raw, 1)
    assert err.value.field == field


@pytest.mark.parametrize("salience", [
    ["x"] * 16,
    [[0.0], [0.0, 1.0]],
    [[0.0]] * 16,
    "0.0",
    [None] * 16,
])
def test_malformed_salience_names_field(salience):
    raw = _raw()
    raw["salience"] = salience
    with pytest.raises(ManifestError) as err:
        parse_sample(raw, 4)
    assert err.value.field == "salience"
    assert err.value.line == 4


def test_invalid_utf8_names_line(tmp_path):
    path = tmp_path / "m.jsonl"
    path.write_bytes(json.dumps(_raw()).encode("utf-8") + b"\n" + b'{"id": "\xff\xfe"}\n')
    with pytest.raises(ManifestError) as err:
        load_manifest(path)
    assert err.value.line == 2
    assert "UTF-8" in str(err.value)


def test_first_bad_line_is_reported(tmp_path):
    lines = []
    for i, (key, value) in enumerate([(None, None), ("w", 1.5), ("c", -0.2)]):
        raw = _raw()
        raw["id"] = f"clip-{i}"
        if key is not None:
            raw["gt"][0][key] = value
        lines.append(json.dumps(raw))
    with pytest.raises(ManifestError) as err:
        load_manifest(_write(tmp_path, lines))
    assert (err.value.line, err.value.field) == (2, "width")


def test_duplicate_id_points_at_second_occurrence(tmp_path):
    raw = json.dumps(_raw())
    other = _raw()
    other["id"] = "other"
    with pytest.raises(ManifestError) as err:
        load_manifest(_write(tmp_path, [raw, json.dumps(other), raw]))
    assert (err.value.line, err.value.field) == (3, "id")
    assert "duplicate id" in str(err.value)


@pytest.mark.parametrize("mutate, field", [
    (lambda r: r.__setitem__("id", ""), "id"),
    (lambda r: r.__setitem__("id", None), "id"),
    (lambda r: r.__setitem__("gt", [{"c": 0.5, "w": 0.1}] * 16), "gt"),
    (lambda r: r["gt"][0].__setitem__("w", -0.01), "width"),
])
def test_expectation_failures(mutate, field):
    raw = _raw()
    mutate(raw)
    with pytest.raises(ManifestError) as err:
        parse_sample(raw)
    assert err.value.field == field
    assert err.value.line is None


def test_manifest_frames():
    samples = gen_synthetic(_small(l_v=16, n_moments=2), 2)
    samples[1].audio = samples[1].audio[:-1]
    sample_df, gt_df = manifest_frames(samples, [3, 5])
    assert list(sample_df["line"]) == [3, 5]
    assert list(sample_df["audio_extra_rows"]) == [0, -1]
    assert list(sample_df["spare_moments"]) == [14, 14]
    assert list(gt_df["line"]) == [3, 3, 5, 5]
    assert list(gt_df["c"]) == [gt.c for s in samples for gt in s.gts]


def test_failing_rows_replays_expectations():
    df = pd.DataFrame({"line": [1, 2, 3], "id": ["a", "b", "a"], "w": [0.2, 1.5, -0.1]})
    between = failing_rows(df, "expect_column_values_to_be_between", "w", {"min_value": 0.0, "max_value": 1.0})
    assert list(between["line"]) == [2, 3]
    assert list(failing_rows(df, "expect_column_values_to_be_unique", "id", {})["line"]) == [3]
    assert failing_rows(df, "expect_column_values_to_not_be_null", "id", {}).empty


def test_unknown_key_rejected():
    raw = _raw()
    raw["extra"] = 1
    with pytest.raises(ManifestError):
        parse_sample(raw, 1)


def test_missing_file(tmp_path):
    with pytest.raises(ManifestError):
        load_manifest(tmp_path / "nope.jsonl")


def test_groundtruth_span_is_clamped():
    span = GroundTruth(c=0.95, w=0.2, co=0.0).span()
    assert (span.start, span.end) == pytest.approx((0.85, 1.0))


# ----- predictions -----

def test_predictions_round_trip(tmp_path):
    samples = gen_synthetic(_small(), 2)
    spans = [[Span(0.1, 0.2, 0.5, 0), Span(1 / 3, 2 / 3, 0.1 + 0.2, 1)], []]
    path = tmp_path / "pred.jsonl"
    save_predictions(samples, spans, path)
    lines = path.read_text().splitlines()
    assert lines[1].endswith('"moments": []}')

    loaded = load_predictions(path)
    first = loaded[samples[0].id]
    assert [sp.score for sp in first] == [0.5, 0.1 + 0.2]
    assert first[1].start == 1 / 3 and first[1].end == 2 / 3
    assert iou(first[1], spans[0][1]) == 1.0
    assert loaded[samples[1].id] == []


def test_predictions_sorted_by_score(tmp_path):
    samples = gen_synthetic(_small(), 1)
    path = tmp_path / "pred.jsonl"
    save_predictions(samples, [[Span(0.0, 0.1, 0.2, 0), Span(0.5, 0.6, 0.9, 1)]], path)
    scores = [m[2] for m in json.loads(path.read_text())["moments"]]
    assert scores == [0.9, 0.2]
