import functools
import json
import math
import os
from dataclasses import dataclass, field
from typing import List, Optional

import great_expectations as gx
import numpy as np
import pandas as pd
from great_expectations.core.expectation_suite import ExpectationSuite

from .errors import DemaformerError, ManifestError
from .model import Span

# =========================================================
# 1. SAMPLE TYPES
# =========================================================


@dataclass
class GroundTruth:
    c: float          # center, normalized video time
    w: float          # width
    co: float = 0.0   # center offset

    def span(self):
        center = self.c + self.co
        start = min(max(center - self.w / 2.0, 0.0), 1.0)
        end = min(max(center + self.w / 2.0, 0.0), 1.0)
        return Span(start, end, 1.0)


@dataclass
class GroundingSample:
    id: str
    video: np.ndarray      # L_v x d_v
    audio: np.ndarray      # L_v x d_a
    text: np.ndarray       # L_q x d_q
    gts: List[GroundTruth]
    saliences: np.ndarray  # L_v
    group: Optional[str] = None

    @property
    def l_v(self):
        return self.video.shape[0]

    @property
    def l_q(self):
        return self.text.shape[0]

    def gt_spans(self):
        return [gt.span() for gt in self.gts]


@dataclass
class SyntheticTruth:
    """Generator-side extras, kept for solvability checks."""
    video_signature: np.ndarray = field(repr=False)
    spans: List[tuple] = field(default_factory=list)   # (first moment, last moment) inclusive


# =========================================================
# 2. SYNTHETIC GENERATION
# =========================================================

MAX_PLACEMENT_ATTEMPTS = 100


def _span_length_range(l_v, n_moments):
    low = max(1, l_v // 8)
    high = max(low, min(l_v // 4, l_v // n_moments))
    return low, high


def _place_spans(l_v, n_moments, rng):
    low, high = _span_length_range(l_v, n_moments)
    for _ in range(MAX_PLACEMENT_ATTEMPTS):
        taken = np.zeros(l_v, dtype=bool)
        spans = []
        for _ in range(n_moments):
            length = int(rng.integers(low, high + 1))
            start = int(rng.integers(0, l_v - length + 1))
            if taken[start:start + length].any():
                break
            taken[start:start + length] = True
            spans.append((start, start + length - 1))
        if len(spans) == n_moments:
            return sorted(spans)
    raise DemaformerError(
        f"could not place {n_moments} non-overlapping spans in {l_v} moments after {MAX_PLACEMENT_ATTEMPTS} attempts"
    )


def _unit(v):
    norm = np.linalg.norm(v)
    return v / norm if norm > 0 else v


def gen_synthetic(cfg, n_samples, with_truth=False):
    """
    Samples with a planted query-dependent signal.

    Background features are N(0, 1). Inside each groundtruth span the video
    rows get snr * (unit query signature projected to video space) and the
    audio rows half of that. Salience is snr at the span center falling
    linearly to snr/2 at the span edges, 0 elsewhere; offsets are 0.
    """
    rng = np.random.default_rng(cfg.seed)
    # fixed projections shared by the whole dataset
    to_video = rng.standard_normal((cfg.d_v, cfg.d_q))
    to_audio = rng.standard_normal((cfg.d_a, cfg.d_q))

    samples, truths = [], []
    for n in range(n_samples):
        query = rng.standard_normal(cfg.d_q)
        text = query[None, :] + 0.5 * rng.standard_normal((cfg.l_q, cfg.d_q))
        video = rng.standard_normal((cfg.l_v, cfg.d_v))
        audio = rng.standard_normal((cfg.l_v, cfg.d_a))
        video_sig = _unit(to_video @ query)
        audio_sig = _unit(to_audio @ query)

        spans = _place_spans(cfg.l_v, cfg.n_moments, rng)
        saliences = np.zeros(cfg.l_v)
        gts = []
        for first, last in spans:
            video[first:last + 1] += cfg.snr * video_sig
            audio[first:last + 1] += 0.5 * cfg.snr * audio_sig
            mid = (first + last) / 2.0
            half = max((last - first) / 2.0, 1e-12)
            for i in range(first, last + 1):
                saliences[i] = cfg.snr * (1.0 - 0.5 * abs(i - mid) / half)
            start, end = first / cfg.l_v, (last + 1) / cfg.l_v
            gts.append(GroundTruth(c=(start + end) / 2.0, w=end - start, co=0.0))

        samples.append(GroundingSample(f"synth-{cfg.seed}-{n:05d}", video, audio, text, gts, saliences))
        truths.append(SyntheticTruth(video_sig, spans))

    return (samples, truths) if with_truth else samples


# =========================================================
# 3. MANIFEST (JSONL, one sample per line)
# =========================================================

SAMPLE_KEYS = ("id", "video", "audio", "text", "gt", "salience")
SUITE_NAME = "manifest_suite"

# (expectation, column, kwargs, field, message); message may use {value}
SAMPLE_EXPECTATIONS = [
    ("expect_column_values_to_not_be_null", "id", {}, "id", "must be present"),
    ("expect_column_value_lengths_to_be_between", "id", {"min_value": 1}, "id", "must be a non-empty string"),
    ("expect_column_values_to_be_unique", "id", {}, "id", "duplicate id {value!r}"),
    ("expect_column_values_to_be_between", "audio_extra_rows", {"min_value": 0, "max_value": 0},
     "audio", "row count differs from the video's by {value}"),
    ("expect_column_values_to_be_between", "salience_extra", {"min_value": 0, "max_value": 0},
     "salience", "length differs from the video row count by {value}"),
    ("expect_column_values_to_be_between", "n_gt", {"min_value": 1}, "gt", "must be a non-empty list"),
    ("expect_column_values_to_be_between", "spare_moments", {"min_value": 1},
     "gt", "needs fewer localizations than moments ({value} spare)"),
]
GT_EXPECTATIONS = [
    ("expect_column_values_to_be_between", "c", {"min_value": 0.0, "max_value": 1.0}, "center", "{value} outside [0, 1]"),
    ("expect_column_values_to_be_between", "w", {"min_value": 0.0, "max_value": 1.0}, "width", "{value} outside [0, 1]"),
]


def _matrix(obj, line, name):
    try:
        arr = np.asarray(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise ManifestError("must be a rectangular numeric matrix", line, name)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ManifestError(f"must be a non-empty 2-D matrix (got shape {arr.shape})", line, name)
    if not np.all(np.isfinite(arr)):
        raise ManifestError("contains non-finite values", line, name)
    return arr


def _vector(obj, line, name):
    if not isinstance(obj, list):
        raise ManifestError("must be a list of numbers", line, name)
    try:
        arr = np.asarray(obj, dtype=np.float64)
    except (TypeError, ValueError):
        raise ManifestError("must be a list of numbers", line, name)
    if arr.ndim != 1:
        raise ManifestError(f"must be a flat list of numbers (got shape {arr.shape})", line, name)
    if not np.all(np.isfinite(arr)):
        raise ManifestError("contains non-finite values", line, name)
    return arr


def _real(obj, line, name):
    if isinstance(obj, bool) or not isinstance(obj, (int, float)) or not math.isfinite(obj):
        raise ManifestError(f"must be a finite number (got {obj!r})", line, name)
    return float(obj)


def decode_sample(raw, line=None):
    """
    Structural decoding of one manifest object: keys, types and array shapes.
    Value ranges and cross-field counts are left to validate_samples.
    """
    if not isinstance(raw, dict):
        raise ManifestError("expected a JSON object", line)
    for key in SAMPLE_KEYS:
        if key not in raw:
            raise ManifestError("missing", line, key)
    unknown = sorted(set(raw) - set(SAMPLE_KEYS) - {"group"})
    if unknown:
        raise ManifestError(f"unknown keys {unknown}", line)

    if raw["id"] is not None and not isinstance(raw["id"], str):
        raise ManifestError("must be a string", line, "id")
    video = _matrix(raw["video"], line, "video")
    audio = _matrix(raw["audio"], line, "audio")
    text = _matrix(raw["text"], line, "text")
    saliences = _vector(raw["salience"], line, "salience")

    if not isinstance(raw["gt"], list):
        raise ManifestError("must be a list", line, "gt")
    gts = []
    for gt in raw["gt"]:
        if not isinstance(gt, dict) or set(gt) - {"c", "w", "co"} or not {"c", "w"} <= set(gt):
            raise ManifestError("entries must be objects with keys c, w and optional co", line, "gt")
        gts.append(GroundTruth(
            _real(gt["c"], line, "center"),
            _real(gt["w"], line, "width"),
            _real(gt.get("co", 0.0), line, "offset"),
        ))

    group = raw.get("group")
    if group is not None and not isinstance(group, str):
        raise ManifestError("must be a string", line, "group")
    return GroundingSample(raw["id"], video, audio, text, gts, saliences, group)


def manifest_frames(samples, lines):
    """One row per sample and one row per groundtruth, each tagged with its manifest line."""
    sample_rows, gt_rows = [], []
    for sample, line in zip(samples, lines):
        l_v = sample.video.shape[0]
        sample_rows.append({
            "line": line,
            "id": sample.id,
            "l_v": l_v,
            "audio_extra_rows": sample.audio.shape[0] - l_v,
            "salience_extra": sample.saliences.shape[0] - l_v,
            "n_gt": len(sample.gts),
            "spare_moments": l_v - len(sample.gts),
        })
        for gt in sample.gts:
            gt_rows.append({"line": line, "c": gt.c, "w": gt.w, "co": gt.co})
    return (
        pd.DataFrame(sample_rows, columns=["line", "id", "l_v", "audio_extra_rows", "salience_extra", "n_gt", "spare_moments"]),
        pd.DataFrame(gt_rows, columns=["line", "c", "w", "co"]),
    )


@functools.lru_cache(maxsize=1)
def get_context():
    return gx.get_context(mode="ephemeral")


def get_validator(context, df, asset_name, suite_name=SUITE_NAME):
    ds_name = "manifest_datasource"

    try:
        datasource = context.data_sources.get(ds_name)
    except Exception:
        datasource = context.data_sources.add_pandas(name=ds_name)

    try:
        asset = datasource.get_asset(asset_name)
    except Exception:
        asset = datasource.add_dataframe_asset(name=asset_name)

    batch_request = asset.build_batch_request(options={"dataframe": df})

    try:
        context.suites.get(suite_name)
    except Exception:
        context.suites.add(ExpectationSuite(name=suite_name))

    return context.get_validator(batch_request=batch_request, expectation_suite_name=suite_name)


def failing_rows(df, expectation, column, kwargs):
    """Pandas-side replay of an expectation: the rows that break it (first occurrence of a duplicate is kept)."""
    values = df[column]
    if expectation == "expect_column_values_to_not_be_null":
        bad = values.isna()
    elif expectation == "expect_column_values_to_be_unique":
        bad = values.duplicated(keep="first") & values.notna()
    elif expectation == "expect_column_value_lengths_to_be_between":
        lengths = values.str.len()
        bad = lengths.notna() & ~lengths.between(kwargs.get("min_value", 0), kwargs.get("max_value") or np.inf)
    elif expectation == "expect_column_values_to_be_between":
        low = kwargs.get("min_value")
        high = kwargs.get("max_value")
        bad = ~values.between(-np.inf if low is None else low, np.inf if high is None else high)
    else:
        raise DemaformerError(f"no replay for {expectation}")
    return df.loc[bad]


def diagnostics(df, expectations, validator):
    """
    Runs every expectation through great_expectations and returns one
    (line, field, message) per failing row, sorted by line.
    """
    problems = []
    for order, (expectation, column, kwargs, field_name, message) in enumerate(expectations):
        result = getattr(validator, expectation)(column, **kwargs)
        if result.success:
            continue
        rows = failing_rows(df, expectation, column, kwargs)
        if rows.empty:
            problems.append((0, order, field_name, f"failed {expectation} on column {column}"))
        for _, row in rows.iterrows():
            problems.append((int(row["line"]), order, field_name, message.format(value=row[column])))
    problems.sort(key=lambda p: (p[0], p[1]))
    return [(line, field_name, message) for line, _, field_name, message in problems]


def validate_samples(samples, lines):
    """Raises ManifestError for the first (lowest-line) invariant violation across the samples."""
    if not samples:
        return
    sample_df, gt_df = manifest_frames(samples, lines)
    # line 0 marks a sample parsed without a line number
    sample_df["line"] = sample_df["line"].fillna(0)
    gt_df["line"] = gt_df["line"].fillna(0)

    context = get_context()
    problems = diagnostics(sample_df, SAMPLE_EXPECTATIONS, get_validator(context, sample_df, "samples"))
    if not gt_df.empty:
        problems += diagnostics(gt_df, GT_EXPECTATIONS, get_validator(context, gt_df, "groundtruths"))
    if problems:
        line, field_name, message = min(problems, key=lambda p: p[0])
        raise ManifestError(message, line or None, field_name)


def parse_sample(raw, line=None):
    """Decodes and validates one manifest object."""
    sample = decode_sample(raw, line)
    validate_samples([sample], [line])
    return sample


def _read_lines(path):
    """Yields (line number, decoded text); bytes are decoded one line at a time."""
    with open(path, "rb") as f:
        for line_no, data in enumerate(f, start=1):
            try:
                yield line_no, data.decode("utf-8")
            except UnicodeDecodeError as e:
                raise ManifestError(f"invalid UTF-8 at byte {e.start}", line_no) from e


def load_manifest(path, verbose=True):
    if not os.path.exists(path):
        raise ManifestError(f"file not found: {path}")
    samples, lines = [], []
    for line_no, text in _read_lines(path):
        if not text.strip():
            continue
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ManifestError(f"malformed JSON ({e.msg})", line_no) from e
        samples.append(decode_sample(raw, line_no))
        lines.append(line_no)
    validate_samples(samples, lines)
    if not samples and verbose:
        print(f"[DATA WARNING] {path} contains no samples")
    return samples


def sample_to_dict(sample):
    raw = {
        "id": sample.id,
        "video": sample.video.tolist(),
        "audio": sample.audio.tolist(),
        "text": sample.text.tolist(),
        "gt": [{"c": gt.c, "w": gt.w, "co": gt.co} for gt in sample.gts],
        "salience": sample.saliences.tolist(),
    }
    if sample.group is not None:
        raw["group"] = sample.group
    return raw


def save_manifest(samples, path):
    with open(path, "w", encoding="utf-8") as f:
        for sample in samples:
            f.write(json.dumps(sample_to_dict(sample)) + "\n")


# =========================================================
# 4. PREDICTIONS
# =========================================================


def _g17(x):
    return format(float(x), ".17g")


def save_predictions(samples, spans_per_sample, path):
    """One JSON object per sample: {"id": ..., "moments": [[start, end, score], ...]}."""
    with open(path, "w", encoding="utf-8") as f:
        for sample, spans in zip(samples, spans_per_sample):
            ranked = sorted(spans, key=lambda sp: (-sp.score, sp.start, sp.index))
            moments = ", ".join(f"[{_g17(sp.start)}, {_g17(sp.end)}, {_g17(sp.score)}]" for sp in ranked)
            f.write(f'{{"id": {json.dumps(sample.id)}, "moments": [{moments}]}}\n')


def load_predictions(path):
    """Reads save_predictions output back as {id: [Span, ...]} in file order."""
    if not os.path.exists(path):
        raise ManifestError(f"file not found: {path}")
    out = {}
    with open(path, "r", encoding="utf-8") as f:
        for line_no, text in enumerate(f, start=1):
            if not text.strip():
                continue
            try:
                raw = json.loads(text)
                out[raw["id"]] = [Span(float(s), float(e), float(sc), i) for i, (s, e, sc) in enumerate(raw["moments"])]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ManifestError(f"bad prediction record ({e})", line_no) from e
    return out
