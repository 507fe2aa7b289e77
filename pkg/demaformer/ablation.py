"""
Ablation runner: trains each variant for several seeds and compares
held-out metrics. Variants are config edits on top of one RunConfig.
"""

import numpy as np
import pandas as pd
from tqdm import tqdm

from .config import replace_section
from .errors import ConfigError
from .inference import evaluate_model
from .metrics import rank_k_at_mu
from .model import DemaFormer
from .training import fit

VARIANTS = {
    "full": [],
    "no_ebm": [("ablations", {"no_ebm": True})],
    "no_damping": [("ablations", {"no_damping": True})],
    "no_dema": [("ablations", {"no_dema": True})],
    "no_offset": [("ablations", {"no_offset": True})],
    "main_text_offset": [("ablations", {"offset_variant": "main_text"})],
}
DEFAULT_VARIANTS = ["full", "no_ebm", "no_damping", "no_dema", "no_offset"]


def variant_config(cfg, name):
    """
    RunConfig for a named variant. Besides VARIANTS, accepts
    "steps=K" (Langevin step count) and "energy=KIND" (energy function).
    """
    if name in VARIANTS:
        out = cfg
        for section, changes in VARIANTS[name]:
            out = replace_section(out, section, **changes)
        return out
    if name.startswith("steps="):
        try:
            k = int(name.split("=", 1)[1])
        except ValueError:
            raise ConfigError(f"bad step count in variant {name!r}")
        return replace_section(cfg, "ebm", k=k)
    if name.startswith("energy="):
        return replace_section(cfg, None, energy_kind=name.split("=", 1)[1])
    raise ConfigError(f"unknown ablation variant {name!r} (known: {sorted(VARIANTS)}, steps=K, energy=KIND)")


def run_one(train_samples, test_samples, cfg, seed):
    model = DemaFormer.from_run_config(cfg, seed=seed)
    report = fit(train_samples, model, cfg, eval_samples=test_samples, seed=seed, verbose=False)
    metrics, spans = evaluate_model(model, test_samples, cfg.eval, n_jobs=cfg.n_jobs)
    metrics.pop("groups", None)
    metrics["rank1_05"] = rank_k_at_mu(spans, [s.gt_spans() for s in test_samples], 1, 0.5)
    metrics["final_l_match"] = report.records[-1].l_match
    return metrics


def run_ablation(train_samples, test_samples, cfg, variants=None, n_seeds=1, verbose=True):
    """
    Returns (rows DataFrame, summary dict).
    rows: one per (variant, seed) with every held-out metric.
    summary: per-variant means, plus the signed rank1@0.5 gap full - no_ebm
    when both variants were run.
    """
    variants = list(variants or DEFAULT_VARIANTS)
    if n_seeds < 1:
        raise ConfigError("ablation needs at least one seed")
    configs = {name: variant_config(cfg, name) for name in variants}
    seeds = [cfg.seed + i for i in range(n_seeds)]

    rows = []
    jobs = [(name, seed) for name in variants for seed in seeds]
    for name, seed in tqdm(jobs, desc="ablate", disable=not verbose):
        metrics = run_one(train_samples, test_samples, replace_section(configs[name], None, seed=seed), seed)
        rows.append({"variant": name, "seed": seed, **metrics})
        if verbose:
            tqdm.write(f"--> {name} seed={seed} rank1@0.5={metrics['rank1_05']:.3f}")

    frame = pd.DataFrame(rows)
    means = frame.drop(columns=["seed"]).groupby("variant", sort=False).mean()
    summary = {
        "seeds": seeds,
        "variants": {name: {k: float(v) for k, v in means.loc[name].items()} for name in variants},
        "rank1_05_gap_full_minus_no_ebm": None,
    }
    if "full" in variants and "no_ebm" in variants:
        gap = float(np.mean(frame.loc[frame.variant == "full", "rank1_05"])
                    - np.mean(frame.loc[frame.variant == "no_ebm", "rank1_05"]))
        summary["rank1_05_gap_full_minus_no_ebm"] = gap
    return frame, summary
