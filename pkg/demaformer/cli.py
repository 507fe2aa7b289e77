import argparse
import json
import os
import sys

import numpy as np
import pandas as pd
from sklearn.model_selection import train_test_split

from .ablation import DEFAULT_VARIANTS, run_ablation
from .config import load_config, replace_section, save_config
from .data import gen_synthetic, load_manifest, save_manifest, save_predictions
from .ebm import SALIENCE, EnergyContext, energy, energy_grad_fn, langevin_sample
from .errors import ConfigError, DemaformerError, ManifestError
from .gradcheck import GRADCHECK_TOL, run_gradcheck
from .inference import evaluate_model
from .model import DemaFormer
from .numerics import Tensor, no_tape
from .training import fit, load_params, save_params

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _load(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = replace_section(cfg, None, seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = replace_section(cfg, None, epochs=args.epochs)
    return cfg


def _write_json(obj, path):
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)


def split_samples(samples, cfg):
    """Deterministic held-out split (cfg.split fraction, seeded by cfg.seed)."""
    if len(samples) < 2:
        raise ConfigError(f"need at least 2 samples to split, got {len(samples)}")
    return train_test_split(samples, test_size=cfg.split, random_state=cfg.seed)


# =========================================================
# SUBCOMMANDS
# =========================================================


def cmd_gen_data(args):
    cfg = _load(args)
    synth = cfg.synth if args.seed is None else replace_section(cfg, "synth", seed=args.seed).synth
    samples = gen_synthetic(synth, args.n)
    save_manifest(samples, args.out)
    print(f"--> Wrote {len(samples)} samples to {args.out}")
    return EXIT_OK


def cmd_train(args):
    cfg = _load(args)
    samples = load_manifest(args.data)
    train, held_out = split_samples(samples, cfg)
    print(f"--> Train: {len(train)} | Held-out: {len(held_out)}")

    os.makedirs(args.out, exist_ok=True)
    model = DemaFormer.from_run_config(cfg)
    fit(train, model, cfg, eval_samples=held_out, csv_path=os.path.join(args.out, "training.csv"))

    metrics, _ = evaluate_model(model, held_out, cfg.eval, n_jobs=cfg.n_jobs, verbose=True)
    save_params(model, cfg, os.path.join(args.out, "params.json"))
    save_config(cfg, os.path.join(args.out, "config.json"))
    _write_json(metrics, os.path.join(args.out, "metrics.json"))
    print(f"--> Held-out metrics: {json.dumps({k: v for k, v in metrics.items() if k != 'groups'})}")
    print(f"--> Saved run to {args.out}")
    return EXIT_OK


def cmd_eval(args):
    model, cfg = load_params(args.params)
    samples = load_manifest(args.data)
    metrics, spans = evaluate_model(model, samples, cfg.eval, n_jobs=cfg.n_jobs, verbose=True)

    os.makedirs(args.out, exist_ok=True)
    save_predictions(samples, spans, os.path.join(args.out, "predictions.jsonl"))
    _write_json(metrics, os.path.join(args.out, "metrics.json"))
    print(f"--> Evaluated {len(samples)} samples; results in {args.out}")
    return EXIT_OK


def cmd_sample(args):
    model, cfg = load_params(args.params)
    samples = load_manifest(args.data)
    if not 0 <= args.index < len(samples):
        raise ConfigError(f"--index {args.index} outside [0, {len(samples)})")
    sample = samples[args.index]
    seed = cfg.seed if args.seed is None else args.seed

    with no_tape():
        out = model.forward(sample)
    kind = cfg.energy_kind
    context = EnergyContext(model.params.heads.salience, None if kind == SALIENCE else out.query_rows)
    trace = []

    def record(step, o):
        with no_tape():
            trace.append({"step": step, "mean_energy": float(np.mean(energy(kind, Tensor(o), context).data))})

    steps = cfg.ebm.k if args.steps is None else args.steps
    langevin_sample(out.o_d, energy_grad_fn(kind, context), cfg.ebm, np.random.default_rng((seed, 3)),
                    steps=steps, on_step=record)

    pd.DataFrame(trace, columns=["step", "mean_energy"]).to_csv(args.out, index=False, float_format="%.17g")
    print(f"--> {sample.id}: energy {trace[0]['mean_energy']:.4f} -> {trace[-1]['mean_energy']:.4f} "
          f"over {steps} steps; trace in {args.out}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = _load(args)
    results = run_gradcheck(
        seed=cfg.seed, max_coords=args.max_coords,
        activation=cfg.model.activation, energy_kind=cfg.energy_kind,
    )
    worst = max(results.values())
    print(f"--> max rel err {worst:.3e} (tolerance {GRADCHECK_TOL:g})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_RUNTIME


def _csv_list(text):
    return [item.strip() for item in text.split(",") if item.strip()] if text else []


def cmd_ablate(args):
    cfg = _load(args)
    samples = load_manifest(args.data)
    train, held_out = split_samples(samples, cfg)

    variants = _csv_list(args.variants) or list(DEFAULT_VARIANTS)
    variants += [f"steps={k}" for k in _csv_list(args.steps)]
    variants += [f"energy={kind}" for kind in _csv_list(args.energies)]

    frame, summary = run_ablation(train, held_out, cfg, variants=variants, n_seeds=args.seeds)
    os.makedirs(args.out, exist_ok=True)
    frame.to_csv(os.path.join(args.out, "ablation.csv"), index=False, float_format="%.17g")
    _write_json(summary, os.path.join(args.out, "ablation.json"))
    gap = summary["rank1_05_gap_full_minus_no_ebm"]
    if gap is not None:
        print(f"--> rank1@0.5 gap (full - no_ebm): {gap:+.4f}")
    print(f"--> Ablation results in {args.out}")
    return EXIT_OK


# =========================================================
# ENTRY POINT
# =========================================================


def build_parser():
    parser = argparse.ArgumentParser(prog="demaformer", description="DemaFormer: temporal language grounding on synthetic data")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic manifest")
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--seed", type=int, default=None, help="overrides synth.seed")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit on a manifest, evaluate on a held-out split")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="predict and score a manifest")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sample", help="Langevin energy trace for one sample")
    p.add_argument("--params", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default="energy_trace.csv")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--max-coords", type=int, default=None, help="check a random subset of coordinates per tensor")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train variants over several seeds")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--variants", default=None, help=f"comma list (default {','.join(DEFAULT_VARIANTS)})")
    p.add_argument("--steps", default=None, help="comma list of Langevin step counts to sweep")
    p.add_argument("--energies", default=None, help="comma list of energy kinds to sweep")
    p.add_argument("--epochs", type=int, default=None)
    p.set_defaults(func=cmd_ablate)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ManifestError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DemaformerError, OSError, FloatingPointError) as e:
        print(f"[ERROR] {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
