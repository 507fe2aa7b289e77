from joblib import Parallel, delayed

from .metrics import compute_metrics, grouped_metrics


def predict_dataset(model, samples, l_m=None, n_jobs=1):
    """
    Runs inference on every sample.
    Returns (spans_per_sample, saliences_per_sample) in input order.
    """
    if n_jobs == 1 or len(samples) < 2:
        results = [model.predict(s, l_m) for s in samples]
    else:
        # forward passes without a tape are read-only, so threads can share the model
        results = Parallel(n_jobs=n_jobs, prefer="threads")(delayed(model.predict)(s, l_m) for s in samples)
    spans = [r[0] for r in results]
    saliences = [r[1] for r in results]
    return spans, saliences


def evaluate_model(model, samples, eval_cfg, l_m=None, n_jobs=1, verbose=False):
    """
    Predicts and scores a dataset.
    Returns (metrics_dict, spans_per_sample).
    """
    spans, saliences = predict_dataset(model, samples, l_m=l_m, n_jobs=n_jobs)
    gts = [s.gt_spans() for s in samples]
    gt_sal = [s.saliences for s in samples]
    report = compute_metrics(spans, gts, saliences, gt_sal, eval_cfg, verbose=verbose)

    if eval_cfg.group_key is not None:
        labels = [s.group for s in samples]
        if any(label is not None for label in labels):
            report["groups"] = grouped_metrics(labels, spans, gts, saliences, gt_sal, eval_cfg)
        elif verbose:
            print(f"[EVAL WARNING] group_key={eval_cfg.group_key!r} set but no sample carries a group")
    return report, spans
