"""Density-modelling comparison across graph flows and datasets.

Each (dataset, model, seed) run stores one JSON file, so an interrupted
sweep resumes where it stopped. ``summarize`` takes the median over seeds.
"""
import json
import logging
import statistics
from pathlib import Path

import torch

from . import datasets as ds
from .models import build_model
from .training import TrainingDiverged, train

log = logging.getLogger(__name__)

TABLE_DATASETS = ("mog4", "mog9", "mog16", "mogring")
TABLE_MODELS = ("coupling", "graphflow", "graphflow+exp")
DEFAULT_LR = 3e-3


def run_one(dataset, model_name, seed, iters=10_000, batch=256, lr=DEFAULT_LR,
            precision="float32", out_dir=None):
    spec = ds.get_spec(dataset, seed=seed)
    model = build_model(model_name, (spec.num_nodes, 2), seed=seed, precision=precision)
    record = {"dataset": dataset, "model": model_name, "seed": seed, "iters": iters,
              "batch": batch, "lr": lr, "precision": precision}
    try:
        res = train(model, spec, iters, batch=batch, lr=lr, seed=seed)
        record.update(nll=res.final_val_nll, metrics=res.metrics, diverged=False)
    except TrainingDiverged as err:
        record.update(nll=float("nan"), metrics=[], diverged=True, error=str(err))
    if out_dir is not None:
        path = Path(out_dir) / f"{dataset}_{model_name}_{seed}.json"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(record, indent=1))
    return record


def run_sweep(out_dir, seeds=(0, 1, 2), datasets=TABLE_DATASETS, models=TABLE_MODELS, **kw):
    torch.set_num_threads(1)
    out_dir = Path(out_dir)
    for seed in seeds:
        for dataset in datasets:
            for model_name in models:
                if (out_dir / f"{dataset}_{model_name}_{seed}.json").exists():
                    continue
                rec = run_one(dataset, model_name, seed, out_dir=out_dir, **kw)
                log.info("%s %s seed %d: %.4f", dataset, model_name, seed, rec["nll"])


def load_results(out_dir):
    return [json.loads(p.read_text()) for p in sorted(Path(out_dir).glob("*.json"))]


def summarize(records):
    """``{(dataset, model): median NLL}`` over the available seeds."""
    groups = {}
    for r in records:
        groups.setdefault((r["dataset"], r["model"]), []).append(r["nll"])
    return {k: statistics.median(v) for k, v in groups.items()}


def entropy_table(datasets=TABLE_DATASETS):
    """Monte-Carlo entropy per node for each dataset, the floor for the NLL."""
    out = {}
    for name in datasets:
        h, se = ds.mc_entropy(ds.get_spec(name))
        out[name] = {"entropy_per_node": h, "stderr": se}
    return out


def summary_csv(records, entropy=None):
    med = summarize(records)
    seeds = {}
    for r in records:
        seeds.setdefault((r["dataset"], r["model"]), []).append(r["nll"])
    lines = ["dataset,model,seeds,median_nll,entropy"]
    for d in TABLE_DATASETS:
        h = (entropy or {}).get(d, {}).get("entropy_per_node", float("nan"))
        for m in TABLE_MODELS:
            if (d, m) in med:
                lines.append(f"{d},{m},{len(seeds[d, m])},{med[d, m]!r},{h!r}")
    return "\n".join(lines) + "\n"


if __name__ == "__main__":
    import sys

    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    table = Path(sys.argv[1] if len(sys.argv) > 1 else "results/table")
    entropy_path = table.parent / "entropy.json"
    if not entropy_path.exists():
        entropy_path.write_text(json.dumps(entropy_table(), indent=1))
    run_sweep(table)
    entropy = json.loads(entropy_path.read_text())
    (table.parent / "summary.csv").write_text(summary_csv(load_results(table), entropy))
