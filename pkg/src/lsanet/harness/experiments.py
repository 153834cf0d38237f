"""Multi-run drivers: the per-branch accuracy study and ablation sweeps."""
from __future__ import annotations

import csv
import itertools
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from ..supervision import MODES
from .config import ExperimentConfig
from .trainer import RunResult, train

SCHEMES = ("plain", "dsl")


def head_subsets() -> list[tuple[int, ...]]:
    """Every classifier subset that keeps C4 and adds at least one auxiliary."""
    aux = (1, 2, 3)
    out = []
    for r in range(1, len(aux) + 1):
        out += [combo + (4,) for combo in itertools.combinations(aux, r)]
    return sorted(out, key=lambda s: (len(s), s))


def subset_name(heads: Sequence[int]) -> str:
    return "".join(f"C{h}" for h in heads)


def branch_accuracy_experiment(cfg: ExperimentConfig, data=None) -> tuple[list[dict], dict[str, RunResult]]:
    """Per-epoch accuracy of all four classifiers under both training schemes.

    ``plain`` trains the backbone with the final loss only while auxiliary
    probe heads learn on detached features; ``dsl`` trains with the deeply
    supervised objective.  Both runs share seed, data and initialization.
    """
    base = cfg.with_(heads=(1, 2, 3, 4))
    runs = {
        "plain": train(base.with_(mode="baseline"), data=data, probe=True),
        "dsl": train(base.with_(mode="dsn"), data=data),
    }
    rows = []
    for scheme in SCHEMES:
        for h in runs[scheme].history:
            for split in ("train", "test"):
                if split in h:
                    accs = h[split]["per_classifier"]
                    rows.append({"epoch": h["epoch"], "scheme": scheme, "split": split,
                                 **{f"c{s}": a for s, a in zip((1, 2, 3, 4), accs)}})
    return rows, runs


def sweep_variants(cfg: ExperimentConfig, axis: str) -> list[tuple[str, ExperimentConfig]]:
    if axis == "mode":
        return [(m, cfg.with_(mode=m)) for m in MODES]
    if axis == "heads":
        # baseline row: the final classifier alone
        return [("Baseline(C4)", cfg.with_(heads=(4,)))] + [
            (subset_name(s), cfg.with_(heads=s)) for s in head_subsets()]
    raise ValueError(f"unknown sweep axis {axis!r}; expected 'mode' or 'heads'")


def ablation_sweep(
    cfg: ExperimentConfig, axis: str, seeds: Sequence[int] | None = None
) -> tuple[list[dict], dict[str, list[RunResult]]]:
    """Run every variant along ``axis`` for each seed; one summary row per variant.

    Accuracy and AUC are final-epoch test metrics of the final classifier,
    averaged over seeds; gains are relative to the first (baseline) row.
    """
    seeds = [cfg.seed] if seeds is None else list(seeds)
    variants = sweep_variants(cfg, axis)
    rows, runs = [], {}
    for name, var in variants:
        results = [train(var.with_(seed=s)) for s in seeds]
        runs[name] = results
        accs = [r.final["test"]["accuracy"] for r in results]
        aucs = [r.final["test"]["auc"] for r in results]
        rows.append({"variant": name, "acc": float(np.mean(accs)), "auc": float(np.mean(aucs)),
                     "acc_per_seed": accs, "auc_per_seed": aucs, "seeds": seeds,
                     "config_digest": var.digest()})
    for row in rows:
        row["gain_acc"] = row["acc"] - rows[0]["acc"]
        row["gain_auc"] = row["auc"] - rows[0]["auc"]
    return rows, runs


def write_rows(path: Path, rows: list[dict], fields: Sequence[str]) -> Path:
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(fields), extrasaction="ignore", lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_branch_outputs(rows: list[dict], out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"branch_csv": write_rows(out / "branch_accuracy.csv", rows,
                                      ["epoch", "scheme", "split", "c1", "c2", "c3", "c4"])}
    if figures:
        from .plotting import plot_branch_accuracy

        paths["branch_fig"] = plot_branch_accuracy(rows, out / "branch_accuracy.png")
    return paths


def write_sweep_outputs(rows: list[dict], axis: str, cfg: ExperimentConfig, out_dir: str | Path,
                        figures: bool = True) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"sweep_csv": write_rows(out / f"sweep_{axis}.csv", rows,
                                     ["variant", "acc", "auc", "gain_acc", "gain_auc", "config_digest"])}
    summary = {"axis": axis, "config": cfg.to_dict(), "rows": rows}
    paths["sweep_json"] = out / f"sweep_{axis}.json"
    paths["sweep_json"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if figures:
        from .plotting import plot_sweep

        paths["sweep_fig"] = plot_sweep(rows, out / f"sweep_{axis}.png")
    return paths
