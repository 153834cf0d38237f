"""PNG figures written next to the CSV outputs of each command."""
from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STAGE_COLORS = ["#377eb8", "#4daf4a", "#ff7f00", "#e41a1c"]


def _color(stage: int) -> str:
    return STAGE_COLORS[(stage - 1) % len(STAGE_COLORS)]


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_metrics(history: Sequence[dict], stages: Sequence[int], path: Path) -> Path:
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    epochs = [h["epoch"] for h in history]
    for split, ax in zip(("train", "test"), axes):
        if split not in history[0]:
            ax.set_visible(False)
            continue
        for i, s in enumerate(stages):
            ax.plot(epochs, [h[split]["per_classifier"][i] for h in history], color=_color(s), label=f"C{s}")
        ax.set_title(f"{split} accuracy per classifier")
        ax.set_xlabel("epoch")
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.legend(loc="lower right", fontsize=8)
    return _save(fig, path)


def plot_beta(rows: Sequence[dict], stages: Sequence[int], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [r["step"] for r in rows]
    for s in stages:
        ax.plot(steps, [r[f"beta{s}"] for r in rows], color=_color(s), label=f"beta C{s}")
    ax.set_xlabel("step")
    ax.set_ylabel("branch weight")
    ax.legend(fontsize=8)
    return _save(fig, path)


def run_figures(run, out: Path) -> dict[str, Path]:
    from .trainer import beta_rows

    paths = {"fig_metrics": plot_metrics(run.history, run.model.stages, out / "metrics.png")}
    betas = beta_rows(run)
    if betas:
        paths["fig_beta"] = plot_beta(betas, run.model.stages, out / "beta.png")
    return paths


def plot_branch_accuracy(rows: Sequence[dict], path: Path, split: str = "train") -> Path:
    """Solid lines: final-loss-only training with probes; dashed: deep supervision."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for scheme, style in (("plain", "-"), ("dsl", "--")):
        sel = [r for r in rows if r["scheme"] == scheme and r["split"] == split]
        if not sel:
            continue
        epochs = [r["epoch"] for r in sel]
        for s in range(1, 5):
            ax.plot(epochs, [r[f"c{s}"] for r in sel], style, color=_color(s), label=f"{scheme} C{s}")
    ax.set_xlabel("epoch")
    ax.set_ylabel(f"{split} accuracy (%)")
    ax.set_ylim(0, 100)
    ax.legend(ncol=2, fontsize=8)
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(5, 1.1 * len(rows)), 4))
    names = [r["variant"] for r in rows]
    ax.bar(range(len(rows)), [r["acc"] for r in rows], color="#377eb8")
    ax.set_xticks(range(len(rows)))
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean test accuracy (%)")
    lo = min(r["acc"] for r in rows)
    ax.set_ylim(max(0, lo - 10), 100)
    return _save(fig, path)
