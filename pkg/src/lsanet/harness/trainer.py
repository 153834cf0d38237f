"""Model assembly, the training loop, evaluation and run outputs."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import tensor as T
from ..data import BatchPlan, Dataset, batch_indices, load_medmnist, synthetic_dataset
from ..lsa import EmbedParams, LsaParams, build_embedding, build_lsa, embed_stage, lsa_weights, plan_embedding
from ..nn import (Backbone, ClassifierHead, build_backbone, classify, forward_with_taps, load_checkpoint,
                  save_checkpoint, spec_to_dict)
from ..supervision import PROB_FLOOR, cross_entropy, total_objective
from ..tensor import Tensor
from .config import ExperimentConfig
from .metrics import accuracy, auc_macro_ovr
from .optim import AdamState, adam_step

log = logging.getLogger(__name__)

LSA_MODES = ("dsn+lsa", "lsanet")
EVAL_BATCH = 256


class NumericalError(RuntimeError):
    """Raised when training produces a non-finite loss."""


@dataclass
class Model:
    config: ExperimentConfig
    num_classes: int
    backbone: Backbone
    heads: list[ClassifierHead]
    embedding: EmbedParams | None = None
    lsa: LsaParams | None = None
    probe: bool = False  # auxiliary heads see detached features

    @property
    def stages(self) -> list[int]:
        return [h.stage for h in self.heads]

    def parameters(self) -> list[Tensor]:
        out = self.backbone.parameters()
        for h in self.heads:
            out += h.parameters()
        if self.embedding is not None:
            out += self.embedding.parameters()
        if self.lsa is not None:
            out += self.lsa.parameters()
        return out

    def forward(self, x: Tensor) -> tuple[list[Tensor], Tensor | None]:
        """Per-head probabilities (stage order) and branch weights when LSA is active."""
        feats = forward_with_taps(self.backbone, x)
        outputs = []
        for head in self.heads:
            f = feats[head.stage]
            if self.probe and head.stage != self.heads[-1].stage:
                f = f.detach()
            outputs.append(classify(head, f))
        beta = None
        if self.lsa is not None:
            embedded = [embed_stage(feats[s], s, self.embedding) for s in self.stages]
            beta = lsa_weights(embedded, self.lsa)
        return outputs, beta

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if p.name not in arrays or arrays[p.name].shape != p.shape:
                raise ValueError(f"checkpoint lacks a matching array for {p.name}")
            p.data = arrays[p.name].copy()


def build_model(cfg: ExperimentConfig, num_classes: int, probe: bool = False) -> Model:
    heads = cfg.heads if (cfg.mode != "baseline" or probe) else (4,)
    backbone, head_list = build_backbone(cfg.backbone, num_classes, cfg.seed, heads)
    embedding = lsa = None
    if cfg.mode in LSA_MODES:
        plan = plan_embedding(cfg.embed, cfg.backbone.stage_shapes())
        embedding = build_embedding(plan, heads, cfg.seed)
        lsa = build_lsa(len(heads), plan.channels, cfg.seed, cfg.reduction)
    return Model(cfg, num_classes, backbone, head_list, embedding, lsa, probe)


def load_data(cfg: ExperimentConfig) -> dict[str, Dataset]:
    if cfg.data_source == "medmnist":
        return load_medmnist(cfg.data_path)
    seed = cfg.seed if cfg.data_seed is None else cfg.data_seed
    return synthetic_dataset(cfg.num_classes, cfg.n_per_class, cfg.backbone.input_size, cfg.noise, seed,
                             channels=cfg.backbone.in_channels, n_test_per_class=cfg.n_test_per_class, design=cfg.synthetic)


@dataclass
class SplitMetrics:
    split: str
    accuracy: float
    auc: float
    per_classifier: list[float]
    loss: float

    def as_dict(self) -> dict:
        return {"split": self.split, "accuracy": self.accuracy, "auc": self.auc,
                "per_classifier": self.per_classifier, "loss": self.loss}


def predict(model: Model, images: np.ndarray) -> list[np.ndarray]:
    chunks: list[list[np.ndarray]] = [[] for _ in model.heads]
    with T.no_grad():
        for i in range(0, images.shape[0], EVAL_BATCH):
            outputs, _ = model.forward(Tensor(images[i:i + EVAL_BATCH]))
            for store, probs in zip(chunks, outputs):
                store.append(probs.data)
    return [np.concatenate(c) for c in chunks]


def evaluate(model: Model, ds: Dataset) -> SplitMetrics:
    probs = predict(model, ds.images)
    per = [accuracy(p, ds.labels) for p in probs]
    final = probs[-1]
    try:
        auc = auc_macro_ovr(final, ds.labels)
    except ValueError:
        auc = float("nan")
    picked = np.maximum(final[np.arange(len(ds)), ds.labels], PROB_FLOOR)
    return SplitMetrics(ds.split, per[-1], auc, per, float(-np.log(picked).mean()))


@dataclass
class RunResult:
    config: ExperimentConfig
    model: Model
    history: list[dict] = field(default_factory=list)
    steps: list[dict] = field(default_factory=list)
    selected_epoch: int = 0

    @property
    def final(self) -> dict:
        return self.history[-1]

    @property
    def selected(self) -> dict:
        return self.history[self.selected_epoch]

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(with_out=False),
            "config_digest": self.config.digest(),
            "stages": self.model.stages,
            "epochs_run": self.final["epoch"],
            "final": self.final,
            "selected_epoch": self.selected_epoch,
            "selected": self.selected,
            "parameters_sha256": parameter_digest(self.model.parameters()),
        }


def parameter_digest(params: Sequence[Tensor]) -> str:
    h = hashlib.sha256()
    for p in params:
        h.update(p.name.encode())
        h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _diagnose(step: int, parts: dict, total: Tensor, params: Sequence[Tensor], grads=None) -> str:
    comps = {k: float(v.item()) for k, v in parts.items()}
    g = max((float(np.max(np.abs(x))) for x in grads), default=float("nan")) if grads else float("nan")
    return f"non-finite loss at step {step}: total={total.item()!r} components={comps} max|grad|={g!r}"


def train(cfg: ExperimentConfig, data: dict[str, Dataset] | None = None, probe: bool = False) -> RunResult:
    """Train one configuration; deterministic given ``cfg``.

    ``probe`` attaches the auxiliary heads to detached stage features so
    they measure, without influencing, what the backbone learns.
    """
    cfg.validate()
    data = load_data(cfg) if data is None else data
    train_ds = data["train"]
    model = build_model(cfg, train_ds.num_classes, probe=probe)
    params = model.parameters()
    state = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps, weight_decay=cfg.weight_decay)
    plan = BatchPlan(cfg.batch_size, cfg.seed, cfg.drop_last)
    alpha = cfg.alpha_for(len(model.heads) - 1)
    run = RunResult(cfg, model)

    def record(epoch: int) -> None:
        row = {"epoch": epoch}
        for split in ("train", "val", "test"):
            if split in data:
                row[split] = evaluate(model, data[split]).as_dict()
        run.history.append(row)

    record(0)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        for idx in batch_indices(len(train_ds), plan, epoch):
            x, y = Tensor(train_ds.images[idx]), train_ds.labels[idx]
            outputs, beta = model.forward(x)
            if probe:
                total, parts = total_objective("baseline", outputs, y)
                for i, probs in enumerate(outputs[:-1]):
                    parts[f"probe{model.stages[i]}"] = cross_entropy(probs, y)
                    total = total + parts[f"probe{model.stages[i]}"]
            else:
                total, parts = total_objective(cfg.mode, outputs, y, alpha=alpha, beta=beta, mu=cfg.mu)
            step += 1
            if not np.isfinite(total.item()):
                raise NumericalError(_diagnose(step, parts, total, params))
            grads = T.grad_of(total, params)
            if not all(np.all(np.isfinite(g)) for g in grads):
                raise NumericalError(_diagnose(step, parts, total, params, grads))
            adam_step(params, grads, state)
            run.steps.append(_step_row(step, epoch, total, parts, outputs, y, beta, model.stages))
        record(epoch)
        log.info("epoch %d: train acc %.2f test acc %.2f", epoch, run.history[-1]["train"]["accuracy"],
                 run.history[-1].get("test", {}).get("accuracy", float("nan")))

    if "val" in data:
        accs = [row["val"]["accuracy"] for row in run.history]
        run.selected_epoch = int(np.argmax(accs))
    else:
        run.selected_epoch = len(run.history) - 1
    return run


def _step_row(step, epoch, total, parts, outputs, labels, beta, stages) -> dict:
    row = {"step": step, "epoch": epoch, "total": total.item(),
           "lb": parts["lb"].item() if "lb" in parts else float("nan"),
           "lk": parts["lk"].item() if "lk" in parts else float("nan")}
    n = len(labels)
    for s, probs in zip(stages, outputs):
        row[f"ce{s}"] = float(-np.log(np.maximum(probs.data[np.arange(n), labels], PROB_FLOOR)).mean())
    if beta is not None:
        for s, b in zip(stages, beta.data):
            row[f"beta{s}"] = float(b)
    return row


# ----------------------------------------------------------------------
# outputs


def _write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        return
    fields = list(rows[0].keys())
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def metrics_rows(run: RunResult) -> list[dict]:
    rows = []
    for h in run.history:
        row = {"epoch": h["epoch"]}
        for split in ("train", "val", "test"):
            if split not in h:
                continue
            m = h[split]
            row[f"{split}_acc"] = m["accuracy"]
            row[f"{split}_auc"] = m["auc"]
            row[f"{split}_loss"] = m["loss"]
            for s, a in zip(run.model.stages, m["per_classifier"]):
                row[f"{split}_acc_c{s}"] = a
        rows.append(row)
    return rows


def beta_rows(run: RunResult) -> list[dict]:
    keys = [f"beta{s}" for s in run.model.stages]
    return [{"step": r["step"], **{k: r[k] for k in keys}} for r in run.steps if keys[0] in r]


def write_outputs(run: RunResult, out_dir: str | Path, figures: bool = True) -> dict[str, Path]:
    """metrics.csv, beta.csv, losses.csv, result.json, model.ckpt and (optionally) PNG figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.csv", "losses": out / "losses.csv", "result": out / "result.json",
             "checkpoint": out / "model.ckpt"}
    _write_csv(paths["metrics"], metrics_rows(run))
    _write_csv(paths["losses"], run.steps)
    betas = beta_rows(run)
    if betas:
        paths["beta"] = out / "beta.csv"
        _write_csv(paths["beta"], betas)
    meta = {"config": run.config.to_dict(with_out=False), "backbone": spec_to_dict(run.config.backbone),
            "seed": run.config.seed, "epoch": run.final["epoch"], "num_classes": run.model.num_classes,
            "probe": run.model.probe}
    raw = save_checkpoint(paths["checkpoint"], run.model.parameters(), meta)
    summary = run.summary()
    summary["checkpoint_sha256"] = hashlib.sha256(raw).hexdigest()
    paths["result"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if figures:
        from . import plotting

        paths.update(plotting.run_figures(run, out))
    return paths


def model_from_checkpoint(path: str | Path) -> Model:
    from .config import config_from_dict

    header, arrays = load_checkpoint(path)
    cfg = config_from_dict(header["config"])
    model = build_model(cfg, header["num_classes"], probe=header.get("probe", False))
    model.load_arrays(arrays)
    return model
