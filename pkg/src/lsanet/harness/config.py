"""Experiment configuration and its flat ``dotted.key = value`` text format.

Example::

    mode = lsanet
    backbone.channels = 8, 16, 32, 64
    optimizer.lr = 0.001
    data.source = synthetic

Blank lines and ``#`` comments are ignored.  Unknown keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable

from ..data import SyntheticDesign
from ..lsa import EmbedConfig, plan_embedding
from ..nn import BackboneSpec, ConfigError, validate_heads
from ..supervision import MODES


def _bool(s: str) -> bool:
    low = s.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _ints(s: str) -> tuple[int, ...]:
    return tuple(int(x) for x in s.replace(",", " ").split())


def _floats(s: str) -> tuple[float, ...]:
    return tuple(float(x) for x in s.replace(",", " ").split())


def _bools(s: str) -> tuple[bool, ...]:
    return tuple(_bool(x) for x in s.replace(",", " ").split())


def _opt_int(s: str) -> int | None:
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


def _opt_str(s: str) -> str | None:
    return None if s.strip().lower() in ("", "none") else s.strip()


@dataclass(frozen=True)
class ExperimentConfig:
    mode: str = "lsanet"
    seed: int = 0
    epochs: int = 30
    out: str = "runs/default"

    backbone: BackboneSpec = BackboneSpec()
    heads: tuple[int, ...] = (1, 2, 3, 4)
    embed: EmbedConfig = EmbedConfig()
    reduction: int = 8
    alpha: tuple[float, ...] = (1.0,)  # one value broadcasts to every auxiliary
    mu: float = 1.0

    optimizer: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0

    batch_size: int = 64
    drop_last: bool = False

    data_source: str = "synthetic"
    data_path: str | None = None
    num_classes: int = 4
    n_per_class: int = 64
    n_test_per_class: int = 64
    noise: float = 0.1
    synthetic: SyntheticDesign = SyntheticDesign()
    data_seed: int | None = None  # None: follow the run seed

    def validate(self) -> "ExperimentConfig":
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}, got {self.mode!r}")
        self.backbone.validate()
        validate_heads(self.heads)
        plan_embedding(self.embed, self.backbone.stage_shapes())
        total = len(self.heads) * self.embed.channels
        if self.reduction < 1 or total % self.reduction:
            raise ConfigError(f"reduction ratio {self.reduction} must divide {total}")
        if len(self.alpha) not in (1, len(self.heads) - 1) or any(a < 0 for a in self.alpha):
            raise ConfigError(f"alpha must be one value or one per auxiliary head, got {self.alpha}")
        if self.mu < 0:
            raise ConfigError("mu must be non-negative")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.lr <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1) or self.eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch size >= 1")
        if self.data_source not in ("synthetic", "medmnist"):
            raise ConfigError(f"data.source must be synthetic or medmnist, got {self.data_source!r}")
        if self.data_source == "medmnist" and not self.data_path:
            raise ConfigError("data.path is required for medmnist data")
        if self.data_source == "synthetic" and (self.num_classes < 2 or self.n_per_class < 1):
            raise ConfigError("synthetic data needs >= 2 classes and >= 1 sample per class")
        d = self.synthetic
        if not 0 <= d.swap <= 1 or d.jitter < 0 or d.blob_size < 1 or d.period <= 0 or self.noise < 0:
            raise ConfigError(f"invalid synthetic design {d}")
        return self

    def alpha_for(self, num_aux: int) -> list[float]:
        return list(self.alpha) * num_aux if len(self.alpha) == 1 else list(self.alpha)

    def with_(self, **changes: Any) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self, with_out: bool = True) -> dict[str, Any]:
        """Every key; ``with_out=False`` drops the output directory, which never affects results."""
        return {key: _get(self, key) for key in KEYS if with_out or key != "out"}

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in self.to_dict().items())

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(with_out=False), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


# dotted key -> (path into the dataclass, parser)
KEYS: dict[str, tuple[tuple[str, ...], Callable[[str], Any]]] = {
    "mode": (("mode",), str.strip),
    "seed": (("seed",), int),
    "epochs": (("epochs",), int),
    "out": (("out",), str.strip),
    "backbone.in_channels": (("backbone", "in_channels"), int),
    "backbone.input_size": (("backbone", "input_size"), int),
    "backbone.channels": (("backbone", "channels"), _ints),
    "backbone.downsample": (("backbone", "downsample"), _bools),
    "backbone.convs_per_stage": (("backbone", "convs_per_stage"), int),
    "backbone.residual": (("backbone", "residual"), _bool),
    "heads": (("heads",), _ints),
    "embed.kernels": (("embed", "kernels"), _ints),
    "embed.channels": (("embed", "channels"), int),
    "embed.extent": (("embed", "extent"), _opt_int),
    "lsa.reduction": (("reduction",), int),
    "loss.alpha": (("alpha",), _floats),
    "loss.mu": (("mu",), float),
    "optimizer.name": (("optimizer",), str.strip),
    "optimizer.lr": (("lr",), float),
    "optimizer.beta1": (("beta1",), float),
    "optimizer.beta2": (("beta2",), float),
    "optimizer.eps": (("eps",), float),
    "optimizer.weight_decay": (("weight_decay",), float),
    "batch.size": (("batch_size",), int),
    "batch.drop_last": (("drop_last",), _bool),
    "data.source": (("data_source",), str.strip),
    "data.path": (("data_path",), _opt_str),
    "data.num_classes": (("num_classes",), int),
    "data.n_per_class": (("n_per_class",), int),
    "data.n_test_per_class": (("n_test_per_class",), int),
    "data.noise": (("noise",), float),
    "data.seed": (("data_seed",), _opt_int),
    "data.texture": (("synthetic", "texture"), float),
    "data.period": (("synthetic", "period"), float),
    "data.blob": (("synthetic", "blob"), float),
    "data.blob_size": (("synthetic", "blob_size"), int),
    "data.jitter": (("synthetic", "jitter"), int),
    "data.swap": (("synthetic", "swap"), float),
    "data.background": (("synthetic", "background"), float),
}


def _get(cfg, key: str):
    obj = cfg
    for part in KEYS[key][0]:
        obj = getattr(obj, part)
    return obj


def _format(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ", ".join(_format(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def apply_overrides(cfg: ExperimentConfig, values: dict[str, str]) -> ExperimentConfig:
    top: dict[str, Any] = {}
    nested: dict[str, dict[str, Any]] = {}
    for key, raw in values.items():
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        path, parse = KEYS[key]
        try:
            value = parse(raw)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        if len(path) == 1:
            top[path[0]] = value
        else:
            nested.setdefault(path[0], {})[path[1]] = value
    for name, changes in nested.items():
        top[name] = dataclasses.replace(getattr(cfg, name), **changes)
    return dataclasses.replace(cfg, **top)


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value
    return apply_overrides(base or ExperimentConfig(), values).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def config_from_dict(d: dict[str, Any]) -> ExperimentConfig:
    return parse_config("".join(f"{k} = {_format(_tupled(v))}\n" for k, v in d.items()))


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v
