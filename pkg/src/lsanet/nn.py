"""Miniature four-stage convolutional backbones with tapped stage outputs."""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

NUM_STAGES = 4


class ConfigError(ValueError):
    """Raised for an invalid model or experiment configuration."""


def param_rng(seed: int, name: str) -> np.random.Generator:
    """A generator private to one named parameter.

    Keying on the name makes every parameter's initial value independent of
    which other parameters exist, so adding heads or taps never perturbs the
    backbone draw.
    """
    return np.random.default_rng([int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode())])


def init_weight(shape: Sequence[int], fan_in: int, seed: int, name: str, gain: float = 6.0) -> Tensor:
    bound = np.sqrt(gain / fan_in)
    data = param_rng(seed, name).uniform(-bound, bound, size=tuple(shape))
    return Tensor(data, requires_grad=True, name=name)


def zeros_param(shape: Sequence[int], name: str) -> Tensor:
    return Tensor(np.zeros(tuple(shape)), requires_grad=True, name=name)


@dataclass(frozen=True)
class BackboneSpec:
    in_channels: int = 1
    input_size: int = 28
    channels: tuple[int, ...] = (8, 16, 32, 64)
    downsample: tuple[bool, ...] = (False, True, True, True)
    convs_per_stage: int = 2
    residual: bool = False

    def validate(self) -> None:
        if len(self.channels) != NUM_STAGES or len(self.downsample) != NUM_STAGES:
            raise ConfigError(f"backbone needs exactly {NUM_STAGES} stages, got channels={self.channels}")
        if any(c < 1 for c in self.channels) or self.in_channels < 1 or self.convs_per_stage < 1:
            raise ConfigError("channel counts and convs_per_stage must be positive")
        if any(b < a for a, b in zip(self.channels, self.channels[1:])):
            raise ConfigError(f"stage channels must be non-decreasing, got {self.channels}")
        extents = self.stage_extents()
        if extents[-1] < 1:
            raise ConfigError(f"input size {self.input_size} collapses before the last stage: {extents}")

    def stage_extents(self) -> list[int]:
        size, out = self.input_size, []
        for down in self.downsample:
            if down:
                size = (size - 2) // 2 + 1 if size >= 2 else 0
            out.append(size)
        return out

    def stage_shapes(self) -> list[tuple[int, int, int]]:
        return [(c, s, s) for c, s in zip(self.channels, self.stage_extents())]

    def parameter_count(self) -> int:
        total, c_in = 0, self.in_channels
        for c in self.channels:
            total += c_in * c * 9 + c
            total += (self.convs_per_stage - 1) * (c * c * 9 + c)
            if self.residual and c_in != c:
                total += c_in * c + c
            c_in = c
        return total


@dataclass
class Stage:
    convs: list[tuple[Tensor, Tensor]]
    downsample: bool
    shortcut: tuple[Tensor, Tensor] | None = None
    residual: bool = False


@dataclass
class Backbone:
    spec: BackboneSpec
    stages: list[Stage]

    def parameters(self) -> list[Tensor]:
        out = []
        for st in self.stages:
            for w, b in st.convs:
                out += [w, b]
            if st.shortcut is not None:
                out += list(st.shortcut)
        return out


@dataclass
class StageFeatures:
    maps: list[Tensor]

    def __post_init__(self):
        if len(self.maps) != NUM_STAGES:
            raise T.ShapeError(f"expected {NUM_STAGES} stage maps, got {len(self.maps)}")
        if len({m.shape[0] for m in self.maps}) != 1:
            raise T.ShapeError("stage maps disagree on batch size")

    def __getitem__(self, stage: int) -> Tensor:
        """Map for 1-based ``stage``."""
        return self.maps[stage - 1]

    def __len__(self) -> int:
        return len(self.maps)


@dataclass
class ClassifierHead:
    stage: int
    weight: Tensor
    bias: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


def validate_heads(heads: Iterable[int]) -> tuple[int, ...]:
    heads = tuple(sorted(set(int(h) for h in heads)))
    if not heads or any(h not in range(1, NUM_STAGES + 1) for h in heads):
        raise ConfigError(f"head subset must be drawn from 1..{NUM_STAGES}, got {heads}")
    if NUM_STAGES not in heads:
        raise ConfigError(f"head subset {heads} drops the final classifier C{NUM_STAGES}")
    return heads


def build_head(stage: int, channels: int, num_classes: int, seed: int) -> ClassifierHead:
    prefix = f"head{stage}"
    w = init_weight((channels, num_classes), channels, seed, f"{prefix}.weight", gain=1.0)
    return ClassifierHead(stage, w, zeros_param((num_classes,), f"{prefix}.bias"))


def build_backbone(
    spec: BackboneSpec,
    num_classes: int,
    seed: int,
    heads: Iterable[int] = (1, 2, 3, 4),
) -> tuple[Backbone, list[ClassifierHead]]:
    """Allocate backbone parameters and one classifier head per selected stage."""
    spec.validate()
    heads = validate_heads(heads)
    if num_classes < 1:
        raise ConfigError("num_classes must be positive")
    stages, c_in = [], spec.in_channels
    for s, (c, down) in enumerate(zip(spec.channels, spec.downsample), start=1):
        convs = []
        for j in range(spec.convs_per_stage):
            cin = c_in if j == 0 else c
            name = f"stage{s}.conv{j + 1}"
            convs.append((init_weight((c, cin, 3, 3), cin * 9, seed, name + ".weight"),
                          zeros_param((c,), name + ".bias")))
        shortcut = None
        if spec.residual and c_in != c:
            name = f"stage{s}.shortcut"
            shortcut = (init_weight((c, c_in, 1, 1), c_in, seed, name + ".weight", gain=1.0),
                        zeros_param((c,), name + ".bias"))
        stages.append(Stage(convs, down, shortcut, spec.residual))
        c_in = c
    head_list = [build_head(h, spec.channels[h - 1], num_classes, seed) for h in heads]
    return Backbone(spec, stages), head_list


def run_stage(stage: Stage, x: Tensor) -> Tensor:
    if stage.downsample:
        x = T.maxpool2d(x, 2, 2)
    h = x
    for i, (w, b) in enumerate(stage.convs):
        h = T.conv2d(h, w, b, stride=1, padding=1)
        if i < len(stage.convs) - 1 or not stage.residual:
            h = T.relu(h)
    if stage.residual:
        skip = x if stage.shortcut is None else T.conv2d(x, *stage.shortcut)
        h = T.relu(h + skip)
    return h


def forward_with_taps(backbone: Backbone, batch: Tensor) -> StageFeatures:
    """One shared forward pass returning every stage's output map."""
    spec = backbone.spec
    expected = (spec.in_channels, spec.input_size, spec.input_size)
    if batch.ndim != 4 or batch.shape[1:] != expected:
        raise T.ShapeError(f"batch shape {batch.shape} does not match backbone input [N, {expected}]")
    maps, x = [], batch
    for stage in backbone.stages:
        x = run_stage(stage, x)
        maps.append(x)
    return StageFeatures(maps)


def head_logits(head: ClassifierHead, feature: Tensor) -> Tensor:
    if feature.ndim != 4 or feature.shape[1] != head.weight.shape[0]:
        raise T.ShapeError(f"head{head.stage} expects {head.weight.shape[0]} channels, got feature {feature.shape}")
    return T.dense(T.global_avg_pool(feature), head.weight, head.bias)


def classify(head: ClassifierHead, feature: Tensor) -> Tensor:
    """Class probabilities: average pool, affine map, softmax."""
    return T.softmax(head_logits(head, feature), axis=1)


# ----------------------------------------------------------------------
# checkpoint container
#
# layout (little endian):
#   b"LSAC" | u32 version | u64 header length | UTF-8 JSON header
#   | float64 arrays in header["params"] order
# The header carries the model spec, seed, epoch and per-parameter
# name/shape entries.

MAGIC = b"LSAC"
VERSION = 1


def save_checkpoint(path: str | Path, params: Sequence[Tensor], meta: dict) -> bytes:
    header = dict(meta)
    header["params"] = [{"name": p.name, "shape": list(p.shape)} for p in params]
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in params)
    raw = MAGIC + struct.pack("<IQ", VERSION, len(blob)) + blob + payload
    Path(path).write_bytes(raw)
    return raw


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", raw, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    start = 4 + struct.calcsize("<IQ")
    header = json.loads(raw[start:start + hlen].decode("utf-8"))
    offset = start + hlen
    arrays = {}
    for entry in header["params"]:
        count = int(np.prod(entry["shape"]))
        arr = np.frombuffer(raw, dtype="<f8", count=count, offset=offset).reshape(entry["shape"])
        arrays[entry["name"]] = arr.astype(np.float64)
        offset += 8 * count
    if offset != len(raw):
        raise ValueError(f"{path}: {len(raw) - offset} trailing bytes after parameters")
    return header, arrays


def spec_to_dict(spec: BackboneSpec) -> dict:
    return asdict(spec)


def spec_from_dict(d: dict) -> BackboneSpec:
    return BackboneSpec(
        in_channels=d["in_channels"],
        input_size=d["input_size"],
        channels=tuple(d["channels"]),
        downsample=tuple(bool(x) for x in d["downsample"]),
        convs_per_stage=d["convs_per_stage"],
        residual=bool(d["residual"]),
    )
