"""Feature embedding and Layer Selective Attention branch weighting.

Stage maps of differing shapes are first embedded to one common
``[N, C_e, H_e, W_e]`` shape (a k x k convolution to reach the common extent,
then a 1 x 1 convolution to the common channel count).  The attention block
then turns the embedded maps into one softmax weight per supervised branch:

    concat -> global average pool -> W1 -> ReLU -> W2 -> sigmoid
           -> split per branch -> mean over channels -> mean over batch
           -> softmax over branches
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from . import tensor as T
from .nn import ConfigError, init_weight, zeros_param
from .tensor import Tensor

DEFAULT_KERNELS = (7, 5, 3, 1)
DEFAULT_REDUCTION = 8


@dataclass(frozen=True)
class EmbedConfig:
    kernels: tuple[int, ...] = DEFAULT_KERNELS
    channels: int = 64
    extent: int | None = None  # None: the smallest stage extent


@dataclass(frozen=True)
class EmbedPlan:
    """Resolved per-stage geometry for one backbone."""

    kernels: tuple[int, ...]
    strides: tuple[int, ...]
    paddings: tuple[int, ...]
    in_channels: tuple[int, ...]
    channels: int
    extent: int


def _reach(size: int, k: int, target: int) -> tuple[int, int] | None:
    for stride in range(1, max(size, 1) + 1):
        for pad in range(0, k // 2 + 1):
            if k > size + 2 * pad:
                continue
            if (size + 2 * pad - k) // stride + 1 == target:
                return stride, pad
    return None


def plan_embedding(cfg: EmbedConfig, stage_shapes: Sequence[tuple[int, int, int]]) -> EmbedPlan:
    """Validate ``cfg`` against the backbone's stage shapes and pick strides.

    For every stage the smallest stride (then smallest padding up to k//2)
    that maps its extent onto the common extent is chosen.
    """
    ks = tuple(int(k) for k in cfg.kernels)
    if len(ks) != len(stage_shapes):
        raise ConfigError(f"need one embedding kernel per stage, got {ks} for {len(stage_shapes)} stages")
    if any(k < 1 or k % 2 == 0 for k in ks):
        raise ConfigError(f"embedding kernels must be odd and positive, got {ks}")
    if any(b > a for a, b in zip(ks, ks[1:])):
        raise ConfigError(f"embedding kernels must not grow with depth, got {ks}")
    if cfg.channels < 1:
        raise ConfigError("embedding channel count must be positive")
    extent = min(s[1] for s in stage_shapes) if cfg.extent is None else int(cfg.extent)
    strides, pads = [], []
    for (c, h, w), k in zip(stage_shapes, ks):
        if h != w:
            raise ConfigError(f"stage maps must be square, got {h}x{w}")
        found = _reach(h, k, extent)
        if found is None:
            raise ConfigError(f"kernel {k} cannot map extent {h} onto {extent}")
        strides.append(found[0])
        pads.append(found[1])
    return EmbedPlan(ks, tuple(strides), tuple(pads), tuple(s[0] for s in stage_shapes), cfg.channels, extent)


@dataclass
class EmbedParams:
    """k x k then 1 x 1 convolution weights for each stage, indexed from 1."""

    plan: EmbedPlan
    spatial: dict[int, tuple[Tensor, Tensor]]
    pointwise: dict[int, tuple[Tensor, Tensor]]

    def parameters(self) -> list[Tensor]:
        out = []
        for s in sorted(self.spatial):
            out += [*self.spatial[s], *self.pointwise[s]]
        return out


def build_embedding(plan: EmbedPlan, stages: Sequence[int], seed: int) -> EmbedParams:
    spatial, pointwise = {}, {}
    for s in stages:
        c, k = plan.in_channels[s - 1], plan.kernels[s - 1]
        name = f"embed{s}"
        spatial[s] = (init_weight((c, c, k, k), c * k * k, seed, name + ".spatial.weight", gain=1.0),
                      zeros_param((c,), name + ".spatial.bias"))
        pointwise[s] = (init_weight((plan.channels, c, 1, 1), c, seed, name + ".pointwise.weight", gain=1.0),
                        zeros_param((plan.channels,), name + ".pointwise.bias"))
    return EmbedParams(plan, spatial, pointwise)


def embed_stage(feature: Tensor, stage_index: int, params: EmbedParams) -> Tensor:
    """Map one stage's features onto the common embedded shape."""
    plan = params.plan
    if stage_index not in params.spatial:
        raise ConfigError(f"no embedding parameters for stage {stage_index}")
    c = plan.in_channels[stage_index - 1]
    if feature.ndim != 4 or feature.shape[1] != c:
        raise T.ShapeError(f"stage {stage_index} embedding expects {c} channels, got {feature.shape}")
    w, b = params.spatial[stage_index]
    h = T.conv2d(feature, w, b, stride=plan.strides[stage_index - 1], padding=plan.paddings[stage_index - 1])
    pw, pb = params.pointwise[stage_index]
    out = T.conv2d(h, pw, pb)
    if out.shape[1:] != (plan.channels, plan.extent, plan.extent):
        raise T.ShapeError(f"stage {stage_index} embedded to {out.shape}, expected extent {plan.extent}")
    return out


@dataclass
class LsaParams:
    """Bias-free two-layer MLP over the pooled, concatenated embeddings."""

    w1: Tensor  # [(L*C_e)/r, L*C_e]
    w2: Tensor  # [L*C_e, (L*C_e)/r]
    reduction: int

    def parameters(self) -> list[Tensor]:
        return [self.w1, self.w2]


def build_lsa(num_branches: int, channels: int, seed: int, reduction: int = DEFAULT_REDUCTION) -> LsaParams:
    total = num_branches * channels
    if reduction < 1 or total % reduction:
        raise ConfigError(f"reduction ratio {reduction} must divide {num_branches} x {channels} = {total}")
    hidden = total // reduction
    w1 = init_weight((hidden, total), total, seed, "lsa.w1", gain=1.0)
    w2 = init_weight((total, hidden), hidden, seed, "lsa.w2", gain=1.0)
    return LsaParams(w1, w2, reduction)


def branch_means(embedded: Sequence[Tensor], params: LsaParams) -> Tensor:
    """Per-branch attention means, averaged over the batch: shape [L]."""
    shapes = {e.shape for e in embedded}
    if len(shapes) != 1:
        raise T.ShapeError(f"embedded maps disagree in shape: {sorted(shapes)}")
    n, c = embedded[0].shape[:2]
    total = len(embedded) * c
    if params.w1.shape[1] != total or params.w2.shape != (total, params.w1.shape[0]):
        raise T.ShapeError(f"LSA weights {params.w1.shape}/{params.w2.shape} do not fit {total} channels")
    pooled = T.global_avg_pool(T.concat(list(embedded), axis=1))  # [N, L*C]
    hidden = T.relu(T.matmul(pooled, T.transpose(params.w1)))
    gate = T.sigmoid(T.matmul(hidden, T.transpose(params.w2)))  # [N, L*C]
    chunks = T.reshape(gate, (n, len(embedded), c))
    return T.mean(T.mean(chunks, axis=2), axis=0)


def lsa_weights(embedded: Sequence[Tensor], params: LsaParams) -> Tensor:
    """Branch weights beta: a point on the probability simplex, one entry per branch."""
    return T.softmax(branch_means(embedded, params), axis=0)
