"""Training objectives for single-head, deeply supervised and LSA-weighted models.

Classifier outputs are always ordered auxiliary stages first (ascending) and
the final classifier last.  All losses take probabilities, not logits, and
clamp them at ``PROB_FLOOR`` before any logarithm.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_FLOOR = 1e-12
NORM_TOL = 1e-6
MODES = ("baseline", "dsn", "dsn+ks", "dsn+lsa", "lsanet")


class LossConfigError(ValueError):
    """Raised when a loss receives inconsistent weights or components."""


def _labels(labels, n: int, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if y.shape[0] != n:
        raise LossConfigError(f"{y.shape[0]} labels for {n} samples")
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise LossConfigError(f"labels must lie in [0, {num_classes}), got range [{y.min()}, {y.max()}]")
    return y


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels, dtype=np.int64)
    out = np.zeros((y.size, num_classes))
    out[np.arange(y.size), y] = 1.0
    return out


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class."""
    n, c = probs.shape
    y = _labels(labels, n, c)
    picked = T.tsum(probs * one_hot(y, c), axis=1)
    return -T.mean(T.log(T.clamp_min(picked, PROB_FLOOR)))


def dsn_loss(outputs: Sequence[Tensor], labels, alpha: Sequence[float]) -> Tensor:
    """Final-classifier cross-entropy plus alpha-weighted auxiliary cross-entropies."""
    if len(outputs) < 2:
        raise LossConfigError("deep supervision needs at least one auxiliary classifier")
    if len(alpha) != len(outputs) - 1:
        raise LossConfigError(f"{len(alpha)} alpha weights for {len(outputs) - 1} auxiliary classifiers")
    if any(a < 0 for a in alpha):
        raise LossConfigError(f"alpha weights must be non-negative, got {list(alpha)}")
    total = cross_entropy(outputs[-1], labels)
    for a, probs in zip(alpha, outputs[:-1]):
        total = total + float(a) * cross_entropy(probs, labels)
    return total


def lsa_weighted_loss(outputs: Sequence[Tensor], labels, beta) -> Tensor:
    """Cross-entropies of every classifier, final one included, weighted by beta.

    ``beta`` may be a Tensor on the graph (gradients then reach the attention
    parameters) or a plain sequence of numbers.
    """
    beta = T.as_tensor(beta)
    if beta.shape != (len(outputs),):
        raise LossConfigError(f"beta of shape {beta.shape} for {len(outputs)} classifiers")
    ces = T.stack([cross_entropy(p, labels) for p in outputs])
    return T.tsum(beta * ces)


def _check_rows(probs: Tensor, which: int) -> None:
    err = np.max(np.abs(probs.data.sum(axis=1) - 1.0)) if probs.size else 0.0
    if err > NORM_TOL:
        raise LossConfigError(f"classifier {which} rows are not normalized (max deviation {err:.3g})")


def pairwise_weights(num: int, mu=1.0) -> np.ndarray:
    m = np.full((num, num), float(mu)) if np.isscalar(mu) else np.asarray(mu, dtype=float)
    if m.shape != (num, num):
        raise LossConfigError(f"mu must be {num}x{num}, got {m.shape}")
    if np.any(m < 0):
        raise LossConfigError("mu weights must be non-negative")
    return m


def knowledge_synergy_loss(outputs: Sequence[Tensor], mu=1.0, targets: Sequence[Tensor] | None = None) -> Tensor:
    """Sum over ordered classifier pairs p != q of mu[p, q] * KL(f_p || f_q), batch mean.

    Each target ``f_q`` is a constant: by default the detached current
    output, or ``targets[q]`` when given.
    """
    num = len(outputs)
    if num < 2:
        raise LossConfigError("knowledge synergy needs at least two classifiers")
    m = pairwise_weights(num, mu)
    for i, p in enumerate(outputs):
        _check_rows(p, i)
    n = outputs[0].shape[0]
    if targets is None:
        targets = [p.detach() for p in outputs]
    log_t = [np.log(np.maximum(t.data, PROB_FLOOR)) for t in targets]
    total = T.Tensor(0.0)
    for p in range(num):
        fp = T.clamp_min(outputs[p], PROB_FLOOR)
        log_fp = T.log(fp)
        for q in range(num):
            if q == p or m[p, q] == 0.0:
                continue
            kl = T.tsum(fp * (log_fp - log_t[q]))
            total = total + (m[p, q] / n) * kl
    return total


def total_objective(
    mode: str,
    outputs: Sequence[Tensor],
    labels,
    *,
    alpha: Sequence[float] | None = None,
    beta=None,
    mu=None,
    ks_targets: Sequence[Tensor] | None = None,
) -> tuple[Tensor, dict[str, Tensor]]:
    """Objective for one ablation mode plus its named components.

    baseline: final cross-entropy; dsn: adds alpha-weighted auxiliaries;
    dsn+ks: dsn plus knowledge synergy; dsn+lsa: beta-weighted loss;
    lsanet: beta-weighted loss plus knowledge synergy.
    """
    if mode not in MODES:
        raise LossConfigError(f"unknown mode {mode!r}; expected one of {MODES}")
    parts: dict[str, Tensor] = {}
    if mode == "baseline":
        parts["ce"] = cross_entropy(outputs[-1], labels)
        return parts["ce"], parts

    if mode in ("dsn", "dsn+ks"):
        if alpha is None:
            raise LossConfigError(f"mode {mode} needs alpha weights")
        if len(outputs) == 1:
            parts["dsn"] = cross_entropy(outputs[-1], labels)
        else:
            parts["dsn"] = dsn_loss(outputs, labels, alpha)
        total = parts["dsn"]
    else:
        if beta is None:
            raise LossConfigError(f"mode {mode} needs branch weights beta")
        parts["lb"] = lsa_weighted_loss(outputs, labels, beta)
        total = parts["lb"]

    if mode in ("dsn+ks", "lsanet"):
        if mu is None:
            raise LossConfigError(f"mode {mode} needs pairwise weights mu")
        if len(outputs) > 1:
            parts["lk"] = knowledge_synergy_loss(outputs, mu, ks_targets)
            total = total + parts["lk"]
    return total, parts
