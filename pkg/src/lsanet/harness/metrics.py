"""Classification accuracy and macro one-vs-rest ROC AUC, both in percent."""
from __future__ import annotations

import warnings

import numpy as np
from scipy.stats import rankdata


class UndefinedAUCError(ValueError):
    pass


def _as_arrays(probs, labels) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(getattr(probs, "data", probs), dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64).reshape(-1)
    if p.ndim != 2 or p.shape[0] != y.shape[0]:
        raise ValueError(f"scores {p.shape} and labels {y.shape} disagree")
    return p, y


def accuracy(probs, labels) -> float:
    """Percent of rows whose argmax (lowest index on ties) equals the label."""
    p, y = _as_arrays(probs, labels)
    return 100.0 * np.count_nonzero(p.argmax(axis=1) == y) / y.shape[0]


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney estimate; tied positive/negative pairs count one half."""
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    ranks = rankdata(scores)
    return (ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def auc_macro_ovr(probs, labels) -> float:
    p, y = _as_arrays(probs, labels)
    aucs = []
    for c in range(p.shape[1]):
        positive = y == c
        n_pos = int(positive.sum())
        if n_pos == 0:
            warnings.warn(f"class {c} has no samples; excluded from macro AUC", stacklevel=2)
            continue
        if n_pos == y.size:
            continue
        aucs.append(binary_auc(p[:, c], positive))
    if not aucs:
        raise UndefinedAUCError("AUC is undefined when only one class is present")
    return 100.0 * float(np.mean(aucs))
