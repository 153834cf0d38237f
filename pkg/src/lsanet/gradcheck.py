"""Central finite-difference checks for analytic gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward

STEP = 1e-5
REL_TOL = 1e-4
# entries whose analytic and numeric magnitudes are both below this are
# compared on an absolute scale
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int

    @property
    def ok(self) -> bool:
        return self.max_rel_error < REL_TOL


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(
    fn: Callable[[], Tensor],
    param: Tensor,
    coords: Sequence[int] | None = None,
    h: float = STEP,
) -> np.ndarray:
    """Central differences of scalar ``fn()`` w.r.t. the flat entries ``coords`` of ``param``."""
    flat = param.data.reshape(-1)
    coords = range(flat.size) if coords is None else coords
    out = np.zeros(len(coords))
    for j, i in enumerate(coords):
        old = flat[i]
        flat[i] = old + h
        up = fn().item()
        flat[i] = old - h
        down = fn().item()
        flat[i] = old
        out[j] = (up - down) / (2 * h)
    return out


def check_gradients(
    name: str,
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    rng: np.random.Generator | None = None,
    max_coords: int | None = None,
) -> CheckResult:
    """Compare ``backward`` against central differences for every tensor in ``params``.

    ``fn`` must rebuild the graph from scratch on each call.  With
    ``max_coords`` set, only that many randomly chosen entries per tensor
    are differenced.
    """
    found = backward(fn())
    worst, count = 0.0, 0
    for p in params:
        analytic = found.get(p.node_id, np.zeros_like(p.data)).reshape(-1)
        n = p.data.size
        if max_coords is not None and n > max_coords:
            rng = rng or np.random.default_rng(0)
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        else:
            coords = np.arange(n)
        numeric = numeric_grad(fn, p, coords)
        worst = max(worst, relative_error(analytic[coords], numeric))
        count += len(coords)
    return CheckResult(name, worst, count)
