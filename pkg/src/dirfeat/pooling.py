"""Directional average pooling and the spatial normalization that follows it.

Four pooling directions compress a square (n, d, d, c) map into an
(n, L, 1, c) column, per channel:

  horizontal      row means,                L = d
  vertical        column means, stored transposed so the layout matches
                  the horizontal output,    L = d
  diagonal        means over constant j - i, indexed top-right corner
                  first (offset d-1 down to -(d-1)),  L = 2d - 1
  anti-diagonal   means over constant i + j, indexed top-left corner
                  first (0 up to 2d - 2),             L = 2d - 1

Each direction's groups partition the d*d grid; the group size is the
divisor, so the diagonal directions divide by (1, 2, ..., d, ..., 2, 1).
The backward pass spreads each output gradient uniformly over its group,
which is the exact adjoint of the forward map.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

DIRECTIONS = "hvda"


class PoolPlan:
    """For each output index, the spatial positions it averages."""

    def __init__(self, direction: str, d: int):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        if d < 1:
            raise ValueError("d must be >= 1")
        self.direction = direction
        self.d = d
        groups = []
        if direction == "h":
            for i in range(d):
                groups.append((np.full(d, i), np.arange(d)))
        elif direction == "v":
            for j in range(d):
                groups.append((np.arange(d), np.full(d, j)))
        elif direction == "d":
            for off in range(d - 1, -d, -1):
                i = np.arange(max(0, -off), min(d, d - off))
                groups.append((i, i + off))
        else:  # anti-diagonal
            for s in range(2 * d - 1):
                i = np.arange(max(0, s - d + 1), min(d, s + 1))
                groups.append((i, s - i))
        self.groups = groups
        self.sizes = np.array([len(ys) for ys, _ in groups])

    @property
    def length(self) -> int:
        return len(self.groups)


@lru_cache(maxsize=None)
def pool_plan(direction: str, d: int) -> PoolPlan:
    return PoolPlan(direction, d)


def _require_square(x):
    if x.ndim != 4 or x.shape[1] != x.shape[2]:
        raise ValueError(f"directional pooling needs a square map, got {x.shape}")


def pool_forward(x: np.ndarray, plan: PoolPlan) -> np.ndarray:
    """Average each group of `plan`; output (n, L, 1, c)."""
    _require_square(x)
    if x.shape[1] != plan.d:
        raise ValueError(f"plan is for d={plan.d}, input has d={x.shape[1]}")
    n, _, _, c = x.shape
    out = np.empty((n, plan.length, 1, c))
    for t, (ys, xs) in enumerate(plan.groups):
        out[:, t, 0, :] = x[:, ys, xs, :].mean(axis=1)
    return out


def pool_backward(grad_out: np.ndarray, plan: PoolPlan) -> np.ndarray:
    """Exact adjoint: each source position gets grad_out[t] / |group t|."""
    n, length, one, c = grad_out.shape
    if length != plan.length or one != 1:
        raise ValueError(f"grad shape {grad_out.shape} does not match plan length {plan.length}")
    grad_in = np.empty((n, plan.d, plan.d, c))
    for t, (ys, xs) in enumerate(plan.groups):
        grad_in[:, ys, xs, :] = grad_out[:, t, 0, :][:, None, :] / len(ys)
    return grad_in


def hap_forward(x: np.ndarray) -> np.ndarray:
    return pool_forward(x, pool_plan("h", x.shape[1]))


def vap_forward(x: np.ndarray) -> np.ndarray:
    """Column means; the (1, d, c) row is returned transposed as (d, 1, c)."""
    return pool_forward(x, pool_plan("v", x.shape[1]))


def dap_forward(x: np.ndarray) -> np.ndarray:
    return pool_forward(x, pool_plan("d", x.shape[1]))


def aap_forward(x: np.ndarray) -> np.ndarray:
    return pool_forward(x, pool_plan("a", x.shape[1]))


class DirectionalPool:
    """Stateless layer wrapper around one pooling direction."""

    def __init__(self, direction: str):
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        self.direction = direction
        self._plan = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        _require_square(x)
        self._plan = pool_plan(self.direction, x.shape[1])
        return pool_forward(x, self._plan)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._plan is None:
            raise RuntimeError("backward called before forward")
        return pool_backward(grad_out, self._plan)


@lru_cache(maxsize=None)
def _sn_membership(length: int, window: int) -> np.ndarray:
    """M[l, j] = 1 where j belongs to the neighborhood of l.

    The neighborhood of l is the contiguous run of `window` positions
    l-back .. l-back+window-1 with back = (window-1)//2 (for window 4:
    l-1 .. l+2), clipped to the valid range and always containing l.
    """
    back = (window - 1) // 2
    m = np.zeros((length, length))
    for l in range(length):
        lo = max(0, l - back)
        hi = min(length - 1, l - back + window - 1)
        m[l, lo : hi + 1] = 1.0
    return m


class SpatialNorm:
    """Local energy normalization z_j = p_j / sqrt(1 + sum_{l in N_j} p_l^2).

    Applied per channel over the pooled column; the self-inclusive window
    bounds every output below 1 in magnitude (and keeps non-negative inputs
    inside [0, 1)).  Backward is the exact adjoint of the forward window
    map: positions j receive contributions from every l whose neighborhood
    contains j, each scaled by that l's own denominator.
    """

    def __init__(self, window: int = 4):
        if window < 1:
            raise ValueError("window must be >= 1")
        self.window = window
        self._cache = None

    def forward(self, p: np.ndarray) -> np.ndarray:
        n, length, one, c = p.shape
        if one != 1:
            raise ValueError(f"expected (n, L, 1, c), got {p.shape}")
        m = _sn_membership(length, self.window)
        flat = p[:, :, 0, :]
        denom = np.sqrt(1.0 + np.einsum("lj,njc->nlc", m, flat * flat))
        z = flat / denom
        self._cache = (flat, denom, z, m)
        return z[:, :, None, :]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        flat, denom, z, m = self._cache
        g = grad_out[:, :, 0, :]
        if g.shape != flat.shape:
            raise ValueError("grad shape does not match forward input")
        # dJ/dp_j = g_j / denom_j - p_j * sum_{l : j in N_l} g_l p_l / denom_l^3
        t = g * flat / denom**3
        grad_p = g / denom - flat * np.einsum("lj,nlc->njc", m, t)
        return grad_p[:, :, None, :]
