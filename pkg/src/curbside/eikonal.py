"""First-order fast marching solver for ||grad phi|| = C on a regular grid.

Heap entries are ordered by (value, flat cell index) so the result never depends
on tie order.
"""

from __future__ import annotations

import math

import numba
import numpy as np

C_MIN = 1e-3


class EikonalError(Exception):
    pass


class GradientUnavailableError(EikonalError):
    """All grid nodes around a query point are unreachable."""


@numba.njit(cache=True, inline="always")
def _less(v1, i1, v2, i2):
    return v1 < v2 or (v1 == v2 and i1 < i2)


@numba.njit(cache=True)
def _heap_push(hv, hi, size, v, idx):
    k = size
    hv[k] = v
    hi[k] = idx
    while k > 0:
        parent = (k - 1) >> 1
        if _less(hv[k], hi[k], hv[parent], hi[parent]):
            hv[k], hv[parent] = hv[parent], hv[k]
            hi[k], hi[parent] = hi[parent], hi[k]
            k = parent
        else:
            break
    return size + 1


@numba.njit(cache=True)
def _heap_pop(hv, hi, size):
    v, idx = hv[0], hi[0]
    size -= 1
    hv[0] = hv[size]
    hi[0] = hi[size]
    k = 0
    while True:
        left = 2 * k + 1
        if left >= size:
            break
        child = left
        right = left + 1
        if right < size and _less(hv[right], hi[right], hv[left], hi[left]):
            child = right
        if _less(hv[child], hi[child], hv[k], hi[k]):
            hv[k], hv[child] = hv[child], hv[k]
            hi[k], hi[child] = hi[child], hi[k]
            k = child
        else:
            break
    return v, idx, size


@numba.njit(cache=True)
def _march(cost, targets, h):
    ny, nx = cost.shape
    n = ny * nx
    flat_cost = cost.ravel()
    phi = np.full(n, np.inf)
    known = np.zeros(n, np.bool_)
    cap = 4 * n + targets.shape[0] + 1
    hv = np.empty(cap)
    hi = np.empty(cap, np.int64)
    size = 0
    for t in targets:
        if phi[t] != 0.0:
            phi[t] = 0.0
            size = _heap_push(hv, hi, size, 0.0, t)
    di = (-1, 1, 0, 0)
    dj = (0, 0, -1, 1)
    while size > 0:
        v, idx, size = _heap_pop(hv, hi, size)
        if known[idx] or v > phi[idx]:
            continue
        known[idx] = True
        i0 = idx // nx
        j0 = idx - i0 * nx
        for d in range(4):
            i = i0 + di[d]
            j = j0 + dj[d]
            if i < 0 or i >= ny or j < 0 or j >= nx:
                continue
            k = i * nx + j
            c = flat_cost[k]
            if known[k] or not np.isfinite(c):
                continue
            a = np.inf
            if j > 0 and known[k - 1]:
                a = phi[k - 1]
            if j < nx - 1 and known[k + 1] and phi[k + 1] < a:
                a = phi[k + 1]
            b = np.inf
            if i > 0 and known[k - nx]:
                b = phi[k - nx]
            if i < ny - 1 and known[k + nx] and phi[k + nx] < b:
                b = phi[k + nx]
            ch = c * h
            if a == np.inf and b == np.inf:
                continue
            if a == np.inf or b == np.inf or abs(a - b) >= ch:
                new = min(a, b) + ch
            else:
                new = 0.5 * (a + b + math.sqrt(2.0 * ch * ch - (a - b) * (a - b)))
            if new < phi[k]:
                phi[k] = new
                size = _heap_push(hv, hi, size, new, k)
    return phi.reshape(ny, nx)


def solve_eikonal(cost, targets, cell_size: float = 1.0, c_min: float = C_MIN) -> np.ndarray:
    """Arrival-cost field phi with phi = 0 on ``targets`` and ||grad phi|| = cost elsewhere.

    ``targets`` is an iterable of (row, col) cells. Cells unreachable through
    finite-cost cells are +inf.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a 2D grid")
    if np.isnan(cost).any() or (cost <= 0).any():
        raise ValueError("cost must be positive (or +inf)")
    targets = np.asarray(list(targets), dtype=np.int64).reshape(-1, 2)
    if len(targets) == 0:
        raise EikonalError("at least one target cell is required")
    ny, nx = cost.shape
    if np.any((targets[:, 0] < 0) | (targets[:, 0] >= ny) | (targets[:, 1] < 0) | (targets[:, 1] >= nx)):
        raise EikonalError("target outside the grid")
    if not np.all(np.isfinite(cost[targets[:, 0], targets[:, 1]])):
        raise EikonalError("target lies on an infinite-cost cell")
    floored = np.maximum(cost, c_min)
    flat = np.unique(targets[:, 0] * nx + targets[:, 1])
    return _march(np.ascontiguousarray(floored), flat, float(cell_size))


def _node_gradient(phi, i, j, h):
    ny, nx = phi.shape
    center = phi[i, j]
    out = [0.0, 0.0]
    for axis, (lo, hi) in enumerate((((i, j - 1), (i, j + 1)), ((i - 1, j), (i + 1, j)))):
        lv = phi[lo] if 0 <= lo[0] < ny and 0 <= lo[1] < nx else math.inf
        hv = phi[hi] if 0 <= hi[0] < ny and 0 <= hi[1] < nx else math.inf
        if math.isfinite(lv) and math.isfinite(hv):
            out[axis] = (hv - lv) / (2 * h)
        elif math.isfinite(hv):
            out[axis] = (hv - center) / h
        elif math.isfinite(lv):
            out[axis] = (center - lv) / h
    return out


def sample_gradient(phi: np.ndarray, point, cell_size: float = 1.0, origin=(0.0, 0.0)) -> np.ndarray:
    """Bilinearly interpolated central-difference gradient (d/dx, d/dy) of ``phi``.

    Node (i, j) sits at ``origin + (j, i) * cell_size``. Infinite nodes are dropped
    from the interpolation and one-sided differences replace central ones next to
    them. Points in the outer half of a boundary cell use the boundary nodes.
    """
    ny, nx = phi.shape
    u = (point[0] - origin[0]) / cell_size
    v = (point[1] - origin[1]) / cell_size
    if not (-0.5 <= u <= nx - 0.5 and -0.5 <= v <= ny - 0.5):
        raise ValueError(f"point {tuple(point)} lies outside the grid")
    u = min(max(u, 0.0), nx - 1.0)
    v = min(max(v, 0.0), ny - 1.0)
    j0 = min(int(math.floor(u)), nx - 2) if nx > 1 else 0
    i0 = min(int(math.floor(v)), ny - 2) if ny > 1 else 0
    fu, fv = u - j0, v - i0
    gx = gy = wsum = 0.0
    for di, dj, w in ((0, 0, (1 - fu) * (1 - fv)), (0, 1, fu * (1 - fv)),
                      (1, 0, (1 - fu) * fv), (1, 1, fu * fv)):
        i, j = i0 + di, j0 + dj
        if w == 0.0 or i >= ny or j >= nx or not math.isfinite(phi[i, j]):
            continue
        g = _node_gradient(phi, i, j, cell_size)
        gx += w * g[0]
        gy += w * g[1]
        wsum += w
    if wsum == 0.0:
        raise GradientUnavailableError(f"no finite potential around {tuple(point)}")
    return np.array([gx / wsum, gy / wsum])
