"""Closed-contour dynamic programming on a warped map.

Index conventions: arrays are 0-based internally, ContourIndices are 1-based.
The energy of a transition between line n (index i) and line n+1 (index j) is the
sum of the two radial derivatives, and +inf when the jump exceeds delta.
"""

import logging
from typing import Optional, Tuple

import numpy as np

from shared.exceptions import NumericalError
from shared.models import ContourIndices, DPTables, EdgePolarity, EnergyTable

logger = logging.getLogger(__name__)

BRUTE_FORCE_LIMIT = 10_000_000
BRUTE_FORCE_CHUNK = 1 << 18


def orient_map(g: np.ndarray, polarity: EdgePolarity) -> np.ndarray:
    """Apply the edge polarity switch before solving."""
    g = np.asarray(g, dtype=np.float64)
    if EdgePolarity(polarity) is EdgePolarity.NEGATED:
        return -g
    return g


def _check_problem(num_lines: int, num_points: int, delta: int) -> None:
    if num_lines < 3:
        raise ValueError(f"DP needs at least 3 radial lines, got {num_lines}")
    if num_points < 2:
        raise ValueError(f"DP needs at least 2 points per line, got {num_points}")
    if not 1 <= delta < num_points:
        raise ValueError(f"delta must satisfy 1 <= delta < M={num_points}, got {delta}")


def _radial_derivative(g: np.ndarray) -> np.ndarray:
    """g(n,i) - g(n,i-1) with g(n,0) := g(n,1), i.e. zero at the innermost sample."""
    d = np.zeros_like(g)
    d[..., 1:] = g[..., 1:] - g[..., :-1]
    return d


def _band(num_points: int, delta: int) -> np.ndarray:
    i, j = np.indices((num_points, num_points))
    return np.abs(i - j) > delta


def _energy(g: np.ndarray, delta: int) -> np.ndarray:
    """Energy tensor for g of shape (..., N, M) -> (..., N, M, M)."""
    d = _radial_derivative(g)
    d_next = np.roll(d, -1, axis=-2)
    E = d[..., :, :, None] + d_next[..., :, None, :]
    E[..., _band(g.shape[-1], delta)] = np.inf
    return E


def _stage_energy(d: np.ndarray, n: int, band: np.ndarray) -> np.ndarray:
    """E between line n and its successor for a batch of derivatives d (B, N, M) -> (B, M, M)."""
    nxt = (n + 1) % d.shape[1]
    E = d[:, n, :, None] + d[:, nxt, None, :]
    E[:, band] = np.inf
    return E


def build_energy(g: np.ndarray, delta: int) -> EnergyTable:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"warped map must be N x M, got shape {g.shape}")
    _check_problem(g.shape[0], g.shape[1], delta)
    return EnergyTable(E=_energy(g, delta), delta=delta)


def _dp_tables(d: np.ndarray, delta: int, keep_values: bool = False) -> Tuple[Optional[np.ndarray], np.ndarray, np.ndarray]:
    """Index tables for a batch of radial derivatives d (B, N, M), plus the last value slab.

    U[n-1, b, i, k] is the cheapest chain v1=i, ..., v_{n+2}=k; argmins pick the smallest j.
    Only the running U slab is held unless keep_values asks for every stage.
    """
    num_lines = d.shape[1]
    band = _band(d.shape[2], delta)
    U_stages = []
    I_stages = []
    cand = _stage_energy(d, 0, band)[:, :, :, None] + _stage_energy(d, 1, band)[:, None, :, :]
    U = cand.min(axis=2)
    I_stages.append(cand.argmin(axis=2))
    if keep_values:
        U_stages.append(U)
    for n in range(2, num_lines):
        cand = U[:, :, :, None] + _stage_energy(d, n, band)[:, None, :, :]
        U = cand.min(axis=2)
        I_stages.append(cand.argmin(axis=2))
        if keep_values:
            U_stages.append(U)
    return (np.stack(U_stages) if keep_values else None), np.stack(I_stages), U


def dp_tables(g: np.ndarray, delta: int) -> DPTables:
    """Value and index tables for a single warped map (1-based indices in I)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"warped map must be N x M, got shape {g.shape}")
    _check_problem(g.shape[0], g.shape[1], delta)
    U, I, _ = _dp_tables(_radial_derivative(g)[None], delta, keep_values=True)
    return DPTables(U=U[:, 0], I=I[:, 0] + 1)


def dp_solve_batch(g: np.ndarray, delta: int) -> Tuple[np.ndarray, np.ndarray]:
    """Solve B independent contours. Returns 1-based indices (B, N) and costs (B,)."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 3:
        raise ValueError(f"batched warped map must be B x N x M, got shape {g.shape}")
    batch, num_lines, num_points = g.shape
    _check_problem(num_lines, num_points, delta)

    _, I, last = _dp_tables(_radial_derivative(g), delta)
    diag = last[:, np.arange(num_points), np.arange(num_points)]
    v1 = diag.argmin(axis=1)
    cost = diag[np.arange(batch), v1]
    if not np.all(np.isfinite(cost)):
        raise NumericalError("no closed contour with finite cost exists")

    rows = np.arange(batch)
    v = np.empty((batch, num_lines), dtype=np.int64)
    v[:, 0] = v1
    v[:, -1] = I[-1][rows, v1, v1]
    for n in range(num_lines - 2, 0, -1):
        v[:, n] = I[n - 1][rows, v1, v[:, n + 1]]
    return v + 1, cost


def dp_solve(g: np.ndarray, delta: int) -> Tuple[ContourIndices, float]:
    """Minimum-cost closed contour on a single N x M warped map."""
    g = np.asarray(g, dtype=np.float64)
    if g.ndim != 2:
        raise ValueError(f"warped map must be N x M, got shape {g.shape}")
    v, cost = dp_solve_batch(g[None], delta)
    return ContourIndices(v=v[0], num_points=g.shape[1]), float(cost[0])


def brute_force_solve(g: np.ndarray, delta: int) -> Tuple[ContourIndices, float]:
    """Exhaustive minimum over all M**N contours; ties go to the lexicographically smallest."""
    table = build_energy(g, delta)
    E = table.E
    num_lines, num_points = E.shape[0], E.shape[1]
    total = num_points ** num_lines
    if total > BRUTE_FORCE_LIMIT:
        raise ValueError(f"brute force over {total} contours exceeds the {BRUTE_FORCE_LIMIT} guard")

    best_cost = np.inf
    best_index = 0
    for start in range(0, total, BRUTE_FORCE_CHUNK):
        flat = np.arange(start, min(start + BRUTE_FORCE_CHUNK, total))
        combos = np.unravel_index(flat, (num_points,) * num_lines)
        cost = E[0, combos[0], combos[1]]
        for n in range(1, num_lines):
            cost = cost + E[n, combos[n], combos[(n + 1) % num_lines]]
        k = int(cost.argmin())
        if cost[k] < best_cost:
            best_cost = float(cost[k])
            best_index = int(flat[k])

    if not np.isfinite(best_cost):
        raise NumericalError("no closed contour with finite cost exists")
    v = np.array(np.unravel_index(best_index, (num_points,) * num_lines)) + 1
    return ContourIndices(v=v, num_points=num_points), best_cost


def contour_cost(g: np.ndarray, v: ContourIndices, delta: int) -> float:
    """Closed-contour cost of v, +inf when any consecutive jump exceeds delta."""
    E = _energy(np.asarray(g, dtype=np.float64), delta)
    idx = np.asarray(v.v) - 1
    num_lines = E.shape[0]
    cost = E[0, idx[0], idx[1]]
    for n in range(1, num_lines):
        cost = cost + E[n, idx[n], idx[(n + 1) % num_lines]]
    return float(cost)


def smooth_indices(v: ContourIndices, window: int) -> ContourIndices:
    """Circular moving average of the indices, rounded half up and clamped to 1..M."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"smoothing window must be odd and positive, got {window}")
    idx = np.asarray(v.v, dtype=np.int64)
    if window == 1:
        return ContourIndices(v=idx, num_points=v.num_points)

    half = window // 2
    padded = idx[np.arange(-half, idx.size + half) % idx.size]
    sums = np.convolve(padded, np.ones(window, dtype=np.int64), mode="valid")
    # floor(s / w + 1/2) in exact integer arithmetic
    rounded = (2 * sums + window) // (2 * window)
    return ContourIndices(v=np.clip(rounded, 1, v.num_points), num_points=v.num_points)


def smooth_batch(v: np.ndarray, window: int, num_points: int) -> np.ndarray:
    """smooth_indices over the rows of a (B, N) index array"""
    return np.stack([
        smooth_indices(ContourIndices(v=row, num_points=num_points), window).v for row in v
    ])
