"""Uniform time grid and node-indexed coefficient paths.

A "path" is a plain ndarray with the node axis first: shape (K+1, r, c) for
matrix paths and (K+1, r) for vector paths, where K = grid.n_steps.  All
solvers share one grid so every backward/forward sweep is alignment-free.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BadGrid, OutOfRange


@dataclass(frozen=True)
class TimeGrid:
    """Uniform grid on [t0, T] with n_steps intervals (n_steps + 1 nodes)."""

    t0: float
    T: float
    n_steps: int

    def __post_init__(self):
        if not (self.T > self.t0):
            raise BadGrid(f"need t0 < T, got t0={self.t0}, T={self.T}")
        if int(self.n_steps) < 1 or int(self.n_steps) != self.n_steps:
            raise BadGrid(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return (self.T - self.t0) / self.n_steps

    @property
    def n_nodes(self) -> int:
        return self.n_steps + 1

    def times(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.n_nodes)


def broadcast_path(value, grid: TimeGrid, shape: tuple) -> np.ndarray:
    """Return a float path of shape (K+1, *shape).

    ``value`` is either a single sample (broadcast to every node, exactly) or
    already a full path with K+1 samples.
    """
    arr = np.asarray(value, dtype=float)
    full = (grid.n_nodes,) + tuple(shape)
    if arr.shape == tuple(shape):
        return np.broadcast_to(arr, full).copy()
    if arr.shape == full:
        return arr.copy()
    # scalars are accepted for 1x1-sample paths
    if arr.ndim == 0 and np.prod(shape, dtype=int) == 1:
        return np.full(full, float(arr))
    raise ValueError(f"cannot broadcast shape {arr.shape} to path {full}")


def interp_path(grid: TimeGrid, path: np.ndarray, s: float) -> np.ndarray:
    """Linear interpolation of a node-indexed path at time s.

    Values between nodes (RK4 half-steps) are the linear blend of the two
    bounding node samples; s is clamped to [t0, T] up to round-off slack.
    """
    u = (s - grid.t0) / grid.dt
    i = int(np.floor(u))
    if i < 0:
        i, w = 0, 0.0
    elif i >= grid.n_steps:
        i, w = grid.n_steps - 1, 1.0
    else:
        w = u - i
    if w == 0.0:
        return path[i]
    return (1.0 - w) * path[i] + w * path[i + 1]


def node_index(grid: TimeGrid, s: float) -> int:
    """Nearest node index for a time on the grid; OutOfRange outside [t0, T]."""
    eps = 1e-9 * max(1.0, abs(grid.T - grid.t0))
    if s < grid.t0 - eps or s > grid.T + eps:
        raise OutOfRange(f"t={s} outside [{grid.t0}, {grid.T}]")
    return int(np.clip(round((s - grid.t0) / grid.dt), 0, grid.n_steps))


def sym(M: np.ndarray) -> np.ndarray:
    """Symmetric part (M + M^T)/2; works on stacked (..., r, r) arrays."""
    return 0.5 * (M + np.swapaxes(M, -1, -2))
