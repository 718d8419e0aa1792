"""Fixed-step RK4 integration of matrix/vector ODEs on the shared grid.

The right-hand side is any callable ``rhs(s, Y) -> dY`` with Y an ndarray;
coefficients needed between nodes are expected to be linear interpolations of
node paths (see :func:`mflq.grids.interp_path`), which is what every solver
in this package feeds in.  Backward integration reuses the forward stepper on
the time-reversed field, so there is a single integrator to test.

No adaptivity on purpose: Riccati blow-up must surface as NonFiniteState or a
solvability-monitor error, not be silently stepped over.
"""

from __future__ import annotations

import numpy as np

from .errors import NonFiniteState
from .grids import TimeGrid


def _rk4_sweep(rhs, start, grid: TimeGrid, post_step=None, label="integrate"):
    """Classic RK4 from node 0 to node K on ``grid`` times; returns the path."""
    dt = grid.dt
    times = grid.times()
    y = np.array(start, dtype=float)
    out = np.empty((grid.n_nodes,) + y.shape)
    out[0] = y
    if not np.all(np.isfinite(y)):
        raise NonFiniteState(label, 0)
    for k in range(grid.n_steps):
        t = times[k]
        k1 = rhs(t, y)
        k2 = rhs(t + 0.5 * dt, y + 0.5 * dt * k1)
        k3 = rhs(t + 0.5 * dt, y + 0.5 * dt * k2)
        k4 = rhs(t + dt, y + dt * k3)
        y = y + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if post_step is not None:
            y = post_step(k + 1, y)
        if not np.all(np.isfinite(y)):
            raise NonFiniteState(label, k + 1)
        out[k + 1] = y
    return out


def integrate_forward(rhs, initial, grid: TimeGrid, post_step=None,
                      label="integrate_forward"):
    """RK4 from t0 to T; path[0] is ``initial`` exactly."""
    return _rk4_sweep(rhs, initial, grid, post_step=post_step, label=label)


def integrate_backward(rhs, terminal, grid: TimeGrid, post_step=None,
                       label="integrate_backward"):
    """RK4 from T down to t0; path[-1] is ``terminal`` exactly.

    Implemented as a forward sweep of the time-reversed field
    ``z'(tau) = -rhs(t0 + T - tau, z)`` followed by flipping the node order.
    """
    t0, T = grid.t0, grid.T

    def reversed_rhs(tau, z):
        return -rhs(t0 + T - tau, z)

    rev_post = None
    if post_step is not None:
        def rev_post(j, y):
            return post_step(grid.n_steps - j, y)

    rev = _rk4_sweep(reversed_rhs, terminal, grid, post_step=rev_post,
                     label=label)
    return rev[::-1].copy()


def ode_residual(path, rhs, grid: TimeGrid) -> float:
    """Max over interior nodes of |central-difference derivative - rhs|_inf.

    A converged RK4 path scores O(dt^2) here (the central difference is the
    limiting term); an inconsistent path scores O(1).
    """
    times = grid.times()
    dt = grid.dt
    worst = 0.0
    for k in range(1, grid.n_steps):
        approx = (path[k + 1] - path[k - 1]) / (2.0 * dt)
        res = approx - rhs(times[k], path[k])
        worst = max(worst, float(np.max(np.abs(res))))
    return worst
