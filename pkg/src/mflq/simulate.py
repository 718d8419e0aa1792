"""Euler-Maruyama Monte Carlo of closed-loop systems and cost estimation.

The mean-field closure is exact: EX solves a deterministic ODE (RK4 on the
shared grid) and every path sees that same mean, so paths are independent
work items.  Gaussian draws come from counter-based Philox streams keyed by
(seed, chunk start) with a fixed chunk size, which makes every batch a pure
function of (problem, solutions, n_paths, seed) regardless of how many
worker threads process the chunks (MFLQ_THREADS, default 1).
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace as dc_replace

import numpy as np

from .errors import NonFiniteState
from .follower import (FollowerAdjoint, FollowerSolution, closed_loop_matrices,
                       solve_eta1)
from .leader import (AugmentedCoefficients, EquilibriumField, LeaderSolution,
                     equilibrium_field, follower_outcome)
from .odecore import integrate_forward
from .problem import ValidatedProblem, validate

CHUNK = 4096  # fixed chunk of paths per RNG stream; never depends on threads


def _n_workers() -> int:
    raw = os.environ.get("MFLQ_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def draw_noise(seed: int, n_paths: int, n_steps: int, n_state: int):
    """Standard-normal initial draws and Brownian increments.

    Returns (z0, dw): z0 has shape (n_paths, n_state) and feeds the initial
    law, dw has shape (n_paths, n_steps) and is already scaled by sqrt(dt)
    by the caller.  Chunk c uses the Philox stream keyed [seed, c*CHUNK], so
    the arrays depend only on (seed, n_paths) and chunk processing order is
    irrelevant.
    """
    z0 = np.empty((n_paths, n_state))
    dw = np.empty((n_paths, n_steps))
    for start in range(0, n_paths, CHUNK):
        stop = min(start + CHUNK, n_paths)
        gen = np.random.Generator(np.random.Philox(key=[seed, start]))
        z0[start:stop] = gen.standard_normal((stop - start, n_state))
        dw[start:stop] = gen.standard_normal((stop - start, n_steps))
    return z0, dw


def _cov_sqrt(cov: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    return vecs @ np.diag(np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


@dataclass
class SimBatch:
    """One Monte Carlo ensemble with realized controls and per-path costs."""

    kind: str                # "equilibrium" | "follower" | "perturbed"
    n_paths: int
    seed: int
    states: np.ndarray       # (paths, K+1, d); d = 2n at equilibrium, else n
    u1: np.ndarray           # (paths, K+1, m1)
    u2: np.ndarray           # (paths, K+1, m2)
    mean_states: np.ndarray  # (K+1, d) exact mean path
    mean_u1: np.ndarray
    mean_u2: np.ndarray
    J1: np.ndarray           # per-path costs
    J2: np.ndarray
    J1_mean: float = 0.0
    J1_se: float = 0.0
    J2_mean: float = 0.0
    J2_se: float = 0.0

    def x(self, n: int) -> np.ndarray:
        """Physical state block (first n components)."""
        return self.states[..., :n]

    def mean_x(self, n: int) -> np.ndarray:
        return self.mean_states[..., :n]


def cost_paths(prob: ValidatedProblem, x, u1, u2, ex, eu1, eu2):
    """Per-path costs (J1, J2) of both players via trapezoid quadrature.

    Realized (x, u1, u2) feed the unhatted quadratic/linear terms per path;
    the hatted weights act on the exact mean channels (ex, eu1, eu2), which
    are shared by all paths.
    """
    prob = validate(prob)
    dt = prob.grid.dt
    out = []
    for w in (prob.player1, prob.player2):
        run = (np.einsum("pki,kij,pkj->pk", x, w.Q, x)
               + 2.0 * np.einsum("pki,kij,pkj->pk", u1, w.S1, x)
               + 2.0 * np.einsum("pki,kij,pkj->pk", u2, w.S2, x)
               + np.einsum("pki,kij,pkj->pk", u1, w.R11, u1)
               + 2.0 * np.einsum("pki,kij,pkj->pk", u1, w.R21, u2)
               + np.einsum("pki,kij,pkj->pk", u2, w.R22, u2)
               + 2.0 * np.einsum("pki,ki->pk", x, w.q)
               + 2.0 * np.einsum("pki,ki->pk", u1, w.rho1)
               + 2.0 * np.einsum("pki,ki->pk", u2, w.rho2))
        mean_run = (np.einsum("ki,kij,kj->k", ex, w.Q_hat, ex)
                    + 2.0 * np.einsum("ki,kij,kj->k", eu1, w.S1_hat, ex)
                    + 2.0 * np.einsum("ki,kij,kj->k", eu2, w.S2_hat, ex)
                    + np.einsum("ki,kij,kj->k", eu1, w.R11_hat, eu1)
                    + 2.0 * np.einsum("ki,kij,kj->k", eu1, w.R21_hat, eu2)
                    + np.einsum("ki,kij,kj->k", eu2, w.R22_hat, eu2))
        xT, exT = x[:, -1], ex[-1]
        terminal = (np.einsum("pi,ij,pj->p", xT, w.G, xT)
                    + 2.0 * xT @ w.g
                    + float(exT @ w.G_hat @ exT) + 2.0 * float(exT @ w.g_hat))
        out.append(np.trapezoid(run + mean_run[None, :], dx=dt, axis=1)
                   + terminal)
    return out[0], out[1]


def estimate_costs(prob: ValidatedProblem, batch: SimBatch):
    """((J1 mean, J1 SE), (J2 mean, J2 SE)) from the batch's per-path costs."""
    def stat(J):
        m = float(np.mean(J))
        se = float(np.std(J, ddof=1) / np.sqrt(len(J))) if len(J) > 1 else 0.0
        return m, se
    return stat(batch.J1), stat(batch.J2)


def _finalize(prob, batch):
    (batch.J1_mean, batch.J1_se), (batch.J2_mean, batch.J2_se) = \
        estimate_costs(prob, batch)
    return batch


def _euler(states0, A_dev, A_mean, C_dev, C_mean, b_path, d_path, mean_path,
           dw, dt, label):
    """Vectorized Euler-Maruyama; paths along axis 0, one Gaussian per step."""
    n_paths = states0.shape[0]
    K = dw.shape[1]
    out = np.empty((n_paths, K + 1, states0.shape[1]))
    out[:, 0] = states0
    sdt = np.sqrt(dt)
    X = states0
    for k in range(K):
        dev = X - mean_path[k]
        drift = dev @ A_dev[k].T + mean_path[k] @ A_mean[k].T + b_path[k]
        diff = dev @ C_dev[k].T + mean_path[k] @ C_mean[k].T + d_path[k]
        X = X + dt * drift + (sdt * dw[:, k])[:, None] * diff
        if not np.all(np.isfinite(X)):
            bad = np.argwhere(~np.isfinite(X))[0]
            raise NonFiniteState(label, k + 1, path=int(bad[0]))
        out[:, k + 1] = X
    return out


def _run_chunked(worker, n_paths):
    workers = _n_workers()
    spans = [(s, min(s + CHUNK, n_paths)) for s in range(0, n_paths, CHUNK)]
    if workers <= 1 or len(spans) <= 1:
        for span in spans:
            worker(span)
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(worker, spans))


def propagate_mean(field: EquilibriumField, X0: np.ndarray) -> np.ndarray:
    """Deterministic mean path: dEX = (A_mean EX + b_mean) ds, RK4."""
    from .grids import interp_path
    grid = field.grid

    def rhs(s, m):
        return interp_path(grid, field.A_mean, s) @ m \
            + interp_path(grid, field.b_mean, s)

    return integrate_forward(rhs, X0, grid, label="mean path")


def simulate_paths(prob: ValidatedProblem, aug: AugmentedCoefficients,
                   fsol: FollowerSolution, lsol: LeaderSolution,
                   n_paths: int, seed: int, noise=None) -> SimBatch:
    """Simulate the equilibrium augmented state and both realized controls."""
    prob = validate(prob)
    grid = prob.grid
    n = prob.n
    field = equilibrium_field(aug, lsol)
    X0 = np.concatenate([prob.xi_mean, np.zeros(n)])
    EX = propagate_mean(field, X0)
    outcome = follower_outcome(prob, fsol, aug, lsol)

    mean_u2 = (np.einsum("kij,kj->ki", lsol.Theta_mean, EX) + lsol.V2_mean)
    mean_u1 = (np.einsum("kij,kj->ki", outcome.Theta1_hat_aug, EX)
               + outcome.V1_mean)

    z0, dw = noise if noise is not None \
        else draw_noise(seed, n_paths, grid.n_steps, n)
    sq = _cov_sqrt(prob.xi_cov)
    states = np.empty((n_paths, grid.n_nodes, 2 * n))
    u1 = np.empty((n_paths, grid.n_nodes, prob.m1))
    u2 = np.empty((n_paths, grid.n_nodes, prob.m2))

    def worker(span):
        lo, hi = span
        x0 = prob.xi_mean + z0[lo:hi] @ sq.T
        s0 = np.concatenate([x0, np.zeros((hi - lo, n))], axis=1)
        S = _euler(s0, field.A_dev, field.A_mean, field.C_dev, field.C_mean,
                   field.b_mean, field.d_mean, EX, dw[lo:hi], grid.dt,
                   "equilibrium")
        dev = S - EX[None]
        states[lo:hi] = S
        u2[lo:hi] = np.einsum("kij,pkj->pki", lsol.Theta_dev, dev) + mean_u2
        u1[lo:hi] = (np.einsum("kij,pkj->pki", outcome.Theta1_aug, dev)
                     + mean_u1)

    _run_chunked(worker, n_paths)
    J1, J2 = cost_paths(prob, states[..., :n], u1, u2, EX[:, :n],
                        mean_u1, mean_u2)
    batch = SimBatch(kind="equilibrium", n_paths=n_paths, seed=seed,
                     states=states, u1=u1, u2=u2, mean_states=EX,
                     mean_u1=mean_u1, mean_u2=mean_u2, J1=J1, J2=J2)
    return _finalize(prob, batch)


def follower_input_paths(prob, adj: FollowerAdjoint, u2_path):
    """Deterministic drift/diffusion offsets of the follower closed loop."""
    B2s = prob.B2 + prob.B2_hat
    D2s = prob.D2 + prob.D2_hat
    B1s = prob.B1 + prob.B1_hat
    D1s = prob.D1 + prob.D1_hat
    ev = lambda M, v: np.einsum("kij,kj->ki", M, v)
    b_path = ev(B2s, u2_path) + ev(B1s, adj.vbar1) + prob.b
    d_path = ev(D2s, u2_path) + ev(D1s, adj.vbar1) + prob.sigma
    return b_path, d_path


def simulate_follower_paths(prob: ValidatedProblem, fsol: FollowerSolution,
                            adj: FollowerAdjoint, u2_path: np.ndarray,
                            n_paths: int, seed: int, noise=None) -> SimBatch:
    """Follower closed loop under a deterministic leader path u2."""
    prob = validate(prob)
    grid = prob.grid
    n = prob.n
    u2_path = np.asarray(u2_path, float).reshape(grid.n_nodes, prob.m2)
    A_dev, A_mean, C_dev, C_mean = closed_loop_matrices(prob, fsol)
    b_path, d_path = follower_input_paths(prob, adj, u2_path)

    from .grids import interp_path

    def rhs(s, m):
        return interp_path(grid, A_mean, s) @ m + interp_path(grid, b_path, s)

    Ex = integrate_forward(rhs, prob.xi_mean, grid, label="follower mean")
    mean_u1 = np.einsum("kij,kj->ki", fsol.Theta1_hat, Ex) + adj.vbar1

    z0, dw = noise if noise is not None \
        else draw_noise(seed, n_paths, grid.n_steps, n)
    sq = _cov_sqrt(prob.xi_cov)
    states = np.empty((n_paths, grid.n_nodes, n))
    u1 = np.empty((n_paths, grid.n_nodes, prob.m1))

    def worker(span):
        lo, hi = span
        x0 = prob.xi_mean + z0[lo:hi] @ sq.T
        S = _euler(x0, A_dev, A_mean, C_dev, C_mean, b_path, d_path, Ex,
                   dw[lo:hi], grid.dt, "follower")
        states[lo:hi] = S
        u1[lo:hi] = (np.einsum("kij,pkj->pki", fsol.Theta1, S - Ex[None])
                     + mean_u1)

    _run_chunked(worker, n_paths)
    u2 = np.broadcast_to(u2_path, (n_paths,) + u2_path.shape).copy()
    J1, J2 = cost_paths(prob, states, u1, u2, Ex, mean_u1, u2_path)
    batch = SimBatch(kind="follower", n_paths=n_paths, seed=seed,
                     states=states, u1=u1, u2=u2, mean_states=Ex,
                     mean_u1=mean_u1, mean_u2=u2_path, J1=J1, J2=J2)
    return _finalize(prob, batch)


@dataclass
class ControlPerturbation:
    """Deterministic control direction added to one player's equilibrium.

    ``delta`` is a (K+1, m) path.  For the leader (player 2) the follower's
    best response is re-solved against the shifted control, which under
    deterministic directions reduces to a backward ODE for the offset shift
    and a deterministic shift of vbar1.
    """

    player: int
    delta: np.ndarray


def perturbation_from_mean_feedback(gain_path, mean_states, offset=None):
    """Turn a feedback-on-mean-path perturbation into a direction path."""
    delta = np.einsum("kij,kj->ki", gain_path, mean_states)
    if offset is not None:
        delta = delta + offset
    return delta


def _strip_data(prob):
    zero_vec = {"b": np.zeros_like(prob.b), "sigma": np.zeros_like(prob.sigma)}

    def strip_w(w):
        return dc_replace(w, q=np.zeros_like(w.q), rho1=np.zeros_like(w.rho1),
                          rho2=np.zeros_like(w.rho2), g=np.zeros_like(w.g),
                          g_hat=np.zeros_like(w.g_hat))

    return validate(dc_replace(prob, player1=strip_w(prob.player1),
                               player2=strip_w(prob.player2),
                               validated=False, **zero_vec))


def delta_response(prob: ValidatedProblem, fsol: FollowerSolution,
                   pert: ControlPerturbation):
    """Deterministic response pieces (delta_u1_offset, delta_u2) of a direction.

    Leader directions trigger the follower's re-solve (offset ODE with zero
    data); follower directions leave the leader frozen and feed the state
    open loop.
    """
    grid = prob.grid
    if pert.player == 2:
        delta_u2 = np.asarray(pert.delta, float).reshape(grid.n_nodes, prob.m2)
        hom = _strip_data(prob)
        adj = solve_eta1(hom, fsol, delta_u2)
        return adj.vbar1, delta_u2
    delta_u1 = np.asarray(pert.delta, float).reshape(grid.n_nodes, prob.m1)
    return delta_u1, np.zeros((grid.n_nodes, prob.m2))


def _delta_state(prob, fsol, pert, dv1, du2, dw):
    """Simulate the state shift per path (same Brownian increments)."""
    grid = prob.grid
    n = prob.n
    ev = lambda M, v: np.einsum("kij,kj->ki", M, v)
    if pert.player == 2:
        A_dev, A_mean, C_dev, C_mean = closed_loop_matrices(prob, fsol)
        b_path = ev(prob.B1 + prob.B1_hat, dv1) + ev(prob.B2 + prob.B2_hat, du2)
        d_path = ev(prob.D1 + prob.D1_hat, dv1) + ev(prob.D2 + prob.D2_hat, du2)
    else:
        A_dev, A_mean = prob.A, prob.A + prob.A_hat
        C_dev, C_mean = prob.C, prob.C + prob.C_hat
        b_path = ev(prob.B1 + prob.B1_hat, dv1)
        d_path = ev(prob.D1 + prob.D1_hat, dv1)

    from .grids import interp_path

    def rhs(s, m):
        return interp_path(grid, A_mean, s) @ m + interp_path(grid, b_path, s)

    Edx = integrate_forward(rhs, np.zeros(n), grid, label="delta mean")
    n_paths = dw.shape[0]
    dx = _euler(np.zeros((n_paths, n)), A_dev, A_mean, C_dev, C_mean,
                b_path, d_path, Edx, dw, grid.dt, "delta state")
    if pert.player == 2:
        Edu1 = ev(fsol.Theta1_hat, Edx) + dv1
        du1 = (np.einsum("kij,pkj->pki", fsol.Theta1, dx - Edx[None])
               + Edu1[None])
    else:
        Edu1 = dv1
        du1 = np.broadcast_to(dv1, (n_paths,) + dv1.shape).copy()
    return dx, Edx, du1, Edu1


def simulate_with_control(prob: ValidatedProblem, fsol: FollowerSolution,
                          aug: AugmentedCoefficients, lsol: LeaderSolution,
                          pert: ControlPerturbation = None, eps: float = 0.0,
                          n_paths: int = 10000, seed: int = 42) -> SimBatch:
    """Equilibrium batch with one player's control shifted by eps * delta.

    eps == 0 (or no perturbation) reproduces :func:`simulate_paths` output
    bit for bit.  Common random numbers: the same Philox draws drive the
    baseline and the shifted run.
    """
    prob = validate(prob)
    base = simulate_paths(prob, aug, fsol, lsol, n_paths, seed)
    if pert is None or eps == 0.0:
        return base
    n = prob.n
    _, dw = draw_noise(seed, n_paths, prob.grid.n_steps, n)
    dv1, du2 = delta_response(prob, fsol, pert)
    dx, Edx, du1, Edu1 = _delta_state(prob, fsol, pert, dv1, du2, dw)

    x = base.states[..., :n] + eps * dx
    u1 = base.u1 + eps * du1
    u2 = base.u2 + eps * du2[None]
    ex = base.mean_states[:, :n] + eps * Edx
    eu1 = base.mean_u1 + eps * Edu1
    eu2 = base.mean_u2 + eps * du2
    J1, J2 = cost_paths(prob, x, u1, u2, ex, eu1, eu2)
    batch = SimBatch(kind="perturbed", n_paths=n_paths, seed=seed, states=x,
                     u1=u1, u2=u2, mean_states=ex, mean_u1=eu1, mean_u2=eu2,
                     J1=J1, J2=J2)
    return _finalize(prob, batch)


def perturbation_quadratics(prob, fsol, aug, lsol, pert, n_paths, seed,
                            base: SimBatch = None):
    """Per-path coefficients (b1, c1, b2, c2) with J_i(eps) = J_i(0) + b_i
    eps + c_i eps^2 pathwise (exact: dynamics and costs are affine/quadratic
    in the shift).  Shares the baseline batch across directions."""
    prob = validate(prob)
    if base is None:
        base = simulate_paths(prob, aug, fsol, lsol, n_paths, seed)
    n = prob.n
    _, dw = draw_noise(seed, n_paths, prob.grid.n_steps, n)
    dv1, du2 = delta_response(prob, fsol, pert)
    dx, Edx, du1, Edu1 = _delta_state(prob, fsol, pert, dv1, du2, dw)

    def costs(e):
        return cost_paths(prob, base.states[..., :n] + e * dx,
                          base.u1 + e * du1, base.u2 + e * du2[None],
                          base.mean_states[:, :n] + e * Edx,
                          base.mean_u1 + e * Edu1, base.mean_u2 + e * du2)

    J1p, J2p = costs(1.0)
    J1m, J2m = costs(-1.0)
    b1 = 0.5 * (J1p - J1m)
    c1 = 0.5 * (J1p + J1m) - base.J1
    b2 = 0.5 * (J2p - J2m)
    c2 = 0.5 * (J2p + J2m) - base.J2
    return base, (b1, c1, b2, c2)
