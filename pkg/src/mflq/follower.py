"""Follower side: Riccati pair, feedback gains, offset ODE, value function.

Given the leader's control as an exogenous deterministic path, the follower's
closed-loop problem is solved by two backward matrix Riccati equations.  With
``Sig1 = R11 + D1' P1 D1`` the deviation-channel equation is::

    P1' + P1 A + A' P1 + C' P1 C + Q
        - (P1 B1 + C' P1 D1 + S1')  Sig1^{-1} (B1' P1 + D1' P1 C + S1) = 0,
    P1(T) = G,

and the mean-channel equation for Pi1 is the same with every coefficient
replaced by its hat-augmented sum (A+A_hat, ...), the inner P1-quadratic kept
in P1, and Sig1_hat = R11 + R11_hat + (D1+D1_hat)' P1 (D1+D1_hat); terminal
Pi1(T) = G + G_hat.  Feedback gains::

    Theta1     = -Sig1^{-1}     (B1' P1 + D1' P1 C + S1)
    Theta1_hat = -Sig1_hat^{-1} ((B1+B1_hat)' Pi1 + (D1+D1_hat)' P1 (C+C_hat)
                                 + S1 + S1_hat)

Both Sigma monitors must stay positive definite; no pseudo-inverse branch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import OutOfRange, SolvabilityError
from .grids import TimeGrid, interp_path, sym
from .odecore import integrate_backward
from .problem import ValidatedProblem, validate

EPS_PD = 1e-8  # smallest admissible eigenvalue of a Sigma monitor


def _tp(path):
    return np.swapaxes(path, -1, -2)


def _min_eig_sym(M):
    return float(np.linalg.eigvalsh(sym(M)).min())


@dataclass
class FollowerSolution:
    """Riccati paths, Sigma monitors and gains on the problem grid."""

    grid: TimeGrid
    P1: np.ndarray          # (K+1, n, n)
    Pi1: np.ndarray         # (K+1, n, n)
    Sigma1: np.ndarray      # (K+1, m1, m1)
    Sigma1_hat: np.ndarray  # (K+1, m1, m1)
    Theta1: np.ndarray      # (K+1, m1, n)
    Theta1_hat: np.ndarray  # (K+1, m1, n)


@dataclass
class FollowerAdjoint:
    """Deterministic offset eta1 and open-loop control offset vbar1."""

    eta1: np.ndarray   # (K+1, n)
    vbar1: np.ndarray  # (K+1, m1)


def solve_follower_riccati(prob: ValidatedProblem, eps_pd: float = EPS_PD
                           ) -> FollowerSolution:
    """Integrate P1 and Pi1 backward as one stacked RK4 sweep.

    A joint sweep (state (P1, Pi1)) lets Pi1 see P1's stage values rather
    than an interpolated path, so when the hatted data vanish the two
    components evolve through identical arithmetic and agree to round-off.
    Both components are symmetrized after every step.
    """
    prob = validate(prob)
    grid = prob.grid
    w = prob.player1

    def at(path, s):
        return interp_path(grid, path, s)

    def rhs(s, Y):
        P, Pi = Y[0], Y[1]
        A, B1, C, D1 = at(prob.A, s), at(prob.B1, s), at(prob.C, s), at(prob.D1, s)
        Q, S1, R11 = at(w.Q, s), at(w.S1, s), at(w.R11, s)
        Sig = R11 + D1.T @ P @ D1
        K = B1.T @ P + D1.T @ P @ C + S1
        Ah = A + at(prob.A_hat, s)
        Bh = B1 + at(prob.B1_hat, s)
        Ch = C + at(prob.C_hat, s)
        Dh = D1 + at(prob.D1_hat, s)
        Qh = Q + at(w.Q_hat, s)
        Sh = S1 + at(w.S1_hat, s)
        Rh = R11 + at(w.R11_hat, s)
        Sig_h = Rh + Dh.T @ P @ Dh
        Kh = Bh.T @ Pi + Dh.T @ P @ Ch + Sh
        try:
            KS = np.linalg.solve(Sig, K)
            KSh = np.linalg.solve(Sig_h, Kh)
        except np.linalg.LinAlgError:
            raise SolvabilityError("Sigma1/Sigma1_hat", s, float("nan")) from None
        dP = -(P @ A + A.T @ P + C.T @ P @ C + Q - K.T @ KS)
        dPi = -(Pi @ Ah + Ah.T @ Pi + Ch.T @ P @ Ch + Qh - Kh.T @ KSh)
        return np.stack([dP, dPi])

    terminal = np.stack([w.G, w.G + w.G_hat])
    path = integrate_backward(rhs, terminal, grid,
                              post_step=lambda k, Y: sym(Y), label="P1/Pi1")
    P1, Pi1 = path[:, 0], path[:, 1]

    Sigma1 = w.R11 + _tp(prob.D1) @ P1 @ prob.D1
    Dh = prob.D1 + prob.D1_hat
    Sigma1_hat = w.R11 + w.R11_hat + _tp(Dh) @ P1 @ Dh

    times = grid.times()
    for name, Sig in (("Sigma1", Sigma1), ("Sigma1_hat", Sigma1_hat)):
        eigs = np.linalg.eigvalsh(sym(Sig))
        kbad = int(np.argmin(eigs[:, 0]))
        if eigs[kbad, 0] < eps_pd:
            raise SolvabilityError(name, float(times[kbad]),
                                   float(eigs[kbad, 0]))

    K1 = _tp(prob.B1) @ P1 + _tp(prob.D1) @ P1 @ prob.C + w.S1
    Theta1 = -np.linalg.solve(Sigma1, K1)
    Bh = prob.B1 + prob.B1_hat
    Ch = prob.C + prob.C_hat
    K1h = _tp(Bh) @ Pi1 + _tp(Dh) @ P1 @ Ch + w.S1 + w.S1_hat
    Theta1_hat = -np.linalg.solve(Sigma1_hat, K1h)

    return FollowerSolution(grid=grid, P1=P1, Pi1=Pi1, Sigma1=Sigma1,
                            Sigma1_hat=Sigma1_hat, Theta1=Theta1,
                            Theta1_hat=Theta1_hat)


def follower_gain_at(sol: FollowerSolution, s: float):
    """(Theta1(s), Theta1_hat(s)) by linear interpolation of the gain paths."""
    g = sol.grid
    eps = 1e-9 * max(1.0, abs(g.T - g.t0))
    if s < g.t0 - eps or s > g.T + eps:
        raise OutOfRange(f"t={s} outside [{g.t0}, {g.T}]")
    return interp_path(g, sol.Theta1, s), interp_path(g, sol.Theta1_hat, s)


def closed_loop_matrices(prob, fsol: FollowerSolution):
    """Follower closed-loop drift/diffusion matrices, deviation and mean.

    Returns (A_dev, A_mean, C_dev, C_mean) as node paths:
    A_dev = A + B1 Theta1, A_mean = A + A_hat + (B1+B1_hat) Theta1_hat, and
    the C analogues with D1-blocks.
    """
    A_dev = prob.A + prob.B1 @ fsol.Theta1
    A_mean = prob.A + prob.A_hat + (prob.B1 + prob.B1_hat) @ fsol.Theta1_hat
    C_dev = prob.C + prob.D1 @ fsol.Theta1
    C_mean = prob.C + prob.C_hat + (prob.D1 + prob.D1_hat) @ fsol.Theta1_hat
    return A_dev, A_mean, C_dev, C_mean


def solve_eta1(prob: ValidatedProblem, fsol: FollowerSolution,
               u2_mean: np.ndarray, u2_dev_gain=None) -> FollowerAdjoint:
    """Backward offset ODE for eta1 and the control offset vbar1.

    The leader input must be a deterministic path (u2 == Eu2); with all
    inhomogeneous data deterministic the martingale part of the offset
    equation vanishes and only the mean channel survives::

        -eta1' = A_mean' eta1 + N_mean Eu2 + f_mean,   eta1(T) = g + g_hat,

    where N_mean = Pi1 (B2+B2_hat) + (C+C_hat)' P1 (D2+D2_hat)
    + (S2+S2_hat)' + Theta1_hat' [R21 + R21_hat + (D1+D1_hat)' P1 (D2+D2_hat)]
    and f_mean = Pi1 b + C_mean' P1 sigma + Theta1_hat' rho1 + q.  Then::

        vbar1 = -Sig1_hat^{-1} [(B1+B1_hat)' eta1 + (D1+D1_hat)' P1 sigma
                + rho1 + (R21 + R21_hat + (D1+D1_hat)' P1 (D2+D2_hat)) Eu2].

    Deviation-feedback leader inputs are handled by the leader pipeline, not
    here; passing a nonzero ``u2_dev_gain`` raises ValueError.
    """
    prob = validate(prob)
    if u2_dev_gain is not None and np.any(np.asarray(u2_dev_gain) != 0.0):
        raise ValueError("deviation-feedback u2 is handled by the leader "
                         "pipeline; pass a deterministic path only")
    grid = prob.grid
    w = prob.player1
    u2 = np.asarray(u2_mean, dtype=float).reshape(grid.n_nodes, prob.m2)

    Dh = prob.D1 + prob.D1_hat
    B2h = prob.B2 + prob.B2_hat
    D2h = prob.D2 + prob.D2_hat
    Ch = prob.C + prob.C_hat
    _, A_mean, _, C_mean = closed_loop_matrices(prob, fsol)
    cross = w.R21 + w.R21_hat + _tp(Dh) @ fsol.P1 @ D2h
    N_mean = (fsol.Pi1 @ B2h + _tp(Ch) @ fsol.P1 @ D2h
              + _tp(w.S2 + w.S2_hat) + _tp(fsol.Theta1_hat) @ cross)
    f_mean = ((fsol.Pi1 @ prob.b[..., None])[..., 0]
              + (_tp(C_mean) @ fsol.P1 @ prob.sigma[..., None])[..., 0]
              + (_tp(fsol.Theta1_hat) @ w.rho1[..., None])[..., 0]
              + w.q)
    drive = (N_mean @ u2[..., None])[..., 0] + f_mean

    def rhs(s, e):
        return -(interp_path(grid, A_mean, s).T @ e
                 + interp_path(grid, drive, s))

    eta1 = integrate_backward(rhs, w.g + w.g_hat, grid, label="eta1")

    resid = ((_tp(prob.B1 + prob.B1_hat) @ eta1[..., None])[..., 0]
             + (_tp(Dh) @ fsol.P1 @ prob.sigma[..., None])[..., 0]
             + w.rho1 + (cross @ u2[..., None])[..., 0])
    vbar1 = -np.linalg.solve(fsol.Sigma1_hat, resid[..., None])[..., 0]
    return FollowerAdjoint(eta1=eta1, vbar1=vbar1)


def follower_value(prob: ValidatedProblem, fsol: FollowerSolution,
                   adj: FollowerAdjoint, u2_mean: np.ndarray) -> float:
    """Follower value V1(t0, xi) for the given deterministic leader path.

    Quadratic-in-initial-law part plus a trapezoid integral of the running
    terms: with deterministic data the fluctuation channels contribute only
    through trace(P1(t0) Cov(xi)); the martingale offset is zero.
    """
    prob = validate(prob)
    grid = prob.grid
    w = prob.player1
    u2 = np.asarray(u2_mean, dtype=float).reshape(grid.n_nodes, prob.m2)

    D2h = prob.D2 + prob.D2_hat
    B2h = prob.B2 + prob.B2_hat
    R22h = w.R22 + w.R22_hat + _tp(D2h) @ fsol.P1 @ D2h
    lin = ((_tp(B2h) @ adj.eta1[..., None])[..., 0]
           + (_tp(D2h) @ fsol.P1 @ prob.sigma[..., None])[..., 0] + w.rho2)
    Psig = (fsol.P1 @ prob.sigma[..., None])[..., 0]
    Shv = (fsol.Sigma1_hat @ adj.vbar1[..., None])[..., 0]
    integrand = (np.einsum("ki,ki->k", (R22h @ u2[..., None])[..., 0], u2)
                 + 2.0 * np.einsum("ki,ki->k", lin, u2)
                 + 2.0 * np.einsum("ki,ki->k", adj.eta1, prob.b)
                 + np.einsum("ki,ki->k", Psig, prob.sigma)
                 - np.einsum("ki,ki->k", Shv, adj.vbar1))
    head = (float(np.trace(fsol.P1[0] @ prob.xi_cov))
            + float(prob.xi_mean @ fsol.Pi1[0] @ prob.xi_mean)
            + 2.0 * float(adj.eta1[0] @ prob.xi_mean))
    return head + float(np.trapezoid(integrand, dx=grid.dt))
