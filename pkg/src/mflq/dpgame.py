"""Discrete-time oracle: exact equilibrium of the Euler-discretized game.

This module is a stand-alone re-derivation used only for verification; it
shares no formulas with the continuous solvers.  The game is discretized as

    x_{k+1} = x_k + h [A x_k + B1 u1_k + B2 u2_k + hats on means]
            + dW_k [C x_k + D1 u1_k + D2 u2_k + hats on means],

with cost sums  sum_k h * l_i(x_k, u1_k, u2_k, means) + terminal, and solved
exactly in the commitment sense: the follower best-responds to the leader's
whole control process, then the leader optimizes over adapted processes.

Follower gains come from one-step completion of squares (P1d / Pi1d
recursions).  The leader's first-order system keeps the follower's adjoint
recursion and stationarity as explicit constraints with multipliers
(psi: follower-adjoint equation, lam: follower stationarity), which makes
every one-step optimality condition a primitive linear relation.  With the
ansatz that the backward variables (q_k, y_k) are linear in the forward pair
(x_k, psi_k) - split into deviation and mean channels - each step reduces to
one small linear solve per channel for the unknown transfer, noise, control
and multiplier maps.  The deviation-channel gain on (x - Ex, psi - Epsi) and
the mean-channel gain on (Ex, Epsi) are the discrete counterparts of the
continuous leader gains on the augmented state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import SolvabilityError
from .problem import ProblemSpec


@dataclass
class DiscreteGains:
    """Gains of the discretized game at nodes 0..K-1 (node K repeats K-1)."""

    theta1: np.ndarray       # (K+1, m1, n)
    theta1_hat: np.ndarray   # (K+1, m1, n)
    Theta_dev: np.ndarray    # (K+1, m2, 2n) on (x - Ex, psi - Epsi)
    Theta_mean: np.ndarray   # (K+1, m2, 2n) on (Ex, Epsi)
    P1d: np.ndarray = None
    Pi1d: np.ndarray = None


def _sym(M):
    return 0.5 * (M + M.T)


def follower_recursions(prob: ProblemSpec):
    """One-step follower Riccati recursions and gains.

    Deviation channel: Sig = R11 + h B1' P' B1 + D1' P' D1,
      theta1_k = -Sig^{-1} (S1 + B1' P' (I + hA) + D1' P' C),
      P_k = h Q + (I+hA)' P' (I+hA) + h C' P' C - h K' Sig^{-1} K.
    Mean channel: hat-summed coefficients, Pi in the drift quadratics and
    the deviation P' in every diffusion quadratic.
    """
    n, m1, _ = prob.dims()
    K = prob.grid.n_steps
    h = prob.grid.dt
    w = prob.player1
    P = w.G.copy()
    Pi = (w.G + w.G_hat).copy()
    theta1 = np.zeros((K + 1, m1, n))
    theta1_hat = np.zeros((K + 1, m1, n))
    P1d = np.zeros((K + 1, n, n))
    Pi1d = np.zeros((K + 1, n, n))
    P1d[K], Pi1d[K] = P, Pi
    for k in range(K - 1, -1, -1):
        A, B1, C, D1 = prob.A[k], prob.B1[k], prob.C[k], prob.D1[k]
        As = A + prob.A_hat[k]
        B1s = B1 + prob.B1_hat[k]
        Cs = C + prob.C_hat[k]
        D1s = D1 + prob.D1_hat[k]
        Q, S1, R11 = w.Q[k], w.S1[k], w.R11[k]
        Qs = Q + w.Q_hat[k]
        S1s = S1 + w.S1_hat[k]
        R11s = R11 + w.R11_hat[k]

        Sig = R11 + h * B1.T @ P @ B1 + D1.T @ P @ D1
        if np.linalg.eigvalsh(_sym(Sig)).min() <= 0.0:
            raise SolvabilityError("discrete Sigma1", prob.grid.times()[k],
                                   float(np.linalg.eigvalsh(_sym(Sig)).min()))
        Kf = S1 + B1.T @ P @ (np.eye(n) + h * A) + D1.T @ P @ C
        theta1[k] = -np.linalg.solve(Sig, Kf)
        Pn = (h * Q + (np.eye(n) + h * A).T @ P @ (np.eye(n) + h * A)
              + h * C.T @ P @ C - h * Kf.T @ np.linalg.solve(Sig, Kf))

        Sig_h = R11s + h * B1s.T @ Pi @ B1s + D1s.T @ P @ D1s
        if np.linalg.eigvalsh(_sym(Sig_h)).min() <= 0.0:
            raise SolvabilityError("discrete Sigma1_hat", prob.grid.times()[k],
                                   float(np.linalg.eigvalsh(_sym(Sig_h)).min()))
        Kh = S1s + B1s.T @ Pi @ (np.eye(n) + h * As) + D1s.T @ P @ Cs
        theta1_hat[k] = -np.linalg.solve(Sig_h, Kh)
        Pin = (h * Qs + (np.eye(n) + h * As).T @ Pi @ (np.eye(n) + h * As)
               + h * Cs.T @ P @ Cs - h * Kh.T @ np.linalg.solve(Sig_h, Kh))

        P, Pi = _sym(Pn), _sym(Pin)
        P1d[k], Pi1d[k] = P, Pi
    theta1[K] = theta1[K - 1]
    theta1_hat[K] = theta1_hat[K - 1]
    return theta1, theta1_hat, P1d, Pi1d


def solve_discrete_game(prob: ProblemSpec) -> DiscreteGains:
    """Exact gains of the discretized commitment game (both players)."""
    n, m1, m2 = prob.dims()
    K = prob.grid.n_steps
    h = prob.grid.dt
    w1, w2 = prob.player1, prob.player2
    theta1, theta1_hat, P1d, Pi1d = follower_recursions(prob)

    nn = 2 * n
    N1 = np.hstack([np.eye(n), np.zeros((n, n))])   # x rows of (x, psi)
    N2 = np.hstack([np.zeros((n, n)), np.eye(n)])   # psi rows
    In = np.eye(n)

    # terminal maps of (q, y) on (x, psi), per channel
    QF = np.block([[w2.G, w1.G], [w1.G, np.zeros((n, n))]])
    QM = np.block([[w2.G + w2.G_hat, w1.G + w1.G_hat],
                   [w1.G + w1.G_hat, np.zeros((n, n))]])

    Theta_dev = np.zeros((K + 1, m2, nn))
    Theta_mean = np.zeros((K + 1, m2, nn))

    # unknown row blocks: [Tx, Tp, Vx, Vp, U1, Lm, U2] (deviation channel)
    iTx = slice(0, n)
    iTp = slice(n, 2 * n)
    iVx = slice(2 * n, 3 * n)
    iVp = slice(3 * n, 4 * n)
    iU1 = slice(4 * n, 4 * n + m1)
    iLm = slice(4 * n + m1, 4 * n + 2 * m1)
    iU2 = slice(4 * n + 2 * m1, 4 * n + 2 * m1 + m2)
    S = 4 * n + 2 * m1 + m2
    # mean channel: [Tx, Tp, U1, Lm, U2]
    jTx = slice(0, n)
    jTp = slice(n, 2 * n)
    jU1 = slice(2 * n, 2 * n + m1)
    jLm = slice(2 * n + m1, 2 * n + 2 * m1)
    jU2 = slice(2 * n + m1 * 2, 2 * n + 2 * m1 + m2)
    Sm = 2 * n + 2 * m1 + m2

    for k in range(K - 1, -1, -1):
        A, C = prob.A[k], prob.C[k]
        B1, B2 = prob.B1[k], prob.B2[k]
        D1, D2 = prob.D1[k], prob.D2[k]
        As, Cs = A + prob.A_hat[k], C + prob.C_hat[k]
        B1s, B2s = B1 + prob.B1_hat[k], B2 + prob.B2_hat[k]
        D1s, D2s = D1 + prob.D1_hat[k], D2 + prob.D2_hat[k]

        Q1, S11, S21 = w1.Q[k], w1.S1[k], w1.S2[k]
        R111, R121, R211 = w1.R11[k], w1.R12[k], w1.R21[k]
        Q2, S12, S22 = w2.Q[k], w2.S1[k], w2.S2[k]
        R112, R122, R212, R222 = w2.R11[k], w2.R12[k], w2.R21[k], w2.R22[k]
        Q1s, S11s, S21s = Q1 + w1.Q_hat[k], S11 + w1.S1_hat[k], S21 + w1.S2_hat[k]
        R111s, R121s = R111 + w1.R11_hat[k], R121 + w1.R12_hat[k]
        R211s = R211 + w1.R21_hat[k]
        Q2s, S12s, S22s = Q2 + w2.Q_hat[k], S12 + w2.S1_hat[k], S22 + w2.S2_hat[k]
        R112s, R122s = R112 + w2.R11_hat[k], R122 + w2.R12_hat[k]
        R212s, R222s = R212 + w2.R21_hat[k], R222 + w2.R22_hat[k]

        Q1x, Q1p = QF[:n, :n], QF[:n, n:]   # q rows of the (k+1)-map
        Q2x, Q2p = QF[n:, :n], QF[n:, n:]   # y rows

        # ---- deviation channel: M @ U = R ----
        M = np.zeros((S, S))
        R = np.zeros((S, nn))
        # x drift: Tx - h B1 U1 - h B2 U2 = (I + hA) N1
        M[iTx, iTx] = In
        M[iTx, iU1] = -h * B1
        M[iTx, iU2] = -h * B2
        R[iTx] = (In + h * A) @ N1
        # psi drift: Tp - h B1 Lm = (I + hA) N2
        M[iTp, iTp] = In
        M[iTp, iLm] = -h * B1
        R[iTp] = (In + h * A) @ N2
        # x noise: Vx - D1 U1 - D2 U2 = C N1
        M[iVx, iVx] = In
        M[iVx, iU1] = -D1
        M[iVx, iU2] = -D2
        R[iVx] = C @ N1
        # psi noise: Vp - D1 Lm = C N2
        M[iVp, iVp] = In
        M[iVp, iLm] = -D1
        R[iVp] = C @ N2
        # follower stationarity (deviation):
        # 0 = R11^1 U1 + R21^1 U2 + B1' (Q2x Tx + Q2p Tp)
        #     + D1' (Q2x Vx + Q2p Vp) + S1^1 N1
        M[iU1, iU1] = R111
        M[iU1, iU2] = R211
        M[iU1, iTx] = B1.T @ Q2x
        M[iU1, iTp] = B1.T @ Q2p
        M[iU1, iVx] = D1.T @ Q2x
        M[iU1, iVp] = D1.T @ Q2p
        R[iU1] = -S11 @ N1
        # leader d/du1: 0 = R11^2 U1 + R21^2 U2 + R11^1 Lm
        #     + B1'(Q1x Tx + Q1p Tp) + D1'(Q1x Vx + Q1p Vp)
        #     + S1^2 N1 + S1^1 N2
        M[iLm, iU1] = R112
        M[iLm, iU2] = R212
        M[iLm, iLm] = R111
        M[iLm, iTx] = B1.T @ Q1x
        M[iLm, iTp] = B1.T @ Q1p
        M[iLm, iVx] = D1.T @ Q1x
        M[iLm, iVp] = D1.T @ Q1p
        R[iLm] = -S12 @ N1 - S11 @ N2
        # leader d/du2: 0 = R22^2 U2 + R12^2 U1 + R12^1 Lm
        #     + B2'(Q1x Tx + Q1p Tp) + D2'(Q1x Vx + Q1p Vp)
        #     + S2^2 N1 + S2^1 N2
        M[iU2, iU2] = R222
        M[iU2, iU1] = R122
        M[iU2, iLm] = R121
        M[iU2, iTx] = B2.T @ Q1x
        M[iU2, iTp] = B2.T @ Q1p
        M[iU2, iVx] = D2.T @ Q1x
        M[iU2, iVp] = D2.T @ Q1p
        R[iU2] = -S22 @ N1 - S21 @ N2
        try:
            U = np.linalg.solve(M, R)
        except np.linalg.LinAlgError:
            raise SolvabilityError("discrete deviation step",
                                   prob.grid.times()[k], float("nan")) from None
        Tx, Tp = U[iTx], U[iTp]
        Vx, Vp = U[iVx], U[iVp]
        U1, Lm, U2 = U[iU1], U[iLm], U[iU2]
        Theta_dev[k] = U2

        QT1 = Q1x @ Tx + Q1p @ Tp
        QV1 = Q1x @ Vx + Q1p @ Vp
        QT2 = Q2x @ Tx + Q2p @ Tp
        QV2 = Q2x @ Vx + Q2p @ Vp
        qmap = (h * (Q2 @ N1 + S12.T @ U1 + S22.T @ U2 + Q1 @ N2 + S11.T @ Lm)
                + (In + h * A).T @ QT1 + h * C.T @ QV1)
        ymap = (h * (Q1 @ N1 + S11.T @ U1 + S21.T @ U2)
                + (In + h * A).T @ QT2 + h * C.T @ QV2)
        QF_next = np.vstack([qmap, ymap])

        # ---- mean channel ----
        Qm1x, Qm1p = QM[:n, :n], QM[:n, n:]
        Qm2x, Qm2p = QM[n:, :n], QM[n:, n:]
        Mm = np.zeros((Sm, Sm))
        Rm = np.zeros((Sm, nn))
        Mm[jTx, jTx] = In
        Mm[jTx, jU1] = -h * B1s
        Mm[jTx, jU2] = -h * B2s
        Rm[jTx] = (In + h * As) @ N1
        Mm[jTp, jTp] = In
        Mm[jTp, jLm] = -h * B1s
        Rm[jTp] = (In + h * As) @ N2
        # mean noise offsets of the deviation state (enter E[dW * next])
        # x row: Cs N1 + D1s U1 + D2s U2 ; psi row: Cs N2 + D1s Lm
        # follower stationarity (mean):
        Mm[jU1, jU1] = R111s + D1s.T @ Q2x @ D1s
        Mm[jU1, jU2] = R211s + D1s.T @ Q2x @ D2s
        Mm[jU1, jLm] = D1s.T @ Q2p @ D1s
        Mm[jU1, jTx] = B1s.T @ Qm2x
        Mm[jU1, jTp] = B1s.T @ Qm2p
        Rm[jU1] = -(S11s @ N1 + D1s.T @ (Q2x @ Cs @ N1 + Q2p @ Cs @ N2))
        # leader d/du1 (mean):
        Mm[jLm, jU1] = R112s + D1s.T @ Q1x @ D1s
        Mm[jLm, jU2] = R212s + D1s.T @ Q1x @ D2s
        Mm[jLm, jLm] = R111s + D1s.T @ Q1p @ D1s
        Mm[jLm, jTx] = B1s.T @ Qm1x
        Mm[jLm, jTp] = B1s.T @ Qm1p
        Rm[jLm] = -(S12s @ N1 + S11s @ N2
                    + D1s.T @ (Q1x @ Cs @ N1 + Q1p @ Cs @ N2))
        # leader d/du2 (mean):
        Mm[jU2, jU1] = R122s + D2s.T @ Q1x @ D1s
        Mm[jU2, jU2] = R222s + D2s.T @ Q1x @ D2s
        Mm[jU2, jLm] = R121s + D2s.T @ Q1p @ D1s
        Mm[jU2, jTx] = B2s.T @ Qm1x
        Mm[jU2, jTp] = B2s.T @ Qm1p
        Rm[jU2] = -(S22s @ N1 + S21s @ N2
                    + D2s.T @ (Q1x @ Cs @ N1 + Q1p @ Cs @ N2))
        try:
            Um = np.linalg.solve(Mm, Rm)
        except np.linalg.LinAlgError:
            raise SolvabilityError("discrete mean step",
                                   prob.grid.times()[k], float("nan")) from None
        Tmx, Tmp = Um[jTx], Um[jTp]
        Um1, Lmm, Um2 = Um[jU1], Um[jLm], Um[jU2]
        Theta_mean[k] = Um2

        dbar_x = Cs @ N1 + D1s @ Um1 + D2s @ Um2
        dbar_p = Cs @ N2 + D1s @ Lmm
        QmT1 = Qm1x @ Tmx + Qm1p @ Tmp
        QmT2 = Qm2x @ Tmx + Qm2p @ Tmp
        Qd1 = Q1x @ dbar_x + Q1p @ dbar_p
        Qd2 = Q2x @ dbar_x + Q2p @ dbar_p
        qmmap = (h * (Q2s @ N1 + S12s.T @ Um1 + S22s.T @ Um2 + Q1s @ N2
                      + S11s.T @ Lmm)
                 + (In + h * As).T @ QmT1 + h * Cs.T @ Qd1)
        ymmap = (h * (Q1s @ N1 + S11s.T @ Um1 + S21s.T @ Um2)
                 + (In + h * As).T @ QmT2 + h * Cs.T @ Qd2)
        QM = np.vstack([qmmap, ymmap])
        QF = QF_next

    Theta_dev[K] = Theta_dev[K - 1]
    Theta_mean[K] = Theta_mean[K - 1]
    return DiscreteGains(theta1=theta1, theta1_hat=theta1_hat,
                         Theta_dev=Theta_dev, Theta_mean=Theta_mean,
                         P1d=P1d, Pi1d=Pi1d)
