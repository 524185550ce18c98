"""Backward Riccati recursion for affine LTV systems with quadratic cost."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..dynamics import LtvMatrices, QuadraticCost


@dataclass(frozen=True)
class RiccatiSolution:
    """Value function ``V_k(dx) = 0.5 dx' S_k dx + dx' s_k + c_k`` and policy
    ``du_k = -K_k dx - k_k`` for ``k = 0..N`` (gains for ``k < N``)."""

    S: np.ndarray
    s: np.ndarray
    c: np.ndarray
    K: np.ndarray
    k: np.ndarray

    @property
    def horizon(self) -> int:
        return len(self.K)

    def value(self, dx, k: int = 0) -> np.ndarray:
        dx = np.asarray(dx, dtype=float)
        return (0.5 * np.einsum("...i,ij,...j->...", dx, self.S[k], dx)
                + dx @ self.s[k] + self.c[k])

    def control(self, dx, k: int) -> np.ndarray:
        return -(np.asarray(dx) @ self.K[k].T) - self.k[k]


def riccati_backward(ltv, cost: QuadraticCost, N: int, drift=None) -> RiccatiSolution:
    """Propagate the value function backwards over ``N`` steps.

    ``ltv`` is one :class:`LtvMatrices` (time-invariant) or a sequence of
    ``N``.  The optional ``drift`` (one vector or ``N`` vectors) is the affine
    term ``g_k`` in ``dx_{k+1} = A_k dx_k + B_k du_k + g_k``.
    """
    if N < 1:
        raise ValueError("horizon must be at least one step")
    seq = [ltv] * N if isinstance(ltv, LtvMatrices) else list(ltv)
    if len(seq) != N:
        raise ValueError(f"expected {N} LTV models, got {len(seq)}")
    n, m = cost.n, cost.m
    if drift is None:
        drift = np.zeros((N, n))
    drift = np.broadcast_to(np.asarray(drift, dtype=float), (N, n))

    S = np.empty((N + 1, n, n))
    s = np.empty((N + 1, n))
    c = np.empty(N + 1)
    K = np.empty((N, m, n))
    kk = np.empty((N, m))
    S[N] = cost.H_terminal
    s[N] = cost.q_terminal
    c[N] = 0.0
    Q, R, P, q, r = cost.Q, cost.R, cost.P, cost.q_lin, cost.r_lin
    for t in range(N - 1, -1, -1):
        A, B, g = seq[t].A, seq[t].B, drift[t]
        Sn, sn = S[t + 1], s[t + 1]
        SB = Sn @ B
        G = R + B.T @ SB
        Hx = P.T + SB.T @ A
        h = r + SB.T @ g + B.T @ sn
        try:
            L = np.linalg.cholesky(0.5 * (G + G.T))
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("B'SB + R is not positive definite") from exc
        Kt = np.linalg.solve(L.T, np.linalg.solve(L, Hx))
        kt = np.linalg.solve(L.T, np.linalg.solve(L, h))
        St = Q + A.T @ Sn @ A - Hx.T @ Kt
        S[t] = 0.5 * (St + St.T)
        s[t] = q + A.T @ (Sn @ g) + A.T @ sn - Hx.T @ kt
        c[t] = c[t + 1] + 0.5 * g @ Sn @ g + sn @ g - 0.5 * h @ kt
        K[t] = Kt
        kk[t] = kt
    return RiccatiSolution(S, s, c, K, kk)


def lqr_infinite(A, B, Q, R, tol: float = 1e-12, max_iter: int = 100000):
    """Stationary gain by iterating the Riccati recursion to convergence."""
    S = np.array(Q, dtype=float)
    for _ in range(max_iter):
        G = R + B.T @ S @ B
        K = np.linalg.solve(G, B.T @ S @ A)
        S_next = Q + A.T @ S @ A - (B.T @ S @ A).T @ K
        S_next = 0.5 * (S_next + S_next.T)
        if np.max(np.abs(S_next - S)) <= tol * max(1.0, np.max(np.abs(S))):
            return S_next, np.linalg.solve(R + B.T @ S_next @ B, B.T @ S_next @ A)
        S = S_next
    raise RuntimeError("Riccati iteration did not converge")
