"""Compiled inner loops for the rigid-body model.

These mirror :func:`freeflyer.dynamics.derivative` term by term; the numpy
version stays the reference and the tests compare both.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _deriv(x, u, inv_m, I, Iinv, Minv, mc, out):
    ex, ey, ez, qw = x[3], x[4], x[5], x[6]
    wx, wy, wz = x[10], x[11], x[12]
    out[0] = x[7]
    out[1] = x[8]
    out[2] = x[9]
    # q_dot = 0.5 q ⊗ [w, 0]
    out[3] = 0.5 * (qw * wx + (ey * wz - ez * wy))
    out[4] = 0.5 * (qw * wy + (ez * wx - ex * wz))
    out[5] = 0.5 * (qw * wz + (ex * wy - ey * wx))
    out[6] = -0.5 * (ex * wx + ey * wy + ez * wz)
    Iwx = I[0, 0] * wx + I[0, 1] * wy + I[0, 2] * wz
    Iwy = I[1, 0] * wx + I[1, 1] * wy + I[1, 2] * wz
    Iwz = I[2, 0] * wx + I[2, 1] * wy + I[2, 2] * wz
    rx = u[3] - (wy * Iwz - wz * Iwy)
    ry = u[4] - (wz * Iwx - wx * Iwz)
    rz = u[5] - (wx * Iwy - wy * Iwx)
    if Minv.shape[0] == 0:
        ax = u[0] * inv_m
        ay = u[1] * inv_m
        az = u[2] * inv_m
        out[10] = Iinv[0, 0] * rx + Iinv[0, 1] * ry + Iinv[0, 2] * rz
        out[11] = Iinv[1, 0] * rx + Iinv[1, 1] * ry + Iinv[1, 2] * rz
        out[12] = Iinv[2, 0] * rx + Iinv[2, 1] * ry + Iinv[2, 2] * rz
    else:
        # offset centre of mass: coupled solve with the constant inverse mass matrix
        # mc = m * c; bias m * w x (w x c)
        cx = wy * mc[2] - wz * mc[1]
        cy = wz * mc[0] - wx * mc[2]
        cz = wx * mc[1] - wy * mc[0]
        rhs = np.empty(6)
        rhs[0] = u[0] - (wy * cz - wz * cy)
        rhs[1] = u[1] - (wz * cx - wx * cz)
        rhs[2] = u[2] - (wx * cy - wy * cx)
        rhs[3] = rx
        rhs[4] = ry
        rhs[5] = rz
        sol = Minv @ rhs
        ax = sol[0]
        ay = sol[1]
        az = sol[2]
        out[10] = sol[3]
        out[11] = sol[4]
        out[12] = sol[5]
    s = qw * qw - (ex * ex + ey * ey + ez * ez)
    d = 2.0 * (ex * ax + ey * ay + ez * az)
    out[7] = s * ax + d * ex + 2.0 * qw * (ey * az - ez * ay)
    out[8] = s * ay + d * ey + 2.0 * qw * (ez * ax - ex * az)
    out[9] = s * az + d * ez + 2.0 * qw * (ex * ay - ey * ax)


@njit(cache=True)
def rk4_batch(X, U, inv_m, I, Iinv, Minv, mc, dt):
    """RK4 step for each row of ``X`` (k, 13) with wrench rows ``U`` (k, 6)."""
    n = X.shape[0]
    out = np.empty_like(X)
    k1 = np.empty(13)
    k2 = np.empty(13)
    k3 = np.empty(13)
    k4 = np.empty(13)
    tmp = np.empty(13)
    h = 0.5 * dt
    for i in range(n):
        x = X[i]
        u = U[i]
        _deriv(x, u, inv_m, I, Iinv, Minv, mc, k1)
        for j in range(13):
            tmp[j] = x[j] + h * k1[j]
        _deriv(tmp, u, inv_m, I, Iinv, Minv, mc, k2)
        for j in range(13):
            tmp[j] = x[j] + h * k2[j]
        _deriv(tmp, u, inv_m, I, Iinv, Minv, mc, k3)
        for j in range(13):
            tmp[j] = x[j] + dt * k3[j]
        _deriv(tmp, u, inv_m, I, Iinv, Minv, mc, k4)
        c = dt / 6.0
        for j in range(13):
            out[i, j] = x[j] + c * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
        nq = np.sqrt(out[i, 3] ** 2 + out[i, 4] ** 2 + out[i, 5] ** 2 + out[i, 6] ** 2)
        for j in range(3, 7):
            out[i, j] /= nq
    return out


@njit(cache=True)
def rk4_rollout(x0, U, inv_m, I, Iinv, Minv, mc, dt):
    """Open-loop rollout; returns ``len(U) + 1`` states."""
    n = U.shape[0]
    xs = np.empty((n + 1, 13))
    xs[0] = x0
    for k in range(n):
        xs[k + 1] = rk4_batch(xs[k:k + 1], U[k:k + 1], inv_m, I, Iinv, Minv, mc, dt)[0]
    return xs
