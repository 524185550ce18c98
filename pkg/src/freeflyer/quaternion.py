"""Quaternion helpers.

Convention used everywhere in the package: Hamilton product, scalar-last
storage ``q = [x, y, z, w]``, and ``q`` maps body-frame vectors into the
inertial frame (``v_I = q * v_B * q^-1``).

All functions accept stacked inputs with shape ``(..., 4)``.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([0.0, 0.0, 0.0, 1.0])


def cross(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Cross product over the last axis (faster than ``np.cross`` for small stacks)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.concatenate([-q[..., :3], q[..., 3:]], axis=-1)


def mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Hamilton product ``p ⊗ q`` (scalar-last)."""
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pv, pw = p[..., :3], p[..., 3:]
    qv, qw = q[..., :3], q[..., 3:]
    vec = pw * qv + qw * pv + cross(pv, qv)
    w = pw * qw - np.sum(pv * qv, axis=-1, keepdims=True)
    return np.concatenate([vec, w], axis=-1)


def to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix (body to inertial) of a unit quaternion."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - z * w)
    R[..., 0, 2] = 2 * (x * z + y * w)
    R[..., 1, 0] = 2 * (x * y + z * w)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - x * w)
    R[..., 2, 0] = 2 * (x * z - y * w)
    R[..., 2, 1] = 2 * (y * z + x * w)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate body-frame vector(s) ``v`` into the inertial frame."""
    q = np.asarray(q, dtype=float)
    v = np.asarray(v, dtype=float)
    e, w = q[..., :3], q[..., 3:]
    t = 2.0 * cross(e, v)
    return v + w * t + cross(e, t)


def rotate_inverse(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate inertial-frame vector(s) ``v`` into the body frame."""
    return rotate(conj(q), v)


def from_axis_angle(axis, angle) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([axis * np.sin(half), np.cos(half)], axis=-1)


def from_yaw(yaw) -> np.ndarray:
    return from_axis_angle(np.array([0.0, 0.0, 1.0]), yaw)


def from_rotvec(rv: np.ndarray) -> np.ndarray:
    """Exponential map from a rotation vector (rad) to a unit quaternion."""
    rv = np.asarray(rv, dtype=float)
    angle = np.linalg.norm(rv, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a with a series fallback near zero
    small = angle < 1e-8
    safe = np.where(small, 1.0, angle)
    k = np.where(small, 0.5 - angle**2 / 48.0, np.sin(half) / safe)
    return np.concatenate([rv * k, np.cos(half)], axis=-1)


def to_rotvec(q: np.ndarray) -> np.ndarray:
    """Logarithm map (shortest rotation) from a unit quaternion to a rotation vector."""
    q = np.asarray(q, dtype=float)
    q = np.where(q[..., 3:] < 0.0, -q, q)
    e, w = q[..., :3], np.clip(q[..., 3:], -1.0, 1.0)
    s = np.linalg.norm(e, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    small = s < 1e-12
    k = np.where(small, 2.0 / np.where(w == 0, 1.0, w), angle / np.where(small, 1.0, s))
    return e * k


def angle_between(q0: np.ndarray, q1: np.ndarray) -> np.ndarray:
    """Rotation angle (rad, in [0, pi]) of the relative rotation q0^-1 q1."""
    d = np.abs(np.sum(np.asarray(q0) * np.asarray(q1), axis=-1))
    return 2.0 * np.arccos(np.clip(d, 0.0, 1.0))


def error_angle(q_ref: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Small-angle attitude error ``2 vec(q_ref^-1 ⊗ q)`` in the body frame.

    The sign is fixed so the scalar part of the relative quaternion is
    non-negative, which keeps the error on the short side of the rotation.
    """
    dq = mul(conj(q_ref), q)
    sign = np.where(dq[..., 3:] < 0.0, -1.0, 1.0)
    return 2.0 * sign * dq[..., :3]


def slerp(q0, q1, t) -> np.ndarray:
    """Spherical linear interpolation along the shorter great circle.

    A relative rotation of exactly 180 degrees has no shorter side; the sign
    of ``q1`` is then chosen so the rotation axis points toward +x of the
    body frame (falling back to +y, then +z).
    """
    q0 = normalize(q0)
    q1 = normalize(q1)
    t = np.asarray(t, dtype=float)
    dot = float(np.dot(q0, q1))
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    elif dot == 0.0:
        axis = mul(conj(q0), q1)[:3]
        for comp in axis:
            if comp != 0.0:
                if comp < 0.0:
                    q1 = -q1
                break
    if dot > 1.0 - 1e-12:
        out = q0 + t[..., None] * (q1 - q0) if t.ndim else q0 + t * (q1 - q0)
        return normalize(out)
    theta = np.arccos(dot)
    s = np.sin(theta)
    a = np.sin((1.0 - t) * theta) / s
    b = np.sin(t * theta) / s
    if t.ndim:
        out = a[..., None] * q0 + b[..., None] * q1
    else:
        out = a * q0 + b * q1
    return normalize(out)


def skew(v: np.ndarray) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    S = np.zeros(v.shape[:-1] + (3, 3))
    S[..., 0, 1] = -v[..., 2]
    S[..., 0, 2] = v[..., 1]
    S[..., 1, 0] = v[..., 2]
    S[..., 1, 2] = -v[..., 0]
    S[..., 2, 0] = -v[..., 1]
    S[..., 2, 1] = v[..., 0]
    return S
