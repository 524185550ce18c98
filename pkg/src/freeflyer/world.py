"""Keep-in volume, ellipsoidal obstacles and collision checks."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from . import dynamics as dyn

JEM_CENTROID = np.array([10.9, -6.65, 4.9])
JEM_HALF_EXTENT = np.array([0.65, 3.2, 0.8])
DEFAULT_ROBOT_RADIUS = 0.26

_GOLDEN = 0.5 * (np.sqrt(5.0) - 1.0)


@dataclass(frozen=True)
class Ellipsoid:
    """Set ``{x : (x - center)' P (x - center) <= 1}``."""

    center: np.ndarray
    P: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).reshape(3)
        P = np.asarray(self.P, dtype=float).reshape(3, 3)
        if not np.allclose(P, P.T, atol=1e-12) or np.linalg.eigvalsh(P)[0] <= 0:
            raise ValueError("ellipsoid shape matrix must be symmetric positive definite")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "P", 0.5 * (P + P.T))

    @classmethod
    def sphere(cls, center, radius: float) -> "Ellipsoid":
        return cls(center, np.eye(3) / radius**2)

    @classmethod
    def from_axes(cls, center, semi_axes, rotation=None) -> "Ellipsoid":
        """Ellipsoid with the given semi-axes, optionally rotated by ``rotation`` (3x3)."""
        D = np.diag(1.0 / np.asarray(semi_axes, dtype=float) ** 2)
        R = np.eye(3) if rotation is None else np.asarray(rotation, dtype=float)
        return cls(center, R @ D @ R.T)

    @property
    def shape_inv(self) -> np.ndarray:
        return np.linalg.inv(self.P)

    @property
    def semi_axes(self) -> np.ndarray:
        return 1.0 / np.sqrt(np.linalg.eigvalsh(self.P))

    def level(self, r) -> np.ndarray:
        """Quadratic form ``(r - c)' P (r - c)``; below 1 means strictly inside."""
        d = np.asarray(r, dtype=float) - self.center
        return np.einsum("...i,ij,...j->...", d, self.P, d)

    def moved(self, center) -> "Ellipsoid":
        return Ellipsoid(center, self.P)

    def inflated(self, radius: float) -> "Ellipsoid":
        """Ellipsoid containing the Minkowski sum with a ball of ``radius``.

        Uses the outer bound ``(1 + r/s) A + (r^2 + r s) I`` with ``A = P^-1``
        and ``s`` the largest semi-axis; exact for spheres.
        """
        if radius <= 0:
            return self
        A = self.shape_inv
        s = float(np.sqrt(np.linalg.eigvalsh(A)[-1]))
        A2 = (1.0 + radius / s) * A + (radius**2 + radius * s) * np.eye(3)
        return Ellipsoid(self.center, np.linalg.inv(A2))


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lower, dtype=float).reshape(3)
        hi = np.asarray(self.upper, dtype=float).reshape(3)
        if np.any(hi <= lo):
            raise ValueError("keep-in box must have positive extent on every axis")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @classmethod
    def around(cls, center, half_extent) -> "Box":
        c = np.asarray(center, dtype=float)
        h = np.asarray(half_extent, dtype=float)
        return cls(c - h, c + h)

    def contains(self, r) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        return np.all((r >= self.lower) & (r <= self.upper), axis=-1)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


@dataclass(frozen=True)
class CheckResolution:
    max_segment_length: float = 0.05
    max_dt: float = 1.0

    def __post_init__(self):
        if self.max_segment_length <= 0 or self.max_dt <= 0:
            raise ValueError("check resolution values must be positive")


@dataclass(frozen=True)
class WorldModel:
    keep_in: Box = field(default_factory=lambda: Box.around(JEM_CENTROID, JEM_HALF_EXTENT))
    obstacles: tuple = ()
    robot_radius: float = DEFAULT_ROBOT_RADIUS

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        if self.robot_radius < 0:
            raise ValueError("robot radius must be non-negative")
        inflated = tuple(o.inflated(self.robot_radius) for o in self.obstacles)
        object.__setattr__(self, "_inflated", inflated)

    @property
    def inflated_obstacles(self) -> tuple:
        return self._inflated

    def robot_body(self, r) -> Ellipsoid:
        return Ellipsoid.sphere(r, max(self.robot_radius, 1e-9))


def point_free(r, world: WorldModel) -> np.ndarray:
    """Robot centre(s) inside the keep-in box and outside every inflated obstacle.

    Points exactly on an obstacle surface count as free.
    """
    r = np.asarray(r, dtype=float)
    ok = world.keep_in.contains(r)
    for obs in world.inflated_obstacles:
        ok = ok & (obs.level(r) >= 1.0)
    return ok


def _separation_profile(A1, A2):
    # Generalized eigenbasis: Phi' A1 Phi = I, Phi' A2 Phi = diag(mu)
    mu, Phi = scipy.linalg.eigh(A2, A1)
    return mu, Phi


def _pw_max(mu, y2, iters: int = 64) -> np.ndarray:
    """max over lambda in [0,1] of the (concave) Perram-Wertheim function.

    ``y2`` has shape (..., 3): squared coordinates of the centre offset in the
    generalized eigenbasis.
    """

    def f(lam):
        lam = lam[..., None]
        return (lam[..., 0] * (1.0 - lam[..., 0])
                * np.sum(y2 / (1.0 - lam + lam * mu), axis=-1))

    shape = y2.shape[:-1]
    a = np.zeros(shape)
    b = np.ones(shape)
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    for _ in range(iters):
        left = fc > fd
        a_n = np.where(left, a, c)
        b_n = np.where(left, d, b)
        x_new = np.where(left, b_n - _GOLDEN * (b_n - a_n), a_n + _GOLDEN * (b_n - a_n))
        f_new = f(x_new)
        c, fc, d, fd = (np.where(left, x_new, d), np.where(left, f_new, fd),
                        np.where(left, c, x_new), np.where(left, fc, f_new))
        a, b = a_n, b_n
    return np.maximum(np.maximum(fc, fd), f(0.5 * (a + b)))


def ellipsoids_separated(e1: Ellipsoid, e2: Ellipsoid) -> bool:
    """True iff the interiors of the two ellipsoids are disjoint (touching is free)."""
    d = e2.center - e1.center
    dist = float(np.linalg.norm(d))
    r1 = e1.semi_axes
    r2 = e2.semi_axes
    if dist >= r1.max() + r2.max():
        return True
    if dist < r1.min() + r2.min():
        return False
    mu, Phi = _separation_profile(e1.shape_inv, e2.shape_inv)
    y = Phi.T @ d
    return bool(_pw_max(mu, (y * y)[None])[0] >= 1.0)


def _body_free(r, world: WorldModel) -> np.ndarray:
    """Ellipsoid-on-ellipsoid check of the robot body at centre(s) ``r``."""
    r = np.asarray(r, dtype=float)
    ok = world.keep_in.contains(r)
    if not world.obstacles:
        return ok
    A_robot = world.robot_body(np.zeros(3)).shape_inv
    for obs in world.obstacles:
        mu, Phi = _separation_profile(A_robot, obs.shape_inv)
        y = (obs.center - r) @ Phi
        ok = ok & (_pw_max(mu, y * y) >= 1.0)
    return ok


def positions_free(r, world: WorldModel, mode: str = "point") -> np.ndarray:
    if mode == "point":
        return point_free(r, world)
    if mode == "ellipsoid":
        return _body_free(r, world)
    raise ValueError(f"unknown collision mode {mode!r}")


def _segment_points(ra, rb, dt, res: CheckResolution) -> np.ndarray:
    length = float(np.linalg.norm(rb - ra))
    # a power of two keeps the samples nested when the resolution is halved
    need = max(length / res.max_segment_length, dt / res.max_dt, 1.0)
    n = 1 << int(np.ceil(np.log2(need) - 1e-12))
    s = np.linspace(0.0, 1.0, n + 1)[:, None]
    return ra + s * (rb - ra)


def segment_free(x_a, x_b, world: WorldModel, res: CheckResolution = CheckResolution(),
                 mode: str = "point", dt: float = 0.0) -> bool:
    """Check positions linearly interpolated between two states, endpoints included."""
    ra = np.asarray(x_a, dtype=float)[dyn.POS]
    rb = np.asarray(x_b, dtype=float)[dyn.POS]
    pts = _segment_points(ra, rb, dt, res)
    return bool(np.all(positions_free(pts, world, mode)))


def trajectory_points(traj, res: CheckResolution = CheckResolution()) -> np.ndarray:
    r = traj.positions
    if len(r) == 1:
        return r.copy()
    dts = np.diff(traj.t)
    pts = [_segment_points(r[k], r[k + 1], dts[k], res)[:-1] for k in range(len(r) - 1)]
    pts.append(r[-1:])
    return np.vstack(pts)


def trajectory_free(traj, world: WorldModel, res: CheckResolution = CheckResolution(),
                    mode: str = "point") -> bool:
    """Conjunction of :func:`segment_free` over consecutive knots."""
    if traj is None or len(traj) == 0:
        raise ValueError("cannot check an empty trajectory")
    return bool(np.all(positions_free(trajectory_points(traj, res), world, mode)))


def default_world(obstacles=()) -> WorldModel:
    return WorldModel(Box.around(JEM_CENTROID, JEM_HALF_EXTENT), tuple(obstacles), DEFAULT_ROBOT_RADIUS)
