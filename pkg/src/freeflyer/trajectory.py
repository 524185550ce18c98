"""Timestamped state/wrench sequences shared by planners, controllers and the simulator."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dynamics as dyn
from . import quaternion as quat


@dataclass(frozen=True)
class Trajectory:
    """Knots ``(t_k, x_k, u_k)``; ``u_k`` is held over ``[t_k, t_{k+1})``.

    The wrench stored on the last knot is not applied by anything and is kept
    only so the three arrays share a length.
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float).reshape(-1)
        x = np.asarray(self.x, dtype=float).reshape(len(t), dyn.STATE_DIM)
        u = np.asarray(self.u, dtype=float).reshape(len(t), dyn.INPUT_DIM)
        if len(t) == 0:
            raise ValueError("trajectory must contain at least one knot")
        if np.any(np.diff(t) <= 0):
            raise ValueError("trajectory stamps must be strictly increasing")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("trajectory contains non-finite values")
        for name, arr in (("t", t), ("x", x), ("u", u)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    def __len__(self) -> int:
        return len(self.t)

    @classmethod
    def stationary(cls, x, t0: float = 0.0) -> "Trajectory":
        return cls(np.array([t0]), np.asarray(x)[None], np.zeros((1, dyn.INPUT_DIM)))

    @classmethod
    def from_inputs(cls, x0, inputs, p: dyn.InertialParams, dt: float, t0: float = 0.0):
        """Open-loop rollout of ``inputs`` from ``x0``."""
        inputs = np.asarray(inputs, dtype=float).reshape(-1, dyn.INPUT_DIM)
        xs = dyn.rollout(x0, inputs, p, dt)
        us = np.vstack([inputs, np.zeros((1, dyn.INPUT_DIM))])
        return cls(t0 + dt * np.arange(len(xs)), xs, us)

    @property
    def duration(self) -> float:
        return float(self.t[-1] - self.t[0])

    @property
    def positions(self) -> np.ndarray:
        return self.x[:, dyn.POS]

    @property
    def start(self) -> np.ndarray:
        return self.x[0]

    @property
    def end(self) -> np.ndarray:
        return self.x[-1]

    def defect(self, p: dyn.InertialParams) -> float:
        """Largest re-integration error over consecutive knots (error-state norm)."""
        if len(self) < 2:
            return 0.0
        dts = np.diff(self.t)
        worst = 0.0
        # group equal steps so the common case is a single batched call
        for dt in np.unique(dts):
            idx = np.nonzero(dts == dt)[0]
            pred = dyn.step_rk4(self.x[idx], self.u[idx], p, float(dt))
            err = dyn.error_state(pred, self.x[idx + 1])
            worst = max(worst, float(np.max(np.abs(err))))
        return worst

    def sample(self, t) -> np.ndarray:
        """Interpolated state(s): linear in r, v, w; slerp in q."""
        ts = np.atleast_1d(np.asarray(t, dtype=float))
        out = np.empty((len(ts), dyn.STATE_DIM))
        for j, tj in enumerate(ts):
            if tj <= self.t[0]:
                out[j] = self.x[0]
                continue
            if tj >= self.t[-1]:
                out[j] = self.x[-1]
                continue
            k = int(np.searchsorted(self.t, tj, side="right") - 1)
            s = (tj - self.t[k]) / (self.t[k + 1] - self.t[k])
            a, b = self.x[k], self.x[k + 1]
            out[j] = a + s * (b - a)
            out[j, dyn.ATT] = quat.slerp(a[dyn.ATT], b[dyn.ATT], s)
        return out if np.ndim(t) else out[0]

    def input_at(self, t: float) -> np.ndarray:
        """Zero-order-hold wrench active at time ``t``."""
        if t < self.t[0] or t >= self.t[-1]:
            return np.zeros(dyn.INPUT_DIM)
        k = int(np.searchsorted(self.t, t, side="right") - 1)
        return self.u[k].copy()

    def slice(self, start: int, stop: int | None = None) -> "Trajectory":
        stop = len(self) if stop is None else stop
        return Trajectory(self.t[start:stop], self.x[start:stop], self.u[start:stop])

    def shifted(self, t0: float) -> "Trajectory":
        return Trajectory(self.t - self.t[0] + t0, self.x, self.u)

    def concat(self, other: "Trajectory") -> "Trajectory":
        """Append ``other``, whose first knot must coincide with this end knot."""
        if abs(other.t[0] - self.t[-1]) > 1e-9:
            raise ValueError("trajectories do not join in time")
        if np.max(np.abs(dyn.error_state(other.x[0], self.x[-1]))) > 1e-9:
            raise ValueError("trajectories do not join in state")
        return Trajectory(
            np.concatenate([self.t, other.t[1:]]),
            np.vstack([self.x, other.x[1:]]),
            np.vstack([self.u[:-1], other.u]),
        )

    def to_dict(self) -> dict:
        return {"t": self.t.tolist(), "x": self.x.tolist(), "u": self.u.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Trajectory":
        return cls(np.array(d["t"]), np.array(d["x"]), np.array(d["u"]))


def resample(traj: Trajectory, dt: float, t_end: float | None = None) -> np.ndarray:
    """States at ``t0, t0+dt, ...`` up to ``t_end`` (held at the final knot)."""
    t_end = traj.t[-1] if t_end is None else t_end
    n = int(np.floor((t_end - traj.t[0]) / dt + 1e-9)) + 1
    return traj.sample(traj.t[0] + dt * np.arange(n))
