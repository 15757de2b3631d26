"""Fixed-step explicit integration of layer dynamics and hardware time scaling."""
from __future__ import annotations

import io
import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from ._io import atomic_write_text
from .dynamics import LayerDynamics, NodeState
from .errors import DivergenceError, InvalidArgument, NumericError

METHODS = ("euler", "rk4")
_ALIASES = {"euler": "euler", "forward-euler": "euler", "fe": "euler", "rk4": "rk4"}


@dataclass(frozen=True)
class IntegratorConfig:
    method: str = "euler"
    steps: int = 40
    T: float = 1.0

    def __post_init__(self):
        method = _ALIASES.get(str(self.method).lower())
        if method is None:
            raise InvalidArgument(f"unknown integration method {self.method!r}")
        object.__setattr__(self, "method", method)
        if int(self.steps) != self.steps or self.steps < 1:
            raise InvalidArgument(f"steps must be a positive integer, got {self.steps}")
        if not (self.T > 0 and math.isfinite(self.T)):
            raise InvalidArgument(f"horizon T must be positive, got {self.T}")
        object.__setattr__(self, "steps", int(self.steps))

    @property
    def dt(self) -> float:
        return self.T / self.steps


@dataclass
class Trajectory:
    """States at every step boundary: ``states[k]`` is ``v(k * dt)``, shaped (batch, N).

    ``logp[k]`` is the accumulated log-density change when integrated with it.
    """
    times: np.ndarray
    states: np.ndarray
    logp: Optional[np.ndarray]
    reverse: bool = False
    single: bool = False

    @property
    def v_final(self) -> np.ndarray:
        return self.states[-1][0] if self.single else self.states[-1]

    @property
    def logp_delta(self):
        if self.logp is None:
            return None
        return float(self.logp[-1][0]) if self.single else self.logp[-1]

    def final_state(self) -> NodeState:
        return NodeState(self.v_final, self.logp_delta)


def _augmented(dyn: LayerDynamics, V, sign: float, with_logp: bool):
    if with_logp:
        f, tr = dyn.field_and_trace(V)
        return sign * f, -sign * tr
    return sign * dyn.field(V), None


def integrate(dyn: LayerDynamics, v0, cfg: IntegratorConfig, with_logp: bool = False,
              reverse: bool = False) -> Trajectory:
    """Integrate over ``[0, cfg.T]`` and keep every step-boundary state.

    ``reverse`` integrates the negated field (time runs backward). With
    ``with_logp`` the log-density change ``d l/dt = -tr(d field/d v)`` is
    co-integrated on the same grid.
    """
    if isinstance(v0, NodeState):
        v0 = v0.v
    V = np.array(v0, dtype=float)
    single = V.ndim == 1
    V = np.atleast_2d(V)
    if V.ndim != 2 or V.shape[1] != dyn.num_nodes:
        raise InvalidArgument(f"initial state has shape {np.shape(v0)}, expected (..., {dyn.num_nodes})")
    if not np.all(np.isfinite(V)):
        raise NumericError("non-finite initial state", step=0)

    S, dt = cfg.steps, cfg.dt
    sign = -1.0 if reverse else 1.0
    states = np.empty((S + 1,) + V.shape)
    states[0] = V
    logp = np.zeros((S + 1, V.shape[0])) if with_logp else None
    ell = np.zeros(V.shape[0])
    # overflow surfaces as a DivergenceError below rather than as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(S):
            if cfg.method == "euler":
                f, m = _augmented(dyn, V, sign, with_logp)
                V = V + dt * f
                if with_logp:
                    ell = ell + dt * m
            else:
                k1, m1 = _augmented(dyn, V, sign, with_logp)
                k2, m2 = _augmented(dyn, V + 0.5 * dt * k1, sign, with_logp)
                k3, m3 = _augmented(dyn, V + 0.5 * dt * k2, sign, with_logp)
                k4, m4 = _augmented(dyn, V + dt * k3, sign, with_logp)
                V = V + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
                if with_logp:
                    ell = ell + (dt / 6.0) * (m1 + 2.0 * m2 + 2.0 * m3 + m4)
            if not np.all(np.isfinite(V)) or not np.all(np.isfinite(ell)):
                raise DivergenceError("integration diverged", step=k + 1)
            states[k + 1] = V
            if with_logp:
                logp[k + 1] = ell
    times = np.linspace(0.0, cfg.T, S + 1)
    return Trajectory(times, states, logp, reverse=reverse, single=single)


def trajectory_csv(traj: Trajectory, sample: int = 0) -> str:
    """CSV text with columns ``t, v_0 .. v_{N-1}[, logp_delta]`` for one batch row."""
    n = traj.states.shape[2]
    header = ["t"] + [f"v_{j}" for j in range(n)]
    cols = [traj.times[:, None], traj.states[:, sample, :]]
    if traj.logp is not None:
        header.append("logp_delta")
        cols.append(traj.logp[:, sample, None])
    buf = io.StringIO()
    np.savetxt(buf, np.hstack(cols), delimiter=",", fmt="%.17g", header=",".join(header), comments="")
    return buf.getvalue()


def write_trajectory_csv(traj: Trajectory, path, sample: int = 0):
    return atomic_write_text(path, trajectory_csv(traj, sample))


@dataclass(frozen=True)
class ScalePlan:
    a: float
    sw_T: float
    hw_time_s: float
    hw_cap_F: float

    def table(self) -> str:
        rows = [
            ("scale factor a", f"{self.a:g}"),
            ("software horizon D*T", f"{self.sw_T:g}"),
            ("hardware capacitance", f"{si_format(self.hw_cap_F, 'F')} ({self.hw_cap_F:g} F)"),
            ("hardware inference time", f"{si_format(self.hw_time_s, 's')} ({self.hw_time_s:g} s)"),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)


_SI = [(1e0, ""), (1e-3, "m"), (1e-6, "u"), (1e-9, "n"), (1e-12, "p"), (1e-15, "f"), (1e-18, "a")]


def si_format(value: float, unit: str) -> str:
    """``si_format(1e-15, "s") -> "1 fs"``."""
    if value == 0:
        return f"0 {unit}"
    for scale, prefix in _SI:
        if abs(value) >= scale * (1 - 1e-9):
            return f"{value / scale:.6g} {prefix}{unit}"
    return f"{value:g} {unit}"


def hw_scale(sw_horizon: float, a: float) -> ScalePlan:
    """Capacitance ``1.0 * a`` farads and inference time ``sw_horizon * a`` seconds."""
    if not a > 0:
        raise InvalidArgument(f"scale factor must be positive, got {a}")
    if not sw_horizon > 0:
        raise InvalidArgument(f"horizon must be positive, got {sw_horizon}")
    return ScalePlan(a=a, sw_T=sw_horizon, hw_time_s=sw_horizon * a, hw_cap_F=1.0 * a)


def verify_scale_equivalence(dyn: LayerDynamics, v0, cfg: IntegratorConfig, a: float) -> float:
    """Max deviation between the trajectory and its copy with capacitance and horizon scaled by ``a``."""
    if not a > 0:
        raise InvalidArgument(f"scale factor must be positive, got {a}")
    base = integrate(dyn, v0, cfg)
    scaled = integrate(dyn.with_params(dyn.params, theta_cap=a * dyn.theta_cap), v0,
                       replace(cfg, T=a * cfg.T))
    return float(np.max(np.abs(base.states - scaled.states)))
