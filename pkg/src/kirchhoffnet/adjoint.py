"""Reverse-mode gradients through the fixed-step integrator.

The backward pass is the exact transpose of the discrete forward computation
(discretize, then differentiate), replayed from the stored step-boundary
states. For forward Euler one reverse step is

    a_k = a_{k+1} + dt * J(v_k)^T a_{k+1}
    grad_theta += dt * (d field/d theta)(v_k)^T a_{k+1}

and when the log-density channel is integrated the trace terms are pulled
back with the constant cotangent of ``logp_delta``.
"""
from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from .dynamics import LayerDynamics
from .errors import InvalidArgument, NumericError
from .integrator import IntegratorConfig, Trajectory


def _stage_vjp(dyn, V, sign, kbar, mbar):
    # field is sign*f and the log channel is -sign*tr
    return dyn.vjp(V, sign * kbar, None if mbar is None else -sign * mbar)


def backward(dyn: LayerDynamics, traj: Trajectory, cfg: IntegratorConfig, grad_vT,
             grad_logp=None):
    """Gradients of a loss w.r.t. ``dyn.params`` and the initial state.

    ``grad_vT`` is ``dL/dv(T)`` shaped like the integrated state and
    ``grad_logp`` is ``dL/d logp_delta`` (scalar or per batch row). Parameter
    gradients are summed over the batch.
    """
    S, dt = cfg.steps, cfg.dt
    states = traj.states
    if states.shape[0] != S + 1 or states.shape[2] != dyn.num_nodes:
        raise InvalidArgument(
            f"trajectory with {states.shape[0]} checkpoints over {states.shape[2]} nodes "
            f"does not match {S} steps over {dyn.num_nodes} nodes")
    if not np.isclose(traj.times[-1], cfg.T, rtol=1e-12, atol=0.0):
        raise InvalidArgument("trajectory horizon does not match the integrator config")
    B = states.shape[1]
    a = np.array(grad_vT, dtype=float).reshape(B, dyn.num_nodes)
    lbar = None
    if grad_logp is not None:
        if traj.logp is None:
            raise InvalidArgument("log-density gradient given for a trajectory without logp")
        lbar = np.broadcast_to(np.asarray(grad_logp, dtype=float), (B,)).copy()
    sign = -1.0 if traj.reverse else 1.0
    grad_params = np.zeros_like(dyn.params)

    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(S - 1, -1, -1):
            V = states[k]
            if cfg.method == "euler":
                vbar, pbar = _stage_vjp(dyn, V, sign, a, lbar)
                a = a + dt * vbar
                grad_params += dt * pbar
            else:
                a = a + _rk4_step_vjp(dyn, V, sign, dt, a, lbar, grad_params)
            if not np.all(np.isfinite(a)):
                raise NumericError("non-finite adjoint", step=k)

    grad_v0 = a[0] if traj.single else a
    return grad_params, grad_v0


def _rk4_step_vjp(dyn, V, sign, dt, a, lbar, grad_params):
    """Pull ``a`` back through one classical RK4 step; returns the state increment."""
    def F(Y):
        return sign * dyn.field(Y)

    k1 = F(V)
    y1 = V + 0.5 * dt * k1
    k2 = F(y1)
    y2 = V + 0.5 * dt * k2
    k3 = F(y2)
    y3 = V + dt * k3
    weights = (dt / 6.0, dt / 3.0, dt / 3.0, dt / 6.0)
    kbar = [w * a for w in weights]
    mbar = [None] * 4 if lbar is None else [w * lbar for w in weights]
    extra = np.zeros_like(a)

    g, p = _stage_vjp(dyn, y3, sign, kbar[3], mbar[3])
    grad_params += p
    extra += g
    kbar[2] = kbar[2] + dt * g
    g, p = _stage_vjp(dyn, y2, sign, kbar[2], mbar[2])
    grad_params += p
    extra += g
    kbar[1] = kbar[1] + 0.5 * dt * g
    g, p = _stage_vjp(dyn, y1, sign, kbar[1], mbar[1])
    grad_params += p
    extra += g
    kbar[0] = kbar[0] + 0.5 * dt * g
    g, p = _stage_vjp(dyn, V, sign, kbar[0], mbar[0])
    grad_params += p
    extra += g
    return extra


def finite_diff_grad(model, loss_fn: Callable, eps: float = 1e-5,
                     indices: Optional[np.ndarray] = None) -> np.ndarray:
    """Central differences of ``loss_fn(model)`` w.r.t. the flat parameter vector.

    ``model`` must provide ``flat_params()`` and ``with_flat_params(vector)``.
    Only ``indices`` are perturbed when given; other entries are left at 0.
    """
    if not eps > 0:
        raise InvalidArgument(f"finite-difference step must be positive, got {eps}")
    theta = np.asarray(model.flat_params(), dtype=float)
    grad = np.zeros_like(theta)
    for i in (range(theta.size) if indices is None else indices):
        up = theta.copy()
        up[i] += eps
        dn = theta.copy()
        dn[i] -= eps
        grad[i] = (loss_fn(model.with_flat_params(up)) - loss_fn(model.with_flat_params(dn))) / (2 * eps)
    return grad
