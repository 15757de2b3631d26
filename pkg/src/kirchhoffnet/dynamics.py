"""Kirchhoff current law dynamics of one layer.

Each non-ground node ``j`` carries a fixed capacitor ``theta_cap`` to ground,
so KCL at ``j`` reads

    theta_cap * dv_j/dt = sum_{s->j} g(v_s, v_j) - sum_{j->d} g(v_j, v_d)

where ground edges are out-edges ``j -> ground`` evaluated with ``v_d = 0``.
All batched methods take states shaped ``(batch, num_nodes)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np
import scipy.sparse as sp

from . import devices
from .devices import DeviceKind
from .errors import InvalidArgument, NumericError
from .topology import Topology, validate


@dataclass
class NodeState:
    v: np.ndarray
    logp_delta: Optional[float] = None


@dataclass
class LinearSystem:
    """``C dv/dt + G v = b``."""
    C: np.ndarray
    G: np.ndarray
    b: np.ndarray

    def __str__(self):
        with np.printoptions(precision=6, suppress=True):
            return f"C=\n{self.C}\nG=\n{self.G}\nb={self.b}"


class LayerDynamics:
    """Immutable right-hand side of one layer with its packed parameter vector.

    ``params`` holds ``param_count`` contiguous entries per device, node-to-node
    edges first (in edge order) and ground edges after them.
    """

    def __init__(self, topology: Topology, kind, params, theta_cap: float = 1.0):
        problem = validate(topology)
        if problem is not None:
            raise InvalidArgument(problem)
        kind = DeviceKind.parse(kind)
        if kind is DeviceKind.CAPACITANCE:
            raise devices.UnsupportedDevice("capacitance is not a learnable edge device")
        if not theta_cap > 0:
            raise InvalidArgument(f"theta_cap must be positive, got {theta_cap}")
        params = np.array(params, dtype=float).reshape(-1)
        expected = topology.num_devices * kind.param_count
        if params.size != expected:
            raise InvalidArgument(f"expected {expected} parameters, got {params.size}")
        if not np.all(np.isfinite(params)):
            raise NumericError("non-finite parameters")
        params.setflags(write=False)

        self.topology = topology
        self.kind = kind
        self.params = params
        self.theta_cap = float(theta_cap)

        n = topology.num_nodes
        self.src, self.dst = topology.src_dst()
        self.is_ground = self.dst == n
        self.theta = params.reshape(-1, kind.param_count)
        ds, dd = devices.feature_slopes(kind)
        self._dphi_s, self._dphi_d = ds, dd
        self.cs = self.theta @ ds
        self.cd = np.where(self.is_ground, 0.0, self.theta @ dd)
        # d(tr)/d(z-slope) bookkeeping: each device adds act'(z) * k_e / theta_cap
        self.k_trace = self.cd - self.cs
        self._dk_dtheta = np.where(self.is_ground[:, None], 0.0, dd[None, :]) - ds[None, :]

        m = topology.num_devices
        cols = np.arange(m)
        self._src_t = sp.csr_matrix((np.ones(m), (self.src, cols)), shape=(n, m))
        live = ~self.is_ground
        self._dst_t = sp.csr_matrix((np.ones(live.sum()), (self.dst[live], cols[live])), shape=(n, m))
        self._inc_t = (self._dst_t - self._src_t).tocsr()

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes

    def with_params(self, params, theta_cap: Optional[float] = None) -> "LayerDynamics":
        return LayerDynamics(self.topology, self.kind, params,
                             self.theta_cap if theta_cap is None else theta_cap)

    # -- batched core -------------------------------------------------------

    def _node_values(self, V):
        Vp = np.concatenate([V, np.zeros((V.shape[0], 1))], axis=1)
        return Vp[:, self.src], Vp[:, self.dst]

    def _scatter(self, mat, X):
        return (mat @ X.T).T

    def preactivation(self, V):
        vs, vd = self._node_values(V)
        return devices.preactivation(self.kind, self.theta, vs, vd)

    def field(self, V) -> np.ndarray:
        g = devices.activate(self.kind, self.preactivation(V))
        return self._scatter(self._inc_t, np.broadcast_to(g, (V.shape[0], self.src.size))) / self.theta_cap

    def trace(self, V) -> np.ndarray:
        z = self.preactivation(V)
        s1 = devices.activate_d1(self.kind, np.broadcast_to(z, (V.shape[0], self.src.size)))
        return s1 @ self.k_trace / self.theta_cap

    def field_and_trace(self, V):
        z = np.broadcast_to(self.preactivation(V), (V.shape[0], self.src.size))
        g = devices.activate(self.kind, z)
        f = self._scatter(self._inc_t, g) / self.theta_cap
        return f, devices.activate_d1(self.kind, z) @ self.k_trace / self.theta_cap

    def vjp(self, V, abar, lbar=None):
        """Pull back cotangents through ``(field, trace)`` evaluated at ``V``.

        ``abar`` pairs with the field (batch, N) and ``lbar`` (batch,) with the
        trace. Returns ``(vbar, pbar)`` with ``pbar`` summed over the batch.
        """
        B = V.shape[0]
        vs, vd = self._node_values(V)
        z = np.broadcast_to(devices.preactivation(self.kind, self.theta, vs, vd), (B, self.src.size))
        s1 = devices.activate_d1(self.kind, z)
        ap = np.concatenate([abar, np.zeros((B, 1))], axis=1)
        u = (ap[:, self.dst] - ap[:, self.src]) * s1
        if lbar is not None:
            u = u + (lbar[:, None] * self.k_trace) * devices.activate_d2(self.kind, z)
        u = u / self.theta_cap
        vbar = self._scatter(self._src_t, u * self.cs) + self._scatter(self._dst_t, u * self.cd)
        phis = devices.features(self.kind, vs, vd)
        pbar = np.empty_like(self.theta)
        for k, phi in enumerate(phis):
            pbar[:, k] = (u * phi).sum(axis=0)
        if lbar is not None:
            pbar += (lbar @ s1)[:, None] * self._dk_dtheta / self.theta_cap
        return vbar, pbar.reshape(-1)

    def jacobian(self, v) -> np.ndarray:
        """Dense ``d field / d v`` at a single state."""
        v = np.asarray(v, dtype=float).reshape(1, -1)
        s1 = devices.activate_d1(self.kind, np.broadcast_to(self.preactivation(v), (1, self.src.size)))[0]
        n, m = self.num_nodes, self.src.size
        dz = np.zeros((m, n + 1))
        np.add.at(dz, (np.arange(m), self.src), self.cs)
        np.add.at(dz, (np.arange(m), self.dst), self.cd)
        return self._inc_t @ (s1[:, None] * dz[:, :n]) / self.theta_cap


def _as_state(dyn: LayerDynamics, v) -> np.ndarray:
    if isinstance(v, NodeState):
        v = v.v
    v = np.asarray(v, dtype=float)
    if v.shape != (dyn.num_nodes,):
        raise InvalidArgument(f"state has shape {v.shape}, expected ({dyn.num_nodes},)")
    if not np.all(np.isfinite(v)):
        raise NumericError("non-finite node voltages")
    return v.reshape(1, -1)


def rhs(dyn: LayerDynamics, v) -> np.ndarray:
    """``dv/dt`` at a single state."""
    return dyn.field(_as_state(dyn, v))[0]


def rhs_trace(dyn: LayerDynamics, v) -> float:
    """Exact trace of ``d rhs / d v`` in O(devices)."""
    return float(dyn.trace(_as_state(dyn, v))[0])


def rhs_jacobian(dyn: LayerDynamics, v) -> np.ndarray:
    return dyn.jacobian(_as_state(dyn, v)[0])


def assemble_linear(dyns: Union[LayerDynamics, Sequence[LayerDynamics]]) -> LinearSystem:
    """Nodal-analysis stamps for source/conductance layers sharing one node set.

    Several layers are superposed, which is how mixed source/conductance
    circuits are expressed.
    """
    if isinstance(dyns, LayerDynamics):
        dyns = [dyns]
    if not dyns:
        raise InvalidArgument("no dynamics given")
    n = dyns[0].num_nodes
    theta_cap = dyns[0].theta_cap
    G = np.zeros((n, n))
    b = np.zeros(n)
    for dyn in dyns:
        if not dyn.kind.is_linear:
            raise InvalidArgument(f"{dyn.kind.value} is not a linear device")
        if dyn.num_nodes != n or dyn.theta_cap != theta_cap:
            raise InvalidArgument("superposed layers must share nodes and capacitance")
        for s, d, grd, th in zip(dyn.src, dyn.dst, dyn.is_ground, dyn.theta[:, 0]):
            if dyn.kind is DeviceKind.SOURCE:
                b[s] -= th
                if not grd:
                    b[d] += th
            else:
                G[s, s] += th
                if not grd:
                    G[d, d] += th
                    G[s, d] -= th
                    G[d, s] -= th
    return LinearSystem(theta_cap * np.eye(n), G, b)
