"""Randomised comparison of adjoint gradients against central finite differences."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .devices import DeviceKind, NONLINEAR_KINDS, activate, preactivation
from .model import KirchhoffNet, LayerSpec, _carry
from .topology import Topology

REL_FLOOR = 1e-6


def random_net(kind, rng: np.random.Generator, max_nodes: int = 8, max_edges: int = 24,
               max_layers: int = 3, steps: int = 32, T: float = 1.0, method: str = "euler") -> KirchhoffNet:
    """Random multi-layer net: node counts, edge multisets and ground edges all drawn from ``rng``."""
    kind = DeviceKind.parse(kind)
    D = int(rng.integers(1, max_layers + 1))
    layers = []
    for _ in range(D):
        n = int(rng.integers(2, max_nodes + 1))
        pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
        m = int(rng.integers(1, max_edges + 1))
        edges = tuple(pairs[p] for p in rng.integers(0, len(pairs), m))
        ground = tuple(int(j) for j in rng.choice(n, size=int(rng.integers(0, n + 1)), replace=False))
        topo = Topology(n, edges, ground)
        params = rng.uniform(-1.0, 1.0, topo.num_devices * kind.param_count)
        layers.append(LayerSpec(topo, kind, params, T, steps, method))
    n_in = int(rng.integers(1, layers[0].num_nodes + 1))
    n_out = int(rng.integers(1, layers[-1].num_nodes + 1))
    return KirchhoffNet(layers, range(n_in), range(n_out))


def _stacked_losses(net: KirchhoffNet, X, thetas):
    """``sum ||y||^2`` for every row of ``thetas`` at once, plus ReLU sign patterns.

    The forward pass is re-implemented densely with a leading parameter-set
    axis so the 2P finite-difference evaluations share one time loop. The
    pattern is a list of boolean arrays (one per field evaluation), each of
    shape ``(M, B, E)``; it is empty for smooth device kinds.
    """
    thetas = np.atleast_2d(thetas)
    M = thetas.shape[0]
    V0, _ = net._embed(X)
    V = np.broadcast_to(V0, (M,) + V0.shape).copy()
    pattern = []
    offset = 0
    for k, layer in enumerate(net.layers):
        if k:
            V = np.stack([_carry(v, layer.num_nodes) for v in V])
        kind, topo = layer.kind, layer.topology
        n = topo.num_nodes
        src, dst = topo.src_dst()
        size = topo.num_devices * kind.param_count
        theta = thetas[:, offset:offset + size].reshape(M, 1, topo.num_devices, kind.param_count)
        offset += size
        inc = np.zeros((topo.num_devices, n + 1))
        inc[np.arange(src.size), src] -= 1.0
        inc[np.arange(dst.size), dst] += 1.0
        inc = inc[:, :n] / net.theta_cap

        def field(V):
            Vp = np.concatenate([V, np.zeros(V.shape[:-1] + (1,))], axis=-1)
            z = preactivation(kind, theta, Vp[..., src], Vp[..., dst])
            if kind.is_relu:
                pattern.append(z > 0)
            return activate(kind, z) @ inc

        dt = layer.config.dt
        for _ in range(layer.steps):
            if layer.config.method == "euler":
                V = V + dt * field(V)
            else:
                k1 = field(V)
                k2 = field(V + 0.5 * dt * k1)
                k3 = field(V + 0.5 * dt * k2)
                k4 = field(V + dt * k3)
                V = V + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    Y = V[..., list(net.readout_nodes)]
    return np.sum(Y * Y, axis=(1, 2)), pattern


@dataclass
class GradCheckReport:
    kind: str
    max_rel_error: float
    checked: int
    excluded: int


def check_net(net: KirchhoffNet, X, eps: float = 1e-5):
    """Max relative error of the adjoint gradient of ``sum ||y||^2``; ReLU kink crossings are skipped.

    Relative error per parameter is ``|a - f| / max(|a|, |f|, 1e-6)``.
    """
    Y, pullback = net.forward_with_pullback(X)
    adj = pullback(2.0 * Y)[0]
    theta = net.flat_params()
    P = theta.size
    shifts = np.concatenate([np.eye(P), -np.eye(P)]) * eps
    losses, pattern = _stacked_losses(net, X, np.concatenate([theta[None], theta + shifts]))
    crossed = np.zeros(2 * P, dtype=bool)
    for step in pattern:
        crossed |= np.any(step[1:] != step[:1], axis=(1, 2))
    kink = crossed[:P] | crossed[P:]
    fd = (losses[1:P + 1] - losses[P + 1:]) / (2 * eps)
    rel = np.abs(adj - fd) / np.maximum(np.maximum(np.abs(adj), np.abs(fd)), REL_FLOOR)
    worst = float(np.max(rel[~kink], initial=0.0))
    checked, excluded = int(np.sum(~kink)), int(np.sum(kink))
    return worst, checked, excluded


def run_gradcheck(kinds=NONLINEAR_KINDS, n_nets: int = 20, seed: int = 0, eps: float = 1e-5,
                  batch: int = 2) -> list[GradCheckReport]:
    reports = []
    for kind in kinds:
        kind = DeviceKind.parse(kind)
        rng = np.random.default_rng([seed, list(DeviceKind).index(kind)])
        worst, checked, excluded = 0.0, 0, 0
        for _ in range(n_nets):
            net = random_net(kind, rng)
            X = rng.normal(size=(batch, len(net.input_nodes)))
            w, c, e = check_net(net, X, eps)
            worst, checked, excluded = max(worst, w), checked + c, excluded + e
        reports.append(GradCheckReport(kind.value, worst, checked, excluded))
    return reports
