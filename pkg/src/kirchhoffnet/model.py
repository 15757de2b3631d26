"""Multi-layer KirchhoffNet: composition of time segments, readout, and flow mode.

Layer ``k`` integrates its own topology over ``[0, T_k]``. Between layers a node
keeps its index: nodes present in both layers carry their voltage over, nodes
absent from the next layer are dropped, and new nodes start at 0 V.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ._io import atomic_write_text
from .adjoint import backward
from .devices import DeviceKind
from .dynamics import LayerDynamics
from .errors import InvalidArgument, ParseError, VersionError
from .integrator import IntegratorConfig, integrate
from .topology import Topology, validate

CHECKPOINT_VERSION = 1
LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LayerSpec:
    topology: Topology
    kind: DeviceKind
    params: np.ndarray
    T: float = 1.0
    steps: int = 40
    method: str = "euler"

    def __post_init__(self):
        self.kind = DeviceKind.parse(self.kind)
        self.params = np.asarray(self.params, dtype=float).reshape(-1)

    @property
    def num_nodes(self) -> int:
        return self.topology.num_nodes

    @property
    def config(self) -> IntegratorConfig:
        return IntegratorConfig(self.method, self.steps, self.T)

    def dynamics(self, theta_cap: float = 1.0) -> LayerDynamics:
        return LayerDynamics(self.topology, self.kind, self.params, theta_cap)


def init_params(topology: Topology, kind, rng: np.random.Generator) -> np.ndarray:
    """Uniform on ``[-1/sqrt(fan), 1/sqrt(fan)]`` per device.

    ``fan`` is the larger device count of the two endpoints (the source node
    alone for ground edges): a device's current enters both endpoint sums, so
    scaling by the busier node keeps every initial ``dv/dt`` bounded.
    """
    kind = DeviceKind.parse(kind)
    src, dst = topology.src_dst()
    n = topology.num_nodes
    degree = np.bincount(src, minlength=n + 1) + np.bincount(dst, minlength=n + 1)
    degree[n] = 0
    fan = np.maximum(degree[src], degree[dst])
    bound = 1.0 / np.sqrt(np.maximum(fan, 1))
    u = rng.uniform(-1.0, 1.0, size=(src.size, kind.param_count))
    return (u * bound[:, None]).reshape(-1)


def std_normal_logpdf(V: np.ndarray) -> np.ndarray:
    return -0.5 * np.sum(V * V, axis=-1) - 0.5 * V.shape[-1] * LOG_2PI


def _carry(V: np.ndarray, n_next: int) -> np.ndarray:
    out = np.zeros((V.shape[0], n_next))
    m = min(V.shape[1], n_next)
    out[:, :m] = V[:, :m]
    return out


@dataclass
class KirchhoffNet:
    layers: list
    input_nodes: Sequence[int]
    readout_nodes: Sequence[int]
    theta_cap: float = 1.0
    _dyn_cache: list = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise InvalidArgument("a network needs at least one layer")
        self.input_nodes = tuple(int(i) for i in self.input_nodes)
        self.readout_nodes = tuple(int(i) for i in self.readout_nodes)
        for name, idx, n in (("input_nodes", self.input_nodes, self.layers[0].num_nodes),
                             ("readout_nodes", self.readout_nodes, self.layers[-1].num_nodes)):
            if not idx:
                raise InvalidArgument(f"{name} is empty")
            if len(set(idx)) != len(idx):
                raise InvalidArgument(f"{name} has duplicates")
            if min(idx) < 0 or max(idx) >= n:
                raise InvalidArgument(f"{name} out of range for {n} nodes")
        for k, layer in enumerate(self.layers):
            problem = validate(layer.topology)
            if problem is not None:
                raise InvalidArgument(f"layer {k}: {problem}")
        self._dyn_cache = [layer.dynamics(self.theta_cap) for layer in self.layers]

    # -- parameters ---------------------------------------------------------

    @property
    def D(self) -> int:
        return len(self.layers)

    @property
    def horizon(self) -> float:
        return float(sum(layer.T for layer in self.layers))

    @property
    def num_params(self) -> int:
        return sum(layer.params.size for layer in self.layers)

    def flat_params(self) -> np.ndarray:
        return np.concatenate([layer.params for layer in self.layers])

    def with_flat_params(self, vector) -> "KirchhoffNet":
        vector = np.asarray(vector, dtype=float)
        if vector.size != self.num_params:
            raise InvalidArgument(f"expected {self.num_params} parameters, got {vector.size}")
        layers, start = [], 0
        for layer in self.layers:
            stop = start + layer.params.size
            layers.append(LayerSpec(layer.topology, layer.kind, vector[start:stop].copy(),
                                    layer.T, layer.steps, layer.method))
            start = stop
        return KirchhoffNet(layers, self.input_nodes, self.readout_nodes, self.theta_cap)

    def dynamics(self, k: int) -> LayerDynamics:
        return self._dyn_cache[k]

    @property
    def is_flow(self) -> bool:
        d = len(self.readout_nodes)
        return (all(layer.num_nodes == d for layer in self.layers)
                and self.readout_nodes == tuple(range(d)) and self.input_nodes == tuple(range(d)))

    def _require_flow(self):
        if not self.is_flow:
            raise InvalidArgument("flow mode needs a constant node count equal to the data "
                                  "dimension, with inputs and readout on all nodes in order")

    # -- deterministic forward ----------------------------------------------

    def _embed(self, X) -> tuple[np.ndarray, bool]:
        X = np.asarray(X, dtype=float)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != len(self.input_nodes):
            raise InvalidArgument(f"input has {X.shape[1]} components, expected {len(self.input_nodes)}")
        V = np.zeros((X.shape[0], self.layers[0].num_nodes))
        V[:, list(self.input_nodes)] = X
        return V, single

    def forward(self, X) -> np.ndarray:
        """Output voltages on the readout nodes at ``t = D*T``."""
        Y, _ = self.forward_with_pullback(X)
        return Y

    def forward_with_pullback(self, X):
        """Return ``(Y, pullback)`` where ``pullback(dY) -> (grad_params, dX)``."""
        V, single = self._embed(X)
        trajs = []
        for k, layer in enumerate(self.layers):
            if k:
                V = _carry(V, layer.num_nodes)
            traj = integrate(self.dynamics(k), V, layer.config)
            trajs.append(traj)
            V = traj.states[-1]
        Y = V[:, list(self.readout_nodes)]

        def pullback(dY):
            dY = np.asarray(dY, dtype=float).reshape(Y.shape)
            a = np.zeros_like(V)
            a[:, list(self.readout_nodes)] = dY
            grads = [None] * self.D
            for k in range(self.D - 1, -1, -1):
                if k < self.D - 1:
                    a = _carry(a, self.layers[k].num_nodes)
                grads[k], a = backward(self.dynamics(k), trajs[k], self.layers[k].config, a)
            return np.concatenate(grads), a[:, list(self.input_nodes)]

        return (Y[0] if single else Y), pullback

    # -- flow mode ----------------------------------------------------------

    def logdensity_with_pullback(self, X):
        """``log q(x)`` per row; ``pullback(w)`` returns the gradient of ``sum_i w_i log q(x_i)``.

        The data point is placed at ``t = D*T`` and integrated back to ``t = 0``
        with the negated field while the trace integral accumulates on the same
        grid: ``log q(x) = log N(v(0); 0, I) - integral_0^{DT} tr(df/dv) dt``.
        """
        self._require_flow()
        V, single = self._embed(X)
        trajs = [None] * self.D
        ell = np.zeros(V.shape[0])
        for k in range(self.D - 1, -1, -1):
            traj = integrate(self.dynamics(k), V, self.layers[k].config, with_logp=True, reverse=True)
            trajs[k] = traj
            V = traj.states[-1]
            ell = ell + traj.logp[-1]
        logq = std_normal_logpdf(V) - ell

        def pullback(w):
            w = np.broadcast_to(np.asarray(w, dtype=float), logq.shape)
            a = -w[:, None] * V
            grads = [None] * self.D
            for k in range(self.D):
                grads[k], a = backward(self.dynamics(k), trajs[k], self.layers[k].config, a, grad_logp=-w)
            return np.concatenate(grads)

        return (float(logq[0]) if single else logq), pullback

    def logdensity(self, X):
        return self.logdensity_with_pullback(X)[0]

    def push_forward_with_pullback(self, eps):
        """Push base draws ``eps`` through the flow.

        Returns ``(x, log q(x), pullback)``, with ``log q`` accumulated along the
        same forward trajectory. ``pullback(dx, dlogq)`` gives the parameter
        gradient of ``sum(dx * x) + sum(dlogq * log q)``.
        """
        self._require_flow()
        V, _ = self._embed(eps)
        logq = std_normal_logpdf(V)
        trajs = []
        for k, layer in enumerate(self.layers):
            traj = integrate(self.dynamics(k), V, layer.config, with_logp=True)
            trajs.append(traj)
            V = traj.states[-1]
            logq = logq + traj.logp[-1]

        def pullback(dx, dlogq):
            a = np.array(dx, dtype=float).reshape(V.shape)
            dl = np.broadcast_to(np.asarray(dlogq, dtype=float), logq.shape)
            grads = [None] * self.D
            for k in range(self.D - 1, -1, -1):
                grads[k], a = backward(self.dynamics(k), trajs[k], self.layers[k].config, a, grad_logp=dl)
            return np.concatenate(grads)

        return V, logq, pullback

    def base_draws(self, n: int, seed) -> np.ndarray:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        return rng.standard_normal((n, len(self.input_nodes)))

    def sample(self, n: int, seed) -> np.ndarray:
        """Draw ``v(0) ~ N(0, I)`` and return ``v(D*T)`` on the readout nodes."""
        self._require_flow()
        return self.forward(self.base_draws(n, seed))


def build_net(topologies: Sequence[Topology], kind, T: float, steps: int, seed,
              method: str = "euler", input_nodes=None, readout_nodes=None,
              theta_cap: float = 1.0) -> KirchhoffNet:
    """Net with one layer per topology and freshly initialised parameters."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = [LayerSpec(t, kind, init_params(t, kind, rng), T, steps, method) for t in topologies]
    if input_nodes is None:
        input_nodes = range(topologies[0].num_nodes)
    if readout_nodes is None:
        readout_nodes = range(topologies[-1].num_nodes)
    return KirchhoffNet(layers, input_nodes, readout_nodes, theta_cap)


def zero_like(net: KirchhoffNet) -> KirchhoffNet:
    return net.with_flat_params(np.zeros(net.num_params))


# -- checkpoints ---------------------------------------------------------------

def checkpoint_dict(net: KirchhoffNet) -> dict:
    return {
        "format": "kirchhoffnet-checkpoint",
        "version": CHECKPOINT_VERSION,
        "theta_cap": net.theta_cap,
        "input_nodes": list(net.input_nodes),
        "readout_nodes": list(net.readout_nodes),
        "layers": [
            {
                "nodes": layer.num_nodes,
                "edges": [list(e) for e in layer.topology.edges],
                "gedges": list(layer.topology.ground_edges),
                "kind": layer.kind.value,
                "T": layer.T,
                "steps": layer.steps,
                "method": layer.method,
                "params": [float(p) for p in layer.params],
            }
            for layer in net.layers
        ],
    }


def net_from_dict(doc: dict) -> KirchhoffNet:
    if not isinstance(doc, dict) or "version" not in doc:
        raise ParseError("checkpoint has no version field")
    if doc["version"] != CHECKPOINT_VERSION:
        raise VersionError(f"unsupported checkpoint version {doc['version']!r}; "
                           f"this build reads version {CHECKPOINT_VERSION}")
    try:
        layers = []
        for item in doc["layers"]:
            topo = Topology(int(item["nodes"]), tuple(tuple(e) for e in item["edges"]),
                            tuple(item.get("gedges", ())))
            layers.append(LayerSpec(topo, item["kind"], np.array(item["params"], dtype=float),
                                    float(item["T"]), int(item["steps"]), item.get("method", "euler")))
        return KirchhoffNet(layers, doc["input_nodes"], doc["readout_nodes"], float(doc.get("theta_cap", 1.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed checkpoint: {exc}") from exc


def save_checkpoint(net: KirchhoffNet, path):
    return atomic_write_text(path, json.dumps(checkpoint_dict(net)))


def load_checkpoint(path) -> KirchhoffNet:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return net_from_dict(doc)
