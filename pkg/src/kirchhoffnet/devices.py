"""Branch current laws for learnable edges.

Every learnable device law is written as ``i = act(z)`` with a pre-activation
``z = sum_k theta_k * phi_k(v_s, v_d)`` whose features ``phi_k`` are affine in
the node voltages:

=============  ===============  ==========
kind           features phi      act
=============  ===============  ==========
source         [1]              identity
conductance    [v_s - v_d]      identity
relu2, tanh2   [v_s - v_d, 1]   relu, tanh
relu3, tanh3   [v_s, v_d, 1]    relu, tanh
=============  ===============  ==========

The ReLU derivative at exactly zero is taken as 0.
"""
from __future__ import annotations

import enum

import numpy as np

from .errors import InvalidArgument, UnsupportedDevice


class DeviceKind(enum.Enum):
    SOURCE = "source"
    CONDUCTANCE = "conductance"
    CAPACITANCE = "capacitance"
    RELU2 = "relu2"
    TANH2 = "tanh2"
    RELU3 = "relu3"
    TANH3 = "tanh3"

    @classmethod
    def parse(cls, name) -> "DeviceKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(str(name).strip().lower())
        except ValueError:
            raise InvalidArgument(f"unknown device kind {name!r}") from None

    @property
    def param_count(self) -> int:
        return _PARAM_COUNT[self]

    @property
    def is_linear(self) -> bool:
        return self in (DeviceKind.SOURCE, DeviceKind.CONDUCTANCE)

    @property
    def is_relu(self) -> bool:
        return self in (DeviceKind.RELU2, DeviceKind.RELU3)

    @property
    def is_tanh(self) -> bool:
        return self in (DeviceKind.TANH2, DeviceKind.TANH3)


_PARAM_COUNT = {
    DeviceKind.SOURCE: 1,
    DeviceKind.CONDUCTANCE: 1,
    DeviceKind.CAPACITANCE: 1,
    DeviceKind.RELU2: 2,
    DeviceKind.TANH2: 2,
    DeviceKind.RELU3: 3,
    DeviceKind.TANH3: 3,
}

LEARNABLE_KINDS = (
    DeviceKind.SOURCE, DeviceKind.CONDUCTANCE,
    DeviceKind.RELU2, DeviceKind.TANH2, DeviceKind.RELU3, DeviceKind.TANH3,
)
NONLINEAR_KINDS = (DeviceKind.RELU2, DeviceKind.TANH2, DeviceKind.RELU3, DeviceKind.TANH3)


def _learnable(kind) -> DeviceKind:
    kind = DeviceKind.parse(kind)
    if kind is DeviceKind.CAPACITANCE:
        raise UnsupportedDevice("capacitive branches are modelled by the fixed ground capacitor only")
    return kind


# --- vectorized building blocks (used by the dynamics module) ---------------

def features(kind: DeviceKind, vs, vd) -> list:
    """Feature list ``phi_k``; entries are arrays shaped like ``vs`` or the scalar 1.0."""
    if kind is DeviceKind.SOURCE:
        return [1.0]
    if kind is DeviceKind.CONDUCTANCE:
        return [vs - vd]
    if kind in (DeviceKind.RELU2, DeviceKind.TANH2):
        return [vs - vd, 1.0]
    if kind in (DeviceKind.RELU3, DeviceKind.TANH3):
        return [vs, vd, 1.0]
    raise UnsupportedDevice(f"no branch law for {kind.value}")


def feature_slopes(kind: DeviceKind) -> tuple[np.ndarray, np.ndarray]:
    """Constant ``d phi / d v_s`` and ``d phi / d v_d`` vectors."""
    table = {
        DeviceKind.SOURCE: ([0.0], [0.0]),
        DeviceKind.CONDUCTANCE: ([1.0], [-1.0]),
        DeviceKind.RELU2: ([1.0, 0.0], [-1.0, 0.0]),
        DeviceKind.TANH2: ([1.0, 0.0], [-1.0, 0.0]),
        DeviceKind.RELU3: ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
        DeviceKind.TANH3: ([1.0, 0.0, 0.0], [0.0, 1.0, 0.0]),
    }
    s, d = table[_learnable(kind)]
    return np.array(s), np.array(d)


def preactivation(kind: DeviceKind, theta: np.ndarray, vs, vd):
    """``z = sum_k theta[..., k] * phi_k``; ``theta`` has a trailing parameter axis."""
    z = 0.0
    for k, phi in enumerate(features(kind, vs, vd)):
        z = z + theta[..., k] * phi
    return z


def activate(kind: DeviceKind, z):
    if kind.is_relu:
        return np.maximum(z, 0.0)
    if kind.is_tanh:
        return np.tanh(z)
    return z


def activate_d1(kind: DeviceKind, z):
    if kind.is_relu:
        return (z > 0.0).astype(float)
    if kind.is_tanh:
        t = np.tanh(z)
        return 1.0 - t * t
    return np.ones_like(z)


def activate_d2(kind: DeviceKind, z):
    if kind.is_tanh:
        t = np.tanh(z)
        return -2.0 * t * (1.0 - t * t)
    return np.zeros_like(z)


# --- scalar API -------------------------------------------------------------

def _check_params(kind: DeviceKind, params) -> np.ndarray:
    theta = np.asarray(params, dtype=float).reshape(-1)
    if theta.size != kind.param_count:
        raise InvalidArgument(f"{kind.value} takes {kind.param_count} parameters, got {theta.size}")
    return theta


def branch_current(kind, v_s: float, v_d: float, params) -> float:
    """Current through a device from node ``s`` to node ``d``."""
    kind = _learnable(kind)
    theta = _check_params(kind, params)
    return float(activate(kind, preactivation(kind, theta, float(v_s), float(v_d))))


def branch_current_partials(kind, v_s: float, v_d: float, params):
    """Return ``(di/dv_s, di/dv_d, di/dtheta)`` evaluated analytically."""
    kind = _learnable(kind)
    theta = _check_params(kind, params)
    z = preactivation(kind, theta, float(v_s), float(v_d))
    slope = float(activate_d1(kind, np.asarray(z)))
    ds, dd = feature_slopes(kind)
    phi = np.array([float(p) for p in features(kind, float(v_s), float(v_d))])
    return slope * float(theta @ ds), slope * float(theta @ dd), slope * phi
