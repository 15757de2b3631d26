import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from kirchhoffnet.devices import (LEARNABLE_KINDS, DeviceKind, activate, branch_current,
                                  branch_current_partials, preactivation)
from kirchhoffnet.errors import InvalidArgument, UnsupportedDevice

volts = st.floats(-3, 3, allow_nan=False)


def test_param_counts():
    counts = {k.value: k.param_count for k in DeviceKind}
    assert counts == {"source": 1, "conductance": 1, "capacitance": 1,
                      "relu2": 2, "tanh2": 2, "relu3": 3, "tanh3": 3}


@pytest.mark.parametrize("name", ["ReLU2", "TANH3", " source ", "Conductance"])
def test_parse_case_insensitive(name):
    assert DeviceKind.parse(name).value == name.strip().lower()


def test_parse_unknown():
    with pytest.raises(InvalidArgument):
        DeviceKind.parse("diode")


def test_branch_current_examples():
    assert branch_current("relu2", 1.0, 0.25, [2.0, -1.0]) == pytest.approx(0.5, abs=1e-15)
    assert branch_current("tanh2", 0.7, 0.7, [3.3, 0.0]) == 0.0
    assert branch_current("conductance", 2.0, 0.5, [2.0]) == pytest.approx(3.0)
    assert branch_current("relu3", 0.5, -0.5, [1, 1, 0]) == 0.0
    assert branch_current("source", 5.0, -1.0, [0.3]) == 0.3


def test_branch_current_errors():
    with pytest.raises(UnsupportedDevice):
        branch_current("capacitance", 0.0, 0.0, [1.0])
    with pytest.raises(InvalidArgument):
        branch_current("relu2", 0.0, 0.0, [1.0])


def test_partials_examples():
    ds, dd, dth = branch_current_partials("relu2", 1.0, 0.25, [2.0, 0.0])
    assert (ds, dd) == (2.0, -2.0)
    np.testing.assert_allclose(dth, [0.75, 1.0])
    ds, dd, dth = branch_current_partials("relu2", 0.0, 1.0, [2.0, 0.0])
    assert (ds, dd) == (0.0, 0.0) and np.all(dth == 0)
    ds, dd, dth = branch_current_partials("tanh3", 0.4, 0.8, [2.0, -1.0, 0.0])
    assert (ds, dd) == pytest.approx((2.0, -1.0))
    np.testing.assert_allclose(dth, [0.4, 0.8, 1.0])


def test_relu_derivative_at_kink_is_zero():
    ds, dd, dth = branch_current_partials("relu3", 0.5, -0.5, [1, 1, 0])
    assert ds == 0.0 and dd == 0.0 and np.all(dth == 0)


@pytest.mark.parametrize("kind", LEARNABLE_KINDS, ids=lambda k: k.value)
def test_partials_match_finite_differences(kind):
    rng = np.random.default_rng(list(DeviceKind).index(kind))
    n, h = 10_000, 1e-6
    vs, vd = rng.uniform(-2, 2, n), rng.uniform(-2, 2, n)
    theta = rng.uniform(-2, 2, (n, kind.param_count))

    def current(vs, vd, theta):
        return activate(kind, preactivation(kind, theta, vs, vd))

    z = preactivation(kind, theta, vs, vd)
    keep = np.abs(z) > 1e-4 if kind.is_relu else np.ones(n, bool)
    fd_s = (current(vs + h, vd, theta) - current(vs - h, vd, theta)) / (2 * h)
    fd_d = (current(vs, vd + h, theta) - current(vs, vd - h, theta)) / (2 * h)
    fd_t = np.empty_like(theta)
    for k in range(kind.param_count):
        e = np.zeros(kind.param_count)
        e[k] = h
        fd_t[:, k] = (current(vs, vd, theta + e) - current(vs, vd, theta - e)) / (2 * h)
    worst = 0.0
    for i in np.flatnonzero(keep):
        a_s, a_d, a_t = branch_current_partials(kind, vs[i], vd[i], theta[i])
        analytic = np.concatenate([[a_s, a_d], a_t])
        fd = np.concatenate([[fd_s[i], fd_d[i]], fd_t[i]])
        worst = max(worst, np.max(np.abs(analytic - fd) / np.maximum(np.abs(fd), 1e-3)))
    assert worst < 1e-5


@given(volts, volts, st.floats(-5, 5), st.floats(-2, 2), st.floats(-2, 2))
def test_two_terminal_laws_shift_invariant(vs, vd, c, t1, t2):
    for kind in ("relu2", "tanh2"):
        a = branch_current(kind, vs, vd, [t1, t2])
        b = branch_current(kind, vs + c, vd + c, [t1, t2])
        assert math.isclose(a, b, rel_tol=1e-9, abs_tol=1e-9)


def test_three_terminal_laws_not_shift_invariant():
    assert branch_current("tanh3", 0.1, 0.2, [1, 1, 0]) != branch_current("tanh3", 1.1, 1.2, [1, 1, 0])


@given(volts, volts, st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_current_ranges(vs, vd, theta):
    # |z| <= 14 here, so tanh stays strictly inside (-1, 1) in double precision
    assert -1 < branch_current("tanh3", vs, vd, theta) < 1
    assert -1 < branch_current("tanh2", vs, vd, theta[:2]) < 1
    assert branch_current("relu3", vs, vd, theta) >= 0
    assert branch_current("relu2", vs, vd, theta[:2]) >= 0
