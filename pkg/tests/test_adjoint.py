import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_dynamics
from kirchhoffnet.adjoint import backward, finite_diff_grad
from kirchhoffnet.devices import NONLINEAR_KINDS
from kirchhoffnet.dynamics import LayerDynamics
from kirchhoffnet.errors import InvalidArgument, NumericError
from kirchhoffnet.gradcheck import check_net, random_net, run_gradcheck
from kirchhoffnet.integrator import IntegratorConfig, integrate
from kirchhoffnet.model import KirchhoffNet, LayerSpec, build_net
from kirchhoffnet.topology import Topology, fc_topo


def rel_err(a, b):
    return np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12)


def test_zero_upstream_gradient(rng):
    dyn = random_dynamics(rng, "tanh3")
    cfg = IntegratorConfig("rk4", 10, 1.0)
    traj = integrate(dyn, rng.normal(size=dyn.num_nodes), cfg, with_logp=True)
    gp, gv = backward(dyn, traj, cfg, np.zeros(dyn.num_nodes), 0.0)
    assert np.all(gp == 0) and np.all(gv == 0)


def test_single_euler_step_chain_rule():
    dt = 0.1
    dyn = LayerDynamics(Topology(2, ((0, 1),)), "relu2", [1.0, 0.2])
    cfg = IntegratorConfig("euler", 1, dt)
    traj = integrate(dyn, [1.0, 0.0], cfg)
    gp, gv = backward(dyn, traj, cfg, [0.0, 1.0])
    # v1(dt) = dt * relu(theta1 * (v0 - v1) + theta2)
    assert gp[1] == pytest.approx(dt, abs=1e-15)
    assert gp[0] == pytest.approx(dt * 1.0, abs=1e-15)
    np.testing.assert_allclose(gv, [dt, 1.0 - dt], atol=1e-15)


def _l2_loss(X):
    def loss(net):
        return float(np.sum(net.forward(X) ** 2))
    return loss


@pytest.mark.parametrize("method", ["euler", "rk4"])
@pytest.mark.parametrize("kind", ["tanh2", "tanh3", "relu2", "relu3"])
def test_three_layer_net_matches_finite_differences(kind, method):
    rng = np.random.default_rng(5)
    net = build_net([fc_topo(6).with_ground_edges([0, 3])] * 3, kind, 0.5, 12, rng, method=method)
    X = rng.normal(size=(3, 6))
    worst, checked, excluded = check_net(net, X)
    assert worst < 1e-5
    assert checked > 0.9 * net.num_params


def test_finite_diff_grad_agrees_with_adjoint():
    rng = np.random.default_rng(8)
    net = build_net([fc_topo(4).with_ground_edges([1])] * 2, "tanh3", 0.5, 8, rng, method="rk4")
    X = rng.normal(size=(2, 4))
    Y, pullback = net.forward_with_pullback(X)
    grad, dX = pullback(2 * Y)
    assert rel_err(grad, finite_diff_grad(net, _l2_loss(X))) < 1e-6
    h = 1e-6
    fd_x = np.zeros_like(X)
    for idx in np.ndindex(X.shape):
        e = np.zeros_like(X)
        e[idx] = h
        fd_x[idx] = (_l2_loss(X + e)(net) - _l2_loss(X - e)(net)) / (2 * h)
    assert rel_err(dX, fd_x) < 1e-6
    sub = finite_diff_grad(net, _l2_loss(X), indices=[0, 5])
    assert sub[0] != 0 and sub[1] == 0 and sub[5] != 0


def test_linear_net_quadratic_loss():
    rng = np.random.default_rng(2)
    topo = fc_topo(4).with_ground_edges(range(4))
    net = build_net([topo, topo], "conductance", 1.0, 20, rng)
    X = rng.normal(size=(2, 4))
    Y, pullback = net.forward_with_pullback(X)
    grad = pullback(2 * Y)[0]
    fd = finite_diff_grad(net, _l2_loss(X), eps=1e-4)
    assert rel_err(grad, fd) < 1e-7


@pytest.mark.parametrize("kind", ["tanh3", "tanh2", "relu3"])
def test_log_density_gradient(kind):
    rng = np.random.default_rng(11)
    topo = fc_topo(2, 2).with_ground_edges([0, 1])
    net = build_net([topo, topo], kind, 0.5, 10, rng, method="rk4")
    X = rng.normal(size=(5, 2))

    def nll(n):
        return -float(np.mean(n.logdensity(X)))

    logq, pullback = net.logdensity_with_pullback(X)
    grad = pullback(np.full(5, -1 / 5))
    assert rel_err(grad, finite_diff_grad(net, nll)) < 1e-3


def test_push_forward_gradient():
    rng = np.random.default_rng(3)
    topo = fc_topo(2, 2).with_ground_edges([0, 1])
    net = build_net([topo] * 3, "tanh3", 0.3, 6, rng, method="rk4")
    eps = rng.normal(size=(4, 2))
    w = rng.normal(size=(4, 2))
    c = rng.normal(size=4)

    def objective(n):
        x, logq, _ = n.push_forward_with_pullback(eps)
        return float(np.sum(w * x) + np.sum(c * logq))

    _, _, pullback = net.push_forward_with_pullback(eps)
    assert rel_err(pullback(w, c), finite_diff_grad(net, objective)) < 1e-6


def test_backward_deterministic(rng):
    dyn = random_dynamics(rng, "relu3")
    cfg = IntegratorConfig("euler", 30, 1.0)
    traj = integrate(dyn, rng.normal(size=(3, dyn.num_nodes)), cfg, with_logp=True)
    g = rng.normal(size=(3, dyn.num_nodes))
    a = backward(dyn, traj, cfg, g, 0.7)
    b = backward(dyn, traj, cfg, g, 0.7)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_backward_errors(rng):
    dyn = random_dynamics(rng, "tanh2")
    cfg = IntegratorConfig("euler", 10, 1.0)
    traj = integrate(dyn, np.zeros(dyn.num_nodes), cfg)
    with pytest.raises(InvalidArgument):
        backward(dyn, traj, IntegratorConfig("euler", 11, 1.0), np.ones(dyn.num_nodes))
    with pytest.raises(InvalidArgument):
        backward(dyn, traj, IntegratorConfig("euler", 10, 2.0), np.ones(dyn.num_nodes))
    with pytest.raises(InvalidArgument):
        backward(dyn, traj, cfg, np.ones(dyn.num_nodes), grad_logp=1.0)
    with pytest.raises(NumericError):
        backward(dyn, traj, cfg, np.full(dyn.num_nodes, np.inf))


@pytest.mark.parametrize("eps", [0.0, -1e-3])
def test_finite_diff_rejects_nonpositive_step(eps):
    net = build_net([fc_topo(2)], "relu2", 1.0, 2, 0)
    with pytest.raises(InvalidArgument):
        finite_diff_grad(net, lambda n: 0.0, eps=eps)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([k.value for k in NONLINEAR_KINDS]))
def test_random_nets_property(seed, kind):
    rng = np.random.default_rng(seed)
    net = random_net(kind, rng, steps=8)
    worst, checked, excluded = check_net(net, rng.normal(size=(2, len(net.input_nodes))))
    assert worst < 1e-4
    assert checked + excluded == net.num_params


def test_gradcheck_suite_small():
    reports = run_gradcheck(n_nets=3, seed=9)
    assert [r.kind for r in reports] == ["relu2", "tanh2", "relu3", "tanh3"]
    assert all(r.max_rel_error < 1e-4 and r.checked > 0 for r in reports)


def test_gradcheck_excludes_kink_crossings():
    # a ReLU pre-activation sitting within eps of zero must be excluded, not reported
    layer = LayerSpec(Topology(2, ((0, 1),)), "relu2", np.array([1.0, -1.0 + 1e-7]), 1.0, 1, "euler")
    net = KirchhoffNet([layer], [0, 1], [1])
    worst, checked, excluded = check_net(net, np.array([[1.0, 0.0]]))
    assert excluded >= 1
