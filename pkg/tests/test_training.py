import logging
import math

import numpy as np
import pytest

from kirchhoffnet.datasets import Dataset, DensityTarget, density_target
from kirchhoffnet.errors import DomainError, InvalidArgument, NumericError
from kirchhoffnet.model import build_net, zero_like
from kirchhoffnet.topology import Topology, fc_topo
from kirchhoffnet.training import (OptimizerState, TrainConfig, clip_grad_norm, cosine_lr, evaluate,
                                   loss_cross_entropy, loss_density_matching, loss_l2,
                                   loss_nll_generation, optimizer_step, train)


def flow(seed=0, steps=4):
    topo = fc_topo(2, 2).with_ground_edges([0, 1])
    return build_net([topo, topo], "tanh3", 0.3, steps, seed, method="rk4")


def test_l2_examples():
    assert loss_l2([[1.0, 2.0]], [[1.0, 2.0]]) == 0.0
    assert loss_l2([[1.0, 0.0]], [[0.0, 0.0]]) == 0.5
    with pytest.raises(InvalidArgument):
        loss_l2([[1.0, 0.0]], [[0.0]])


def test_cross_entropy_examples():
    assert loss_cross_entropy(np.zeros((1, 10)), [3]) == pytest.approx(math.log(10), abs=1e-12)
    logits = np.zeros((1, 10))
    logits[0, 7] = 50.0
    assert loss_cross_entropy(logits, [7]) < 1e-20
    with pytest.raises(InvalidArgument):
        loss_cross_entropy(np.zeros((2, 3)), [0, 3])


def test_nll_examples():
    net = zero_like(flow())
    X = np.random.default_rng(0).standard_normal((10_000, 2))
    assert loss_nll_generation(net, X) == pytest.approx(1 + math.log(2 * math.pi), rel=0.02)
    assert loss_nll_generation(net, [[0.0, 0.0]]) == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_density_matching_examples():
    net = zero_like(flow())
    rng = np.random.default_rng(0)
    gauss = density_target("gaussian")
    assert loss_density_matching(net, gauss, 256, rng) == pytest.approx(0.0, abs=1e-12)
    doubled = lambda X: 2 * np.exp(gauss.log_u(X))
    # the estimator is E_q[log q - log u]; an unnormalized 2N(0, I) shifts it by -ln 2
    assert loss_density_matching(net, doubled, 256, rng) == pytest.approx(-math.log(2), abs=1e-9)


def test_density_matching_domain_error():
    with pytest.raises(DomainError):
        loss_density_matching(flow(), lambda X: np.zeros(len(X)), 8, np.random.default_rng(0))


def _scaled(target, c):
    return DensityTarget(f"{target.name}-x{c}", lambda X: target.log_u(X) + math.log(c), target.grad_log_u)


def test_normalizer_does_not_change_updates():
    base = density_target("mixture2")
    cfg = TrainConfig(loss="density_matching", epochs=5, batch_size=64, lr=1e-2, seed=3)
    a = train(flow(1), cfg, target=base)
    b = train(flow(1), cfg, target=_scaled(base, 37.0))
    assert np.array_equal(a.final_net.flat_params(), b.final_net.flat_params())
    la = [r["train_loss"] for r in a.history]
    lb = [r["train_loss"] for r in b.history]
    np.testing.assert_allclose(np.array(la) - np.array(lb), math.log(37.0), atol=1e-9)
    # black-box callables (finite-difference score) agree to roundoff
    u = lambda X: np.exp(base.log_u(X))
    c = train(flow(1), cfg, target=u)
    d = train(flow(1), cfg, target=lambda X: 5.0 * u(X))
    np.testing.assert_allclose(c.final_net.flat_params(), d.final_net.flat_params(), atol=1e-7)


def test_sgd_example():
    state = OptimizerState("sgd", lr=0.1)
    assert optimizer_step(state, [1.0], [0.5])[0] == pytest.approx(0.95)


def test_adamw_first_step():
    g = np.array([0.3, -2.0, 1e-3])
    state = OptimizerState("adamw", lr=1e-2, weight_decay=0.0)
    new = optimizer_step(state, np.zeros(3), g)
    np.testing.assert_allclose(new, -1e-2 * np.sign(g), rtol=1e-4)


def test_adamw_reference_two_steps():
    p, lr, wd = np.array([0.5, -1.0]), 1e-2, 0.01
    grads = [np.array([0.2, -0.1]), np.array([-0.4, 0.3])]
    state = OptimizerState("adamw", lr=lr, weight_decay=wd)
    got = p.copy()
    for g in grads:
        got = optimizer_step(state, got, g)
    m = v = np.zeros(2)
    ref = p.copy()
    for t, g in enumerate(grads, 1):
        ref = ref - lr * wd * ref
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        ref = ref - lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(got, ref, rtol=1e-14)


@pytest.mark.parametrize("kind", ["sgd", "adamw"])
def test_zero_lr_and_zero_grad(kind):
    p = np.array([1.0, -2.0])
    assert np.array_equal(optimizer_step(OptimizerState(kind), p, [3.0, 4.0], lr=0.0), p)
    state = OptimizerState(kind, weight_decay=0.0)
    assert np.array_equal(optimizer_step(state, p, np.zeros(2)), p)


def test_optimizer_errors():
    with pytest.raises(NumericError):
        optimizer_step(OptimizerState(), [1.0], [np.nan])
    with pytest.raises(InvalidArgument):
        OptimizerState("rmsprop")


def test_cosine_schedule():
    assert cosine_lr(0, 100, 0.1) == 0.1
    assert cosine_lr(100, 100, 0.1) == 0.0
    assert cosine_lr(50, 100, 0.1) == pytest.approx(0.05)
    assert cosine_lr(150, 100, 0.1) == 0.0
    with pytest.raises(InvalidArgument):
        cosine_lr(-1, 100, 0.1)


def test_clip_grad_norm():
    g, clipped = clip_grad_norm(np.array([300.0, 400.0]), 100.0)
    assert clipped and np.linalg.norm(g) == pytest.approx(100.0)
    g, clipped = clip_grad_norm(np.array([3.0, 4.0]), 100.0)
    assert not clipped and g.tolist() == [3.0, 4.0]


def regression_data(n=64, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    return Dataset(X, X @ np.array([0.5, -1.0]) + 0.3)


def test_zero_epochs_returns_initial_net():
    net = build_net([fc_topo(3)], "relu2", 1.0, 4, 0, input_nodes=[0, 1], readout_nodes=[2])
    res = train(net, TrainConfig(epochs=0), regression_data())
    assert res.net is net and res.history == []


def test_sgd_on_linear_net_decreases_loss_monotonically():
    topo = fc_topo(3).with_ground_edges(range(3))
    net = build_net([topo], "source", 1.0, 5, 0, input_nodes=[0, 1], readout_nodes=[2])
    cfg = TrainConfig(loss="l2", epochs=30, batch_size=64, lr=0.01, optimizer="sgd", weight_decay=0.0)
    res = train(net, cfg, regression_data())
    losses = [r["train_loss"] for r in res.history]
    assert all(b < a for a, b in zip(losses, losses[1:]))
    assert losses[-1] < 0.4 * losses[0]


def test_training_is_bitwise_reproducible():
    net = build_net([fc_topo(4)], "tanh2", 1.0, 5, 0, input_nodes=[0, 1], readout_nodes=[3])
    cfg = TrainConfig(epochs=3, batch_size=16, lr=1e-2, scheduler=True, seed=7)
    data, test = regression_data(), regression_data(32, 1)
    a, b = train(net, cfg, data, test), train(net, cfg, data, test)
    assert np.array_equal(a.final_net.flat_params(), b.final_net.flat_params())
    assert [r["train_loss"] for r in a.history] == [r["train_loss"] for r in b.history]


def test_best_on_test_and_metrics_csv(tmp_path):
    net = build_net([fc_topo(4)], "relu2", 1.0, 5, 0, input_nodes=[0, 1], readout_nodes=[3])
    cfg = TrainConfig(epochs=4, batch_size=16, lr=1e-2, eval_every=2)
    res = train(net, cfg, regression_data(), regression_data(32, 1), metrics_path=tmp_path / "m.csv")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,test_metric,lr,wall_clock_s"
    assert len(lines) == 5 and lines[1].split(",")[2] == ""
    metrics = [r["test_metric"] for r in res.history if r["test_metric"] is not None]
    assert res.best_metric == min(metrics)
    assert evaluate(res.net, "l2", regression_data(32, 1)) == res.best_metric


def test_classification_metric_is_accuracy():
    net = build_net([fc_topo(3)], "relu2", 1.0, 2, 0, input_nodes=[0, 1, 2], readout_nodes=[0, 1, 2])
    net = zero_like(net)
    data = Dataset(np.eye(3), np.array([0, 1, 1]))
    assert evaluate(net, "cross_entropy", data) == pytest.approx(2 / 3)


def test_gradient_clipping_is_logged(caplog):
    net = build_net([fc_topo(3)], "relu2", 1.0, 4, 0, input_nodes=[0, 1], readout_nodes=[2])
    with caplog.at_level(logging.INFO, logger="kirchhoffnet"):
        res = train(net, TrainConfig(epochs=1, batch_size=64, clip=1e-9), regression_data())
    assert res.clipped_steps == 1
    assert "clipped" in caplog.text


def test_divergence_aborts_training():
    net = build_net([Topology(2, ((0, 1),), (0, 1))], "conductance", 1.0, 100, 0,
                    input_nodes=[0], readout_nodes=[1])
    net = net.with_flat_params([0.0, -1e6, -1e6])
    with pytest.raises(NumericError):
        train(net, TrainConfig(epochs=1, batch_size=8), Dataset(np.ones((8, 1)), np.ones(8)))


def test_train_config_validation():
    for bad in [dict(loss="hinge"), dict(epochs=-1), dict(batch_size=0), dict(lr=-1.0)]:
        with pytest.raises(InvalidArgument):
            TrainConfig(**bad)
    with pytest.raises(InvalidArgument):
        train(flow(), TrainConfig(loss="density_matching"))
    with pytest.raises(InvalidArgument):
        train(flow(), TrainConfig(loss="l2"))


def test_adamw_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=6)
    grads = rng.normal(size=(5, 6))
    lrs = [1e-2, 8e-3, 5e-3, 2e-3, 1e-3]
    state = OptimizerState("adamw", lr=1e-2, weight_decay=0.01)
    ours = p0.copy()
    for g, lr in zip(grads, lrs):
        ours = optimizer_step(state, ours, g, lr=lr)
    t = torch.tensor(p0, dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([t], lr=1e-2, weight_decay=0.01)
    for g, lr in zip(grads, lrs):
        opt.param_groups[0]["lr"] = lr
        t.grad = torch.tensor(g, dtype=torch.float64)
        opt.step()
    np.testing.assert_allclose(ours, t.detach().numpy(), rtol=1e-12, atol=1e-15)


def test_stop_at_ends_training_early():
    net = build_net([fc_topo(4)], "relu2", 1.0, 5, 0, input_nodes=[0, 1], readout_nodes=[3])
    res = train(net, TrainConfig(epochs=50, batch_size=16, lr=1e-2, stop_at=10.0),
                regression_data(), regression_data(32, 1))
    assert len(res.history) == 1
