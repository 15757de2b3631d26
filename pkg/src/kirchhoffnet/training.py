"""Losses, optimizers, learning-rate schedule and the batch training loop."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from ._io import atomic_write_text
from .errors import DomainError, InvalidArgument, NumericError
from .model import KirchhoffNet

log = logging.getLogger(__name__)

LOSS_KINDS = ("l2", "cross_entropy", "nll_generation", "density_matching")


# -- losses ------------------------------------------------------------------

def _l2(pred, target):
    pred = np.atleast_2d(np.asarray(pred, dtype=float))
    target = np.atleast_2d(np.asarray(target, dtype=float))
    if pred.shape != target.shape:
        raise InvalidArgument(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    B, d = diff.shape
    return float(np.mean(diff * diff)), 2.0 * diff / (B * d)


def loss_l2(pred, target) -> float:
    """Mean over the batch of the per-sample mean squared error."""
    return _l2(pred, target)[0]


def _cross_entropy(logits, labels):
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.atleast_1d(np.asarray(labels)).astype(int)
    B, C = logits.shape
    if labels.shape != (B,):
        raise InvalidArgument(f"{labels.size} labels for {B} rows of logits")
    if labels.min() < 0 or labels.max() >= C:
        raise InvalidArgument(f"label out of range [0, {C})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    logprob = shifted - logz[:, None]
    loss = -float(np.mean(logprob[np.arange(B), labels]))
    grad = np.exp(logprob)
    grad[np.arange(B), labels] -= 1.0
    return loss, grad / B


def loss_cross_entropy(logits, labels) -> float:
    """Softmax cross-entropy averaged over the batch."""
    return _cross_entropy(logits, labels)[0]


def loss_nll_generation(net: KirchhoffNet, X) -> float:
    """``-mean_i log q(x_i)``."""
    return -float(np.mean(net.logdensity(np.atleast_2d(X))))


def _log_target(u, X):
    if hasattr(u, "log_u"):
        return u.log_u(X)
    vals = np.asarray(u(X), dtype=float)
    if np.any(~(vals > 0)):
        raise DomainError("target density is not positive at a sampled point")
    return np.log(vals)


def _grad_log_target(u, X, h=1e-5):
    if hasattr(u, "grad_log_u"):
        return u.grad_log_u(X)
    g = np.zeros_like(X)
    for j in range(X.shape[1]):
        e = np.zeros(X.shape[1])
        e[j] = h
        g[:, j] = (_log_target(u, X + e) - _log_target(u, X - e)) / (2 * h)
    return g


def _density_matching(net: KirchhoffNet, u, eps, log_z: float = 0.0):
    x, logq, pullback = net.push_forward_with_pullback(eps)
    logu = _log_target(u, x)
    if not np.all(np.isfinite(logu)):
        raise DomainError("target density is not positive at a sampled point")
    B = eps.shape[0]
    loss = float(np.mean(logq - logu)) + log_z

    def grad():
        return pullback(-_grad_log_target(u, x) / B, np.full(B, 1.0 / B))

    return loss, grad


def loss_density_matching(net: KirchhoffNet, u, batch_size: int, rng) -> float:
    """Monte-Carlo ``mean_i [log q(x_i) - log u(x_i)]`` with ``x_i`` drawn from the net.

    This is ``KL[q || u/Z] - log Z``; samples stay differentiable in the
    parameters through the fixed base draws.
    """
    eps = net.base_draws(batch_size, rng)
    return _density_matching(net, u, eps)[0]


# -- optimizers ----------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise InvalidArgument(f"unknown optimizer {self.kind!r}")


def optimizer_step(state: OptimizerState, params, grads, lr: Optional[float] = None) -> np.ndarray:
    """Return updated parameters; ``state`` moments and counter advance in place."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape:
        raise InvalidArgument("parameter and gradient vectors are not aligned")
    if not np.all(np.isfinite(grads)):
        raise NumericError("non-finite gradient", step=state.step)
    lr = state.lr if lr is None else lr
    state.step += 1
    if state.kind == "sgd":
        return params - lr * grads
    if state.m is None:
        state.m = np.zeros_like(params)
        state.v = np.zeros_like(params)
    b1, b2 = state.betas
    state.m = b1 * state.m + (1.0 - b1) * grads
    state.v = b2 * state.v + (1.0 - b2) * grads * grads
    m_hat = state.m / (1.0 - b1 ** state.step)
    v_hat = state.v / (1.0 - b2 ** state.step)
    decayed = params * (1.0 - lr * state.weight_decay)
    return decayed - lr * m_hat / (np.sqrt(v_hat) + state.eps)


def cosine_lr(step: int, total_steps: int, lr_max: float) -> float:
    """Half-cosine decay from ``lr_max`` at step 0 to 0 at ``total_steps``; later steps clamp to 0."""
    if step < 0:
        raise InvalidArgument(f"step must be >= 0, got {step}")
    if step >= total_steps:
        return 0.0
    return lr_max * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


def clip_grad_norm(grads: np.ndarray, max_norm: float):
    norm = float(np.linalg.norm(grads))
    if max_norm and norm > max_norm:
        return grads * (max_norm / norm), True
    return grads, False


# -- training loop -----------------------------------------------------------

@dataclass
class TrainConfig:
    loss: str = "l2"
    epochs: int = 10
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    scheduler: bool = False
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    clip: float = 100.0
    eval_every: int = 1
    steps_per_epoch: int = 1
    eval_samples: int = 4096
    # stop once the test metric reaches this value (>= for accuracy, <= otherwise)
    stop_at: Optional[float] = None

    def __post_init__(self):
        if self.loss not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss {self.loss!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.eval_every < 1 or self.steps_per_epoch < 1:
            raise InvalidArgument("epochs >= 0, batch_size >= 1, eval_every >= 1, steps_per_epoch >= 1")
        if not self.lr >= 0:
            raise InvalidArgument("lr must be non-negative")


@dataclass
class TrainResult:
    net: KirchhoffNet
    final_net: KirchhoffNet
    history: list = field(default_factory=list)
    best_metric: Optional[float] = None
    clipped_steps: int = 0

    def metrics_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "test_metric", "lr", "wall_clock_s"])
        for row in self.history:
            writer.writerow([row["epoch"], repr(row["train_loss"]),
                             "" if row["test_metric"] is None else repr(row["test_metric"]),
                             repr(row["lr"]), f"{row['wall_clock_s']:.3f}"])
        return buf.getvalue()

    def write_metrics(self, path):
        return atomic_write_text(path, self.metrics_csv())


def evaluate(net: KirchhoffNet, loss: str, data=None, target=None, eval_seed: int = 0,
             eval_samples: int = 4096, batch_size: int = 512) -> float:
    """Test metric: L2 loss, top-1 accuracy, mean NLL, or estimated KL (with the target's log Z)."""
    if loss == "density_matching":
        eps = net.base_draws(eval_samples, np.random.default_rng(eval_seed))
        return _density_matching(net, target, eps, getattr(target, "log_z", 0.0))[0]
    X, y = data.features, data.targets
    chunks = [slice(i, i + batch_size) for i in range(0, len(X), batch_size)]
    if loss == "nll_generation":
        return -float(np.concatenate([net.logdensity(X[c]) for c in chunks]).mean())
    out = np.concatenate([net.forward(X[c]) for c in chunks])
    if loss == "cross_entropy":
        return float(np.mean(np.argmax(out, axis=1) == y))
    return loss_l2(out, np.asarray(y, dtype=float).reshape(out.shape))


def _batch_loss_and_grad(net: KirchhoffNet, loss: str, X=None, y=None, target=None, eps=None):
    if loss == "density_matching":
        value, grad = _density_matching(net, target, eps)
        return value, grad()
    if loss == "nll_generation":
        logq, pullback = net.logdensity_with_pullback(X)
        B = logq.shape[0]
        return -float(np.mean(logq)), pullback(np.full(B, -1.0 / B))
    out, pullback = net.forward_with_pullback(X)
    if loss == "cross_entropy":
        value, dout = _cross_entropy(out, y)
    else:
        value, dout = _l2(out, np.asarray(y, dtype=float).reshape(out.shape))
    return value, pullback(dout)[0]


def train(net: KirchhoffNet, cfg: TrainConfig, data=None, test=None, target=None,
          metrics_path=None, progress=None) -> TrainResult:
    """Train ``net`` and return the best-on-test network (the final one without a test split).

    ``data``/``test`` are datasets with ``features`` and ``targets``; density
    matching uses ``target`` instead. Everything random derives from ``cfg.seed``.
    """
    is_density = cfg.loss == "density_matching"
    if is_density and target is None:
        raise InvalidArgument("density matching needs a target density")
    if not is_density and data is None:
        raise InvalidArgument(f"{cfg.loss} training needs a dataset")

    rng = np.random.default_rng(cfg.seed)
    opt = OptimizerState(kind=cfg.optimizer, lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = cfg.steps_per_epoch if is_density else len(data.features)
    steps_per_epoch = cfg.steps_per_epoch if is_density else math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    higher_is_better = cfg.loss == "cross_entropy"
    has_test = is_density or test is not None

    params = net.flat_params()
    best_net, best_metric = net, None
    result = TrainResult(net=net, final_net=net)
    t0 = time.perf_counter()
    global_step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = None if is_density else rng.permutation(n)
        losses, weights = [], []
        for b in range(steps_per_epoch):
            lr = cosine_lr(global_step, total_steps, cfg.lr) if cfg.scheduler else cfg.lr
            if is_density:
                value, grads = _batch_loss_and_grad(net, cfg.loss, target=target,
                                                    eps=net.base_draws(cfg.batch_size, rng))
                size = cfg.batch_size
            else:
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                y = None if data.targets is None else data.targets[idx]
                value, grads = _batch_loss_and_grad(net, cfg.loss, X=data.features[idx], y=y)
                size = idx.size
            if not math.isfinite(value):
                raise NumericError(f"non-finite loss in epoch {epoch}", step=global_step)
            grads, clipped = clip_grad_norm(grads, cfg.clip)
            if clipped:
                result.clipped_steps += 1
                log.info("epoch %d step %d: gradient norm clipped to %g", epoch, global_step, cfg.clip)
            params = optimizer_step(opt, params, grads, lr=lr)
            net = net.with_flat_params(params)
            losses.append(value)
            weights.append(size)
            global_step += 1

        metric = None
        if has_test and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            metric = evaluate(net, cfg.loss, test, target, eval_seed=cfg.seed + 1,
                              eval_samples=cfg.eval_samples)
            better = best_metric is None or (metric > best_metric if higher_is_better else metric < best_metric)
            if better:
                best_metric, best_net = metric, net
        row = {
            "epoch": epoch,
            "train_loss": float(np.average(losses, weights=weights)),
            "test_metric": metric,
            "lr": lr,
            "wall_clock_s": time.perf_counter() - t0,
        }
        result.history.append(row)
        if progress is not None:
            progress(row)
        if cfg.stop_at is not None and metric is not None and (
                metric >= cfg.stop_at if higher_is_better else metric <= cfg.stop_at):
            break

    result.final_net = net
    result.net = best_net if (has_test and not is_density and best_metric is not None) else net
    result.best_metric = best_metric
    if metrics_path is not None:
        result.write_metrics(metrics_path)
    return result
