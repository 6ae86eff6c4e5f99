"""End-to-end training of the gain network through the filter recursion.

One client optimizes its own network on its private windows with an
l2-regularized MSE position loss:

    loss = (1/T) sum_t ||x_upd[t] - x_true[t]||^2 + gamma * ||theta||^2

The gradient flows through the unrolled filter (the estimates feed the
next step's features), so a training step is plain BPTT over one window.
Updates are stochastic gradient descent with optional global-norm
clipping and decoupled weight decay: the gamma term above is part of the
loss value and its gradient, while ``weight_decay`` shrinks parameters
multiplicatively per step (both knobs exposed, gamma defaults to 0 so the
two are not double-counted).

Datasets only need ``dt``, ``train_windows()`` and ``val_windows()``,
each window a (6xL measured, 3xL truth) pair.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from . import gain_network as gn
from . import learned_filter as lf
from .errors import DataError, NumericalError

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e6


@dataclass
class TrainConfig:
    epochs: int = 500
    learning_rate: float = 0.3
    weight_decay: float = 0.3
    gamma: float = 0.0
    batch_size: int = 1
    grad_clip: Optional[float] = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError(f"learning rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise DataError(f"batch size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise DataError(f"epochs must be >= 0, got {self.epochs}")


@dataclass
class TrainReport:
    """Per-epoch training statistics."""

    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_rtle: List[float] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    def rows(self):
        return [
            (e, self.train_loss[e], self.val_loss[e], self.val_rtle[e], self.seconds[e])
            for e in range(len(self.train_loss))
        ]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("epoch,train_loss,val_loss,val_rtle,seconds\n")
            for epoch, tr, vl, rt, sec in self.rows():
                fh.write(f"{epoch},{tr:.12g},{vl:.12g},{rt:.12g},{sec:.6f}\n")


def compute_loss(
    params: gn.GainNetworkParams,
    measured: np.ndarray,
    truth: np.ndarray,
    dt: float,
    gamma: float = 0.0,
    controls: Optional[np.ndarray] = None,
    init_mean: Optional[np.ndarray] = None,
):
    """Mean squared position error over the window plus gamma*||theta||^2.

    Returns (loss, 3xT estimates). Raises on non-finite loss.
    """
    run = lf.run_learned_filter(params, measured, dt, controls, init_mean)
    truth = np.asarray(truth, dtype=float)
    if truth.shape != run.estimates.shape:
        raise DataError(
            f"truth shape {truth.shape} != estimate shape {run.estimates.shape}"
        )
    mse = float(np.mean(np.sum((run.estimates - truth) ** 2, axis=0)))
    loss = mse + gamma * params.squared_norm()
    if not np.isfinite(loss):
        raise NumericalError("loss is non-finite")
    return loss, run.estimates


def loss_and_gradient(
    params: gn.GainNetworkParams,
    measured: np.ndarray,
    truth: np.ndarray,
    dt: float,
    gamma: float = 0.0,
    controls: Optional[np.ndarray] = None,
    init_mean: Optional[np.ndarray] = None,
):
    """Loss plus its exact parameter gradient via BPTT through the filter."""
    run, caches = lf.run_learned_filter(
        params, measured, dt, controls, init_mean, _want_cache=True
    )
    truth = np.asarray(truth, dtype=float)
    if truth.shape != run.estimates.shape:
        raise DataError(
            f"truth shape {truth.shape} != estimate shape {run.estimates.shape}"
        )
    diff = run.estimates - truth
    n_steps = diff.shape[1]
    mse = float(np.mean(np.sum(diff**2, axis=0)))
    loss = mse + gamma * params.squared_norm()
    if not np.isfinite(loss):
        raise NumericalError("loss is non-finite")
    grads = lf.filter_backward(params, caches, (2.0 / n_steps) * diff)
    if gamma != 0.0:
        for name, tensor in params.tensors.items():
            grads[name] += 2.0 * gamma * tensor
    return loss, grads, run.estimates


def _grad_norm(grads: dict) -> float:
    return float(np.sqrt(sum(np.sum(g * g) for g in grads.values())))


def _sgd_step(params, grads, cfg) -> gn.GainNetworkParams:
    scale = 1.0
    if cfg.grad_clip is not None:
        norm = _grad_norm(grads)
        if norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
    shrink = 1.0 - cfg.learning_rate * cfg.weight_decay
    new = {
        name: tensor * shrink - cfg.learning_rate * scale * grads[name]
        for name, tensor in params.tensors.items()
    }
    return gn.GainNetworkParams(new)


def train_epoch(params, dataset, cfg: TrainConfig, epoch: int = 0):
    """One seeded-shuffled pass over the training windows.

    Gradients are averaged over ``batch_size`` consecutive windows per
    update (the default of 1 steps once per window). Returns
    (new params, mean window loss).
    """
    windows = dataset.train_windows()
    if not windows:
        raise DataError("dataset has no training windows")
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(windows))

    losses = []
    batch_grads = None
    batch_n = 0
    for rank, idx in enumerate(order):
        measured, truth = windows[idx]
        loss, grads, _ = loss_and_gradient(
            params, measured, truth, dataset.dt, cfg.gamma
        )
        if loss > DIVERGENCE_LIMIT:
            raise NumericalError(
                f"training diverged: loss {loss:.3e} on window {idx} (epoch {epoch})"
            )
        losses.append(loss)
        if batch_grads is None:
            batch_grads = grads
        else:
            for name in batch_grads:
                batch_grads[name] += grads[name]
        batch_n += 1
        if batch_n == cfg.batch_size or rank == len(order) - 1:
            if batch_n > 1:
                for name in batch_grads:
                    batch_grads[name] /= batch_n
            params = _sgd_step(params, batch_grads, cfg)
            batch_grads, batch_n = None, 0
    return params, float(np.mean(losses))


def _validation_metrics(params, dataset, gamma):
    """(mean window loss, pooled RT-LE) over the validation windows."""
    windows = dataset.val_windows()
    if not windows:
        return float("nan"), float("nan")
    losses, sq_errors = [], []
    for measured, truth in windows:
        loss, estimates = compute_loss(params, measured, truth, dataset.dt, gamma)
        losses.append(loss)
        sq_errors.append(np.sum((estimates - np.asarray(truth)) ** 2, axis=0))
    rtle = float(np.sqrt(np.mean(np.concatenate(sq_errors))))
    return float(np.mean(losses)), rtle


def train_local(
    params: gn.GainNetworkParams,
    dataset,
    cfg: TrainConfig,
    epoch_offset: int = 0,
):
    """Run ``cfg.epochs`` epochs; returns (params, TrainReport).

    ``epoch_offset`` shifts the shuffle seeding so successive federation
    rounds do not replay identical window orders.
    """
    report = TrainReport()
    for epoch in range(cfg.epochs):
        started = time.perf_counter()
        params, train_loss = train_epoch(params, dataset, cfg, epoch_offset + epoch)
        val_loss, val_rtle = _validation_metrics(params, dataset, cfg.gamma)
        report.train_loss.append(train_loss)
        report.val_loss.append(val_loss)
        report.val_rtle.append(val_rtle)
        report.seconds.append(time.perf_counter() - started)
        log.debug(
            "epoch %d: train %.4f val %.4f rtle %.4f",
            epoch_offset + epoch, train_loss, val_loss, val_rtle,
        )
    return params, report


def gradient_check(
    params: gn.GainNetworkParams,
    measured: np.ndarray,
    truth: np.ndarray,
    dt: float,
    gamma: float = 0.0,
    num_params: int = 20,
    step: float = 1e-6,
    seed: int = 0,
    _perturb: float = 0.0,
) -> float:
    """Max relative error of BPTT vs central finite differences.

    ``num_params`` coordinates are sampled at random; the relative error
    denominator is floored at 1e-4 so exactly-zero gradients (parameters
    that do not reach the loss) compare absolutely instead of amplifying
    finite-difference roundoff. ``_perturb`` is a test hook that offsets
    the analytic gradient to prove the check can fail.
    """
    _, grads, _ = loss_and_gradient(params, measured, truth, dt, gamma)
    flat_grads = np.concatenate([grads[name].ravel() for name in params.tensors])
    if _perturb:
        flat_grads = flat_grads + _perturb
    base = params.to_vector()
    rng = np.random.default_rng(seed)
    indices = rng.choice(base.size, size=min(num_params, base.size), replace=False)

    worst = 0.0
    for i in indices:
        bumped = base.copy()
        bumped[i] = base[i] + step
        hi, _ = compute_loss(params.with_vector(bumped), measured, truth, dt, gamma)
        bumped[i] = base[i] - step
        lo, _ = compute_loss(params.with_vector(bumped), measured, truth, dt, gamma)
        fd = (hi - lo) / (2.0 * step)
        denom = max(abs(fd), abs(flat_grads[i]), 1e-4)
        worst = max(worst, abs(fd - flat_grads[i]) / denom)
    return worst
