"""Maximum-likelihood flow training with validation-based early stopping."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .adcore import backward
from .errors import ConfigError, TrainingDivergenceError
from .flows import Flow

__all__ = ["TrainConfig", "TrainReport", "split_train_val", "fit_mle"]


@dataclass
class TrainConfig:
    learning_rate: float = 5e-4
    batch_size: int = 100
    max_epochs: int = 500
    patience: int = 20
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError(f"val_fraction must be in (0, 1), got {self.val_fraction}")


@dataclass
class TrainReport:
    train_nll: list = field(default_factory=list)
    val_nll: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False

    @property
    def n_epochs(self) -> int:
        return len(self.val_nll)

    @property
    def best_val_nll(self) -> float:
        return self.val_nll[self.best_epoch]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "train_nll", "val_nll"])
            for e, (t, v) in enumerate(zip(self.train_nll, self.val_nll)):
                w.writerow([e, repr(t), repr(v)])


def split_train_val(n: int, fraction: float, rng) -> tuple:
    """Random disjoint/exhaustive split of record indices 0..n-1.

    Train gets ceil(n * (1 - fraction)) records, validation the rest.
    """
    if n < 10:
        raise ConfigError(f"dataset too small to split: {n} records (need >= 10)")
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"fraction must be in (0, 1), got {fraction}")
    n_train = int(np.ceil(n * (1.0 - fraction)))
    perm = rng.permutation(n)
    return perm[:n_train], perm[n_train:]


class _Adam:
    """Adaptive-moment gradient step over a ParamSet."""

    def __init__(self, params, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.arrays().items()}
        self.t = 0

    def step(self, grads: dict) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name in self.params.names():
            g = grads[name]
            self.m[name] = b1 * self.m[name] + (1.0 - b1) * g
            self.v[name] = b2 * self.v[name] + (1.0 - b2) * g * g
            m_hat = self.m[name] / corr1
            v_hat = self.v[name] / corr2
            node = self.params[name]
            node.value = node.value - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def _mean_nll(flow: Flow, x, ctx) -> float:
    return float(-flow.log_prob(x, ctx).mean())


def fit_mle(flow: Flow, x, context=None, config: TrainConfig | None = None, rng=None) -> TrainReport:
    """Train a flow by stochastic maximum likelihood; restores best-val params.

    Standardizes the flow on the training split before the first step.
    Stops once the validation NLL has not improved for `patience` epochs,
    or at max_epochs. Deterministic given the rng state. The trained
    parameters left on the flow are those of the best validation epoch.
    """
    if config is None:
        config = TrainConfig()
    if rng is None:
        raise ValueError("fit_mle requires an explicit rng")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != flow.dim:
        raise ConfigError(f"data must have shape (n, {flow.dim}), got {x.shape}")
    if flow.context_dim > 0:
        if context is None:
            raise ConfigError("flow is conditional; training context is required")
        context = np.asarray(context, dtype=np.float64)
        if context.shape != (x.shape[0], flow.context_dim):
            raise ConfigError(
                f"context must have shape ({x.shape[0]}, {flow.context_dim}), "
                f"got {context.shape}"
            )
    if flow.params.total_size() == 0:
        raise ConfigError("flow has no trainable parameters")

    n = x.shape[0]
    train_idx, val_idx = split_train_val(n, config.val_fraction, rng)
    x_tr, x_val = x[train_idx], x[val_idx]
    if flow.context_dim > 0:
        c_tr, c_val = context[train_idx], context[val_idx]
    else:
        c_tr = c_val = None

    scale = x_tr.std(axis=0)
    flow.set_data_standardization(x_tr.mean(axis=0), np.maximum(scale, 1e-6))

    opt = _Adam(flow.params, config.learning_rate)
    report = TrainReport()
    best_val = np.inf
    best_arrays = flow.params.copy_arrays()
    bad_batches = 0

    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_idx))
        for start in range(0, len(order), config.batch_size):
            sel = order[start : start + config.batch_size]
            loss = flow.nll_graph(x_tr[sel], None if c_tr is None else c_tr[sel])
            if not np.isfinite(loss.value):
                bad_batches += 1
                if bad_batches >= 5:
                    raise TrainingDivergenceError(
                        f"loss non-finite for {bad_batches} consecutive batches "
                        f"(epoch {epoch})"
                    )
                continue
            bad_batches = 0
            backward(loss)
            opt.step(flow.params.gradients())

        report.train_nll.append(_mean_nll(flow, x_tr, c_tr))
        report.val_nll.append(_mean_nll(flow, x_val, c_val))
        if report.val_nll[-1] < best_val:
            best_val = report.val_nll[-1]
            report.best_epoch = epoch
            best_arrays = flow.params.copy_arrays()
        elif epoch - report.best_epoch >= config.patience:
            report.stopped_early = True
            break

    flow.params.load_arrays(best_arrays)
    return report
