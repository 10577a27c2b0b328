"""Adapter-only training: losses, optimizers and the epoch loop.

The base model is never written to. Each step runs the adapted forward pass,
computes the task loss, backpropagates into the adapter set's parameters and
lets the optimizer update exactly those.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, DataError, DivergedError
from .metrics import MetricReport, compute_metrics
from .tensor import Tensor

OPTIMIZERS = ("sgd", "adamw")
LOSSES = ("cross_entropy", "mse")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 0.02
    dropout: float = 0.1
    epochs: int = 10
    batch_size: int = 32
    seed: int = 0
    optimizer: str = "adamw"
    loss: str = "cross_entropy"
    degree: int = 1
    adapter: str = "propulsion"
    sites: str = "All"
    clamp: bool = False
    clamp_range: tuple = (0.0, 2.0)
    decay_toward_one: bool = True
    threshold: float = 0.9
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.learning_rate >= 0:
            raise ConfigError(f"must be >= 0, got {self.learning_rate}", "train.learning_rate")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"must lie in [0, 1), got {self.dropout}", "train.dropout")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"unknown optimizer {self.optimizer!r}", "train.optimizer")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}", "train.loss")
        if self.epochs < 0:
            raise ConfigError(f"must be >= 0, got {self.epochs}", "train.epochs")
        if self.batch_size < 1:
            raise ConfigError(f"must be >= 1, got {self.batch_size}", "train.batch_size")
        if self.degree < 0:
            raise ConfigError(f"must be a non-negative integer, got {self.degree}", "train.degree")

    def to_dict(self):
        d = asdict(self)
        d["clamp_range"] = list(self.clamp_range)
        d["betas"] = list(self.betas)
        return d


# ----------------------------------------------------------------------------
# losses
# ----------------------------------------------------------------------------


def cross_entropy(logits, labels) -> Tensor:
    """Mean negative log-likelihood, stabilised by max-subtraction."""
    logits = T.as_tensor(logits)
    labels = np.asarray(labels)
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise DataError(f"cross_entropy needs (T, C>=2) logits, got {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= logits.shape[1]):
        raise DataError(f"label out of range [0, {logits.shape[1]})")
    return T.cross_entropy(logits, labels)


def mse(pred, target) -> Tensor:
    pred = T.as_tensor(pred)
    if pred.ndim == 2 and pred.shape[1] == 1:
        pred = T.reshape(pred, (pred.shape[0],))
    target = np.asarray(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise DataError(f"mse: prediction shape {pred.shape} vs target {target.shape}")
    return T.mean(T.pow_int(T.sub(pred, T.Tensor(target)), 2))


# ----------------------------------------------------------------------------
# optimizers
# ----------------------------------------------------------------------------


class SGD:
    """``p <- p - lr * (g + wd * (p - center))``."""

    def __init__(self, params, lr, weight_decay=0.0, decay_toward_one=True):
        self.params = list(params)
        self.lr = lr
        self.wd = weight_decay
        self.decay_toward_one = decay_toward_one

    def _center(self, p):
        return getattr(p, "decay_center", 0.0) if self.decay_toward_one else 0.0

    def step(self):
        for p in self.params:
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            if self.wd:
                g = g + self.wd * (p.data - self._center(p))
            p.data = p.data - self.lr * g

    def zero_grad(self):
        for p in self.params:
            p.grad = None


class AdamW(SGD):
    """Adam with bias correction and decoupled weight decay."""

    def __init__(self, params, lr, weight_decay=0.0, decay_toward_one=True, betas=(0.9, 0.999), eps=1e-8):
        super().__init__(params, lr, weight_decay, decay_toward_one)
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            if not p.requires_grad or p.grad is None:
                continue
            g = p.grad
            data = p.data
            if self.wd:
                data = data - self.lr * self.wd * (data - self._center(p))
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data = (data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.dtype, copy=False)


def make_optimizer(params, config: TrainConfig):
    if config.optimizer == "sgd":
        return SGD(params, config.learning_rate, config.weight_decay, config.decay_toward_one)
    return AdamW(
        params, config.learning_rate, config.weight_decay, config.decay_toward_one, config.betas, config.eps
    )


def optimizer_step(params, config: TrainConfig, state=None):
    """One functional update of ``params`` from their ``.grad``; returns the optimizer for reuse."""
    opt = state if state is not None else make_optimizer(params, config)
    opt.step()
    return opt


# ----------------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------------


@dataclass
class TrainResult:
    adapters: object
    history: list = field(default_factory=list)
    report: MetricReport | None = None
    n_trainable: int = 0
    steps_to_threshold: int | None = None
    initial_loss: float | None = None


def _batch_inputs(ds, idx):
    mask = None if ds.mask is None else ds.mask[idx]
    return ds.inputs[idx], mask


def task_loss(logits, targets, config: TrainConfig) -> Tensor:
    if config.loss == "mse":
        return mse(logits, targets)
    return cross_entropy(logits, targets)


def predict(model, adapters, ds, batch_size=256) -> np.ndarray:
    """Eval-mode logits for a whole dataset."""
    outs = []
    with T.no_grad():
        for start in range(0, len(ds), batch_size):
            idx = np.arange(start, min(start + batch_size, len(ds)))
            x, mask = _batch_inputs(ds, idx)
            outs.append(model.forward(x, adapters, train=False, mask=mask).data)
    return np.concatenate(outs) if outs else np.zeros((0, model.spec.n_classes))


def evaluate(model, adapters, ds, config: TrainConfig):
    """Returns ``(loss, MetricReport)`` in eval mode."""
    logits = predict(model, adapters, ds)
    with T.no_grad():
        loss = task_loss(Tensor(logits), ds.targets, config).item()
    if ds.task == "regression":
        preds = logits.reshape(len(ds), -1)[:, 0]
    else:
        preds = np.argmax(logits, axis=1)
    return loss, compute_metrics(preds, ds.targets, ds.task)


def train(model, adapter_set, dataset, config: TrainConfig, callback=None) -> TrainResult:
    """Run ``config.epochs`` epochs of adapter-only training.

    ``callback(step, adapter_set)``, if given, runs after every optimizer step.
    One history row per epoch: training loss (mean over batches), eval-mode
    metrics on the train split and, when present, the validation split.
    """
    train_ds = dataset.subset("train")
    val_ds = dataset.subset("validation")
    if len(train_ds) == 0:
        raise DataError("training split is empty")
    adapter_set.check(model)
    params = [p for p in adapter_set.parameters() if p.trainable]
    opt = make_optimizer(params, config)
    clamps = adapter_set.clamp_ranges() if config.clamp else {}
    order_rng = np.random.default_rng([config.seed, 0])
    drop_rng = np.random.default_rng([config.seed, 1])

    initial_loss, _ = evaluate(model, adapter_set, train_ds, config)
    result = TrainResult(adapters=adapter_set, n_trainable=adapter_set.n_trainable(), initial_loss=initial_loss)
    step = 0
    key = "pearson" if train_ds.task == "regression" else "accuracy"
    for epoch in range(1, config.epochs + 1):
        order = order_rng.permutation(len(train_ds))
        losses = []
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            x, mask = _batch_inputs(train_ds, idx)
            for p in params:
                p.grad = None
            logits = model.forward(x, adapter_set, train=True, rng=drop_rng, mask=mask, dropout=config.dropout)
            loss = task_loss(logits, train_ds.targets[idx], config)
            value = loss.item()
            step += 1
            if not math.isfinite(value):
                raise DivergedError(step, value)
            T.backward(loss, params)
            opt.step()
            for p in params:
                if p.name in clamps:
                    lo, hi = clamps[p.name]
                    np.clip(p.data, lo, hi, out=p.data)
            losses.append(value)
            if callback is not None:
                callback(step, adapter_set)
        _, train_report = evaluate(model, adapter_set, train_ds, config)
        row = {"epoch": epoch, "step": step, "loss": float(np.mean(losses))}
        row.update({f"train_{k}": v for k, v in train_report.as_dict().items() if k != "degenerate"})
        if len(val_ds):
            val_loss, val_report = evaluate(model, adapter_set, val_ds, config)
            row["val_loss"] = val_loss
            row.update({f"val_{k}": v for k, v in val_report.as_dict().items() if k != "degenerate"})
        result.history.append(row)
        result.report = train_report
        if result.steps_to_threshold is None and getattr(train_report, key) >= config.threshold:
            result.steps_to_threshold = step
    return result
