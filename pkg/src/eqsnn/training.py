"""Optimizer, learning-rate schedules, early stopping, and the epoch loop.

Two named recipes are bundled: the autoencoder recipe (initial rate 5e-4
cut by 10x every 80 epochs, batch 64) and the spiking-net recipe (initial
1e-3 halved every 50 epochs, batch 32). Both use AdamW with decoupled
weight decay and early stopping at patience 12.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .exceptions import ConfigError, TrainingAbort


class AdamW:
    """Adam with decoupled weight decay.

    Decay multiplies parameters by (1 - lr*wd) independently of the
    gradient-driven update, so wd>0 with zero gradient still shrinks
    weights. NaN or inf gradients abort training rather than silently
    poisoning the moments.
    """

    def __init__(self, params: list[Tensor], lr: float = 1e-3, *,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 1e-4):
        if lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.weight_decay = float(weight_decay)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.beta1 ** t
        bc2 = 1.0 - self.beta2 ** t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise TrainingAbort(
                    f"non-finite gradient at step {t} (param {i}, "
                    f"shape {p.data.shape})")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            if self.weight_decay:
                p.data = p.data * (1.0 - self.lr * self.weight_decay)
            p.data = p.data - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass(frozen=True)
class Schedule:
    """Piecewise-constant decay: initial / factor^(epoch // interval)."""

    initial: float
    factor: float
    interval: int

    def rate(self, epoch: int) -> float:
        if epoch < 0:
            raise ConfigError("epoch must be non-negative")
        return self.initial / self.factor ** (epoch // self.interval)


EQRNN_SCHEDULE = Schedule(initial=5e-4, factor=10.0, interval=80)
SNN_SCHEDULE = Schedule(initial=1e-3, factor=2.0, interval=50)
EQRNN_BATCH = 64
SNN_BATCH = 32
DEFAULT_PATIENCE = 12


@dataclass
class EarlyStop:
    """Stop once the validation loss fails to improve for > patience epochs.

    A 13-epoch plateau at patience 12 triggers the stop on the 13th
    non-improving evaluation; any improvement resets the counter.
    """

    patience: int = DEFAULT_PATIENCE
    min_delta: float = 0.0
    best: float = field(default=np.inf, init=False)
    since_improvement: int = field(default=0, init=False)

    def update(self, val_loss: float) -> bool:
        """Record one evaluation; True means stop now."""
        if val_loss < self.best - self.min_delta:
            self.best = val_loss
            self.since_improvement = 0
            return False
        self.since_improvement += 1
        return self.since_improvement > self.patience


def snn_dropout(spikes: np.ndarray, rate: float,
                rng: np.random.Generator | None, *,
                training: bool) -> np.ndarray:
    """Zero a fraction `rate` of incoming spike values, no rescaling.

    Spike trains are kept at their natural magnitude (unlike the dense
    dropout in the differentiable stack, which rescales survivors).
    Identity at inference time or rate 0.
    """
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must be in [0,1), got {rate}")
    if not training or rate == 0.0:
        return spikes
    if rng is None:
        raise ConfigError("training-mode dropout needs an rng")
    keep = rng.random(spikes.shape) >= rate
    return spikes * keep


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


class TrainingLog:
    """Accumulates per-epoch records; serializes to the log CSV."""

    header = "epoch,train_loss,val_loss,lr,seconds"

    def __init__(self):
        self.records: list[EpochRecord] = []

    def add(self, rec: EpochRecord) -> None:
        self.records.append(rec)

    def to_csv(self) -> str:
        lines = [self.header]
        for r in self.records:
            lines.append(f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},"
                         f"{r.lr:.10g},{r.seconds:.3f}")
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


def iterate_minibatches(n: int, batch_size: int,
                        rng: np.random.Generator):
    """Shuffled index batches covering all n samples once."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def fit_epochs(*, train_step, evaluate, optimizer: AdamW,
               schedule: Schedule, max_epochs: int,
               patience: int = DEFAULT_PATIENCE,
               log: TrainingLog | None = None) -> TrainingLog:
    """Generic epoch loop shared by all stages.

    train_step(epoch) runs one full pass and returns mean train loss;
    evaluate() returns the validation loss. The schedule rate is applied
    to the optimizer before each epoch. Stops on early-stop or at
    max_epochs, whichever comes first.
    """
    if max_epochs < 1:
        raise ConfigError("max_epochs must be >= 1")
    log = log if log is not None else TrainingLog()
    stopper = EarlyStop(patience=patience)
    for epoch in range(max_epochs):
        t0 = time.perf_counter()
        optimizer.lr = schedule.rate(epoch)
        train_loss = float(train_step(epoch))
        val_loss = float(evaluate())
        log.add(EpochRecord(epoch, train_loss, val_loss, optimizer.lr,
                            time.perf_counter() - t0))
        if stopper.update(val_loss):
            break
    return log
