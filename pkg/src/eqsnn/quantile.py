"""Quantile regression stage: per-sensor models, refinement, encoder/decoder.

Stage 1 trains one small net per (sensor, level) pair to predict the
level-α quantile of that sensor's value a fixed horizon ahead. Stage 2
trains one refiner per refined level that maps a sensor's ten stage-1
estimates to a single sharper estimate. Alongside these lives the deep
encoder/decoder regression net whose bottleneck code is what the
downstream attention and spiking stages consume.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses
from .autodiff import Tensor, backward
from .exceptions import ConfigError, DataError, ShapeError
from .layers import FeedForward
from .training import AdamW, EarlyStop, Schedule, iterate_minibatches

STAGE1_LEVELS = (0.01, 0.1, 0.2, 0.25, 0.5, 0.6, 0.75, 0.8, 0.9, 0.99)
STAGE2_LEVELS = (0.25, 0.4, 0.6, 0.75)

# full-size width schedules; the bottleneck is 20 and the head is 43
ENCODER_DIMS = (70, 280, 220, 170, 120, 90, 70, 50, 35, 25, 20)
DECODER_DIMS = (20, 25, 35, 50, 70, 90, 120, 170, 220, 280, 43)

# Published reference table for the encoder, kept for the `inspect`
# cross-check. Its first entry (12,320) disagrees with the count formula
# applied to (70, 280), which gives 19,880; the stated totals below are
# consistent with the 12,320 figure, so both are reported, neither is
# silently corrected.
REPORTED_ENCODER_TABLE = (12320, 61820, 37570, 20520, 10890,
                          6370, 3550, 1785, 900, 520)
REPORTED_ENCODER_TOTAL = 156245
REPORTED_COMBINED_TOTAL = 312490

HORIZON_STEPS = {"1h": 1, "12h": 12, "24h": 24, "48h": 48}
HORIZON_LEVELS = {
    "1h": STAGE1_LEVELS,
    "12h": (0.25, 0.4, 0.6, 0.75, 0.99),
    "24h": (0.25, 0.4, 0.6, 0.75, 0.99),
    "48h": (0.1, 0.5, 0.75, 0.9),
}

# default per-sensor head recipe; the deep net uses training.EQRNN_SCHEDULE
STAGE1_SCHEDULE = Schedule(initial=1e-2, factor=10.0, interval=60)


@dataclass(frozen=True)
class QuantileLevelSet:
    levels: tuple

    def __post_init__(self):
        lv = tuple(float(a) for a in self.levels)
        if not lv:
            raise ConfigError("empty quantile level set")
        if any(not 0.0 < a < 1.0 for a in lv):
            raise ConfigError(f"levels must lie in (0,1): {lv}")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ConfigError(f"levels must be strictly increasing: {lv}")
        object.__setattr__(self, "levels", lv)

    def __len__(self):
        return len(self.levels)

    def __iter__(self):
        return iter(self.levels)

    def __contains__(self, a):
        return float(a) in self.levels


@dataclass(frozen=True)
class HorizonConfig:
    name: str
    steps: int
    levels: QuantileLevelSet
    n_analog: int = 22
    n_digital: int = 48


def horizon_config(name: str, n_analog: int = 22,
                   n_digital: int = 48) -> HorizonConfig:
    if name not in HORIZON_STEPS:
        raise ConfigError(f"unknown horizon {name!r}; "
                          f"expected one of {sorted(HORIZON_STEPS)}")
    return HorizonConfig(name, HORIZON_STEPS[name],
                         QuantileLevelSet(HORIZON_LEVELS[name]),
                         n_analog, n_digital)


def horizon_output_count(cfg: HorizonConfig | str) -> int:
    """|quantile subset| x (analog + digital channel count)."""
    if isinstance(cfg, str):
        cfg = horizon_config(cfg)
    return len(cfg.levels) * (cfg.n_analog + cfg.n_digital)


def layer_param_count(n_in: int, n_out: int) -> int:
    """Weights plus biases of one affine layer: n_in*n_out + n_out."""
    if n_in < 1 or n_out < 1:
        raise ConfigError("layer dims must be positive")
    return n_in * n_out + n_out


def stack_param_total(dims) -> int:
    return sum(layer_param_count(a, b) for a, b in zip(dims[:-1], dims[1:]))


def encoder_param_total(dims=ENCODER_DIMS) -> int:
    return stack_param_total(dims)


def decoder_param_total(dims=DECODER_DIMS) -> int:
    return stack_param_total(dims)


def scale_width(width: int, n_channels: int, reference: int = 70,
                floor: int = 8) -> int:
    """Proportional width for a different channel count.

    Keeps the full schedule exact at the reference count and never lets a
    layer collapse below min(width, floor) at small scales.
    """
    if n_channels == reference:
        return width
    return max(round(width * n_channels / reference), min(width, floor))


def encoder_dims_for(n_channels: int) -> tuple:
    if n_channels < 1:
        raise ConfigError("need at least one channel")
    return (n_channels,) + tuple(scale_width(w, n_channels)
                                 for w in ENCODER_DIMS[1:])


def decoder_dims_for(n_channels: int) -> tuple:
    dims = encoder_dims_for(n_channels)
    head = scale_width(DECODER_DIMS[-1], n_channels)
    return (dims[-1],) + tuple(scale_width(w, n_channels)
                               for w in DECODER_DIMS[1:-1]) + (head,)


class EqrnnNet:
    """Deep encoder/decoder: channels -> bottleneck code -> regression head.

    Ten affine layers per side with group-norm, PReLU, and dropout between
    them. At the reference width the bottleneck is exactly 20 and the head
    exactly 43; other channel counts use the proportionally scaled
    schedule.
    """

    def __init__(self, n_channels: int = 70, *, seed: int = 0,
                 dropout_rate: float = 0.15, norm_groups: int = 8):
        self.n_channels = int(n_channels)
        enc_dims = encoder_dims_for(self.n_channels)
        dec_dims = decoder_dims_for(self.n_channels)
        rng = ad.make_rng(seed)
        self.encoder = FeedForward(list(enc_dims), rng,
                                   norm_groups=norm_groups,
                                   dropout_rate=dropout_rate)
        self.decoder = FeedForward(list(dec_dims), rng,
                                   norm_groups=norm_groups,
                                   dropout_rate=dropout_rate)
        self.code_dim = enc_dims[-1]
        self.out_dim = dec_dims[-1]

    def _check_input(self, x: Tensor) -> None:
        if x.data.shape[-1] != self.n_channels:
            raise ShapeError(f"expected {self.n_channels} channels, "
                             f"got {x.data.shape[-1]}")

    def encode(self, x: Tensor, *, training: bool = False, rng=None) -> Tensor:
        self._check_input(x)
        return self.encoder(x, training=training, rng=rng)

    def decode(self, code: Tensor, *, training: bool = False, rng=None) -> Tensor:
        return self.decoder(code, training=training, rng=rng)

    def forward(self, x: Tensor, *, training: bool = False, rng=None):
        code = self.encode(x, training=training, rng=rng)
        return code, self.decode(code, training=training, rng=rng)

    def named_parameters(self) -> dict[str, Tensor]:
        out = self.encoder.named_parameters("encoder.")
        out.update(self.decoder.named_parameters("decoder."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())


def regression_targets(values: np.ndarray, out_dim: int,
                       horizon: int = 1) -> tuple:
    """(inputs, targets) pairs for the deep net: x_t -> channels at t+h.

    The head width may differ from the channel count; targets are
    truncated or zero-padded on the channel axis to fit it.
    """
    if horizon < 1:
        raise ConfigError("horizon must be >= 1")
    T, C = values.shape
    if T <= horizon:
        raise DataError("series shorter than the horizon")
    x = values[:-horizon]
    y = values[horizon:]
    if out_dim <= C:
        y = y[:, :out_dim]
    else:
        pad = np.zeros((y.shape[0], out_dim - C))
        y = np.concatenate([y, pad], axis=1)
    return x, y


class QuantileModel:
    """One per-sensor, per-level predictor: scalar in, scalar out.

    Three affine layers 1 -> 32 -> 16 -> 1 with PReLU between them; no
    normalization or dropout at this size.
    """

    DIMS = (1, 32, 16, 1)

    def __init__(self, sensor: int, level: float, *, seed: int = 0):
        self.sensor = int(sensor)
        self.level = float(level)
        if not 0.0 < self.level < 1.0:
            raise ConfigError(f"level must lie in (0,1), got {level}")
        self.net = FeedForward(list(self.DIMS), ad.make_rng(seed),
                               norm_groups=0, dropout_rate=0.0)
        self.final_train_loss = np.nan
        self.final_val_loss = np.nan

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64).reshape(-1, 1)
        return self.net(Tensor(x)).data[:, 0]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return self.net.named_parameters(prefix)


def _delta_from_targets(y: np.ndarray) -> float:
    """Huber scale from the spread of the targets around their median."""
    r = np.asarray(y, dtype=np.float64).ravel()
    return losses.select_delta(r - np.median(r))


def fit_scalar_model(model: QuantileModel, x_tr, y_tr, x_va, y_va, *,
                     loss: str = losses.ASYMMETRIC_HUBER,
                     schedule: Schedule = STAGE1_SCHEDULE,
                     max_epochs: int = 120, patience: int = 12) -> None:
    """Full-batch fit of one per-sensor head; records final losses."""
    x_tr = np.asarray(x_tr, dtype=np.float64).reshape(-1, 1)
    x_va = np.asarray(x_va, dtype=np.float64).reshape(-1, 1)
    y_tr = np.asarray(y_tr, dtype=np.float64).reshape(-1, 1)
    y_va = np.asarray(y_va, dtype=np.float64).reshape(-1, 1)
    if x_tr.shape[0] == 0:
        raise DataError("empty training split")
    delta = None
    if loss in (losses.HUBER, losses.ASYMMETRIC_HUBER):
        delta = _delta_from_targets(y_tr)
    opt = AdamW(model.net.parameters(), lr=schedule.initial)
    stopper = EarlyStop(patience=patience)
    xt, yt = Tensor(x_tr), Tensor(y_tr)
    xv, yv = Tensor(x_va), Tensor(y_va)
    for epoch in range(max_epochs):
        opt.lr = schedule.rate(epoch)
        opt.zero_grad()
        out = model.net(xt)
        train_loss = ad.tmean(losses.quantile_training_loss(
            yt, out, model.level, loss=loss, delta=delta))
        backward(train_loss)
        opt.step()
        val_out = model.net(xv)
        val_loss = float(ad.tmean(losses.quantile_training_loss(
            yv, val_out, model.level, loss=loss, delta=delta)).data)
        model.final_train_loss = float(train_loss.data)
        model.final_val_loss = val_loss
        if stopper.update(val_loss):
            break


@dataclass
class Stage1Population:
    """All (sensor, level) models for one horizon, in training order."""

    levels: QuantileLevelSet
    horizon: int
    models: dict = field(default_factory=dict)   # (sensor, level) -> model

    @property
    def n_sensors(self) -> int:
        return len({s for s, _ in self.models})

    def __len__(self):
        return len(self.models)

    def model(self, sensor: int, level: float) -> QuantileModel:
        return self.models[(sensor, float(level))]

    def predict(self, values: np.ndarray) -> np.ndarray:
        """[N, C] sensor readings -> [N, C, L] quantile estimates."""
        values = np.asarray(values, dtype=np.float64)
        N, C = values.shape
        L = len(self.levels)
        out = np.empty((N, C, L))
        for c in range(C):
            for k, a in enumerate(self.levels):
                out[:, c, k] = self.model(c, a).predict(values[:, c])
        return out

    def manifest_text(self, checkpoint_path: str = "-") -> str:
        """One line per model: sensor, level, checkpoint path, losses."""
        lines = ["sensor,level,checkpoint,train_loss,val_loss"]
        for (s, a), m in self.models.items():
            lines.append(f"{s},{a:g},{checkpoint_path},"
                         f"{m.final_train_loss:.10g},{m.final_val_loss:.10g}")
        return "\n".join(lines) + "\n"


def _subsample(n: int, cap: int) -> np.ndarray:
    """Deterministic evenly spaced picks when a split is larger than cap."""
    if n <= cap:
        return np.arange(n)
    return np.linspace(0, n - 1, cap).astype(np.int64)


def train_stage1(values: np.ndarray, train_idx, val_idx, *,
                 levels=STAGE1_LEVELS, loss: str = losses.ASYMMETRIC_HUBER,
                 horizon: int = 1, seed: int = 0, max_epochs: int = 120,
                 patience: int = 12, sample_cap: int = 2048) -> Stage1Population:
    """Fit one model per (sensor, level): population = sensors x levels.

    Training pairs are (x_t, x_{t+horizon}) per channel, restricted to
    the given chronological index splits.
    """
    level_set = levels if isinstance(levels, QuantileLevelSet) \
        else QuantileLevelSet(tuple(levels))
    values = np.asarray(values, dtype=np.float64)
    if values.ndim != 2:
        raise ShapeError("expected [time, channels] values")
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    T, C = values.shape
    train_idx = train_idx[train_idx < T - horizon]
    val_idx = val_idx[val_idx < T - horizon]
    if train_idx.size == 0:
        raise DataError("empty training split")
    if val_idx.size == 0:
        raise DataError("empty validation split")
    train_idx = train_idx[_subsample(train_idx.size, sample_cap)]
    val_idx = val_idx[_subsample(val_idx.size, sample_cap)]

    seeds = np.random.SeedSequence(seed).generate_state(C * len(level_set))
    pop = Stage1Population(levels=level_set, horizon=horizon)
    j = 0
    for c in range(C):
        x_tr = values[train_idx, c]
        y_tr = values[train_idx + horizon, c]
        x_va = values[val_idx, c]
        y_va = values[val_idx + horizon, c]
        for a in level_set:
            model = QuantileModel(c, a, seed=int(seeds[j]))
            fit_scalar_model(model, x_tr, y_tr, x_va, y_va, loss=loss,
                             max_epochs=max_epochs, patience=patience)
            pop.models[(c, a)] = model
            j += 1
    return pop


class RefinerNet:
    """10 stage-1 estimates in, one refined estimate out (10 -> 16 -> 1)."""

    def __init__(self, level: float, n_inputs: int, *, seed: int = 0):
        self.level = float(level)
        self.n_inputs = int(n_inputs)
        self.net = FeedForward([n_inputs, 16, 1], ad.make_rng(seed),
                               norm_groups=0, dropout_rate=0.0)
        self.final_val_loss = np.nan
        self.non_improvement = False

    def predict(self, estimates: np.ndarray) -> np.ndarray:
        x = np.asarray(estimates, dtype=np.float64).reshape(-1, self.n_inputs)
        return self.net(Tensor(x)).data[:, 0]

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        return self.net.named_parameters(prefix)


@dataclass
class Stage2Refiner:
    """One refiner per refined level, shared across sensors."""

    levels: QuantileLevelSet
    source_levels: QuantileLevelSet
    nets: dict = field(default_factory=dict)     # level -> RefinerNet

    def predict(self, stage1_estimates: np.ndarray) -> np.ndarray:
        """[N, C, L] stage-1 estimates -> [N, C, K] refined estimates."""
        est = np.asarray(stage1_estimates, dtype=np.float64)
        N, C, L = est.shape
        flat = est.reshape(N * C, L)
        out = np.empty((N, C, len(self.levels)))
        for k, a in enumerate(self.levels):
            out[:, :, k] = self.nets[a].predict(flat).reshape(N, C)
        return out

    @property
    def flags(self) -> dict:
        return {a: self.nets[a].non_improvement for a in self.levels}


def refine_stage2(est_train: np.ndarray, y_train: np.ndarray,
                  est_val: np.ndarray, y_val: np.ndarray, *,
                  subset=STAGE2_LEVELS, source_levels=STAGE1_LEVELS,
                  seed: int = 0, max_epochs: int = 150, patience: int = 12,
                  schedule: Schedule = STAGE1_SCHEDULE) -> Stage2Refiner:
    """Fit per-level refiners on top of stage-1 estimates.

    est_*: [N, C, L] stage-1 estimates; y_*: [N, C] horizon targets.
    Each refined level must lie strictly inside the span of the source
    levels. After fitting, a refiner whose validation pinball loss is
    worse than the best single stage-1 column at that level is flagged
    as non-improving (flag only; the refiner is kept).
    """
    subset_set = subset if isinstance(subset, QuantileLevelSet) \
        else QuantileLevelSet(tuple(subset))
    source_set = source_levels if isinstance(source_levels, QuantileLevelSet) \
        else QuantileLevelSet(tuple(source_levels))
    lo, hi = source_set.levels[0], source_set.levels[-1]
    for a in subset_set:
        if not lo <= a <= hi:
            raise ConfigError(f"refined level {a} outside the source "
                              f"range [{lo}, {hi}]")

    est_train = np.asarray(est_train, dtype=np.float64)
    est_val = np.asarray(est_val, dtype=np.float64)
    L = len(source_set)
    x_tr = est_train.reshape(-1, L)
    x_va = est_val.reshape(-1, L)
    t_tr = np.asarray(y_train, dtype=np.float64).reshape(-1, 1)
    t_va = np.asarray(y_val, dtype=np.float64).reshape(-1, 1)

    seeds = np.random.SeedSequence(seed).generate_state(len(subset_set))
    refiner = Stage2Refiner(levels=subset_set, source_levels=source_set)
    for k, a in enumerate(subset_set):
        net = RefinerNet(a, L, seed=int(seeds[k]))
        opt = AdamW(net.net.parameters(), lr=schedule.initial)
        stopper = EarlyStop(patience=patience)
        xt, yt = Tensor(x_tr), Tensor(t_tr)
        xv, yv = Tensor(x_va), Tensor(t_va)
        for epoch in range(max_epochs):
            opt.lr = schedule.rate(epoch)
            opt.zero_grad()
            loss = losses.mean_pinball(yt, net.net(xt), a)
            backward(loss)
            opt.step()
            val = float(losses.mean_pinball(yv, net.net(xv), a).data)
            net.final_val_loss = val
            if stopper.update(val):
                break
        # baseline: the best single stage-1 column used as-is at level a
        col_losses = [float(losses.mean_pinball(
            t_va[:, 0], x_va[:, j], a).data) for j in range(L)]
        net.non_improvement = net.final_val_loss > min(col_losses) + 1e-12
        refiner.nets[a] = net
    return refiner


def eqrnn_loss(net: EqrnnNet, x: Tensor, y: Tensor, *, loss: str,
               level: float, delta: float | None,
               training: bool = False, rng=None) -> Tensor:
    """Mean regression loss of the deep net on a batch."""
    _, out = net.forward(x, training=training, rng=rng)
    return ad.tmean(losses.quantile_training_loss(
        y, out, level, loss=loss, delta=delta))


def train_autoencoder(net: EqrnnNet, values: np.ndarray, train_idx, val_idx, *,
                      loss: str = losses.ASYMMETRIC_HUBER, level: float = 0.5,
                      schedule: Schedule | None = None, batch_size: int = 64,
                      max_epochs: int = 30, patience: int = 12, seed: int = 0,
                      sample_cap: int = 4096, horizon: int = 1, log=None):
    """Minibatch fit of the encoder/decoder on next-step regression.

    Splits index time steps; pairs are (x_t, channels at t+horizon) with
    targets fitted to the head width. Epochs larger than sample_cap are
    subsampled from a per-epoch shuffle so runs stay tractable while
    remaining deterministic per seed.
    """
    from .training import EQRNN_SCHEDULE, TrainingLog, fit_epochs

    schedule = schedule if schedule is not None else EQRNN_SCHEDULE
    values = np.asarray(values, dtype=np.float64)
    x_all, y_all = regression_targets(values, net.out_dim, horizon)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    train_idx = train_idx[train_idx < x_all.shape[0]]
    val_idx = val_idx[val_idx < x_all.shape[0]]
    if train_idx.size == 0 or val_idx.size == 0:
        raise DataError("empty split after horizon trimming")
    val_idx = val_idx[_subsample(val_idx.size, sample_cap)]
    xv = Tensor(x_all[val_idx])
    yv = Tensor(y_all[val_idx])

    opt = AdamW(net.parameters(), lr=schedule.initial)
    shuffle_rng = ad.make_rng(seed)
    dropout_rng = ad.make_rng(seed + 1)
    delta = None
    if loss in (losses.HUBER, losses.ASYMMETRIC_HUBER):
        delta = _delta_from_targets(y_all[train_idx])

    def train_step(epoch: int) -> float:
        order = shuffle_rng.permutation(train_idx.size)[:sample_cap]
        epoch_idx = train_idx[order]
        total, seen = 0.0, 0
        for start in range(0, epoch_idx.size, batch_size):
            picks = epoch_idx[start:start + batch_size]
            opt.zero_grad()
            batch_loss = eqrnn_loss(
                net, Tensor(x_all[picks]), Tensor(y_all[picks]),
                loss=loss, level=level, delta=delta,
                training=True, rng=dropout_rng)
            backward(batch_loss)
            opt.step()
            total += float(batch_loss.data) * picks.size
            seen += picks.size
        return total / seen

    def evaluate() -> float:
        return float(eqrnn_loss(net, xv, yv, loss=loss, level=level,
                                delta=delta).data)

    return fit_epochs(train_step=train_step, evaluate=evaluate,
                      optimizer=opt, schedule=schedule,
                      max_epochs=max_epochs, patience=patience,
                      log=log if log is not None else TrainingLog())


def crossing_rate(estimates: np.ndarray) -> float:
    """Fraction of rows whose quantile estimates are non-monotone in α.

    Measured over the last axis; reported per evaluation, never enforced.
    """
    est = np.asarray(estimates, dtype=np.float64)
    if est.shape[-1] < 2:
        return 0.0
    diffs = np.diff(est, axis=-1)
    crossed = (diffs < 0).any(axis=-1)
    return float(crossed.mean())
