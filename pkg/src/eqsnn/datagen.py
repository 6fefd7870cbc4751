"""Synthetic multivariate sensor streams with injected faults.

Channels are sums of sinusoids plus Gaussian noise. Digital channels
quantize the same kind of carrier through a zero threshold, so one
generator yields both value families. Faults perturb the pre-quantization
carrier over a contiguous interval; every step inside any fault interval
is labeled Abnormal (1), all others Normal (0).

Generation is a pure function of (sensors, faults, length, seed): channel
noise and fault randomness come from independent children of one seed
sequence, so channel order and fault order are reproducible and channels
could be filled in parallel.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .exceptions import ConfigError, DataError

ANALOG = "analog"
DIGITAL = "digital"
FAULT_KINDS = ("drift", "spike-burst", "stuck-at", "variance-inflation")

# fraction of steps inside a spike-burst interval that actually spike
_BURST_DENSITY = 0.35


@dataclass(frozen=True)
class SensorSpec:
    """One channel: sum-of-sinusoids carrier plus noise.

    periods are in time steps; phases in radians. Digital channels emit
    1.0 where carrier + noise > 0 and 0.0 elsewhere.
    """

    channel: int
    kind: str
    amplitudes: tuple = (1.0,)
    periods: tuple = (50.0,)
    phases: tuple = (0.0,)
    noise_sigma: float = 0.05

    def __post_init__(self):
        if self.kind not in (ANALOG, DIGITAL):
            raise ConfigError(f"sensor {self.channel}: unknown kind {self.kind!r}")
        if not (len(self.amplitudes) == len(self.periods) == len(self.phases)):
            raise ConfigError(f"sensor {self.channel}: amplitude/period/phase "
                              "lists must have equal length")
        if any(p <= 0 for p in self.periods):
            raise ConfigError(f"sensor {self.channel}: periods must be positive")
        if self.noise_sigma < 0:
            raise ConfigError(f"sensor {self.channel}: negative noise sigma")

    def carrier(self, t: np.ndarray) -> np.ndarray:
        out = np.zeros_like(t, dtype=np.float64)
        for a, p, ph in zip(self.amplitudes, self.periods, self.phases):
            out += a * np.sin(2.0 * np.pi * t / p + ph)
        return out


@dataclass(frozen=True)
class FaultSpec:
    """Contiguous fault on one channel.

    magnitude meaning by kind: drift = total added offset reached at the
    end of the interval; spike-burst = spike amplitude; stuck-at = the
    frozen carrier value; variance-inflation = noise scale factor.
    """

    channel: int
    kind: str
    onset: int
    duration: int
    magnitude: float

    def __post_init__(self):
        if self.kind not in FAULT_KINDS:
            raise ConfigError(f"unknown fault kind {self.kind!r}")
        if self.onset < 0 or self.duration < 1:
            raise ConfigError("fault needs onset >= 0 and duration >= 1")

    @property
    def end(self) -> int:
        return self.onset + self.duration


@dataclass
class TimeSeriesDataset:
    values: np.ndarray                     # [T, C] float64
    labels: np.ndarray                     # [T] int8, 1 = Abnormal
    sensors: tuple = ()
    faults: tuple = ()
    seed: int = 0

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]


@dataclass
class WindowSet:
    """Fixed-length windows cut from a dataset, chronological order.

    targets[h][i] gives the channel vector h steps past the end of
    window i, for each requested horizon offset h.
    """

    inputs: np.ndarray                     # [N, W, C]
    labels: np.ndarray                     # [N] int8
    starts: np.ndarray                     # [N] start index of each window
    targets: dict = field(default_factory=dict)
    window_len: int = 0
    stride: int = 1
    horizons: tuple = ()

    def __len__(self) -> int:
        return self.inputs.shape[0]


def _check_faults(sensors, faults, length: int) -> None:
    ids = [s.channel for s in sensors]
    if len(set(ids)) != len(ids):
        raise ConfigError("duplicate sensor channel ids")
    known = set(ids)
    per_channel: dict[int, list[FaultSpec]] = {}
    for f in faults:
        if f.channel not in known:
            raise ConfigError(f"fault references unknown channel {f.channel}")
        if f.end > length:
            raise ConfigError(f"fault on channel {f.channel} runs past the "
                              f"series end ({f.end} > {length})")
        per_channel.setdefault(f.channel, []).append(f)
    for ch, group in per_channel.items():
        group.sort(key=lambda f: f.onset)
        for prev, cur in zip(group, group[1:]):
            if cur.onset < prev.end:
                raise ConfigError(f"overlapping faults on channel {ch}: "
                                  f"[{prev.onset},{prev.end}) and "
                                  f"[{cur.onset},{cur.end})")


def generate(sensors, faults=(), length: int = 20000,
             seed: int = 0) -> TimeSeriesDataset:
    """Build a labeled [length, channels] series, deterministic per seed."""
    sensors = tuple(sensors)
    faults = tuple(faults)
    if length <= 0:
        raise ConfigError("length must be positive")
    if not sensors:
        raise ConfigError("need at least one sensor")
    _check_faults(sensors, faults, length)

    t = np.arange(length, dtype=np.float64)
    children = np.random.SeedSequence(seed).spawn(len(sensors) + len(faults))
    chan_rngs = {s.channel: np.random.Generator(np.random.PCG64(children[i]))
                 for i, s in enumerate(sensors)}
    fault_rngs = [np.random.Generator(np.random.PCG64(children[len(sensors) + j]))
                  for j in range(len(faults))]

    values = np.empty((length, len(sensors)), dtype=np.float64)
    labels = np.zeros(length, dtype=np.int8)

    carriers = {}
    noises = {}
    for s in sensors:
        carriers[s.channel] = s.carrier(t)
        noises[s.channel] = chan_rngs[s.channel].normal(0.0, s.noise_sigma, length)

    for f, rng in zip(faults, fault_rngs):
        carrier = carriers[f.channel]
        noise = noises[f.channel]
        sl = slice(f.onset, f.end)
        if f.kind == "drift":
            carrier[sl] += f.magnitude * np.arange(1, f.duration + 1) / f.duration
        elif f.kind == "spike-burst":
            hits = rng.random(f.duration) < _BURST_DENSITY
            signs = rng.choice(np.array([-1.0, 1.0]), size=f.duration)
            carrier[sl] += hits * signs * f.magnitude
        elif f.kind == "stuck-at":
            carrier[sl] = f.magnitude
            noise[sl] = 0.0
        elif f.kind == "variance-inflation":
            noise[sl] *= f.magnitude
        labels[sl] = 1

    for col, s in enumerate(sensors):
        raw = carriers[s.channel] + noises[s.channel]
        values[:, col] = (raw > 0.0).astype(np.float64) if s.kind == DIGITAL else raw

    return TimeSeriesDataset(values, labels, sensors, faults, seed)


def window(dataset: TimeSeriesDataset, window_len: int, stride: int,
           horizons=()) -> WindowSet:
    """Cut strided windows plus future-value targets per horizon.

    Window count is floor((T - W - max_horizon)/stride) + 1 so every
    window has all its horizon targets inside the series. A window is
    Abnormal if any step it contains is Abnormal.
    """
    horizons = tuple(int(h) for h in horizons)
    if window_len < 1 or stride < 1:
        raise ConfigError("window_len and stride must be >= 1")
    if any(h < 0 for h in horizons):
        raise ConfigError("horizons must be non-negative")
    T = dataset.length
    if window_len > T:
        raise ConfigError(f"window ({window_len}) longer than series ({T})")
    max_h = max(horizons, default=0)
    usable = T - window_len - max_h
    if usable < 0:
        raise ConfigError("window plus largest horizon exceeds the series")
    count = usable // stride + 1

    starts = np.arange(count) * stride
    idx = starts[:, None] + np.arange(window_len)[None, :]
    inputs = dataset.values[idx]
    labels = dataset.labels[idx].max(axis=1)
    last = starts + window_len - 1
    targets = {h: dataset.values[last + h] for h in horizons}
    return WindowSet(inputs, labels, starts, targets, window_len, stride, horizons)


def split_counts(n: int, fractions=(0.6, 0.2, 0.2)) -> tuple:
    """(train, val, test) counts: floor-rounded, remainder to train.

    Validation and test each keep at least one window so small series
    still produce all three splits (3 windows -> 1/1/1).
    """
    if len(fractions) != 3:
        raise ConfigError("expected (train, val, test) fractions")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")
    if n < 3:
        raise ConfigError(f"need at least 3 windows to split, got {n}")
    n_val = max(1, int(n * fractions[1]))
    n_test = max(1, int(n * fractions[2]))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ConfigError("fractions leave no training windows")
    return n_train, n_val, n_test


def split(windows: WindowSet, fractions=(0.6, 0.2, 0.2)) -> dict:
    """Chronological contiguous split: train earliest, test latest."""
    n = len(windows)
    n_train, n_val, n_test = split_counts(n, fractions)
    idx = np.arange(n)
    return {
        "train": idx[:n_train],
        "val": idx[n_train:n_train + n_val],
        "test": idx[n_train + n_val:],
    }


def default_sensors(n_channels: int = 8, seed: int = 0) -> tuple:
    """Waveform bank with roughly the reference analog/digital mix.

    22 of 70 channels are analog in the reference layout; smaller banks
    keep that proportion (at least one analog channel). Carrier periods
    are drawn below the default analysis window (24 steps) so window
    statistics are phase-stable; slow carriers would alias fault offsets
    into ordinary seasonal variation at this scale.
    """
    if n_channels < 1:
        raise ConfigError("need at least one channel")
    n_analog = max(1, round(n_channels * 22 / 70))
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))
    sensors = []
    for c in range(n_channels):
        kind = ANALOG if c < n_analog else DIGITAL
        periods = tuple(float(p) for p in rng.integers(6, 19, size=2))
        amplitudes = (1.0, float(rng.uniform(0.2, 0.6)))
        phases = (float(rng.uniform(0, 2 * np.pi)), float(rng.uniform(0, 2 * np.pi)))
        sigma = 0.05 if kind == ANALOG else 0.2
        sensors.append(SensorSpec(c, kind, amplitudes, periods, phases, sigma))
    return tuple(sensors)


def default_faults(length: int = 20000, seed: int = 0) -> tuple:
    """Recurring drift / spike-burst / stuck-at schedule.

    Kinds cycle over a fixed channel set and recur throughout the whole
    series, so chronological train/val/test splits each contain every
    kind; a kind confined to one region would be unlearnable from the
    others.
    """
    if length < 2000:
        raise ConfigError("default schedule needs at least 2000 steps")
    kinds = (("drift", 0, 6.0), ("spike-burst", 1, 6.0), ("stuck-at", 2, 4.0))
    duration, spacing = 160, 640
    faults = []
    onset = spacing // 2
    i = 0
    while onset + duration < length:
        kind, channel, magnitude = kinds[i % len(kinds)]
        faults.append(FaultSpec(channel=channel, kind=kind, onset=onset,
                                duration=duration, magnitude=magnitude))
        onset += spacing
        i += 1
    return tuple(faults)


def generate_default(length: int = 20000, seed: int = 0) -> TimeSeriesDataset:
    """The stock benchmark series: 8 mixed channels, every fault kind."""
    return generate(default_sensors(8, seed=seed),
                    default_faults(length, seed=seed),
                    length=length, seed=seed)


# --- file round-trip: CSV of samples plus a sidecar config -----------------

def write_csv(dataset: TimeSeriesDataset, path) -> None:
    """Header `t,ch_0,...,ch_{C-1},label`; label is 0/1."""
    C = dataset.n_channels
    header = "t," + ",".join(f"ch_{c}" for c in range(C)) + ",label"
    lines = [header]
    for i in range(dataset.length):
        cells = ",".join(f"{v:.17g}" for v in dataset.values[i])
        lines.append(f"{i},{cells},{int(dataset.labels[i])}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_csv(path) -> TimeSeriesDataset:
    p = Path(path)
    if not p.is_file():
        raise DataError(f"dataset file not found: {p}")
    with p.open() as fh:
        header = fh.readline().strip().split(",")
        if header[:1] != ["t"] or header[-1:] != ["label"]:
            raise DataError(f"unexpected CSV header in {p}")
        C = len(header) - 2
        values, labels = [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            if len(parts) != C + 2:
                raise DataError(f"ragged row in {p}: {line!r}")
            values.append([float(x) for x in parts[1:-1]])
            labels.append(int(parts[-1]))
    return TimeSeriesDataset(np.asarray(values, dtype=np.float64),
                             np.asarray(labels, dtype=np.int8))


def to_sidecar(dataset: TimeSeriesDataset) -> cfgmod.Config:
    """Dotted-key record of sensors, faults, length, and seed."""
    cfg: cfgmod.Config = {
        "data.length": str(dataset.length),
        "data.channels": str(dataset.n_channels),
        "data.seed": str(dataset.seed),
    }
    for s in dataset.sensors:
        base = f"sensor.{s.channel}"
        cfg[f"{base}.kind"] = s.kind
        cfg[f"{base}.amplitudes"] = ",".join(f"{a:g}" for a in s.amplitudes)
        cfg[f"{base}.periods"] = ",".join(f"{p:g}" for p in s.periods)
        cfg[f"{base}.phases"] = ",".join(f"{p:.12g}" for p in s.phases)
        cfg[f"{base}.noise_sigma"] = f"{s.noise_sigma:g}"
    for j, f in enumerate(dataset.faults):
        base = f"fault.{j}"
        cfg[f"{base}.channel"] = str(f.channel)
        cfg[f"{base}.kind"] = f.kind
        cfg[f"{base}.onset"] = str(f.onset)
        cfg[f"{base}.duration"] = str(f.duration)
        cfg[f"{base}.magnitude"] = f"{f.magnitude:g}"
    return cfg


def sensors_from_config(cfg: cfgmod.Config) -> tuple:
    ids = sorted({int(k.split(".")[1]) for k in cfg if k.startswith("sensor.")})
    sensors = []
    for c in ids:
        base = f"sensor.{c}"
        sensors.append(SensorSpec(
            channel=c,
            kind=cfgmod.get_str(cfg, f"{base}.kind"),
            amplitudes=tuple(cfgmod.get_floats(cfg, f"{base}.amplitudes")),
            periods=tuple(cfgmod.get_floats(cfg, f"{base}.periods")),
            phases=tuple(cfgmod.get_floats(cfg, f"{base}.phases")),
            noise_sigma=cfgmod.get_float(cfg, f"{base}.noise_sigma", 0.05),
        ))
    return tuple(sensors)


def faults_from_config(cfg: cfgmod.Config) -> tuple:
    ids = sorted({int(k.split(".")[1]) for k in cfg if k.startswith("fault.")})
    faults = []
    for j in ids:
        base = f"fault.{j}"
        faults.append(FaultSpec(
            channel=cfgmod.get_int(cfg, f"{base}.channel"),
            kind=cfgmod.get_str(cfg, f"{base}.kind"),
            onset=cfgmod.get_int(cfg, f"{base}.onset"),
            duration=cfgmod.get_int(cfg, f"{base}.duration"),
            magnitude=cfgmod.get_float(cfg, f"{base}.magnitude"),
        ))
    return tuple(faults)


def generate_from_config(cfg: cfgmod.Config) -> TimeSeriesDataset:
    """Drive generate() from a dotted-key config.

    If no sensor.* keys are present, a default bank of data.channels
    channels is built (data.sensor_seed controls its waveforms). With
    no fault.* keys, `data.default_faults = true` opts into the stock
    recurring fault schedule.
    """
    length = cfgmod.get_int(cfg, "data.length", 20000)
    seed = cfgmod.get_int(cfg, "data.seed", 0)
    sensors = sensors_from_config(cfg)
    if not sensors:
        n = cfgmod.get_int(cfg, "data.channels", 8)
        sensors = default_sensors(n, seed=cfgmod.get_int(cfg, "data.sensor_seed", 0))
    faults = faults_from_config(cfg)
    if not faults and cfgmod.get_bool(cfg, "data.default_faults", False):
        faults = default_faults(length, seed=seed)
    return generate(sensors, faults, length, seed)
