"""End-to-end orchestration of the three stages.

Per evaluation window: per-sensor quantile estimates are refined, the
deep encoder's bottleneck codes feed gated temporal attention, the
refined quantiles plus a projection of the attended code are encoded
into spike rates, and the spiking network emits an anomaly score A(t)
that a threshold turns into Normal/Abnormal.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import autodiff as ad
from . import attention as gta_mod
from . import datagen, losses, snn
from . import quantile as qm
from .autodiff import Tensor, backward
from .exceptions import ConfigError, DataError, ShapeError
from .training import AdamW, EarlyStop, EpochRecord, Schedule, TrainingLog

COUPLING_FULL = "full"
COUPLING_QUANTILES = "quantiles"
COUPLING_ATTENTION = "attention"
_COUPLINGS = (COUPLING_FULL, COUPLING_QUANTILES, COUPLING_ATTENTION)


@dataclass
class PipelineSettings:
    """Run-level configuration; every field validates on demand."""

    window_len: int = 24
    stride: int = 4
    horizon: int = 4
    stage1_levels: tuple = qm.STAGE1_LEVELS
    stage2_levels: tuple = qm.STAGE2_LEVELS
    lookbacks: tuple = gta_mod.DEFAULT_LOOKBACKS
    d_k: int = 16
    d_v: int = 16
    combine: str = gta_mod.COMBINE_MEAN
    snn_hidden: int = 64
    t_window: int = 50
    encode_tau: float = 0.0
    r_max: float = 1.0
    lam: float = 0.1
    theta_c: float = 0.5
    vote_k: int = 1
    vote_m: int = 1
    coupling: str = COUPLING_FULL
    att_rate_dim: int = 0        # 0 -> use the code width
    force_gate_zero: bool = False
    stage1_epochs: int = 60
    stage2_epochs: int = 120
    autoenc_epochs: int = 15
    gta_epochs: int = 10
    snn_epochs: int = 60
    joint_epochs: int = 5
    joint_lr: float = 5e-4
    batch_size: int = 64
    patience: int = 12
    seed: int = 0
    stage1_loss: str = losses.ASYMMETRIC_HUBER

    def validate(self):
        if self.window_len < 2:
            raise ConfigError("window_len must be >= 2 to form a history")
        if self.stride < 1 or self.horizon < 1:
            raise ConfigError("stride and horizon must be >= 1")
        qm.QuantileLevelSet(tuple(self.stage1_levels))
        qm.QuantileLevelSet(tuple(self.stage2_levels))
        if self.combine not in (gta_mod.COMBINE_MEAN,
                                gta_mod.COMBINE_PAPER_SUM):
            raise ConfigError(f"unknown combine mode {self.combine!r}")
        if not self.lookbacks or any(b < 1 for b in self.lookbacks):
            raise ConfigError("lookbacks must be positive")
        if self.lam < 0:
            raise ConfigError("loss weight lambda must be >= 0")
        if not 0.0 <= self.theta_c <= 1.0:
            raise ConfigError("theta_c must lie in [0, 1] for sigmoid scores")
        if not 1 <= self.vote_k <= self.vote_m:
            raise ConfigError("voting needs 1 <= k <= m")
        if self.coupling not in _COUPLINGS:
            raise ConfigError(f"unknown coupling {self.coupling!r}; "
                              f"expected one of {_COUPLINGS}")
        if self.att_rate_dim < 0:
            raise ConfigError("att_rate_dim must be >= 0")
        if self.stage1_loss not in (losses.PINBALL, losses.HUBER,
                                    losses.ASYMMETRIC_HUBER):
            raise ConfigError(f"unknown stage-1 loss {self.stage1_loss!r}")
        snn.LifParams()  # defaults must self-validate
        return self

    @classmethod
    def from_config(cls, cfg: dict) -> "PipelineSettings":
        """Build from dotted-key config entries (pipeline.* keys)."""
        from . import config as cfgmod

        out = cls()
        ints = {"window_len", "stride", "horizon", "d_k", "d_v",
                "snn_hidden", "t_window", "vote_k", "vote_m",
                "att_rate_dim", "stage1_epochs", "stage2_epochs",
                "autoenc_epochs", "gta_epochs", "snn_epochs",
                "joint_epochs", "batch_size", "patience", "seed"}
        flts = {"encode_tau", "r_max", "lam", "theta_c", "joint_lr"}
        tups = {"stage1_levels", "stage2_levels", "lookbacks"}
        for f in fields(cls):
            key = f"pipeline.{f.name}"
            if key not in cfg:
                continue
            if f.name in ints:
                value = cfgmod.get_int(cfg, key)
            elif f.name in flts:
                value = cfgmod.get_float(cfg, key)
            elif f.name in tups:
                raw = cfgmod.get_floats(cfg, key)
                value = tuple(int(v) for v in raw) \
                    if f.name == "lookbacks" else tuple(raw)
            elif f.name == "force_gate_zero":
                value = cfgmod.get_bool(cfg, key)
            else:
                value = cfgmod.get_str(cfg, key)
            out = replace(out, **{f.name: value})
        # the per-sensor loss mode lives under its own section
        if "eqrnn.loss" in cfg:
            out = replace(out, stage1_loss=cfgmod.get_str(cfg, "eqrnn.loss"))
        return out.validate()


def classify(score, theta_c: float):
    """Abnormal iff score >= theta_c (boundary counts as Abnormal)."""
    return np.asarray(score, dtype=np.float64) >= theta_c


def classify_voting(scores, theta_c: float, k: int, m: int) -> np.ndarray:
    """Abnormal at position i iff >= k of the last m scores pass theta_c.

    Scores are assumed chronological; early positions see a shortened
    history. k=m=1 reduces to plain thresholding.
    """
    if not 1 <= k <= m:
        raise ConfigError("voting needs 1 <= k <= m")
    hits = classify(scores, theta_c).astype(np.int64)
    out = np.zeros(hits.size, dtype=bool)
    for i in range(hits.size):
        out[i] = hits[max(0, i - m + 1):i + 1].sum() >= k
    return out


def roc_auc(labels, scores):
    """Rank-statistic AUC with midrank tie handling; None if one class."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape:
        raise ShapeError("labels and scores lengths differ")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return None
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # midrank, 1-based
        i = j + 1
    pos_rank_sum = float(ranks[labels].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


@dataclass
class ClassificationReport:
    """Confusion counts plus the usual derived rates."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    precision: float
    recall: float
    f1: float
    auc: float | None
    scores: np.ndarray
    labels: np.ndarray
    predictions: np.ndarray

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def text(self) -> str:
        entries = [("windows", self.n), ("tp", self.tp), ("fp", self.fp),
                   ("tn", self.tn), ("fn", self.fn),
                   ("accuracy", f"{self.accuracy:.6f}"),
                   ("precision", f"{self.precision:.6f}"),
                   ("recall", f"{self.recall:.6f}"),
                   ("f1", f"{self.f1:.6f}"),
                   ("auc", "absent" if self.auc is None
                    else f"{self.auc:.6f}")]
        return "".join(f"{k} = {v}\n" for k, v in entries)

    def scores_csv(self) -> str:
        lines = ["window,score,label,prediction"]
        for i, (s, y, p) in enumerate(zip(self.scores, self.labels,
                                          self.predictions)):
            lines.append(f"{i},{s:.10g},{int(y)},{int(p)}")
        return "\n".join(lines) + "\n"


def metrics(labels, predictions, scores) -> ClassificationReport:
    labels = np.asarray(labels).astype(bool)
    predictions = np.asarray(predictions).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if not labels.shape == predictions.shape == scores.shape:
        raise ShapeError("labels, predictions, scores lengths differ")
    tp = int(np.sum(labels & predictions))
    fp = int(np.sum(~labels & predictions))
    tn = int(np.sum(~labels & ~predictions))
    fn = int(np.sum(labels & ~predictions))
    total = labels.size
    acc = (tp + tn) / total if total else 0.0
    prec = tp / (tp + fp) if tp + fp else 0.0
    rec = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
    return ClassificationReport(tp=tp, fp=fp, tn=tn, fn=fn, accuracy=acc,
                                precision=prec, recall=rec, f1=f1,
                                auc=roc_auc(labels, scores), scores=scores,
                                labels=labels, predictions=predictions)


def calibrate_threshold(labels, scores, default: float = 0.5) -> float:
    """Threshold maximizing F1 on the given split; ties keep the lowest."""
    labels = np.asarray(labels).astype(bool)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.sum() in (0, labels.size):
        return default
    best_theta, best_f1 = default, -1.0
    for theta in np.unique(scores):
        rep = metrics(labels, classify(scores, theta), scores)
        if rep.f1 > best_f1 + 1e-12:
            best_theta, best_f1 = float(theta), rep.f1
    return best_theta


def permutation_pvalue(scores, labels, n_perm: int = 999,
                       seed: int = 0) -> float:
    """Label-independence check: p-value of |mean score difference|."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if labels.sum() in (0, labels.size):
        return 1.0

    def diff(lab):
        return abs(scores[lab].mean() - scores[~lab].mean())

    observed = diff(labels)
    rng = np.random.default_rng(seed)
    hits = sum(diff(rng.permutation(labels)) >= observed - 1e-15
               for _ in range(n_perm))
    return (1 + hits) / (n_perm + 1)


def _fit_width(rows: np.ndarray, out_dim: int) -> np.ndarray:
    """Truncate or zero-pad target rows to the regression head width."""
    n, c = rows.shape
    if c == out_dim:
        return rows
    if c > out_dim:
        return rows[:, :out_dim]
    out = np.zeros((n, out_dim))
    out[:, :c] = rows
    return out


@dataclass
class RateNormalizer:
    """Maps refined quantile estimates onto [0, 1] with train-split spans.

    The span is the 1st-99th percentile of the training estimates, not
    min/max: train splits usually contain fault intervals, and a span
    stretched to the deepest fault would compress the normal band into
    a sliver and erase small deviations.
    """

    lo: np.ndarray
    hi: np.ndarray

    @classmethod
    def fit(cls, estimates: np.ndarray) -> "RateNormalizer":
        flat = estimates.reshape(estimates.shape[0], -1)
        lo = np.quantile(flat, 0.01, axis=0)
        hi = np.quantile(flat, 0.99, axis=0)
        return cls(lo=lo, hi=np.where(hi - lo < 1e-12, lo + 1.0, hi))

    def __call__(self, estimates: np.ndarray) -> np.ndarray:
        flat = estimates.reshape(estimates.shape[0], -1)
        return np.clip((flat - self.lo) / (self.hi - self.lo), 0.0, 1.0)


@dataclass
class PipelineModel:
    """Trained state for every stage plus the couplings between them."""

    settings: PipelineSettings
    stage1: qm.Stage1Population
    stage2: qm.Stage2Refiner
    autoenc: qm.EqrnnNet
    gta: gta_mod.GatedTemporalAttention
    snet: snn.SpikingNet
    normalizer: RateNormalizer
    proj_w: np.ndarray           # fixed random features: code -> rate space
    proj_b: np.ndarray
    calibrated_theta: float | None = None

    def validate(self):
        s = self.settings
        C = self.stage1.n_sensors
        if self.autoenc.n_channels != C:
            raise ConfigError("encoder width disagrees with stage-1 sensors")
        if tuple(self.stage2.source_levels) != tuple(self.stage1.levels):
            raise ConfigError("stage-2 source levels disagree with stage-1")
        if self.gta.d_model != self.autoenc.code_dim:
            raise ConfigError("attention width disagrees with the code width")
        if self.snet.n_inputs != self.rate_width():
            raise ConfigError("spiking-net input width disagrees with the "
                              "configured coupling")
        return self

    def rate_width(self) -> int:
        s = self.settings
        C = self.stage1.n_sensors
        q = 2 * C * len(self.stage2.levels)   # mean block + spread block
        a = self.proj_w.shape[1]
        return {COUPLING_FULL: q + a, COUPLING_QUANTILES: q,
                COUPLING_ATTENTION: a}[s.coupling]

    def encode_window_codes(self, inputs: np.ndarray, *,
                            training: bool = False, rng=None):
        """(h_t with grad, detached history codes) for [N, W, C] windows."""
        N, W, C = inputs.shape
        with ad.no_grad():
            flat = self.autoenc.encode(Tensor(inputs[:, :-1, :]
                                              .reshape(-1, C)))
            history = flat.data.reshape(N, W - 1, self.autoenc.code_dim)
        h_t = self.autoenc.encode(Tensor(inputs[:, -1, :]),
                                  training=training, rng=rng)
        return h_t, history

    def blended_codes(self, inputs: np.ndarray, *, training: bool = False,
                      rng=None) -> Tensor:
        h_t, history = self.encode_window_codes(inputs, training=training,
                                                rng=rng)
        override = 0.0 if self.settings.force_gate_zero else None
        return self.gta.forward(h_t, history, gate_override=override)

    def quantile_rates(self, inputs: np.ndarray) -> np.ndarray:
        """Refined estimates for every window row, pooled over time.

        Mean pooling integrates fault evidence anywhere in the window
        into the rate, which is what a rate code is: average activity
        over an interval. The spread block (std, doubled into [0,1])
        keeps variance faults visible: a stuck channel collapses the
        within-window spread without moving the mean.
        """
        N, W, C = inputs.shape
        est = self.stage1.predict(inputs.reshape(N * W, C))
        refined = self.stage2.predict(est)
        per_row = self.normalizer(refined).reshape(N, W, -1)
        pooled = np.concatenate([per_row.mean(axis=1),
                                 2.0 * per_row.std(axis=1)], axis=1)
        return snn.encode_rate(pooled, self.settings.encode_tau,
                               self.settings.r_max)

    def attention_rates(self, blended: np.ndarray) -> np.ndarray:
        z = blended @ self.proj_w + self.proj_b
        return snn.encode_rate(1.0 / (1.0 + np.exp(-z)),
                               self.settings.encode_tau,
                               self.settings.r_max)

    def window_rates(self, inputs: np.ndarray,
                     blended: np.ndarray | None = None) -> np.ndarray:
        """[N, W, C] windows -> [N, rate_width] spike rates (detached)."""
        s = self.settings
        parts = []
        if s.coupling in (COUPLING_FULL, COUPLING_QUANTILES):
            parts.append(self.quantile_rates(inputs))
        if s.coupling in (COUPLING_FULL, COUPLING_ATTENTION):
            if blended is None:
                with ad.no_grad():
                    blended = self.blended_codes(inputs).data
            parts.append(self.attention_rates(blended))
        return np.concatenate(parts, axis=1)

    def score_windows(self, inputs: np.ndarray) -> np.ndarray:
        """Anomaly scores A(t) in (0, 1), one per window."""
        return self.snet.scores(self.window_rates(inputs))

    def predict_windows(self, inputs: np.ndarray,
                        theta_c: float | None = None) -> np.ndarray:
        s = self.settings
        theta = s.theta_c if theta_c is None else theta_c
        scores = self.score_windows(inputs)
        if s.vote_m > 1:
            return classify_voting(scores, theta, s.vote_k, s.vote_m)
        return classify(scores, theta)


def _series_row_splits(windows: datagen.WindowSet, splits: dict) -> dict:
    """Chronological per-row splits aligned with the window splits."""
    b1 = int(windows.starts[splits["val"][0]])
    b2 = int(windows.starts[splits["test"][0]])
    total = int(windows.starts[-1]) + windows.window_len
    return {"train": np.arange(0, b1), "val": np.arange(b1, b2),
            "test": np.arange(b2, total)}


def _stage_seeds(seed: int) -> np.ndarray:
    """One fixed child stream per stage, so a stage retrained in
    isolation reproduces its slice of a full run exactly."""
    return np.random.SeedSequence(seed).generate_state(8)


def fit_forecasting_stage(dataset: datagen.TimeSeriesDataset,
                          settings: PipelineSettings,
                          log: TrainingLog | None = None):
    """Stage-1 population, stage-2 refiners, deep forecaster, and the
    rate normalizer, plus the windowing they were fitted on."""
    s = settings.validate()
    C = dataset.n_channels
    windows = datagen.window(dataset, s.window_len, s.stride, (s.horizon,))
    splits = datagen.split(windows)
    rows = _series_row_splits(windows, splits)
    seeds = _stage_seeds(s.seed)

    stage1 = qm.train_stage1(
        dataset.values, rows["train"], rows["val"],
        levels=s.stage1_levels, loss=s.stage1_loss, horizon=s.horizon,
        seed=int(seeds[0]), max_epochs=s.stage1_epochs,
        patience=s.patience)

    est = stage1.predict(windows.inputs[:, -1, :])
    y = windows.targets[s.horizon]
    tr, va = splits["train"], splits["val"]
    stage2 = qm.refine_stage2(
        est[tr], y[tr], est[va], y[va], subset=s.stage2_levels,
        source_levels=s.stage1_levels, seed=int(seeds[1]),
        max_epochs=s.stage2_epochs, patience=s.patience)

    autoenc = qm.EqrnnNet(C, seed=int(seeds[2]))
    auto_log = log if log is not None else TrainingLog()
    qm.train_autoencoder(autoenc, dataset.values, rows["train"], rows["val"],
                         horizon=s.horizon, max_epochs=s.autoenc_epochs,
                         patience=s.patience, seed=int(seeds[3]),
                         batch_size=s.batch_size, log=auto_log)

    # span over every row of the training windows, not just the last
    n_tr, W = len(tr), s.window_len
    est_rows = stage1.predict(windows.inputs[tr].reshape(n_tr * W, C))
    normalizer = RateNormalizer.fit(stage2.predict(est_rows))
    return stage1, stage2, autoenc, normalizer, windows, splits, auto_log


def init_attention(settings: PipelineSettings, code_dim: int):
    """Fresh attention heads plus the fixed random code->rate projection.

    The projection is drawn once and never trained: it only needs to
    preserve enough code geometry for the rate encoder downstream."""
    s = settings
    seeds = _stage_seeds(s.seed)
    gta = gta_mod.GatedTemporalAttention(
        code_dim, d_k=s.d_k, d_v=s.d_v, lookbacks=s.lookbacks,
        combine=s.combine, seed=int(seeds[4]))
    att_dim = s.att_rate_dim or code_dim
    proj_rng = ad.make_rng(int(seeds[5]))
    proj_w = proj_rng.normal(0.0, 1.0 / np.sqrt(code_dim),
                             (code_dim, att_dim))
    proj_b = np.zeros(att_dim)
    return gta, proj_w, proj_b


def init_spiking(settings: PipelineSettings, n_channels: int,
                 att_dim: int) -> snn.SpikingNet:
    s = settings
    seeds = _stage_seeds(s.seed)
    q_width = 2 * n_channels * len(s.stage2_levels)
    n_inputs = {COUPLING_FULL: q_width + att_dim,
                COUPLING_QUANTILES: q_width,
                COUPLING_ATTENTION: att_dim}[s.coupling]
    return snn.SpikingNet(n_inputs, hidden=s.snn_hidden,
                          t_window=s.t_window, encode_tau=s.encode_tau,
                          r_max=s.r_max, seed=int(seeds[6]))


def fit_attention_stage(model: PipelineModel, windows: datagen.WindowSet,
                        splits: dict,
                        log: TrainingLog | None = None) -> TrainingLog:
    """Attention trains on forecasting alone; lam=0 silences the spike
    term exactly, so the spiking net is untouched here."""
    s = model.settings
    seeds = _stage_seeds(s.seed)
    log = log if log is not None else TrainingLog()
    _joint_phase(model, windows, splits, seed=int(seeds[7]), log=log,
                 lam=0.0, max_epochs=s.gta_epochs)
    return log


def _recalibrate(model: PipelineModel, windows: datagen.WindowSet,
                 splits: dict) -> None:
    va = splits["val"]
    val_scores = model.score_windows(windows.inputs[va])
    model.calibrated_theta = calibrate_threshold(windows.labels[va],
                                                 val_scores)


def fit_spiking_stage(model: PipelineModel, windows: datagen.WindowSet,
                      splits: dict,
                      log: TrainingLog | None = None) -> TrainingLog:
    """Spiking net on frozen upstream rates, then threshold calibration."""
    seeds = _stage_seeds(model.settings.seed)
    log = log if log is not None else TrainingLog()
    _snn_phase(model, windows, splits, seed=int(seeds[7]) + 1, log=log)
    _recalibrate(model, windows, splits)
    return log


def joint_polish(model: PipelineModel, windows: datagen.WindowSet,
                 splits: dict,
                 log: TrainingLog | None = None) -> TrainingLog:
    """Short coupled phase weighing the spike term by lambda."""
    s = model.settings
    seeds = _stage_seeds(s.seed)
    log = log if log is not None else TrainingLog()
    _joint_phase(model, windows, splits, seed=int(seeds[7]) + 2,
                 log=log, lam=s.lam, max_epochs=s.joint_epochs)
    _recalibrate(model, windows, splits)
    return log


def train_pipeline(dataset: datagen.TimeSeriesDataset,
                   settings: PipelineSettings | None = None,
                   log: TrainingLog | None = None):
    """Fit all stages in order; returns (model, artifacts dict)."""
    s = (settings or PipelineSettings()).validate()
    stage1, stage2, autoenc, normalizer, windows, splits, auto_log = \
        fit_forecasting_stage(dataset, s)
    gta, proj_w, proj_b = init_attention(s, autoenc.code_dim)
    snet = init_spiking(s, dataset.n_channels, proj_w.shape[1])
    model = PipelineModel(settings=s, stage1=stage1, stage2=stage2,
                          autoenc=autoenc, gta=gta, snet=snet,
                          normalizer=normalizer, proj_w=proj_w,
                          proj_b=proj_b).validate()

    gta_log = fit_attention_stage(model, windows, splits)
    snn_log = fit_spiking_stage(model, windows, splits)
    joint_log = joint_polish(model, windows, splits, log)
    artifacts = {"windows": windows, "splits": splits,
                 "autoenc_log": auto_log, "gta_log": gta_log,
                 "snn_log": snn_log, "joint_log": joint_log,
                 "stage2_flags": stage2.flags}
    return model, artifacts


def _joint_phase(model: PipelineModel, windows: datagen.WindowSet,
                 splits: dict, *, seed: int, log: TrainingLog,
                 lam: float, max_epochs: int):
    """Shared phase: attention trains on forecasting, the spiking net on
    window labels; lambda weighs the spike term (0 silences it exactly,
    and the spike forward pass is skipped since its term is absent)."""
    s = model.settings
    net = model.autoenc
    tr, va = splits["train"], splits["val"]
    x_tr = windows.inputs[tr]
    y_tr = _fit_width(windows.targets[s.horizon][tr], net.out_dim)
    lab_tr = windows.labels[tr].astype(np.float64)
    x_va = windows.inputs[va]
    y_va = Tensor(_fit_width(windows.targets[s.horizon][va], net.out_dim))
    lab_va = windows.labels[va].astype(np.float64)
    delta = qm._delta_from_targets(y_tr)
    # quantile stages are frozen here, so their rate columns are fixed
    q_tr = model.quantile_rates(x_tr) if lam > 0 \
        and s.coupling != COUPLING_ATTENTION else None
    q_va = model.quantile_rates(x_va) if lam > 0 \
        and s.coupling != COUPLING_ATTENTION else None

    params = net.parameters() + model.gta.parameters()
    if lam > 0:
        params += model.snet.parameters()
    opt = AdamW(params, lr=s.joint_lr)
    schedule = Schedule(s.joint_lr, 10.0, 80)
    stopper = EarlyStop(patience=s.patience)
    shuffle = ad.make_rng(seed)
    drop_rng = ad.make_rng(seed + 1)

    def batch_losses(x, y_fit, labels, q_rates, training):
        blended = model.blended_codes(x, training=training,
                                      rng=drop_rng if training else None)
        decoded = net.decode(blended, training=training,
                             rng=drop_rng if training else None)
        le = ad.tmean(losses.quantile_training_loss(
            y_fit, decoded, 0.5, loss=losses.ASYMMETRIC_HUBER, delta=delta))
        if lam == 0.0:
            return snn.joint_loss(le, None, 0.0)
        parts = []
        if q_rates is not None:
            parts.append(q_rates)
        if s.coupling != COUPLING_QUANTILES:
            parts.append(model.attention_rates(blended.data))
        logits, _ = model.snet.forward(np.concatenate(parts, axis=1))
        ls = losses.mean_bce_with_logits(logits, Tensor(labels))
        return snn.joint_loss(le, ls, lam)

    import time
    for epoch in range(max_epochs):
        t0 = time.perf_counter()
        opt.lr = schedule.rate(epoch)
        order = shuffle.permutation(x_tr.shape[0])
        total, seen = 0.0, 0
        for start in range(0, order.size, s.batch_size):
            picks = order[start:start + s.batch_size]
            opt.zero_grad()
            loss = batch_losses(
                x_tr[picks], Tensor(y_tr[picks]), lab_tr[picks],
                None if q_tr is None else q_tr[picks], True)
            backward(loss)
            opt.step()
            total += float(loss.data) * picks.size
            seen += picks.size
        with ad.no_grad():
            val = float(batch_losses(x_va, y_va, lab_va, q_va, False).data)
        log.add(EpochRecord(epoch, total / max(seen, 1), val, opt.lr,
                            time.perf_counter() - t0))
        if stopper.update(val):
            break
    return log


def _snn_phase(model: PipelineModel, windows: datagen.WindowSet,
               splits: dict, *, seed: int, log: TrainingLog):
    """Spiking-stage fit on rates from the frozen upstream stages."""
    from .training import SNN_BATCH, SNN_SCHEDULE

    s = model.settings
    tr, va = splits["train"], splits["val"]
    with ad.no_grad():
        rates_tr = model.window_rates(windows.inputs[tr])
        rates_va = model.window_rates(windows.inputs[va])
    lab_tr = windows.labels[tr].astype(np.float64)
    lab_va = Tensor(windows.labels[va].astype(np.float64))

    opt = AdamW(model.snet.parameters(), lr=SNN_SCHEDULE.initial)
    stopper = EarlyStop(patience=s.patience)
    shuffle = ad.make_rng(seed)

    import time
    for epoch in range(s.snn_epochs):
        t0 = time.perf_counter()
        opt.lr = SNN_SCHEDULE.rate(epoch)
        order = shuffle.permutation(rates_tr.shape[0])
        total, seen = 0.0, 0
        for start in range(0, order.size, SNN_BATCH):
            picks = order[start:start + SNN_BATCH]
            opt.zero_grad()
            logits, _ = model.snet.forward(rates_tr[picks])
            loss = losses.mean_bce_with_logits(
                logits, Tensor(lab_tr[picks]))
            backward(loss)
            opt.step()
            total += float(loss.data) * picks.size
            seen += picks.size
        with ad.no_grad():
            logits, _ = model.snet.forward(rates_va)
        val = float(losses.mean_bce_with_logits(logits, lab_va).data)
        log.add(EpochRecord(epoch, total / max(seen, 1), val, opt.lr,
                            time.perf_counter() - t0))
        if stopper.update(val):
            break
    return log


def evaluate_pipeline(model: PipelineModel, windows: datagen.WindowSet,
                      idx=None, theta_c: float | None = None):
    """Score the given windows and compile a ClassificationReport."""
    model.validate()
    inputs = windows.inputs if idx is None else windows.inputs[idx]
    labels = windows.labels if idx is None else windows.labels[idx]
    if inputs.shape[0] == 0:
        raise DataError("no windows to evaluate")
    scores = model.score_windows(inputs)
    preds = model.predict_windows(inputs, theta_c)
    return metrics(labels.astype(bool), preds, scores)


def run_pipeline(dataset: datagen.TimeSeriesDataset,
                 settings: PipelineSettings | None = None):
    """Train everything, evaluate on the held-out test windows."""
    model, artifacts = train_pipeline(dataset, settings)
    report = evaluate_pipeline(model, artifacts["windows"],
                               artifacts["splits"]["test"])
    artifacts["report"] = report
    return model, report, artifacts
