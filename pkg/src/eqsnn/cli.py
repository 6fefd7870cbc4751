"""Command-line front end: data generation, stage-wise training,
evaluation, and checkpoint inspection.

One dotted-key config file drives every subcommand; its sha256 digest is
stamped into each checkpoint so artifacts cannot silently mix
configurations. Exit codes: 0 success, 2 config or data error, 3 missing
stage dependency, 4 digest mismatch, 5 corrupt artifact.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import attention as gta_mod
from . import checkpoint as ck
from . import config as cfgmod
from . import datagen
from . import pipeline as pl
from . import quantile as qm
from . import snn
from .autodiff import Tensor
from .exceptions import (CheckpointError, ConfigError, DataError,
                         DigestMismatchError, EqsnnError)
from .training import TrainingLog

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DEPENDENCY = 3
EXIT_DIGEST = 4
EXIT_CORRUPT = 5

STAGE_FILES = {"eqrnn": "eqrnn.eqsn", "gta": "gta.eqsn", "snn": "snn.eqsn"}
LOG_FILES = {"eqrnn": "eqrnn_log.csv", "gta": "gta_log.csv",
             "snn": "snn_log.csv", "joint": "joint_log.csv"}
DATA_CSV = "dataset.csv"
DATA_SIDECAR = "dataset.eqc"
REPORT_FILE = "report.txt"
SCORES_FILE = "scores.csv"
ATTENTION_FILE = "attention.csv"
SPIKES_FILE = "spikes.csv"
ATTENTION_DUMP_CAP = 256      # windows; keeps the dump reviewable


def worker_cap(default: int = 8) -> int:
    """Evaluation pool size; EQSNN_THREADS caps it from the outside."""
    workers = min(default, os.cpu_count() or 1)
    raw = os.environ.get("EQSNN_THREADS", "").strip()
    if raw:
        try:
            workers = min(workers, int(raw))
        except ValueError:
            raise ConfigError(
                f"EQSNN_THREADS must be an integer, got {raw!r}") from None
    return max(workers, 1)


def log_csv(log: TrainingLog) -> str:
    """Per-epoch CSV without the wall-clock column: identical runs must
    serialize byte-identically, and epoch durations are timestamps."""
    lines = ["epoch,train_loss,val_loss,lr"]
    for r in log.records:
        lines.append(f"{r.epoch},{r.train_loss:.10g},{r.val_loss:.10g},"
                     f"{r.lr:.10g}")
    return "\n".join(lines) + "\n"


def _settings_from(cfg: cfgmod.Config, seed: int | None,
                   max_epochs: int | None) -> pl.PipelineSettings:
    s = pl.PipelineSettings.from_config(cfg)
    if seed is not None:
        if seed < 0:
            raise ConfigError("seed must be non-negative")
        s = replace(s, seed=seed)
    if max_epochs is not None:
        if max_epochs < 1:
            raise ConfigError("max-epochs must be >= 1")
        s = replace(s,
                    stage1_epochs=min(s.stage1_epochs, max_epochs),
                    stage2_epochs=min(s.stage2_epochs, max_epochs),
                    autoenc_epochs=min(s.autoenc_epochs, max_epochs),
                    gta_epochs=min(s.gta_epochs, max_epochs),
                    snn_epochs=min(s.snn_epochs, max_epochs),
                    joint_epochs=min(s.joint_epochs, max_epochs))
    return s.validate()


# --- checkpoint packing: stable names per stage -----------------------------

def _named_stage1(pop: qm.Stage1Population) -> dict:
    out = {}
    for c in range(pop.n_sensors):
        for k, a in enumerate(pop.levels):
            out.update(pop.model(c, a).named_parameters(f"s1.c{c}.q{k}."))
    return out


def _named_stage2(ref: qm.Stage2Refiner) -> dict:
    out = {}
    for k, a in enumerate(ref.levels):
        out.update(ref.nets[a].named_parameters(f"s2.q{k}."))
    return out


def _eqrnn_checkpoint(model: pl.PipelineModel, digest: bytes) -> ck.Checkpoint:
    C = model.stage1.n_sensors
    named = _named_stage1(model.stage1)
    named.update(_named_stage2(model.stage2))
    named.update({f"ae.{n}": p
                  for n, p in model.autoenc.named_parameters().items()})
    named["norm.lo"] = model.normalizer.lo
    named["norm.hi"] = model.normalizer.hi
    dims = qm.encoder_dims_for(C) + qm.decoder_dims_for(C)
    return ck.from_params("eqrnn", named, dims, model.settings.seed, digest)


def _gta_checkpoint(model: pl.PipelineModel, digest: bytes) -> ck.Checkpoint:
    named = {f"gta.{n}": p
             for n, p in model.gta.named_parameters().items()}
    named["proj.weight"] = model.proj_w
    named["proj.bias"] = model.proj_b
    s = model.settings
    dims = (model.gta.d_model, s.d_k, s.d_v) + tuple(s.lookbacks)
    return ck.from_params("gta", named, dims, s.seed, digest)


def _snn_checkpoint(model: pl.PipelineModel, digest: bytes) -> ck.Checkpoint:
    named = dict(model.snet.named_parameters())
    theta = model.calibrated_theta
    named["theta.calibrated"] = np.array(np.nan if theta is None else theta)
    return ck.from_params("snn", named, model.snet.layer_sizes,
                          model.settings.seed, digest)


def _write_stage(outdir: Path, stage: str, checkpoint: ck.Checkpoint) -> None:
    ck.save_checkpoint(outdir / STAGE_FILES[stage], checkpoint)


def _require_stages(outdir: Path, stages) -> None:
    missing = [STAGE_FILES[s] for s in stages
               if not (outdir / STAGE_FILES[s]).is_file()]
    if missing:
        raise _Dependency(f"missing prerequisite checkpoint(s) in {outdir}: "
                          + ", ".join(missing))


class _Dependency(EqsnnError):
    """A stage was requested before its prerequisites were trained."""


# --- checkpoint restore: rebuild module shells, then copy arrays ------------

def _restore_eqrnn(outdir: Path, s: pl.PipelineSettings, n_channels: int,
                   digest: bytes):
    loaded = ck.load_checkpoint(outdir / STAGE_FILES["eqrnn"],
                                expect_digest=digest)
    levels = qm.QuantileLevelSet(tuple(s.stage1_levels))
    pop = qm.Stage1Population(levels=levels, horizon=s.horizon)
    named = {}
    for c in range(n_channels):
        for k, a in enumerate(levels):
            model = qm.QuantileModel(c, a, seed=0)
            pop.models[(c, a)] = model
            named.update(model.named_parameters(f"s1.c{c}.q{k}."))
    sub = qm.QuantileLevelSet(tuple(s.stage2_levels))
    ref = qm.Stage2Refiner(levels=sub, source_levels=levels)
    for k, a in enumerate(sub):
        net = qm.RefinerNet(a, len(levels), seed=0)
        ref.nets[a] = net
        named.update(net.named_parameters(f"s2.q{k}."))
    autoenc = qm.EqrnnNet(n_channels, seed=0)
    named.update({f"ae.{n}": p
                  for n, p in autoenc.named_parameters().items()})
    width = n_channels * len(sub)
    holders = {"norm.lo": Tensor(np.zeros(width)),
               "norm.hi": Tensor(np.ones(width))}
    named.update(holders)
    ck.restore_params(loaded, named)
    normalizer = pl.RateNormalizer(lo=holders["norm.lo"].data,
                                   hi=holders["norm.hi"].data)
    return pop, ref, autoenc, normalizer


def _restore_gta(outdir: Path, s: pl.PipelineSettings, code_dim: int,
                 digest: bytes):
    loaded = ck.load_checkpoint(outdir / STAGE_FILES["gta"],
                                expect_digest=digest)
    gta = gta_mod.GatedTemporalAttention(
        code_dim, d_k=s.d_k, d_v=s.d_v, lookbacks=s.lookbacks,
        combine=s.combine, seed=0)
    att_dim = s.att_rate_dim or code_dim
    named = {f"gta.{n}": p for n, p in gta.named_parameters().items()}
    holders = {"proj.weight": Tensor(np.zeros((code_dim, att_dim))),
               "proj.bias": Tensor(np.zeros(att_dim))}
    named.update(holders)
    ck.restore_params(loaded, named)
    return gta, holders["proj.weight"].data, holders["proj.bias"].data


def _restore_snn(outdir: Path, s: pl.PipelineSettings, n_inputs: int,
                 digest: bytes):
    loaded = ck.load_checkpoint(outdir / STAGE_FILES["snn"],
                                expect_digest=digest)
    snet = snn.SpikingNet(n_inputs, hidden=s.snn_hidden,
                          t_window=s.t_window, encode_tau=s.encode_tau,
                          r_max=s.r_max, seed=0)
    named = dict(snet.named_parameters())
    named["theta.calibrated"] = Tensor(np.zeros(()))
    ck.restore_params(loaded, named)
    theta = float(named["theta.calibrated"].data)
    return snet, (None if np.isnan(theta) else theta)


def _load_model(outdir: Path, s: pl.PipelineSettings, n_channels: int,
                digest: bytes) -> pl.PipelineModel:
    _require_stages(outdir, ("eqrnn", "gta", "snn"))
    stage1, stage2, autoenc, normalizer = _restore_eqrnn(
        outdir, s, n_channels, digest)
    gta, proj_w, proj_b = _restore_gta(outdir, s, autoenc.code_dim, digest)
    snet, theta = _restore_snn(outdir, s, _rate_width(s, n_channels,
                                                      proj_w.shape[1]),
                               digest)
    model = pl.PipelineModel(settings=s, stage1=stage1, stage2=stage2,
                             autoenc=autoenc, gta=gta, snet=snet,
                             normalizer=normalizer, proj_w=proj_w,
                             proj_b=proj_b, calibrated_theta=theta)
    return model.validate()


def _rate_width(s: pl.PipelineSettings, n_channels: int,
                att_dim: int) -> int:
    q = 2 * n_channels * len(s.stage2_levels)
    return {pl.COUPLING_FULL: q + att_dim,
            pl.COUPLING_QUANTILES: q,
            pl.COUPLING_ATTENTION: att_dim}[s.coupling]


# --- subcommands ------------------------------------------------------------

def cmd_generate(args) -> int:
    cfg = cfgmod.load_config(args.config)
    if args.seed is not None:
        cfg = dict(cfg)
        cfg["data.seed"] = str(args.seed)
    dataset = datagen.generate_from_config(cfg)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    datagen.write_csv(dataset, outdir / DATA_CSV)
    cfgmod.save_config(datagen.to_sidecar(dataset), outdir / DATA_SIDECAR)
    frac = float(np.mean(dataset.labels != 0))
    print(f"wrote {outdir / DATA_CSV}: {dataset.length} steps x "
          f"{dataset.n_channels} channels, abnormal fraction {frac:.3f}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = cfgmod.load_config(args.config)
    digest = cfgmod.config_digest(cfg)
    settings = _settings_from(cfg, args.seed, args.max_epochs)
    dataset = datagen.read_csv(args.data)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    if args.stage == "all":
        model, artifacts = pl.train_pipeline(dataset, settings)
        _write_stage(outdir, "eqrnn", _eqrnn_checkpoint(model, digest))
        _write_stage(outdir, "gta", _gta_checkpoint(model, digest))
        _write_stage(outdir, "snn", _snn_checkpoint(model, digest))
        for stage, key in (("eqrnn", "autoenc_log"), ("gta", "gta_log"),
                           ("snn", "snn_log"), ("joint", "joint_log")):
            (outdir / LOG_FILES[stage]).write_text(
                log_csv(artifacts[key]))
        print(f"trained all stages into {outdir}")
        return EXIT_OK

    if args.stage == "eqrnn":
        stage1, stage2, autoenc, normalizer, windows, splits, log = \
            pl.fit_forecasting_stage(dataset, settings)
        gta, proj_w, proj_b = pl.init_attention(settings, autoenc.code_dim)
        snet = pl.init_spiking(settings, dataset.n_channels,
                               proj_w.shape[1])
        model = pl.PipelineModel(settings=settings, stage1=stage1,
                                 stage2=stage2, autoenc=autoenc, gta=gta,
                                 snet=snet, normalizer=normalizer,
                                 proj_w=proj_w, proj_b=proj_b)
        _write_stage(outdir, "eqrnn", _eqrnn_checkpoint(model, digest))
        (outdir / LOG_FILES["eqrnn"]).write_text(log_csv(log))
        print(f"trained eqrnn stage into {outdir}")
        return EXIT_OK

    windows = datagen.window(dataset, settings.window_len, settings.stride,
                             (settings.horizon,))
    splits = datagen.split(windows)

    if args.stage == "gta":
        _require_stages(outdir, ("eqrnn",))
        stage1, stage2, autoenc, normalizer = _restore_eqrnn(
            outdir, settings, dataset.n_channels, digest)
        gta, proj_w, proj_b = pl.init_attention(settings, autoenc.code_dim)
        snet = pl.init_spiking(settings, dataset.n_channels,
                               proj_w.shape[1])
        model = pl.PipelineModel(settings=settings, stage1=stage1,
                                 stage2=stage2, autoenc=autoenc, gta=gta,
                                 snet=snet, normalizer=normalizer,
                                 proj_w=proj_w, proj_b=proj_b).validate()
        log = pl.fit_attention_stage(model, windows, splits)
        _write_stage(outdir, "gta", _gta_checkpoint(model, digest))
        # the attention phase also refines the shared forecaster, so the
        # eqrnn checkpoint is rewritten with the polished weights
        _write_stage(outdir, "eqrnn", _eqrnn_checkpoint(model, digest))
        (outdir / LOG_FILES["gta"]).write_text(log_csv(log))
        print(f"trained gta stage into {outdir}")
        return EXIT_OK

    if args.stage == "snn":
        _require_stages(outdir, ("eqrnn", "gta"))
        stage1, stage2, autoenc, normalizer = _restore_eqrnn(
            outdir, settings, dataset.n_channels, digest)
        gta, proj_w, proj_b = _restore_gta(outdir, settings,
                                           autoenc.code_dim, digest)
        snet = pl.init_spiking(settings, dataset.n_channels,
                               proj_w.shape[1])
        model = pl.PipelineModel(settings=settings, stage1=stage1,
                                 stage2=stage2, autoenc=autoenc, gta=gta,
                                 snet=snet, normalizer=normalizer,
                                 proj_w=proj_w, proj_b=proj_b).validate()
        log = pl.fit_spiking_stage(model, windows, splits)
        _write_stage(outdir, "snn", _snn_checkpoint(model, digest))
        (outdir / LOG_FILES["snn"]).write_text(log_csv(log))
        print(f"trained snn stage into {outdir}")
        return EXIT_OK

    raise ConfigError(f"unknown stage {args.stage!r}")


def _pooled_scores(model: pl.PipelineModel, inputs: np.ndarray) -> np.ndarray:
    """Window scores through a thread pool; windows are independent, so
    chunked scoring is order-preserving and deterministic."""
    workers = worker_cap()
    n = inputs.shape[0]
    if workers == 1 or n < 2 * workers:
        return model.score_windows(inputs)
    chunks = np.array_split(np.arange(n), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = list(pool.map(
            lambda idx: model.score_windows(inputs[idx]), chunks))
    return np.concatenate(parts)


def _attention_rows(model: pl.PipelineModel, inputs: np.ndarray) -> list:
    """(window, head, lag, weight) rows; lag 1 is the most recent code."""
    from . import autodiff as ad

    rows = []
    with ad.no_grad():
        h_t, history = model.encode_window_codes(inputs)
        outputs = model.gta.forward_heads(h_t, history)
    for head, out in zip(model.gta.heads, outputs):
        if out.weights is None:
            continue
        w = out.weights.reshape(inputs.shape[0], -1)
        for i in range(w.shape[0]):
            span = w.shape[1]
            for lag_idx in range(span):
                rows.append((i, head.index, span - lag_idx,
                             float(w[i, lag_idx])))
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    return rows


def cmd_eval(args) -> int:
    cfg = cfgmod.load_config(args.config)
    digest = cfgmod.config_digest(cfg)
    settings = _settings_from(cfg, None, None)
    dataset = datagen.read_csv(args.data)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)

    model = _load_model(outdir, settings, dataset.n_channels, digest)
    windows = datagen.window(dataset, settings.window_len, settings.stride,
                             ())
    if windows.inputs.shape[0] == 0:
        raise DataError("no evaluation windows")
    scores = _pooled_scores(model, windows.inputs)
    theta = settings.theta_c
    if settings.vote_m > 1:
        preds = pl.classify_voting(scores, theta, settings.vote_k,
                                   settings.vote_m)
    else:
        preds = pl.classify(scores, theta)
    report = pl.metrics(windows.labels.astype(bool), preds, scores)
    (outdir / REPORT_FILE).write_text(report.text())
    (outdir / SCORES_FILE).write_text(report.scores_csv())
    if args.dump_attention:
        picks = windows.inputs[:ATTENTION_DUMP_CAP]
        rows = _attention_rows(model, picks)
        (outdir / ATTENTION_FILE).write_text(
            gta_mod.weights_report_csv(rows))
    if args.dump_spikes:
        from . import autodiff as ad
        with ad.no_grad():
            rates = model.window_rates(windows.inputs[:1])
            _, diag = model.snet.forward(rates, record=True)
        (outdir / SPIKES_FILE).write_text(snn.raster_csv(diag.trains))
    print(report.text(), end="")
    return EXIT_OK


def _layer_rows(dims, stated=None) -> list[str]:
    rows = []
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:]), start=1):
        formula = qm.layer_param_count(a, b)
        line = f"  layer {i:2d}: {a:5d} -> {b:5d}   formula {formula:7d}"
        if stated is not None:
            line += f"   reported {stated[i - 1]:7d}"
            line += "   MISMATCH" if stated[i - 1] != formula else "   ok"
        rows.append(line)
    return rows


def inspect_text(loaded: ck.Checkpoint) -> str:
    lines = [f"stage: {loaded.stage}",
             f"format version: {loaded.version}",
             f"seed: {loaded.seed}",
             f"config digest: {loaded.digest.hex() if loaded.digest else '-'}",
             f"arrays: {len(loaded.arrays)}",
             "stored parameters: "
             f"{sum(a.size for a in loaded.arrays.values())}"]
    dims = loaded.dims
    if loaded.stage == "eqrnn" and len(dims) >= 4 and len(dims) % 2 == 0:
        enc, dec = dims[:len(dims) // 2], dims[len(dims) // 2:]
        reference = enc == qm.ENCODER_DIMS
        lines.append("encoder dims: " + " -> ".join(map(str, enc)))
        lines += _layer_rows(enc, qm.REPORTED_ENCODER_TABLE
                             if reference else None)
        lines.append(f"encoder formula total: {qm.stack_param_total(enc)}")
        if reference:
            diff = qm.stack_param_total(enc) - qm.REPORTED_ENCODER_TOTAL
            lines.append(f"reported encoder total: "
                         f"{qm.REPORTED_ENCODER_TOTAL} "
                         f"(formula total differs by {diff:+d}; the "
                         f"first-layer row accounts for it)")
        lines.append("decoder dims: " + " -> ".join(map(str, dec)))
        lines += _layer_rows(dec)
        lines.append(f"decoder formula total: {qm.stack_param_total(dec)}")
    elif loaded.stage == "gta" and len(dims) >= 4:
        d_model, d_k, d_v = dims[0], dims[1], dims[2]
        lookbacks = dims[3:]
        per_head = (2 * d_model * d_k + d_model * d_v + d_v * d_model
                    + 2 * d_model * d_model + d_model)
        lines.append(f"heads: {len(lookbacks)} "
                     f"(look-backs {', '.join(map(str, lookbacks))})")
        lines.append(f"d_model: {d_model}  d_k: {d_k}  d_v: {d_v}")
        lines.append(f"per-head parameters: {per_head}")
        lines.append(f"attention total: {per_head * len(lookbacks)}")
    elif loaded.stage == "snn":
        lines.append("spiking layers: " + " -> ".join(map(str, dims)))
        lines += _layer_rows(dims)
        lines.append("formula total (weights + per-neuron biases): "
                     f"{snn.snn_param_count(dims)}")
    return "\n".join(lines) + "\n"


def cmd_inspect(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        raise ConfigError(f"no such checkpoint: {path}")
    loaded = ck.load_checkpoint(path)
    print(inspect_text(loaded), end="")
    return EXIT_OK


# --- argument plumbing ------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="eqsnn",
        description="Three-stage sensor prognostics: quantile regression, "
                    "gated temporal attention, spiking classification.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="synthesize a labeled dataset")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.set_defaults(func=cmd_generate)

    train = sub.add_parser("train", help="fit one stage or all of them")
    train.add_argument("--config", required=True)
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True)
    train.add_argument("--stage", default="all",
                       choices=("eqrnn", "gta", "snn", "all"))
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--max-epochs", type=int, default=None)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="score a dataset with trained stages")
    ev.add_argument("--config", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--dump-attention", action="store_true")
    ev.add_argument("--dump-spikes", action="store_true")
    ev.set_defaults(func=cmd_eval)

    ins = sub.add_parser("inspect", help="summarize a checkpoint file")
    ins.add_argument("checkpoint")
    ins.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DigestMismatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIGEST
    except CheckpointError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except _Dependency as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EqsnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
