"""Release gate: ten criteria, one test (one pass/fail line) each.

Fast arithmetic and invariant checks come first; the final three share
an 8-channel benchmark run trained through the CLI, so expect several
minutes of wall time for the full module. Tolerances are pinned next to
each assertion and are not derived from the implementation under test.
"""

import numpy as np
import pytest
from sklearn.linear_model import LogisticRegression

from eqsnn import attention as at
from eqsnn import autodiff as ad
from eqsnn import checkpoint as ck
from eqsnn import cli
from eqsnn import config as cfgmod
from eqsnn import datagen
from eqsnn import losses
from eqsnn import pipeline as pl
from eqsnn import quantile as qm
from eqsnn import snn
from eqsnn.autodiff import Tensor, backward
from eqsnn.layers import FeedForward

from helpers import assert_grads_close, finite_difference

BENCH_CFG_TEXT = """\
data.channels = 8
data.length = 20000
data.seed = 0
data.default_faults = true
pipeline.seed = 0
"""


@pytest.fixture(scope="module")
def bench_ws(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def bench_cfg(bench_ws):
    path = bench_ws / "bench.eqc"
    path.write_text(BENCH_CFG_TEXT)
    return path


@pytest.fixture(scope="module")
def bench_data(bench_ws, bench_cfg):
    out = bench_ws / "data"
    assert cli.main(["generate", "--config", str(bench_cfg),
                     "--out", str(out)]) == 0
    return out / cli.DATA_CSV


@pytest.fixture(scope="module")
def bench_run(bench_ws, bench_cfg, bench_data):
    out = bench_ws / "run_a"
    assert cli.main(["train", "--config", str(bench_cfg),
                     "--data", str(bench_data), "--out", str(out)]) == 0
    return out


def test_c01_encoder_parameter_table_and_first_row_discrepancy():
    pairs = list(zip(qm.ENCODER_DIMS[:-1], qm.ENCODER_DIMS[1:]))
    formula = [qm.layer_param_count(a, b) for a, b in pairs]
    # rows 2-10 of the reported table reproduce exactly
    assert formula[1:] == list(qm.REPORTED_ENCODER_TABLE[1:])
    # row 1 is the known discrepancy: the count formula on (70, 280)
    # gives 19,880 while the reported table says 12,320
    assert formula[0] == 19880
    assert qm.REPORTED_ENCODER_TABLE[0] == 12320
    assert formula[0] != qm.REPORTED_ENCODER_TABLE[0]
    summary = cli.inspect_text(ck.Checkpoint(
        stage="eqrnn", seed=0, dims=qm.ENCODER_DIMS + qm.DECODER_DIMS,
        arrays={}))
    assert summary.count("MISMATCH") == 1
    assert "19880" in summary and "12320" in summary
    assert f"reported encoder total: {qm.REPORTED_ENCODER_TOTAL}" in summary


def test_c02_huber_and_pinball_branch_grid():
    for delta in (0.05, 0.5, 1.3):
        r = np.concatenate([np.linspace(-3.0, 3.0, 241),
                            [-delta, delta]])
        quad = 0.5 * r * r
        lin = delta * np.abs(r) - 0.5 * delta * delta
        base = np.where(np.abs(r) <= delta, quad, lin)
        got_sym = losses.huber_quantile_loss(r, np.zeros_like(r), 0.5,
                                             delta, mode=losses.HUBER)
        np.testing.assert_allclose(got_sym.data, base, rtol=0.0, atol=1e-15)
        for alpha in (0.05, 0.25, 0.5, 0.75, 0.9):
            tilt = np.where(r > 0.0, alpha, 1.0 - alpha)
            got = losses.huber_quantile_loss(
                r, np.zeros_like(r), alpha, delta,
                mode=losses.ASYMMETRIC_HUBER)
            np.testing.assert_allclose(got.data, base * tilt,
                                       rtol=0.0, atol=1e-15)
            # both branch formulas agree exactly at |r| = delta
            edge = losses.huber_quantile_loss(
                np.array([delta, -delta]), np.zeros(2), alpha, delta,
                mode=losses.ASYMMETRIC_HUBER).data
            lin_edge = delta * delta - 0.5 * delta * delta
            np.testing.assert_array_equal(
                edge, np.array([alpha, 1.0 - alpha]) * lin_edge)
            pin = losses.pinball_loss(r, np.zeros_like(r), alpha)
            np.testing.assert_array_equal(
                pin.data, np.maximum(r * alpha, r * (alpha - 1.0)))


def test_c03_quantile_coverage_and_symmetric_collapse():
    rng = np.random.default_rng(42)
    T = 13_002
    values = rng.normal(0.0, 1.0, size=(T, 1))
    train_idx = np.arange(0, 2500)
    val_idx = np.arange(2500, 3000)
    x = values[3000:T - 1, 0]
    y = values[3001:T, 0]
    assert x.size >= 10_000

    pop = qm.train_stage1(values, train_idx, val_idx,
                          levels=qm.STAGE1_LEVELS, loss=losses.PINBALL,
                          horizon=1, seed=7)
    for a in qm.STAGE1_LEVELS:
        cov = float(np.mean(y <= pop.model(0, a).predict(x)))
        assert abs(cov - a) <= 0.03, f"alpha={a}: coverage {cov:.4f}"

    # the symmetric mode cannot separate levels: all heads sit on the
    # median, so every empirical coverage lands near one half
    flat = qm.train_stage1(values, train_idx, val_idx,
                           levels=qm.STAGE1_LEVELS, loss=losses.HUBER,
                           horizon=1, seed=7)
    for a in qm.STAGE1_LEVELS:
        cov = float(np.mean(y <= flat.model(0, a).predict(x)))
        assert abs(cov - 0.5) <= 0.05, f"alpha={a}: coverage {cov:.4f}"


def test_c04_gradient_checks_all_trainable_paths():
    def check(params, loss_fn):
        arrays = [p.data.copy() for p in params]

        def f(*arrs):
            for p, a in zip(params, arrs):
                p.data = a
            return float(loss_fn().data)

        for p in params:
            p.grad = None
        backward(loss_fn())
        analytic = [p.grad for p in params]
        assert_grads_close(analytic, finite_difference(f, arrays),
                           rtol=1e-4)
        for p, a in zip(params, arrays):
            p.data = a

    # four paths x five seeds = twenty seeded instances
    for seed in range(5):
        rng = np.random.default_rng(100 + seed)

        ff = FeedForward([3, 8, 2], ad.make_rng(seed), norm_groups=4,
                         dropout_rate=0.0)
        x = Tensor(rng.normal(size=(4, 3)))
        check(ff.parameters(), lambda: ad.tmean(ad.square(ff(x))))

        d = 4
        w_g = Tensor(rng.normal(size=(2 * d, d)), requires_grad=True)
        b_g = Tensor(rng.normal(size=(d,)), requires_grad=True)
        h_t = Tensor(rng.normal(size=(3, d)))
        h_bar = Tensor(rng.normal(size=(3, d)))

        def gate_loss():
            g = at.gate(h_t, h_bar, w_g, b_g)
            return ad.tmean(ad.square(at.gated_blend(g, h_bar, h_t)))

        check([w_g, b_g], gate_loss)

        gta = at.GatedTemporalAttention(3, d_k=2, d_v=2, lookbacks=(2, 3),
                                        seed=seed)
        h = Tensor(rng.normal(size=(2, 3)))
        hist = rng.normal(size=(2, 3, 3))
        check(gta.parameters(),
              lambda: ad.tmean(ad.square(gta.forward(h, hist))))

        net = snn.SpikingNet(3, hidden=4, t_window=5, seed=seed)
        rates = rng.uniform(0.2, 1.0, (2, 3))
        targets = np.array([1.0, 0.0])

        def spike_loss():
            logits, _ = net.forward(rates, soft=True)
            return losses.mean_bce_with_logits(logits, targets)

        check(net.parameters(), spike_loss)


def test_c05_lif_euler_matches_exponential_and_resets_exactly():
    p = snn.LifParams(tau_m=10.0, dt=0.1, v_th=1.0, v_rest=0.0, r_m=1.0)
    i_const = 0.8                      # v_inf = 0.8 stays sub-threshold
    v = np.zeros(1)
    for n in range(1, 501):            # five membrane time constants
        v, spiked = snn.lif_step(v, i_const, p)
        assert not spiked.any()
        exact = i_const * (1.0 - np.exp(-n * p.dt / p.tau_m))
        assert abs(float(v[0]) - exact) / exact <= 0.01

    resets = snn.LifParams(tau_m=10.0, dt=0.1, v_th=1.0, v_reset=0.15)
    v = np.zeros(3)
    seen = 0
    for _ in range(400):
        v, spiked = snn.lif_step(v, np.array([1.5, 2.0, 3.0]), resets)
        if spiked.any():
            seen += int(spiked.sum())
            assert np.all(v[spiked] == 0.15)
    assert seen > 0


def test_c06_attention_convexity_and_gate_limits():
    rng = np.random.default_rng(11)
    q = Tensor(rng.normal(size=(3, 1, 4)))
    k = Tensor(rng.normal(size=(3, 6, 4)))
    v = Tensor(rng.normal(size=(3, 6, 5)))
    out, weights = at.attend(q, k, v)
    assert np.all(weights.data >= 0.0)
    np.testing.assert_allclose(weights.data.sum(axis=-1), 1.0,
                               rtol=0.0, atol=1e-9)
    lo = v.data.min(axis=1, keepdims=True)
    hi = v.data.max(axis=1, keepdims=True)
    assert np.all(out.data >= lo - 1e-12)
    assert np.all(out.data <= hi + 1e-12)

    h_t = Tensor(rng.normal(size=(3, 5)))
    attended = Tensor(rng.normal(size=(3, 5)))
    zeros = Tensor(np.zeros((3, 5)))
    ones = Tensor(np.ones((3, 5)))
    np.testing.assert_array_equal(
        at.gated_blend(zeros, attended, h_t).data, h_t.data)
    np.testing.assert_array_equal(
        at.gated_blend(ones, attended, h_t).data, attended.data)

    # the same limits hold through a full head forward
    gta = at.GatedTemporalAttention(5, d_k=3, d_v=3, lookbacks=(4,), seed=2)
    hist = rng.normal(size=(3, 4, 5))
    head = gta.heads[0]
    shut = head.forward(h_t, Tensor(hist), gate_override=0.0)
    wide = head.forward(h_t, Tensor(hist), gate_override=1.0)
    np.testing.assert_array_equal(shut.blended.data, h_t.data)
    np.testing.assert_array_equal(wide.blended.data, wide.attended.data)
    for output in gta.forward_heads(h_t, hist):
        np.testing.assert_allclose(output.weights.sum(axis=-1), 1.0,
                                   rtol=0.0, atol=1e-9)


def test_c07_horizon_output_counts():
    assert qm.horizon_output_count("1h") == 700
    assert qm.horizon_output_count("12h") == 350
    assert qm.horizon_output_count("24h") == 350
    assert qm.horizon_output_count("48h") == 280


def test_c08_default_benchmark_beats_linear_baseline(bench_cfg, bench_data,
                                                     bench_run):
    cfg = cfgmod.load_config(bench_cfg)
    settings = cli._settings_from(cfg, None, None)
    assert settings == pl.PipelineSettings(seed=0).validate()
    ds = datagen.read_csv(bench_data)
    model = cli._load_model(bench_run, settings, ds.n_channels,
                            cfgmod.config_digest(cfg))
    windows = datagen.window(ds, settings.window_len, settings.stride,
                             (settings.horizon,))
    splits = datagen.split(windows)
    labels = windows.labels.astype(bool)
    test = splits["test"]
    auc = pl.roc_auc(labels[test], model.score_windows(windows.inputs[test]))

    stats = np.concatenate([windows.inputs.mean(axis=1),
                            windows.inputs.std(axis=1)], axis=1)
    oracle = LogisticRegression(max_iter=2000).fit(
        stats[splits["train"]], labels[splits["train"]])
    oracle_auc = pl.roc_auc(labels[test],
                            oracle.predict_proba(stats[test])[:, 1])

    assert auc >= 0.95, f"pipeline test AUC {auc:.4f}"
    assert auc >= oracle_auc, (f"pipeline {auc:.4f} vs window-statistics "
                               f"baseline {oracle_auc:.4f}")


def test_c09_training_runs_are_byte_identical(bench_ws, bench_cfg,
                                              bench_data, bench_run):
    out = bench_ws / "run_b"
    assert cli.main(["train", "--config", str(bench_cfg),
                     "--data", str(bench_data), "--out", str(out)]) == 0
    # log files carry no wall-clock column, so whole-file comparison is
    # exactly the timestamp-free check
    for name in list(cli.STAGE_FILES.values()) + list(cli.LOG_FILES.values()):
        assert (out / name).read_bytes() == \
            (bench_run / name).read_bytes(), f"artifact differs: {name}"


def test_c10_zero_lambda_silences_spiking_term():
    sensors = datagen.default_sensors(3, seed=2)
    faults = tuple(datagen.FaultSpec(channel=c, kind="drift", onset=o,
                                     duration=90, magnitude=6.0)
                   for c, o in ((0, 150), (1, 400)))
    ds = datagen.generate(sensors, faults, length=700, seed=9)
    s = pl.PipelineSettings(window_len=12, stride=4, horizon=2,
                            stage1_levels=(0.25, 0.5, 0.75),
                            stage2_levels=(0.4, 0.6), lookbacks=(2, 4),
                            d_k=4, d_v=4, snn_hidden=6, t_window=6,
                            stage1_epochs=2, stage2_epochs=2,
                            autoenc_epochs=1, gta_epochs=1, snn_epochs=1,
                            joint_epochs=0, seed=3)
    model, art = pl.train_pipeline(ds, s)
    w, sp = art["windows"], art["splits"]
    x = w.inputs[sp["val"]][:16]
    y = pl._fit_width(w.targets[s.horizon][sp["val"]][:16],
                      model.autoenc.out_dim)
    labels = w.labels[sp["val"]][:16].astype(np.float64)
    shared = model.autoenc.parameters() + model.gta.parameters()
    spiking = model.snet.parameters()

    def forecasting_loss():
        blended = model.blended_codes(x, training=False)
        decoded = model.autoenc.decode(blended, training=False)
        le = ad.tmean(losses.quantile_training_loss(
            Tensor(y), decoded, 0.5, loss=losses.ASYMMETRIC_HUBER,
            delta=0.4))
        return le, blended

    def run(lam):
        ad.zero_grads(shared + spiking)
        le, blended = forecasting_loss()
        if lam == 0.0:
            loss = snn.joint_loss(le, None, 0.0)
        else:
            parts = [model.quantile_rates(x),
                     model.attention_rates(blended.data)]
            logits, _ = model.snet.forward(np.concatenate(parts, axis=1))
            ls = losses.mean_bce_with_logits(logits, Tensor(labels))
            loss = snn.joint_loss(le, ls, lam)
        backward(loss)
        grab = lambda ps: [None if p.grad is None else p.grad.copy()
                           for p in ps]
        return float(loss.data), float(le.data), grab(shared), grab(spiking)

    loss0, le0, shared0, spiking0 = run(0.0)
    ad.zero_grads(shared + spiking)
    le_alone, _ = forecasting_loss()
    backward(le_alone)
    reference = [None if p.grad is None else p.grad.copy() for p in shared]

    assert loss0 == le0 == float(le_alone.data)
    for a, b in zip(shared0, reference):
        assert (a is None) == (b is None)
        if a is not None:
            np.testing.assert_array_equal(a, b)
    assert all(g is None or not np.any(g) for g in spiking0)

    # contrast: a positive lambda both raises the loss and reaches the
    # spiking parameters
    loss7, le7, _, spiking7 = run(0.7)
    assert loss7 > le7
    assert any(g is not None and np.any(g) for g in spiking7)
