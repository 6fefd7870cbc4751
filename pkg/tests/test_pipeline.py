import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eqsnn import datagen, pipeline
from eqsnn.exceptions import ConfigError, DataError, ShapeError


def tiny_dataset(seed=11, length=1200):
    sensors = datagen.default_sensors(4, seed=1)
    faults = (
        datagen.FaultSpec(channel=0, kind="drift", onset=200,
                          duration=120, magnitude=6.0),
        datagen.FaultSpec(channel=1, kind="drift", onset=550,
                          duration=120, magnitude=6.0),
        datagen.FaultSpec(channel=0, kind="drift", onset=950,
                          duration=120, magnitude=6.0),
    )
    return datagen.generate(sensors, faults, length=length, seed=seed)


def tiny_settings(**kw):
    base = dict(window_len=12, stride=4, horizon=2,
                stage1_levels=(0.25, 0.5, 0.75),
                stage2_levels=(0.4, 0.6),
                lookbacks=(2, 6), d_k=4, d_v=4,
                snn_hidden=8, t_window=8,
                stage1_epochs=8, stage2_epochs=10, autoenc_epochs=2,
                gta_epochs=2, snn_epochs=4, joint_epochs=2, seed=5)
    base.update(kw)
    return pipeline.PipelineSettings(**base)


@pytest.fixture(scope="module")
def trained():
    model, artifacts = pipeline.train_pipeline(tiny_dataset(),
                                               tiny_settings())
    return model, artifacts


class TestClassify:
    def test_above_threshold_abnormal(self):
        assert pipeline.classify(0.9, 0.5)

    def test_boundary_is_abnormal(self):
        assert pipeline.classify(0.5, 0.5)

    def test_below_threshold_normal(self):
        assert not pipeline.classify(0.49, 0.5)

    def test_voting_two_of_three(self):
        out = pipeline.classify_voting(np.array([0.6, 0.4, 0.7]),
                                       0.5, k=2, m=3)
        assert bool(out[-1]) is True

    def test_voting_requires_k_hits(self):
        out = pipeline.classify_voting(np.array([0.6, 0.4, 0.4]),
                                       0.5, k=2, m=3)
        assert bool(out[-1]) is False

    def test_voting_k1_m1_is_plain_threshold(self):
        scores = np.array([0.2, 0.6, 0.5, 0.1])
        np.testing.assert_array_equal(
            pipeline.classify_voting(scores, 0.5, 1, 1),
            pipeline.classify(scores, 0.5))

    def test_voting_bad_km_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.classify_voting(np.zeros(3), 0.5, k=3, m=2)

    def test_theta_zero_everything_abnormal(self):
        scores = np.random.default_rng(0).uniform(0, 1, 50)
        assert pipeline.classify(scores, 0.0).all()

    def test_theta_above_one_everything_normal(self):
        scores = np.random.default_rng(0).uniform(0, 1, 50)
        assert not pipeline.classify(scores, 1.0 + 1e-9).any()


class TestRocAuc:
    def test_reference_rank_pairs(self):
        # pos scores {0.35, 0.8} vs neg {0.1, 0.4}: 3 of 4 pairs ordered
        auc = pipeline.roc_auc([0, 0, 1, 1], [0.1, 0.4, 0.35, 0.8])
        assert auc == pytest.approx(0.75)

    def test_perfect_separation(self):
        assert pipeline.roc_auc([0, 0, 1, 1],
                                [0.1, 0.2, 0.8, 0.9]) == pytest.approx(1.0)

    def test_inverted_scores(self):
        assert pipeline.roc_auc([1, 1, 0, 0],
                                [0.1, 0.2, 0.8, 0.9]) == pytest.approx(0.0)

    def test_all_ties_is_half(self):
        assert pipeline.roc_auc([0, 1, 0, 1],
                                [0.5, 0.5, 0.5, 0.5]) == pytest.approx(0.5)

    def test_single_class_absent(self):
        assert pipeline.roc_auc([1, 1, 1], [0.1, 0.2, 0.3]) is None

    def test_matches_independent_pair_count(self):
        rng = np.random.default_rng(4)
        labels = rng.integers(0, 2, 60).astype(bool)
        labels[:2] = [False, True]
        scores = np.round(rng.uniform(0, 1, 60), 2)  # force some ties
        pos, neg = scores[labels], scores[~labels]
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        expect = wins / (pos.size * neg.size)
        assert pipeline.roc_auc(labels, scores) == pytest.approx(expect)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000))
    def test_bounded_zero_one(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, 20)
        scores = rng.uniform(0, 1, 20)
        auc = pipeline.roc_auc(labels, scores)
        if auc is not None:
            assert 0.0 <= auc <= 1.0


class TestMetrics:
    def test_perfect_predictions(self):
        rep = pipeline.metrics([0, 1, 0, 1], [0, 1, 0, 1],
                               [0.1, 0.9, 0.2, 0.8])
        assert rep.accuracy == 1.0 and rep.auc == 1.0
        assert rep.f1 == 1.0

    def test_inverted_predictions_zero_accuracy(self):
        rep = pipeline.metrics([0, 1], [1, 0], [0.9, 0.1])
        assert rep.accuracy == 0.0

    def test_counts_sum_to_window_count(self):
        rng = np.random.default_rng(1)
        labels = rng.integers(0, 2, 37)
        preds = rng.integers(0, 2, 37)
        rep = pipeline.metrics(labels, preds, rng.uniform(0, 1, 37))
        assert rep.n == 37

    def test_single_class_auc_absent_in_text(self):
        rep = pipeline.metrics([0, 0], [0, 1], [0.2, 0.6])
        assert rep.auc is None
        assert "auc = absent" in rep.text()

    def test_text_and_csv_shapes(self):
        rep = pipeline.metrics([0, 1], [1, 1], [0.6, 0.7])
        assert "accuracy = 0.500000" in rep.text()
        lines = rep.scores_csv().strip().splitlines()
        assert lines[0] == "window,score,label,prediction"
        assert len(lines) == 3

    def test_length_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            pipeline.metrics([0, 1], [0], [0.5, 0.5])


class TestThresholdProperties:
    def test_raising_theta_never_raises_recall_or_fp(self):
        rng = np.random.default_rng(2)
        labels = rng.integers(0, 2, 200)
        scores = rng.uniform(0, 1, 200)
        prev_recall, prev_fp = None, None
        for theta in np.linspace(0, 1, 21):
            rep = pipeline.metrics(labels, pipeline.classify(scores, theta),
                                   scores)
            if prev_recall is not None:
                assert rep.recall <= prev_recall + 1e-12
                assert rep.fp <= prev_fp
            prev_recall, prev_fp = rep.recall, rep.fp

    def test_calibrated_threshold_maximizes_f1(self):
        labels = np.array([0, 0, 0, 1, 1, 1])
        scores = np.array([0.1, 0.2, 0.6, 0.62, 0.7, 0.9])
        theta = pipeline.calibrate_threshold(labels, scores)
        best = pipeline.metrics(labels, pipeline.classify(scores, theta),
                                scores).f1
        for t in np.linspace(0, 1, 101):
            f1 = pipeline.metrics(labels, pipeline.classify(scores, t),
                                  scores).f1
            assert f1 <= best + 1e-12

    def test_calibration_single_class_returns_default(self):
        assert pipeline.calibrate_threshold([0, 0], [0.1, 0.2]) == 0.5


class TestPermutationTest:
    def test_constant_scores_give_p_one(self):
        p = pipeline.permutation_pvalue(np.full(40, 0.5),
                                        np.arange(40) % 2)
        assert p == pytest.approx(1.0)

    def test_separated_scores_give_small_p(self):
        labels = np.arange(60) % 2
        scores = labels + np.random.default_rng(0).normal(0, 0.05, 60)
        assert pipeline.permutation_pvalue(scores, labels) < 0.01

    def test_single_class_is_one(self):
        assert pipeline.permutation_pvalue([0.3, 0.4], [1, 1]) == 1.0


class TestSettings:
    def test_defaults_validate(self):
        pipeline.PipelineSettings().validate()

    def test_bad_theta_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings(theta_c=1.5).validate()

    def test_bad_coupling_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings(coupling="psychic").validate()

    def test_negative_lambda_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings(lam=-0.1).validate()

    def test_voting_window_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings(vote_k=3, vote_m=2).validate()

    def test_from_config_round_trip(self):
        cfg = {"pipeline.window_len": "16", "pipeline.theta_c": "0.7",
               "pipeline.lookbacks": "2,4", "pipeline.coupling": "quantiles",
               "pipeline.force_gate_zero": "true"}
        s = pipeline.PipelineSettings.from_config(cfg)
        assert s.window_len == 16
        assert s.theta_c == 0.7
        assert s.lookbacks == (2, 4)
        assert s.coupling == "quantiles"
        assert s.force_gate_zero is True

    def test_from_config_bad_value_rejected(self):
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings.from_config(
                {"pipeline.window_len": "many"})

    def test_from_config_loss_mode_key(self):
        s = pipeline.PipelineSettings.from_config(
            {"eqrnn.loss": "pinball"})
        assert s.stage1_loss == "pinball"
        assert pipeline.PipelineSettings().stage1_loss == "asymmetric-huber"
        with pytest.raises(ConfigError):
            pipeline.PipelineSettings.from_config(
                {"eqrnn.loss": "absolute"})


class TestTrainedPipeline:
    def test_scores_in_unit_interval(self, trained):
        model, artifacts = trained
        w = artifacts["windows"]
        scores = model.score_windows(w.inputs[:40])
        assert scores.shape == (40,)
        assert np.all((scores > 0) & (scores < 1))

    def test_deterministic_retrain(self, trained):
        model, _ = trained
        model2, _ = pipeline.train_pipeline(tiny_dataset(), tiny_settings())
        w = datagen.window(tiny_dataset(), 12, 4, (2,))
        a = model.score_windows(w.inputs[:25])
        b = model2.score_windows(w.inputs[:25])
        assert a.tobytes() == b.tobytes()

    def test_report_counts_cover_all_windows(self, trained):
        model, artifacts = trained
        w, sp = artifacts["windows"], artifacts["splits"]
        rep = pipeline.evaluate_pipeline(model, w, sp["test"])
        assert rep.n == sp["test"].size

    def test_theta_extremes(self, trained):
        model, artifacts = trained
        w, sp = artifacts["windows"], artifacts["splits"]
        rep0 = pipeline.evaluate_pipeline(model, w, sp["test"], theta_c=0.0)
        assert rep0.recall == 1.0 and rep0.predictions.all()
        rep1 = pipeline.evaluate_pipeline(model, w, sp["test"],
                                          theta_c=1.0 + 1e-9)
        assert not rep1.predictions.any()

    def test_rate_width_matches_snn_input(self, trained):
        model, _ = trained
        assert model.snet.n_inputs == model.rate_width()
        model.validate()

    def test_mismatched_stages_rejected(self, trained):
        import dataclasses
        model, _ = trained
        from eqsnn import quantile as qm
        broken = dataclasses.replace(
            model, autoenc=qm.EqrnnNet(model.stage1.n_sensors + 1, seed=0))
        with pytest.raises(ConfigError):
            broken.validate()

    def test_empty_evaluation_rejected(self, trained):
        model, artifacts = trained
        with pytest.raises(DataError):
            pipeline.evaluate_pipeline(model, artifacts["windows"],
                                       np.array([], dtype=np.int64))

    def test_stage_logs_present(self, trained):
        _, artifacts = trained
        for key in ("autoenc_log", "gta_log", "snn_log", "joint_log"):
            assert len(artifacts[key].records) >= 1

    def test_calibrated_theta_recorded(self, trained):
        model, _ = trained
        assert 0.0 <= model.calibrated_theta <= 1.0


class TestStageIsolation:
    def test_lambda_zero_leaves_snn_untouched_and_scores_flat(self):
        # gates forced to zero and lam=0: the joint phase reduces to
        # forecasting only, so the untrained readout keeps every score
        # at exactly 0.5 and the score distribution is label-free
        s = tiny_settings(lam=0.0, force_gate_zero=True,
                          snn_epochs=0, joint_epochs=2)
        model, artifacts = pipeline.train_pipeline(tiny_dataset(), s)
        w = artifacts["windows"]
        scores = model.score_windows(w.inputs)
        np.testing.assert_array_equal(scores, 0.5)
        p = pipeline.permutation_pvalue(scores, w.labels.astype(bool))
        assert p > 0.01

    def test_lambda_zero_snn_parameters_keep_init(self):
        s0 = tiny_settings(lam=0.0, snn_epochs=0, joint_epochs=2)
        model, _ = pipeline.train_pipeline(tiny_dataset(), s0)
        from eqsnn import snn as snn_mod
        fresh = snn_mod.SpikingNet(
            model.snet.n_inputs, hidden=model.snet.hidden,
            t_window=model.snet.t_window,
            seed=int(np.random.SeedSequence(s0.seed).generate_state(8)[6]))
        for name, p in model.snet.named_parameters().items():
            np.testing.assert_array_equal(
                p.data, fresh.named_parameters()[name].data)


class TestRowSplitAlignment:
    def test_row_splits_cover_series_without_overlap(self, trained):
        _, artifacts = trained
        w, sp = artifacts["windows"], artifacts["splits"]
        rows = pipeline._series_row_splits(w, sp)
        joined = np.concatenate([rows["train"], rows["val"], rows["test"]])
        assert np.array_equal(joined, np.arange(joined.size))
        # training rows end where the first validation window begins
        assert rows["train"].size == w.starts[sp["val"][0]]
