import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinarisk.backbones import CnnConfig, VitConfig
from retinarisk.dataset import Dataset
from retinarisk.fusion import FusionModel, ModelConfig, mc_predict
from retinarisk.numerics import AdamState, ConfigurationError, OptimConfig, Tensor, adam_step, softmax
from retinarisk.preprocess import PreprocessConfig
from retinarisk.synthdata import CohortConfig, gen_cohort
from retinarisk.temporal_graph import GcnConfig
from retinarisk.training import (
    AblationVariant,
    LossConfig,
    SplitError,
    TrainConfig,
    TrainHistory,
    TrainingDivergence,
    ablate,
    cross_validate,
    focal_loss,
    focal_loss_tensor,
    predict_dataset,
    snapshot,
    stratified_kfold,
    stratified_split,
    total_loss,
    train,
    variant_configs,
)

TINY = ModelConfig(
    cnn=CnnConfig(input_size=8, channels=(2, 3), output_grid=2),
    vit=VitConfig(image_size=8, patch_size=4, embed_dim=4, depth=1, heads=2, mlp_ratio=2.0),
    gcn=GcnConfig(hidden=(3,)),
    fused_dim=6,
)
PCFG = PreprocessConfig(target_size=8)
QUICK = TrainConfig(epochs=1, batch_size=8, mc_samples=3)


@pytest.fixture(scope="module")
def small_data():
    recs = gen_cohort(CohortConfig(n=40, priors=(0.2,) * 5, render_size=16, seed=4))
    return Dataset.from_records(recs, PCFG)


class TestFocalLoss:
    def test_confident_is_zero(self):
        assert focal_loss([0, 0, 1.0, 0, 0], 2, LossConfig()) == 0.0

    def test_gamma_zero_is_cross_entropy(self):
        cfg = LossConfig(alpha=(1.0,) * 5, gamma=0.0)
        assert focal_loss([0.1, 0.6, 0.1, 0.1, 0.1], 1, cfg) == pytest.approx(-math.log(0.6), abs=1e-15)

    def test_hand_value(self):
        probs = [0.025, 0.9, 0.025, 0.025, 0.025]
        cfg = LossConfig(alpha=(0.2, 0.25, 0.2, 0.2, 0.15))
        expect = 0.25 * 0.01 * -math.log(0.9)
        assert focal_loss(probs, 1, cfg) == pytest.approx(expect, abs=1e-9)
        assert focal_loss(probs, 1, cfg) == pytest.approx(2.634e-4, abs=1e-7)

    def test_zero_probability_is_clamped(self):
        value = focal_loss([1.0, 0, 0, 0, 0], 3, LossConfig())
        assert value == pytest.approx(-0.2 * math.log(1e-12))

    @settings(max_examples=60, deadline=None)
    @given(st.floats(1e-6, 0.999), st.floats(1e-6, 0.999))
    def test_non_negative_and_decreasing(self, a, b):
        lo, hi = sorted((a, b))
        cfg = LossConfig()
        f_lo = focal_loss([lo, 1 - lo, 0, 0, 0], 0, cfg)
        f_hi = focal_loss([hi, 1 - hi, 0, 0, 0], 0, cfg)
        assert f_lo >= f_hi >= 0.0

    def test_tensor_matches_scalar(self):
        logits = np.random.default_rng(0).standard_normal((4, 5))
        labels = np.array([0, 3, 1, 4])
        cfg = LossConfig()
        probs = softmax(Tensor(logits), axis=-1).data
        expect = np.mean([focal_loss(probs[i], labels[i], cfg) for i in range(4)])
        assert focal_loss_tensor(Tensor(logits), labels, cfg).item() == pytest.approx(expect, rel=1e-12)

    @pytest.mark.parametrize("kwargs", [{"alpha": (0.2, 0, 0.2, 0.2, 0.2)}, {"gamma": -1.0},
                                        {"lambda_mse": -0.5}])
    def test_invalid(self, kwargs):
        with pytest.raises(ConfigurationError):
            LossConfig(**kwargs)


class TestTotalLoss:
    def test_perfect_is_zero(self):
        logits = Tensor(np.eye(5)[[1, 3]] * 800.0)
        loss = total_loss(logits, Tensor([0.2, 0.7]), [1, 3], [0.2, 0.7], LossConfig())
        assert loss.item() == 0.0

    def test_matching_risk_leaves_focal(self):
        logits = Tensor(np.random.default_rng(1).standard_normal((3, 5)))
        labels = [0, 2, 4]
        focal = focal_loss_tensor(logits, np.array(labels), LossConfig()).item()
        total = total_loss(logits, Tensor([0.1, 0.5, 0.9]), labels, [0.1, 0.5, 0.9], LossConfig()).item()
        assert total == pytest.approx(focal, abs=1e-15)

    def test_hand_sum(self):
        # choose the true-class logit so the focal term is exactly 0.1
        cfg = LossConfig(alpha=(1.0,) * 5, gamma=0.0)
        p = math.exp(-0.1)
        z = math.log(p / (1 - p) * 4)
        logits = Tensor([[z, 0.0, 0.0, 0.0, 0.0]])
        total = total_loss(logits, Tensor([0.5]), [0], [0.7], cfg).item()
        assert total == pytest.approx(0.1 + 0.5 * 0.04, abs=1e-12)

    def test_missing_risk_skips_mse(self):
        logits = Tensor(np.zeros((2, 5)))
        a = total_loss(logits, Tensor([0.9, 0.1]), [0, 1], [np.nan, np.nan], LossConfig()).item()
        b = focal_loss_tensor(logits, np.array([0, 1]), LossConfig()).item()
        assert a == b

    def test_size_mismatch(self):
        with pytest.raises(ValueError):
            total_loss(Tensor(np.zeros((2, 5))), Tensor([0.5]), [0, 1], [0.1], LossConfig())


class TestSplits:
    def test_proportional_hand_case(self):
        labels = np.repeat([0, 1, 2], [50, 30, 20])
        tr, va, te = stratified_split(labels, (0.7, 0.1, 0.2), seed=3)
        for part, expect in ((tr, (35, 21, 14)), (va, (5, 3, 2)), (te, (10, 6, 4))):
            counts = np.bincount(labels[part], minlength=3)
            assert np.all(np.abs(counts - expect) <= 1)

    def test_disjoint_and_exhaustive(self):
        labels = np.random.default_rng(0).integers(0, 5, 97)
        labels[:15] = np.repeat(np.arange(5), 3)
        parts = stratified_split(labels, seed=1)
        joined = sorted(i for p in parts for i in p)
        assert joined == list(range(97))

    def test_single_class(self):
        tr, va, te = stratified_split(np.zeros(100, dtype=int))
        assert (len(tr), len(va), len(te)) == (70, 10, 20)

    def test_deterministic(self):
        labels = np.repeat([0, 1], [20, 12])
        assert stratified_split(labels, seed=9) == stratified_split(labels, seed=9)
        assert stratified_split(labels, seed=9) != stratified_split(labels, seed=10)

    @pytest.mark.parametrize("sizes", [[4] * 5, [3, 5, 4, 4, 6], [9] * 4])
    def test_small_classes_still_fill_small_splits(self, sizes):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        fr = (0.9, 0.1, 0.0)
        parts = stratified_split(labels, fr, seed=0)
        for part, f in zip(parts, fr):
            assert abs(len(part) - f * len(labels)) < 1.0 + 1e-9
        assert len(parts[1]) >= 1 and parts[2] == []

    def test_tiny_class_rejected(self):
        with pytest.raises(SplitError, match="synthetic"):
            stratified_split(np.array([0, 0, 0, 0, 1, 1]))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.integers(3, 40), min_size=1, max_size=5), st.integers(0, 1000))
    def test_within_one_sample(self, sizes, seed):
        labels = np.repeat(np.arange(len(sizes)), sizes)
        fr = (0.7, 0.1, 0.2)
        parts = stratified_split(labels, fr, seed)
        for part, f in zip(parts, fr):
            counts = np.bincount(labels[part], minlength=len(sizes))
            assert np.all(np.abs(counts - f * np.array(sizes)) < 1.0 + 1e-9)

    def test_kfold_arithmetic(self):
        labels = np.repeat([0, 1, 2], [50, 30, 20])
        folds = stratified_kfold(labels, 5, seed=0)
        assert [len(f) for f in folds] == [20] * 5
        for f in folds:
            assert np.all(np.abs(np.bincount(labels[f], minlength=3) - [10, 6, 4]) <= 1)
        assert sorted(i for f in folds for i in f) == list(range(100))
        assert folds == stratified_kfold(labels, 5, seed=0)

    def test_kfold_too_many_folds(self):
        with pytest.raises(SplitError):
            stratified_kfold(np.repeat([0, 1], [10, 3]), 5)


def constant_validator(values):
    """Validation losses from a list; the last value repeats."""
    def validate(model, epoch):
        return values[min(epoch - 1, len(values) - 1)], 0.5
    return validate


class TestTrainLoop:
    @pytest.fixture
    def model(self):
        return FusionModel(TINY, np.random.default_rng(0))

    def test_lr_halves_after_plateaus(self, model, small_data):
        cfg = TrainConfig(epochs=8, batch_size=40, early_stop_patience=10, augment=False, balance=False)
        hist = train(model, small_data, small_data, cfg, pcfg=PCFG, validate=constant_validator([1.0])).history
        # best at epoch 1; halve after epochs 4 and 7
        assert hist.learning_rates == [0.001] * 4 + [0.0005] * 3 + [0.00025]
        assert hist.stop_reason == "max_epochs"

    def test_early_stop_after_exactly_five(self, model, small_data):
        cfg = TrainConfig(epochs=50, batch_size=40, augment=False, balance=False)
        hist = train(model, small_data, small_data, cfg, pcfg=PCFG,
                     validate=constant_validator([3.0, 2.0, 1.0, 1.5])).history
        assert hist.best_epoch == 3
        assert len(hist) == 3 + 5
        assert hist.stop_reason == "early_stop"

    def test_improvement_resets_counters(self, model, small_data):
        cfg = TrainConfig(epochs=8, batch_size=40, augment=False, balance=False)
        losses = [1.0, 1.1, 1.1, 0.9, 1.0, 1.0, 1.0, 1.0]
        hist = train(model, small_data, small_data, cfg, pcfg=PCFG, validate=constant_validator(losses)).history
        assert hist.learning_rates == [0.001] * 7 + [0.0005]

    def test_lr_non_increasing(self, model, small_data):
        cfg = TrainConfig(epochs=6, batch_size=16, mc_samples=3)
        hist = train(model, small_data.subset(range(30)), small_data.subset(range(30, 40)), cfg,
                     pcfg=PCFG).history
        lrs = hist.learning_rates
        assert len(hist) <= 6
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert TrainHistory.CSV_HEADER == ("epoch", "train_loss", "val_loss", "val_acc", "lr")

    def test_best_state_restored(self, model, small_data):
        cfg = TrainConfig(epochs=4, batch_size=16)
        result = train(model, small_data, small_data, cfg, pcfg=PCFG,
                       validate=constant_validator([1.0, 2.0, 2.0, 2.0]))
        state = snapshot(model)
        assert all(np.array_equal(state[k], result.best_state[k]) for k in state)

    def test_zero_learning_rate_freezes_parameters(self, model, small_data):
        before = snapshot(model)
        batch = small_data.batch(range(8))
        out = model.forward(batch, train=True, rng=np.random.default_rng(0))
        total_loss(out.logits, out.risk, small_data.grades[:8], small_data.risks[:8], LossConfig()).backward()
        adam_step(model.named_parameters(), AdamState(), OptimConfig(learning_rate=0.0))
        after = snapshot(model)
        assert all(np.array_equal(before[k], after[k]) for k in before)

    def test_divergence_names_batch(self, model, small_data):
        bad = small_data.subset(range(20))
        bad.images[12] = np.nan
        cfg = TrainConfig(epochs=1, batch_size=4, augment=False, balance=False)
        with pytest.raises(TrainingDivergence) as exc:
            train(model, bad, small_data, cfg, pcfg=PCFG)
        assert exc.value.epoch == 1 and exc.value.batch >= 0

    def test_same_seed_same_history(self, small_data):
        cfg = TrainConfig(epochs=2, batch_size=16)
        h = [train(FusionModel(TINY, np.random.default_rng(0)), small_data, small_data, cfg,
                   pcfg=PCFG).history.csv_rows() for _ in range(2)]
        assert h[0] == h[1]

    def test_empty_split_rejected(self, model, small_data):
        with pytest.raises(ConfigurationError):
            train(model, small_data, small_data.subset([]), QUICK, pcfg=PCFG)

    @pytest.mark.parametrize("kwargs", [{"split": (0.5, 0.5, 0.5)}, {"epochs": 0},
                                        {"early_stop_patience": 0}, {"lr_reduce_factor": 0.0},
                                        {"mc_samples": 1}, {"decay_factor": 2.0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigurationError):
            TrainConfig(**kwargs)

    def test_optional_decay_multiplier(self, model, small_data):
        cfg = TrainConfig(epochs=3, batch_size=40, decay_factor=0.1, decay_every=2, early_stop_patience=10,
                          augment=False, balance=False)
        losses = [3.0, 2.0, 1.0]
        hist = train(model, small_data, small_data, cfg, pcfg=PCFG, validate=constant_validator(losses)).history
        assert hist.learning_rates == pytest.approx([0.001, 0.001, 0.0001])


class TestPrediction:
    def test_table_matches_single_subject_path(self, small_data):
        model = FusionModel(TINY, np.random.default_rng(1))
        table = predict_dataset(model, small_data.subset(range(4)), mc_samples=5, seed=3)
        single = mc_predict(model, small_data.batch([2]), 5, np.random.default_rng(3))[0]
        assert table.records[2].to_dict() == single.to_dict()
        assert len(table.csv_rows()) == 4 and len(table.csv_rows()[0]) == len(table.HEADER)

    def test_deterministic_mode_rows(self, small_data):
        model = FusionModel(TINY, np.random.default_rng(1))
        table = predict_dataset(model, small_data.subset(range(3)), bayesian=False)
        row = dict(zip(table.HEADER, table.csv_rows()[0]))
        assert row["sigma"] == "" and row["ci_lo"] == ""


class TestCrossValidation:
    def test_reports_per_fold(self, small_data):
        res = cross_validate(small_data, 3, TINY, QUICK, pcfg=PCFG)
        assert len(res.reports) == 3
        assert sorted(i for f in res.folds for i in f) == list(range(len(small_data)))
        assert res.summary["accuracy"]["std"] >= 0.0

    def test_repeated_sample_has_zero_spread(self, small_data):
        same = small_data.subset([0] * 15)
        res = cross_validate(same, 3, TINY, QUICK, pcfg=PCFG)
        assert res.summary["accuracy"]["std"] == 0.0
        assert res.summary["brier"]["std"] == 0.0

    def test_k_too_large(self, small_data):
        with pytest.raises(SplitError):
            cross_validate(small_data, 50, TINY, QUICK, pcfg=PCFG)


class TestAblation:
    @pytest.mark.parametrize("variant", [v.value for v in AblationVariant])
    def test_each_variant_runs(self, variant, small_data):
        res = ablate(small_data, variant, TINY, QUICK, pcfg=PCFG)
        row = res.row()
        assert row["variant"] == variant and 0.0 <= row["accuracy"] <= 1.0
        assert len(res.history) == 1

    def test_widths_and_params(self):
        full, _, _ = variant_configs("full", TINY, QUICK)
        no_gnn, _, _ = variant_configs("no_gnn", TINY, QUICK)
        no_vit, _, _ = variant_configs("no_vit", TINY, QUICK)
        assert full.fusion_in_dim - no_gnn.fusion_in_dim == 64
        assert no_vit.param_count() < full.param_count()

    def test_no_augmentation_and_bayesian_flags(self):
        _, tcfg, bayes = variant_configs("no_augmentation", TINY, QUICK)
        assert not tcfg.augment and not tcfg.balance and bayes
        assert variant_configs("no_bayesian", TINY, QUICK)[2] is False

    def test_unknown_variant(self):
        with pytest.raises(ConfigurationError):
            variant_configs("no_cnn", TINY, QUICK)
