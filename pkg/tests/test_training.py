import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from camil.attmil import predict_scores, save_checkpoint
from camil.data_model import Cohort, FeatureBag, PatientRecord, TargetSpec, binarize_target
from camil.errors import DegenerateError, NumericError
from camil.evaluation import auroc
from camil.splitting import site_aware_folds
from camil.synth import SynthConfig, generate_cohort
from camil.training import (
    ABLATIONS,
    LossConfig,
    ablate,
    balanced_mse,
    class_weights,
    get_preset,
    mse,
    one_cycle_lr,
    optimizer_step,
    silverman_sigma2,
    train_model,
    weighted_cross_entropy,
)


def central(f, x, h=1e-5):
    return (f(x + h) - f(x - h)) / (2 * h)


class TestLosses:
    def test_wce_examples(self):
        loss, grad = weighted_cross_entropy([0.0, 0.0], 1, [1.0, 1.0])
        assert loss == pytest.approx(math.log(2))
        np.testing.assert_allclose(grad, [0.5, -0.5])
        assert weighted_cross_entropy([-30.0, 30.0], 1, [1.0, 1.0])[0] < 1e-20

    def test_class_weights(self):
        np.testing.assert_allclose(class_weights([1, 0, 0, 0]), [4 / 6, 2.0])
        with pytest.raises(DegenerateError, match="degenerate class weights"):
            class_weights([1, 1])

    @settings(max_examples=50)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.integers(0, 1), st.floats(0.1, 3), st.floats(0.1, 3))
    def test_wce_gradient(self, a, b, label, w0, w1):
        w = [w0, w1]
        grad = weighted_cross_entropy([a, b], label, w)[1]
        num_a = central(lambda x: weighted_cross_entropy([x, b], label, w)[0], a)
        num_b = central(lambda x: weighted_cross_entropy([a, x], label, w)[0], b)
        np.testing.assert_allclose(grad, [num_a, num_b], rtol=1e-5, atol=1e-8)

    def test_mse_examples(self):
        assert mse(2.0, 2.0) == (0.0, 0.0)
        assert mse(3.0, 1.0) == (4.0, 4.0)

    @settings(max_examples=30)
    @given(st.floats(-10, 10), st.floats(-10, 10))
    def test_mse_gradient(self, p, t):
        g = mse(p, t)[1]
        assert g == pytest.approx(central(lambda x: mse(x, t)[0], p), rel=1e-6, abs=1e-8)

    def test_balanced_mse_singleton(self):
        cfg = LossConfig(sigma2=0.3, candidate_labels=[0.7])
        for pred in (-3.0, 0.0, 0.7, 5.0):
            assert balanced_mse(pred, 0.7, cfg) == (0.0, 0.0)

    def test_balanced_mse_closed_form(self):
        cfg = LossConfig(sigma2=0.5, candidate_labels=[0.0, 1.0])
        assert balanced_mse(0.0, 0.0, cfg)[0] == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
        assert balanced_mse(0.0, 0.0, cfg)[0] == pytest.approx(0.3133, abs=1e-4)

    def test_balanced_mse_empty(self):
        with pytest.raises(ValueError):
            balanced_mse(0.0, 0.0, LossConfig())

    @settings(max_examples=60)
    @given(
        st.floats(-2, 2),
        st.lists(st.floats(-2, 2), min_size=1, max_size=10),
        st.integers(0, 9),
        st.floats(0.05, 5.0),
    )
    def test_balanced_mse_gradient_and_sign(self, pred, labels, pick, s2):
        target = labels[pick % len(labels)]
        cfg = LossConfig(sigma2=s2, candidate_labels=labels)
        loss, grad = balanced_mse(pred, target, cfg)
        assert loss >= -1e-12
        num = central(lambda x: balanced_mse(x, target, cfg)[0], pred)
        assert grad == pytest.approx(num, rel=1e-5, abs=1e-8)

    @settings(max_examples=30)
    @given(st.floats(-3, 3), st.lists(st.floats(-3, 3), min_size=1, max_size=8))
    def test_balanced_mse_wide_kernel(self, pred, labels):
        cfg = LossConfig(sigma2=1e6, candidate_labels=labels)
        assert abs(balanced_mse(pred, labels[0], cfg)[1]) <= 1e-4

    def test_silverman(self):
        y = np.random.default_rng(0).standard_normal(400)
        iqr = np.subtract(*np.percentile(y, [75, 25]))
        h = 0.9 * min(y.std(ddof=1), iqr / 1.34) * 400 ** (-0.2)
        assert silverman_sigma2(y) == pytest.approx(h * h)
        assert silverman_sigma2([3.0, 3.0, 3.0]) == 1.0


class TestOptimizer:
    def test_adam_first_step(self):
        g = np.array([0.5, -3.0, 1e-3])
        new, _ = optimizer_step({"w": np.zeros(3)}, {"w": g}, {}, "adam", 1e-3)
        np.testing.assert_allclose(np.abs(new["w"]), 1e-3 * np.abs(g) / (np.abs(g) + 1e-8))

    def test_sgd_zero_gradient(self):
        p = {"w": np.array([1.0, -2.0])}
        new, _ = optimizer_step(p, {"w": np.zeros(2)}, {}, "sgd", 0.1)
        np.testing.assert_array_equal(new["w"], p["w"])

    def test_sgd_coupled_decay(self):
        new, _ = optimizer_step({"w": np.array([2.0])}, {"w": np.array([1.0])}, {}, "sgd", 0.1, 0.5)
        assert new["w"][0] == pytest.approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0))

    def test_adam_trace_on_quadratic(self):
        # hand-rolled scalar Adam with decoupled decay on f = theta^2
        lr, wd, b1, b2, eps = 0.1, 0.01, 0.9, 0.999, 1e-8
        theta, m, v = 1.0, 0.0, 0.0
        expected = []
        for t in range(1, 4):
            g = 2 * theta
            theta *= 1 - lr * wd
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            theta -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
            expected.append(theta)
        p, state, got = {"w": np.array([1.0])}, {}, []
        for _ in range(3):
            p, state = optimizer_step(p, {"w": 2 * p["w"]}, state, "adam", lr, wd)
            got.append(p["w"][0])
        np.testing.assert_allclose(got, expected, rtol=0, atol=1e-12)

    def test_no_decay_names(self):
        p = {"w": np.array([1.0]), "b": np.array([1.0])}
        g = {"w": np.zeros(1), "b": np.zeros(1)}
        new, _ = optimizer_step(p, g, {}, "sgd", 0.1, 0.5, no_decay=("b",))
        assert new["b"][0] == 1.0 and new["w"][0] < 1.0

    def test_diverged(self):
        with pytest.raises(NumericError, match="diverged"):
            optimizer_step({"w": np.ones(1)}, {"w": np.array([np.nan])}, {}, "adam", 1e-3)


class TestOneCycle:
    def test_endpoints_and_peak(self):
        assert one_cycle_lr(0, 100, 1e-3) == pytest.approx(1e-3 / 25)
        assert one_cycle_lr(25, 100, 1e-3) == pytest.approx(1e-3)
        assert one_cycle_lr(100, 100, 1e-3) == pytest.approx(1e-3 / 1e4)

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            one_cycle_lr(101, 100, 1e-3)

    @given(st.integers(4, 500), st.floats(0.05, 0.95))
    def test_unimodal(self, total, pct):
        lrs = np.array([one_cycle_lr(s, total, 1.0, pct) for s in range(total + 1)])
        peak = int(np.argmax(lrs))
        assert np.all(np.diff(lrs[: peak + 1]) >= -1e-15)
        assert np.all(np.diff(lrs[peak:]) <= 1e-15)
        assert lrs.max() <= 1.0 + 1e-12


class TestPresets:
    def test_named_presets(self):
        c = get_preset("camil_classification")
        assert (c.batch_size, c.optimizer, c.loss, c.epochs, c.dropout_rate, c.balancing, c.batch_norm) == (
            64, "adam", "weighted_cross_entropy", 25, 0.5, "inverse_weighted", True)
        g = get_preset("graziani_regression")
        assert (g.batch_size, g.optimizer, g.loss, g.epochs, g.dropout_rate, g.balancing, g.batch_norm) == (
            1, "sgd", "mse", 100, 0.2, "none", False)
        r = get_preset("camil_regression")
        assert (r.batch_size, r.optimizer, r.loss, r.epochs, r.dropout_rate, r.balancing, r.batch_norm) == (
            1, "adam", "balanced_mse", 25, 0.0, "kernel_based", False)
        assert (r.lr, r.weight_decay, r.patience) == (1e-4, 1e-2, 12)

    @pytest.mark.parametrize(
        "toggle,field,value",
        [("use_sgd", "optimizer", "sgd"), ("add_dropout_20", "dropout_rate", 0.2), ("epochs_100", "epochs", 100),
         ("no_balancing", "balancing", "none")],
    )
    def test_ablation_changes_one_field(self, toggle, field, value):
        base = get_preset("camil_regression")
        ab = ablate(base, toggle)
        assert getattr(ab, field) == value
        diff = [f for f in base.__dataclass_fields__ if getattr(base, f) != getattr(ab, f)]
        assert sorted(diff) == sorted(["name", field])

    def test_ablation_rules(self):
        assert ablate(get_preset("camil_regression"), "no_balancing").effective_loss == "mse"
        assert set(ABLATIONS) == {"add_dropout_20", "use_sgd", "epochs_100", "no_balancing"}
        with pytest.raises(ValueError):
            ablate(get_preset("camil_classification"), "use_sgd")
        with pytest.raises(ValueError):
            get_preset("nope")


def constant_cohort(n=30, d=4, seed=0):
    rng = np.random.default_rng(seed)
    bags, recs = {}, {}
    for i in range(n):
        pid = f"P{i:02d}"
        site = f"S{i % 5}"
        bags[pid] = FeatureBag(pid, site, rng.standard_normal((5, d)))
        recs[pid] = PatientRecord(pid, site, 0.5)
    return Cohort("const", bags, recs)


class TestTrainModel:
    def test_deterministic(self, small_synth, tmp_path):
        cohort, _, _, plan = small_synth
        preset = get_preset("camil_regression", epochs=3)
        p1, l1 = train_model(cohort, plan, 0, preset, seed=7)
        p2, l2 = train_model(cohort, plan, 0, preset, seed=7)
        assert l1 == l2
        save_checkpoint(p1, tmp_path / "a.milm")
        save_checkpoint(p2, tmp_path / "b.milm")
        assert (tmp_path / "a.milm").read_bytes() == (tmp_path / "b.milm").read_bytes()
        p3, _ = train_model(cohort, plan, 0, preset, seed=8)
        assert not np.array_equal(p3.V, p1.V)

    def test_log_invariants(self, small_synth, tmp_path):
        cohort, _, _, plan = small_synth
        preset = get_preset("camil_classification", epochs=6, batch_size=8)
        _, log = train_model(cohort, plan, 1, preset, seed=0)
        expected = [one_cycle_lr(s, log.total_steps, preset.lr) for s in range(len(log.lr_trace))]
        assert log.lr_trace == expected
        assert log.best_epoch == int(np.argmin(log.val_loss)) + 1
        log.write_csv(tmp_path / "log.csv")
        assert (tmp_path / "log.csv").read_text().splitlines()[0] == "epoch,train_loss,val_loss,lr"

    def test_plateau_stops_early(self):
        cohort = constant_cohort()
        labels = {p: i % 2 for i, p in enumerate(cohort.patient_ids)}
        plan = site_aware_folds(cohort, labels, k=5, seed=0)
        _, log = train_model(cohort, plan, 0, get_preset("camil_regression", patience=2), seed=0)
        assert log.stopped_early and len(log.epochs) <= 3
        assert log.best_epoch == 1

    def test_separable_classification(self):
        # batch 64 at lr 1e-4 needs a few hundred steps, hence the cohort size
        cfg = SynthConfig(n_patients=2000, n_sites=6, instances_per_bag=(8, 16), d=16,
                          signal_strength=3.0, label_noise_sd=0.0, seed=0)
        cohort, _ = generate_cohort(cfg)
        labels = binarize_target(cohort.targets(), TargetSpec("t"), cohort.patient_ids)
        plan = site_aware_folds(cohort, labels, k=3, seed=0)
        params, _ = train_model(cohort, plan, 0, get_preset("camil_classification"), seed=0)
        val = plan.folds[0].val_ids
        fold_labels = binarize_target(cohort.targets(), TargetSpec("t"), plan.folds[0].train_ids)
        scores = predict_scores(params, [cohort.bags[p] for p in val])
        assert auroc(scores, [fold_labels[p] for p in val]) >= 0.9

    def test_empty_train(self, small_synth):
        cohort, _, _, plan = small_synth
        bad = replace(plan, folds=[replace(plan.folds[0], train_ids=())] + list(plan.folds[1:]))
        with pytest.raises(ValueError, match="empty train"):
            train_model(cohort, bad, 0, get_preset("camil_regression"), seed=0)
