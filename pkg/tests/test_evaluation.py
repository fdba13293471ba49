import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mvhybrid.errors import (DivisionByZero, DomainError, InsufficientGenes, InsufficientGroups,
                             InsufficientOverlap, NumericalFailure, ShapeMismatch)
from mvhybrid.evaluation import (ExpressionDataset, SplitKind, SplitPlan, batch_effect_run, comparison_report,
                                 evaluate, fold_metrics, log_normalize, make_split, per_gene_pcc, percent_change,
                                 ridge_fit, robustness_compare, select_hmhvg, select_hvg, synth_batch_dataset)


def dataset(expr, emb=None, names=None, studies=None, patients=None):
    expr = np.asarray(expr, dtype=float)
    n = expr.shape[0]
    emb = np.zeros((n, 1)) if emb is None else emb
    names = names or [f"g{i}" for i in range(expr.shape[1])]
    return ExpressionDataset(emb, expr, names, [f"s{i}" for i in range(n)],
                             patients or [f"p{i}" for i in range(n)], studies or ["a"] * n)


class TestDataset:
    def test_row_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ExpressionDataset(np.zeros((3, 2)), np.ones((2, 2)), ["a", "b"], "xyz", "xyz", "xyz")

    def test_label_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ExpressionDataset(np.zeros((3, 2)), np.ones((3, 2)), ["a", "b"], "xy", "xyz", "xyz")

    def test_negative_expression(self):
        with pytest.raises(DomainError):
            dataset([[1.0, -1.0]])

    def test_nonfinite(self):
        with pytest.raises(DomainError):
            dataset([[1.0, np.inf]])


class TestGenePanels:
    def test_log_normalize(self):
        out = log_normalize(np.array([[1.0, 3.0], [0.0, 0.0]]))
        np.testing.assert_allclose(out, [[math.log1p(2500), math.log1p(7500)], [0, 0]])

    def test_brute_force_variance_ranking(self):
        rng = np.random.default_rng(0)
        expr = rng.poisson(rng.uniform(1, 50, size=5), size=(30, 5)).astype(float) + 1
        names = ["e", "b", "d", "a", "c"]
        ds = dataset(expr, names=names)
        variances = []
        for g in range(5):
            vals = [math.log1p(expr[i, g] * 1e4 / expr[i].sum()) for i in range(30)]
            mu = sum(vals) / 30
            variances.append(sum((v - mu) ** 2 for v in vals) / 30)
        expected = sorted(range(5), key=lambda g: -variances[g])
        assert select_hvg(ds, 5) == expected
        assert select_hvg(ds, 2) == expected[:2]

    def test_normalisation_makes_total_tracking_gene_constant(self):
        rng = np.random.default_rng(1)
        a, b = rng.uniform(1, 100, size=(2, 40))
        ds = dataset(np.stack([a, b, a + b], axis=1), names=["A", "B", "C"])
        assert select_hvg(ds, 3)[-1] == 2
        assert 2 not in select_hvg(ds, 2)

    def test_constant_gene_last(self):
        rng = np.random.default_rng(2)
        varied = rng.uniform(0, 10, size=(20, 3))
        filler = 100.0 - varied.sum(axis=1)
        expr = np.column_stack([np.full(20, 5.0), varied, filler])
        ds = dataset(expr, names=["a_const", "b", "c", "d", "e"])
        assert select_hvg(ds, 5)[-1] == 0

    def test_ties_by_name(self):
        expr = np.array([[1.0, 1.0, 2.0], [2.0, 2.0, 1.0]])
        ds = dataset(expr, names=["z", "y", "x"])
        # all three normalised columns share one variance
        assert select_hvg(ds, 3) == [2, 1, 0]

    def test_too_many_genes(self):
        with pytest.raises(InsufficientGenes):
            select_hvg(dataset(np.ones((3, 2))), 3)

    def test_hmhvg_planted_subset(self):
        rng = np.random.default_rng(3)
        n = 300
        planted = 2000 * np.exp(rng.normal(0, 1.5, size=(n, 6)))
        high_var_low_mean = np.where(rng.random((n, 7)) < 0.5, 0.0, 5.0)
        high_mean_low_var = 300 * (1 + 0.01 * rng.random((n, 7)))
        expr = np.column_stack([high_var_low_mean[:, :3], planted[:, :3], high_mean_low_var,
                                planted[:, 3:], high_var_low_mean[:, 3:]])
        ds = dataset(expr)
        assert sorted(select_hmhvg(ds, 6)) == [3, 4, 5, 13, 14, 15]

    def test_hmhvg_excludes_low_mean_high_variance_gene(self):
        rng = np.random.default_rng(4)
        base = 100 * np.exp(rng.normal(0, 0.2, size=(100, 4)))
        spiky = np.where(rng.random(100) < 0.5, 0.0, 3.0)
        ds = dataset(np.column_stack([base, spiky]))
        assert select_hvg(ds, 1) == [4]
        assert 4 not in select_hmhvg(ds, 2, pool=4)

    def test_hmhvg_full_pool_equals_hvg(self):
        rng = np.random.default_rng(5)
        ds = dataset(rng.gamma(2.0, 10.0, size=(50, 12)))
        assert select_hmhvg(ds, 5, pool=12) == select_hvg(ds, 5)

    def test_hmhvg_insufficient_overlap(self):
        rng = np.random.default_rng(6)
        base = 100 * np.exp(rng.normal(0, 0.01, size=(100, 3)))
        spiky = np.where(rng.random((100, 3)) < 0.5, 0.0, 3.0)
        with pytest.raises(InsufficientOverlap):
            select_hmhvg(dataset(np.column_stack([base, spiky])), 3, pool=3)

    def test_hmhvg_pool_below_k(self):
        with pytest.raises(DomainError):
            select_hmhvg(dataset(np.ones((3, 4))), 3, pool=2)


def check_partition(plan, n):
    tests = np.concatenate([te for _, te in plan.folds])
    assert np.array_equal(np.sort(tests), np.arange(n))
    for train, test in plan.folds:
        assert np.intersect1d(train, test).size == 0
        assert np.array_equal(np.sort(np.concatenate([train, test])), np.arange(n))


class TestSplits:
    def labelled(self, n=100, studies=3, patients=4):
        return ExpressionDataset(np.zeros((n, 1)), np.ones((n, 1)), ["g"], [f"s{i}" for i in range(n)],
                                 [f"p{i % patients}" for i in range(n)], [f"st{i % studies}" for i in range(n)])

    def test_random_ten_fold(self):
        plan = make_split(self.labelled(), "random", seed=0, k=10)
        check_partition(plan, 100)
        assert [te.size for _, te in plan.folds] == [10] * 10

    def test_loso(self):
        ds = self.labelled(90, studies=3)
        plan = make_split(ds, SplitKind.LOSO)
        assert len(plan.folds) == 3
        check_partition(plan, 90)
        held = [{ds.study_id[i] for i in te} for _, te in plan.folds]
        assert all(len(h) == 1 for h in held) and set().union(*held) == {"st0", "st1", "st2"}
        for train, test in plan.folds:
            assert not {ds.study_id[i] for i in train} & {ds.study_id[i] for i in test}

    def test_patient_four_fold(self):
        ds = self.labelled(80, patients=4)
        plan = make_split(ds, "patient", seed=0, k=4)
        check_partition(plan, 80)
        for train, test in plan.folds:
            assert train.size == 3 * test.size
            assert not {ds.patient_id[i] for i in train} & {ds.patient_id[i] for i in test}

    @settings(max_examples=40, deadline=None)
    @given(st.integers(12, 80), st.integers(2, 5), st.integers(2, 12), st.integers(0, 1000))
    def test_partition_invariants(self, n, studies, patients, seed):
        ds = self.labelled(n, studies=studies, patients=patients)
        for kind, k in (("random", 10), ("loso", None), ("patient", min(patients, 4))):
            plan = make_split(ds, kind, seed=seed, k=k or 10)
            check_partition(plan, n)
            plan.validate(n)

    def test_deterministic_given_seed(self):
        ds = self.labelled()
        a, b, c = (make_split(ds, "random", seed=s) for s in (1, 1, 2))
        assert all(np.array_equal(x[1], y[1]) for x, y in zip(a.folds, b.folds))
        assert not all(np.array_equal(x[1], y[1]) for x, y in zip(a.folds, c.folds))

    def test_insufficient_groups(self):
        with pytest.raises(InsufficientGroups):
            make_split(self.labelled(studies=1), "loso")
        with pytest.raises(InsufficientGroups):
            make_split(self.labelled(patients=3), "patient", k=4)
        with pytest.raises(InsufficientGroups):
            make_split(self.labelled(n=5), "random", k=10)

    def test_validate_catches_overlap(self):
        plan = SplitPlan(SplitKind.RANDOM, ((np.array([0, 1]), np.array([1, 2])),))
        with pytest.raises(DomainError):
            plan.validate(3)


class TestRidge:
    def test_identity_example(self):
        model = ridge_fit(np.eye(2), np.array([[1.0], [2.0]]), alpha=1.0, center=False)
        np.testing.assert_allclose(model.weights.ravel(), [0.5, 1.0])

    def test_large_alpha_limit(self):
        rng = np.random.default_rng(0)
        x, y = rng.normal(size=(20, 3)), rng.normal(size=(20, 2))
        model = ridge_fit(x, y, alpha=1e14)
        assert np.abs(model.weights).max() < 1e-12
        np.testing.assert_allclose(model.predict(rng.normal(size=(4, 3))), np.tile(y.mean(0), (4, 1)), atol=1e-10)

    def test_dense_inverse_oracle(self):
        rng = np.random.default_rng(1)
        x, y = rng.normal(size=(50, 8)), rng.normal(size=(50, 3))
        xc, yc = x - x.mean(0), y - y.mean(0)
        expected = np.linalg.inv(xc.T @ xc + 0.7 * np.eye(8)) @ xc.T @ yc
        np.testing.assert_allclose(ridge_fit(x, y, 0.7).weights, expected, rtol=0, atol=1e-8)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x, y = rng.normal(size=(30, 4)), rng.normal(size=(30, 2))
        q = rng.normal(size=(5, 4))
        shift = np.array([0, 7.5, 0, -3.0])
        np.testing.assert_allclose(ridge_fit(x, y).predict(q), ridge_fit(x + shift, y).predict(q + shift),
                                   rtol=1e-10, atol=1e-12)

    @pytest.mark.parametrize("alpha", [0.0, -1.0])
    def test_alpha_must_be_positive(self, alpha):
        with pytest.raises(DomainError):
            ridge_fit(np.eye(2), np.eye(2), alpha)

    def test_row_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ridge_fit(np.eye(3), np.eye(2))

    def test_solver_failure_surfaces(self, monkeypatch):
        import scipy.linalg

        def boom(*a, **k):
            raise np.linalg.LinAlgError("not positive definite")

        monkeypatch.setattr(scipy.linalg, "cho_factor", boom)
        with pytest.raises(NumericalFailure):
            ridge_fit(np.eye(2), np.eye(2))


def single_fold(n):
    # the injected fitters ignore training rows, so the test fold can be everything
    return SplitPlan(SplitKind.RANDOM, ((np.array([], dtype=np.intp), np.arange(n)),), 1)


class TestMetrics:
    def test_micro_dataset_by_hand(self):
        truth = np.array([[1.0, 2.0], [2.0, 2.0], [3.0, 2.0]])
        pred = np.array([[1.0, 1.0], [2.0, 2.0], [4.0, 3.0]])
        ds = dataset(truth)
        rep = evaluate(ds, [0, 1], single_fold(3), fitter=lambda x, y: (lambda q: pred), log1p=False)
        # gene 0: centred truth (-1, 0, 1), centred pred (-4/3, -1/3, 5/3) -> r = 9 / (2 sqrt 21)
        # gene 1: constant truth -> 0 by convention
        r0 = 9 / (2 * math.sqrt(21))
        assert rep.pcc == pytest.approx(r0 / 2, abs=1e-15)
        assert rep.pcc10 == pytest.approx(r0 / 2, abs=1e-15)
        assert rep.mae == 0.5 and rep.mse == 0.5
        np.testing.assert_allclose(rep.per_gene_pcc, [r0, 0.0], atol=1e-15)

    def test_oracle_predictor(self):
        rng = np.random.default_rng(3)
        ds = dataset(rng.gamma(2, 5, size=(40, 12)), emb=rng.normal(size=(40, 3)))
        targets = log_normalize(ds.expression)
        rep = evaluate(ds, range(12), make_split(ds, "random", k=4),
                       fitter=lambda x, y: (lambda q: targets[[np.where((ds.embeddings == row).all(1))[0][0]
                                                               for row in q]]))
        assert rep.pcc == pytest.approx(1.0) and rep.pcc10 == pytest.approx(1.0)
        assert rep.mae == 0.0 and rep.mse == 0.0

    def test_constant_predictor(self):
        truth = np.array([[1.0], [2.0], [6.0]])
        rep = evaluate(dataset(truth), [0], single_fold(3), fitter=lambda x, y: (lambda q: np.full((3, 1), 2.0)),
                       log1p=False)
        assert rep.pcc == 0.0 and rep.mae == pytest.approx(5 / 3)

    def test_linear_dataset_recovered(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(200, 6))
        y = x @ rng.normal(size=(6, 12)) + 100 + 0.01 * rng.normal(size=(200, 12))
        ds = dataset(y, emb=x)
        rep = evaluate(ds, range(12), make_split(ds, "random", k=5), alpha=1e-6, log1p=False)
        assert rep.pcc > 0.99

    def test_pcc_zero_variance_and_clip(self):
        truth = np.array([[1.0, 1.0], [2.0, 1.0], [3.0, 1.0]])
        np.testing.assert_allclose(per_gene_pcc(truth, truth), [1.0, 0.0], rtol=0, atol=1e-15)
        assert per_gene_pcc(truth, -truth)[0] >= -1.0

    def test_top_ten_mean(self):
        truth = np.random.default_rng(5).normal(size=(30, 12))
        pred = truth + np.linspace(0.1, 3, 12) * np.random.default_rng(6).normal(size=(30, 12))
        m = fold_metrics(truth, pred)
        assert m.pcc10 == pytest.approx(np.sort(m.per_gene_pcc)[-10:].mean())

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6), st.integers(10, 20))
    def test_report_invariants(self, seed, genes):
        rng = np.random.default_rng(seed)
        ds = dataset(rng.gamma(1.5, 4, size=(40, genes)), emb=rng.normal(size=(40, 5)))
        rep = evaluate(ds, range(genes), make_split(ds, "random", seed=seed, k=4))
        for f in rep.folds:
            assert f.pcc10 >= f.pcc - 1e-15
            assert f.mae ** 2 <= f.mse * (1 + 1e-12)
        assert rep.pcc10 >= rep.pcc - 1e-15 and rep.mae ** 2 <= rep.mse * (1 + 1e-12)

    def test_empty_panel(self):
        with pytest.raises(InsufficientGenes):
            evaluate(dataset(np.ones((3, 2))), [], single_fold(3))


class TestRobustness:
    def test_identical_reports(self):
        vals = {"pcc": 0.3, "pcc10": 0.5, "mae": 1.0, "mse": 2.0}
        assert all(d.percent_change == 0.0 for d in robustness_compare(vals, vals).values())

    def test_pcc_decrease(self):
        assert round(percent_change("pcc", 0.214, 0.138), 1) == 35.5

    def test_mse_increase(self):
        assert round(percent_change("mse", 0.594, 0.881), 1) == 48.3

    def test_zero_random_metric(self):
        with pytest.raises(DivisionByZero):
            percent_change("pcc", 0.0, 0.1)

    def test_unknown_metric(self):
        with pytest.raises(DomainError):
            percent_change("r2", 1.0, 0.5)

    def test_comparison_report_layout(self):
        rnd, loso, _ = batch_effect_run(2.0, seed=0)
        report = comparison_report(rnd, loso)
        assert set(report) == {"pcc", "pcc10", "mae", "mse"}
        assert set(report["pcc"]) == {"random", "loso", "percent_change"}
        assert set(report["pcc"]["random"]) == {"mean", "std"}


class TestSynthetic:
    def test_deterministic(self):
        a, b = synth_batch_dataset(seed=3, beta=1.0), synth_batch_dataset(seed=3, beta=1.0)
        assert a.embeddings.tobytes() == b.embeddings.tobytes()
        assert a.expression.tobytes() == b.expression.tobytes()
        assert a.study_id == b.study_id and a.patient_id == b.patient_id

    def test_shapes_and_labels(self):
        ds = synth_batch_dataset(n_studies=3, patches_per_study=20, seed=0)
        assert ds.n_patches == 60 and len(set(ds.study_id)) == 3 and len(set(ds.patient_id)) == 6
        assert np.all(ds.expression >= 0)

    def test_negative_beta(self):
        with pytest.raises(DomainError):
            synth_batch_dataset(beta=-1.0)

    def test_no_batch_effect_at_beta_zero(self):
        rnd, loso, _ = batch_effect_run(0.0, seed=0)
        assert abs(rnd.pcc - loso.pcc) < 3 * max(rnd.std("pcc"), loso.std("pcc"))

    def test_strong_batch_effect(self):
        _, _, deltas = batch_effect_run(5.0, seed=0)
        assert deltas["pcc"].percent_change >= 20
