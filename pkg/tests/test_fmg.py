import numpy as np
import pytest
from scipy.optimize import minimize

from hinfuse import fmg
from hinfuse.factors import FactorPair
from hinfuse.hin import RatingSet


def make_pair(name, m, n, rank, seed=0, user_observed=None, item_observed=None):
    rng = np.random.default_rng(seed)
    return FactorPair(
        rng.normal(size=(m, rank)), rng.normal(size=(n, rank)), rank, metagraph=name,
        user_observed=user_observed, item_observed=item_observed,
    )


def make_ratings(users, items, values):
    return RatingSet(np.asarray(users), np.asarray(items), np.asarray(values, dtype=float), "train")


class TestAssemble:
    def test_widths_and_group_count(self):
        pairs = [make_pair("m1", 4, 3, 3), make_pair("m2", 4, 3, 5)]
        table, layout = fmg.assemble_features(pairs, make_ratings([0], [1], [4.0]))
        assert layout.d == 16
        assert [stop - start for _, start, stop in layout.groups] == [3, 5, 3, 5]
        assert layout.labels == ["m1:user", "m2:user", "m1:item", "m2:item"]
        assert table.X.shape == (1, 16)

    def test_feature_row_ordering(self):
        pairs = [make_pair("m1", 3, 3, 2, seed=1), make_pair("m2", 3, 3, 2, seed=2)]
        table, _ = fmg.assemble_features(pairs, make_ratings([1], [2], [3.0]))
        want = np.concatenate([pairs[0].U[1], pairs[1].U[1], pairs[0].B[2], pairs[1].B[2]])
        assert np.array_equal(table.X[0], want)

    def test_absent_item_contributes_zero_block(self):
        pair = make_pair("m1", 3, 3, 2, item_observed=np.array([True, False, True]))
        table, layout = fmg.assemble_features([pair], make_ratings([0], [1], [2.0]))
        _, start, stop = layout.groups[1]
        assert np.all(table.X[0, start:stop] == 0.0)
        assert np.any(table.X[0, :start] != 0.0)

    def test_zero_ratings_gives_empty_table(self):
        table, layout = fmg.assemble_features(
            [make_pair("m1", 3, 3, 2)], make_ratings([], [], [])
        )
        assert len(table) == 0 and table.X.shape == (0, 4) and layout.d == 4

    def test_mismatched_entity_sets_rejected(self):
        pairs = [make_pair("m1", 3, 3, 2), make_pair("m2", 4, 3, 2)]
        with pytest.raises(ValueError, match="share the entity sets"):
            fmg.assemble_features(pairs, make_ratings([0], [0], [1.0]))


class TestPredict:
    def test_bias_only(self):
        params = fmg.FmParams(2.5, np.zeros(3), np.zeros((3, 2)))
        assert fmg.predict(params, np.array([1.0, 2.0, 3.0])) == 2.5

    def test_hand_computed_example(self):
        params = fmg.FmParams(1.0, np.array([1.0, 0.0]), np.array([[1.0], [2.0]]))
        assert fmg.predict(params, np.array([1.0, 2.0])) == pytest.approx(6.0, abs=1e-12)

    def test_zero_features_give_bias(self):
        rng = np.random.default_rng(0)
        params = fmg.FmParams(0.7, rng.normal(size=4), rng.normal(size=(4, 3)))
        assert fmg.predict(params, np.zeros(4)) == pytest.approx(0.7)

    def test_fast_identity_matches_double_sum(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            d, K = rng.integers(2, 21), rng.integers(1, 6)
            params = fmg.FmParams(rng.normal(), rng.normal(size=d), rng.normal(size=(d, K)))
            x = rng.normal(size=d)
            fast = fmg.predict(params, x)
            slow = fmg.predict_pairwise_reference(params, x)
            assert abs(fast - slow) <= 1e-10 * max(1.0, abs(slow))

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        params = fmg.FmParams(rng.normal(), rng.normal(size=5), rng.normal(size=(5, 2)))
        X = rng.normal(size=(7, 5))
        batch = fmg.predict_batch(params, X)
        assert np.allclose(batch, [fmg.predict(params, x) for x in X], atol=1e-12)


class TestMseLoss:
    def table(self, ys, d=3):
        X = np.zeros((len(ys), d))
        return fmg.FeatureTable(X, np.asarray(ys, dtype=float), None, None)

    def test_exact_predictions(self):
        params = fmg.FmParams(2.0, np.zeros(3), np.zeros((3, 2)))
        assert fmg.mse_loss(params, self.table([2.0, 2.0])) == 0.0

    def test_unit_errors(self):
        params = fmg.FmParams(2.0, np.zeros(3), np.zeros((3, 2)))
        assert fmg.mse_loss(params, self.table([1.0, 3.0])) == pytest.approx(1.0)

    def test_mixed_errors(self):
        params = fmg.FmParams(0.0, np.zeros(3), np.zeros((3, 2)))
        assert fmg.mse_loss(params, self.table([1.0, 3.0])) == pytest.approx(5.0)

    def test_empty_table_rejected(self):
        params = fmg.FmParams(0.0, np.zeros(3), np.zeros((3, 2)))
        with pytest.raises(ValueError, match="empty"):
            fmg.mse_loss(params, self.table([]))


def one_group_layout():
    return fmg.GroupLayout((("m1:user", 0, 2), ("m1:item", 2, 4)), 4)


class TestRegValue:
    def test_zero_params_zero_value(self):
        layout = one_group_layout()
        params = fmg.FmParams(1.0, np.zeros(4), np.zeros((4, 2)))
        for mode in ("convex", "lsp"):
            cfg = fmg.RegConfig(mode=mode, lam_w=1.0, lam_v=1.0)
            assert fmg.reg_value(params, layout, cfg) == 0.0

    def test_single_group_convex(self):
        layout = one_group_layout()
        params = fmg.FmParams(0.0, np.array([3.0, 4.0, 0.0, 0.0]), np.zeros((4, 2)))
        cfg = fmg.RegConfig(mode="convex", lam_w=1.0, lam_v=0.0)
        assert fmg.reg_value(params, layout, cfg) == pytest.approx(5.0)

    def test_single_group_lsp(self):
        layout = one_group_layout()
        params = fmg.FmParams(0.0, np.array([3.0, 4.0, 0.0, 0.0]), np.zeros((4, 2)))
        cfg = fmg.RegConfig(mode="lsp", lam_w=1.0, lam_v=0.0)
        assert fmg.reg_value(params, layout, cfg) == pytest.approx(np.log(6.0))

    def test_invalid_mode_rejected(self):
        with pytest.raises(ValueError, match="mode"):
            fmg.RegConfig(mode="scad")


class TestAugmentedGrad:
    def random_instance(self, rng, d=4, K=2, n=3):
        layout = fmg.GroupLayout((("m1:user", 0, d // 2), ("m1:item", d // 2, d)), d)
        params = fmg.FmParams(rng.normal(), rng.normal(size=d), rng.normal(size=(d, K)))
        X = rng.normal(size=(n, d))
        y = rng.normal(size=n)
        return layout, params, X, y

    def finite_difference(self, params, X, y, layout, cfg, eps=1e-5):
        def value(p):
            table = fmg.FeatureTable(X, y, None, None)
            return fmg.mse_loss(p, table) + fmg.smooth_surplus(p, layout, cfg)

        fd_b = (
            value(fmg.FmParams(params.b + eps, params.w, params.V))
            - value(fmg.FmParams(params.b - eps, params.w, params.V))
        ) / (2 * eps)
        fd_w = np.zeros_like(params.w)
        for i in range(len(params.w)):
            w1, w2 = params.w.copy(), params.w.copy()
            w1[i] += eps
            w2[i] -= eps
            fd_w[i] = (
                value(fmg.FmParams(params.b, w1, params.V))
                - value(fmg.FmParams(params.b, w2, params.V))
            ) / (2 * eps)
        fd_v = np.zeros_like(params.V)
        for idx in np.ndindex(params.V.shape):
            V1, V2 = params.V.copy(), params.V.copy()
            V1[idx] += eps
            V2[idx] -= eps
            fd_v[idx] = (
                value(fmg.FmParams(params.b, params.w, V1))
                - value(fmg.FmParams(params.b, params.w, V2))
            ) / (2 * eps)
        return fd_b, fd_w, fd_v

    def assert_close(self, got, want, tol=1e-4):
        scale = max(np.max(np.abs(want)), 1e-6)
        assert np.max(np.abs(np.asarray(got) - np.asarray(want))) / scale <= tol

    def test_convex_mode_equals_plain_mse_gradient(self):
        rng = np.random.default_rng(0)
        layout, params, X, y = self.random_instance(rng)
        cfg = fmg.RegConfig(mode="convex", lam_w=0.7, lam_v=0.7)
        got = fmg.augmented_grad(params, X, y, layout, cfg)
        want = fmg.mse_grad(params, X, y)
        for g, w in zip(got, want):
            assert np.allclose(g, w, atol=0)

    def test_lsp_surplus_gradient_vanishes_at_zero(self):
        rng = np.random.default_rng(1)
        layout, _, X, y = self.random_instance(rng)
        params = fmg.FmParams(0.5, np.zeros(4), np.zeros((4, 2)))
        cfg = fmg.RegConfig(mode="lsp", lam_w=0.9, lam_v=0.9)
        got = fmg.augmented_grad(params, X, y, layout, cfg)
        want = fmg.mse_grad(params, X, y)
        for g, w in zip(got, want):
            assert np.allclose(g, w, atol=0)

    def test_matches_finite_differences_both_modes(self):
        rng = np.random.default_rng(2)
        for mode in ("convex", "lsp"):
            cfg = fmg.RegConfig(mode=mode, lam_w=0.4, lam_v=0.3)
            for _ in range(5):
                layout, params, X, y = self.random_instance(rng)
                got = fmg.augmented_grad(params, X, y, layout, cfg)
                want = self.finite_difference(params, X, y, layout, cfg)
                for g, w in zip(got, want):
                    self.assert_close(g, w)


class TestProxGroup:
    def test_zero_threshold_is_identity(self):
        layout = one_group_layout()
        z = np.random.default_rng(0).normal(size=4)
        assert np.array_equal(fmg.prox_group(z, layout, np.zeros(2)), z)

    def test_hand_example(self):
        layout = one_group_layout()
        z = np.array([3.0, 4.0, 1.0, 1.0])
        out = fmg.prox_group(z, layout, np.array([2.0, 0.0]))
        assert np.allclose(out, [1.8, 2.4, 1.0, 1.0], atol=1e-12)

    def test_full_shrinkage_zeroes_block(self):
        layout = one_group_layout()
        z = np.array([3.0, 4.0, 1.0, 1.0])
        out = fmg.prox_group(z, layout, np.array([5.0, 10.0]))
        assert np.all(out == 0.0)

    def test_matrix_blocks_use_frobenius_norm(self):
        layout = one_group_layout()
        Z = np.ones((4, 3))
        out = fmg.prox_group(Z, layout, np.array([np.sqrt(6.0) / 2, 0.0]))
        assert np.allclose(out[:2], 0.5)
        assert np.allclose(out[2:], 1.0)

    def test_negative_threshold_rejected(self):
        layout = one_group_layout()
        with pytest.raises(ValueError):
            fmg.prox_group(np.ones(4), layout, np.array([-1.0, 0.0]))

    def test_agrees_with_numerical_minimizer(self):
        layout = one_group_layout()
        rng = np.random.default_rng(4)
        for _ in range(10):
            z = rng.normal(scale=2.0, size=4)
            thresholds = rng.uniform(0.1, 1.5, size=2)
            got = fmg.prox_group(z, layout, thresholds)

            def objective(x):
                value = 0.5 * np.sum((x - z) ** 2)
                for tau, sl in zip(thresholds, layout.slices()):
                    value += tau * np.linalg.norm(x[sl])
                return value

            result = minimize(objective, z, method="Nelder-Mead",
                              options={"xatol": 1e-10, "fatol": 1e-14, "maxiter": 20000})
            if np.all([np.linalg.norm(got[sl]) > 1e-8 for sl in layout.slices()]):
                assert np.max(np.abs(got - result.x)) <= 1e-6
            assert objective(got) <= objective(result.x) + 1e-10

    def test_prox_optimality_against_perturbations(self):
        layout = one_group_layout()
        rng = np.random.default_rng(5)
        for _ in range(10):
            z = rng.normal(size=4)
            thresholds = rng.uniform(0.0, 2.0, size=2)
            out = fmg.prox_group(z, layout, thresholds)

            def objective(x):
                value = 0.5 * np.sum((x - z) ** 2)
                for tau, sl in zip(thresholds, layout.slices()):
                    value += tau * np.linalg.norm(x[sl])
                return value

            base = objective(out)
            for _ in range(100):
                assert base <= objective(out + rng.normal(scale=1e-3, size=4)) + 1e-12


class TestObjective:
    def test_zero_params_zero_labels(self):
        layout = one_group_layout()
        params = fmg.FmParams(0.0, np.zeros(4), np.zeros((4, 2)))
        table = fmg.FeatureTable(np.zeros((3, 4)), np.zeros(3), None, None)
        cfg = fmg.RegConfig(mode="lsp", lam_w=1.0, lam_v=1.0)
        assert fmg.objective(params, table, layout, cfg) == 0.0

    def test_loss_plus_reg_example(self):
        layout = one_group_layout()
        params = fmg.FmParams(0.0, np.array([3.0, 4.0, 0.0, 0.0]), np.zeros((4, 2)))
        X = np.zeros((2, 4))
        table = fmg.FeatureTable(X, np.array([1.0, 3.0]), None, None)
        cfg = fmg.RegConfig(mode="convex", lam_w=1.0, lam_v=1.0)
        assert fmg.objective(params, table, layout, cfg) == pytest.approx(10.0)

    def test_direct_equals_reformulated(self):
        rng = np.random.default_rng(6)
        layout = fmg.GroupLayout(
            (("a:user", 0, 3), ("b:user", 3, 5), ("a:item", 5, 8), ("b:item", 8, 10)), 10
        )
        for mode in ("convex", "lsp"):
            cfg = fmg.RegConfig(mode=mode, lam_w=0.3, lam_v=0.6)
            for _ in range(10):
                params = fmg.FmParams(rng.normal(), rng.normal(size=10), rng.normal(size=(10, 3)))
                table = fmg.FeatureTable(rng.normal(size=(4, 10)), rng.normal(size=4), None, None)
                h = fmg.objective(params, table, layout, cfg)
                h_bar = fmg.augmented_objective(params, table, layout, cfg)
                assert abs(h - h_bar) <= 1e-12 * max(1.0, abs(h))

    def test_group_permutation_invariance(self):
        rng = np.random.default_rng(7)
        ranks = [2, 3, 4]
        names = ["m1", "m2", "m3"]
        layout = fmg.GroupLayout.from_ranks(names, ranks)
        params = fmg.FmParams(rng.normal(), rng.normal(size=layout.d), rng.normal(size=(layout.d, 2)))
        X = rng.normal(size=(6, layout.d))
        y = rng.normal(size=6)
        table = fmg.FeatureTable(X, y, None, None)

        perm = [2, 0, 1]
        layout_p = fmg.GroupLayout.from_ranks([names[i] for i in perm], [ranks[i] for i in perm])
        index = np.concatenate(
            [np.arange(*layout.groups[g][1:]) for g in perm]
            + [np.arange(*layout.groups[3 + g][1:]) for g in perm]
        )
        params_p = fmg.FmParams(params.b, params.w[index], params.V[index])
        table_p = fmg.FeatureTable(X[:, index], y, None, None)

        for mode in ("convex", "lsp"):
            cfg = fmg.RegConfig(mode=mode, lam_w=0.4, lam_v=0.2)
            assert fmg.objective(params, table, layout, cfg) == pytest.approx(
                fmg.objective(params_p, table_p, layout_p, cfg), rel=1e-12
            )
            assert fmg.reg_value(params, layout, cfg) == pytest.approx(
                fmg.reg_value(params_p, layout_p, cfg), rel=1e-12
            )
        assert fmg.mse_loss(params, table) == pytest.approx(fmg.mse_loss(params_p, table_p), rel=1e-12)
        assert fmg.predict(params, X[0]) == pytest.approx(fmg.predict(params_p, X[0, index]), rel=1e-12)


class TestLayout:
    def test_validate_rejects_gaps(self):
        layout = fmg.GroupLayout((("a", 0, 2), ("b", 3, 4)), 4)
        with pytest.raises(ValueError, match="contiguous"):
            layout.validate()

    def test_sqrt_width_etas(self):
        layout = fmg.GroupLayout((("a", 0, 4), ("b", 4, 13)), 13)
        assert np.allclose(fmg.sqrt_width_etas(layout), [2.0, 3.0])

    def test_eta_length_checked(self):
        layout = one_group_layout()
        cfg = fmg.RegConfig(mode="convex", lam_w=1.0, lam_v=1.0, eta_w=np.ones(3))
        params = fmg.FmParams(0.0, np.zeros(4), np.zeros((4, 2)))
        with pytest.raises(ValueError, match="per group"):
            fmg.reg_value(params, layout, cfg)


class TestStandardizer:
    def test_train_columns_become_zero_mean_unit_std(self):
        rng = np.random.default_rng(0)
        X = rng.normal(loc=3.0, scale=2.0, size=(50, 4))
        scaler = fmg.fit_standardizer(X)
        Z = fmg.standardize(X, scaler)
        assert np.allclose(Z.mean(axis=0), 0.0, atol=1e-12)
        assert np.allclose(Z.std(axis=0), 1.0, atol=1e-12)

    def test_constant_column_does_not_blow_up(self):
        X = np.ones((10, 2))
        Z = fmg.standardize(X, fmg.fit_standardizer(X))
        assert np.all(np.isfinite(Z)) and np.allclose(Z, 0.0)

    def test_same_transform_applies_to_other_splits(self):
        rng = np.random.default_rng(1)
        X_train = rng.normal(size=(30, 3))
        X_test = rng.normal(size=(10, 3))
        scaler = fmg.fit_standardizer(X_train)
        Z = fmg.standardize(X_test, scaler)
        assert np.allclose(Z * scaler[1] + scaler[0], X_test, atol=1e-12)


class TestModelPersistence:
    def test_bit_exact_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        layout = fmg.GroupLayout.from_ranks(["m1", "m2"], [3, 2])
        params = fmg.FmParams(rng.normal(), rng.normal(size=layout.d), rng.normal(size=(layout.d, 4)))
        cfg = fmg.RegConfig(mode="lsp", lam_w=0.123456789, lam_v=0.05, eta_w=np.ones(4) * 1.5)
        path = tmp_path / "model.npz"
        fmg.save_model(path, params, layout, cfg)
        params2, layout2, cfg2 = fmg.load_model(path)
        assert params2.b == params.b
        assert np.array_equal(params2.w, params.w) and np.array_equal(params2.V, params.V)
        assert layout2 == layout
        assert cfg2.mode == cfg.mode and cfg2.lam_w == cfg.lam_w
        assert np.array_equal(cfg2.eta_w, cfg.eta_w) and cfg2.eta_v is None
