import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltashap import _kernels as K
from deltashap.core import Coalition, Dataset, SeedTree, sample_coalition, synth_dataset
from deltashap.errors import ConfigError, DuplicateMemberError
from deltashap.games import UtilityCache
from deltashap.models import (
    CONVEX_SGD,
    DEFAULT_G,
    NONCONVEX_SGD,
    STRONGLY_CONVEX,
    LossConstants,
    ModelGame,
    ModelParams,
    TrainConfig,
    estimate_constants,
    expected_marginal,
    initial_params,
    make_config,
    marginal_contribution,
    sgd_train,
    test_loss,
    train_deterministic,
    utility,
)


def tiny(X, y, Xe=None, ye=None):
    X = np.asarray(X, float)
    y = np.asarray(y)
    return Dataset(X, y, X if Xe is None else Xe, y if ye is None else ye)


class TestConstants:
    def test_positive(self):
        with pytest.raises(ConfigError):
            LossConstants(L=0)
        with pytest.raises(ConfigError):
            LossConstants(G=math.inf)

    def test_roundtrip(self):
        c = LossConstants(L=2, beta=3, lambda_=0.5, G=1, c=2, T=7, C=1.5)
        assert LossConstants.from_dict(c.to_dict()) == c

    def test_unit_rows(self):
        # augmented rows [x, 1] with |x| = sqrt(2) have norm sqrt(3)
        d = tiny(np.full((4, 2), 1.0) * [[1, 1], [-1, 1], [1, -1], [-1, -1]], [0, 1, 0, 1])
        c = estimate_constants(d, TrainConfig())
        assert c.L == pytest.approx(math.sqrt(3))

    def test_zero_features_floor(self):
        d = tiny(np.zeros((3, 0)).reshape(3, 0), [0, 1, 0])
        assert estimate_constants(d, TrainConfig()).L == 1.0

    def test_beta_audit(self, blobs, det_config):
        """Second differences of the per-example regularized loss never exceed beta."""
        rng = np.random.default_rng(0)
        beta = det_config.constants.beta
        lam = det_config.constants.lambda_
        P = (blobs.dim + 1)
        worst = 0.0
        for _ in range(100):
            theta = rng.standard_normal(P) * 2
            u = rng.standard_normal(P)
            u /= np.linalg.norm(u)
            r = rng.integers(blobs.n_train)
            X, y = blobs.features[r:r + 1], blobs.labels[r:r + 1]
            eps = 1e-3
            f = [K.linear_objective(theta + s * eps * u, X, y, blobs.dim, 1, lam) for s in (-1, 0, 1)]
            worst = max(worst, (f[0] - 2 * f[1] + f[2]) / eps ** 2)
        assert worst <= beta


class TestGradients:
    @pytest.mark.parametrize("arch, out", [("logistic", 1), ("logistic", 3), ("mlp", 1), ("mlp", 3)])
    def test_finite_differences(self, arch, out):
        rng = np.random.default_rng(1)
        d, H = 4, 5
        P = (d + 1) * out if arch == "logistic" else d * H + H + H * out + out
        code = K.ARCH_LINEAR if arch == "logistic" else K.ARCH_MLP
        for _ in range(25):
            theta = rng.standard_normal(P)
            x = rng.standard_normal(d)
            y = int(rng.integers(max(out, 2)))
            _, g = K.example_loss_grad(theta, x, y, code, d, H, out, K.ACT_SOFTPLUS)
            num = np.empty(P)
            for q in range(P):
                e = np.zeros(P)
                e[q] = 1e-6
                fp, _ = K.example_loss_grad(theta + e, x, y, code, d, H, out, K.ACT_SOFTPLUS)
                fm, _ = K.example_loss_grad(theta - e, x, y, code, d, H, out, K.ACT_SOFTPLUS)
                num[q] = (fp - fm) / 2e-6
            assert np.linalg.norm(g - num) <= 1e-5 * max(1.0, np.linalg.norm(num))

    def test_objective_gradient(self, blobs):
        rng = np.random.default_rng(2)
        theta = rng.standard_normal(blobs.dim + 1)
        f, g = K.linear_grad(theta, blobs.features, blobs.labels, blobs.dim, 1, 0.3)
        assert f == pytest.approx(K.linear_objective(theta, blobs.features, blobs.labels, blobs.dim, 1, 0.3))
        num = np.array([(K.linear_objective(theta + e, blobs.features, blobs.labels, blobs.dim, 1, 0.3)
                         - K.linear_objective(theta - e, blobs.features, blobs.labels, blobs.dim, 1, 0.3)) / 2e-6
                        for e in np.eye(len(theta)) * 1e-6])
        assert np.allclose(g, num, rtol=1e-5, atol=1e-7)


class TestDeterministicTraining:
    def test_empty_is_zero(self, blobs, det_config):
        m = train_deterministic(Coalition(()), blobs, det_config)
        assert not np.any(m.theta)
        assert test_loss(m, blobs) == pytest.approx(math.log(2))

    def test_stationary(self, blobs, det_config):
        m = train_deterministic(Coalition(tuple(range(blobs.n_train))), blobs, det_config)
        _, g = K.linear_grad(m.theta, blobs.features, blobs.labels, blobs.dim, 1, 0.1)
        assert np.linalg.norm(g) <= 1e-8

    def test_gd_matches_newton(self, blobs, det_config):
        c = Coalition(tuple(range(10)))
        a = train_deterministic(c, blobs, det_config)
        b = train_deterministic(c, blobs, TrainConfig(STRONGLY_CONVEX, det_config.constants, solver="gd"))
        assert np.allclose(a.theta, b.theta, atol=1e-6)

    def test_large_lambda_shrinks(self, blobs):
        cfg = make_config(blobs, lam=1e3)
        m = train_deterministic(Coalition((3,)), blobs, cfg)
        assert np.linalg.norm(m.theta) <= cfg.constants.L / cfg.constants.lambda_

    def test_duplicates_same_minimizer(self, blobs, det_config):
        doubled = Dataset(np.vstack([blobs.features, blobs.features]), np.concatenate([blobs.labels, blobs.labels]),
                          blobs.eval_features, blobs.eval_labels)
        a = train_deterministic(Coalition(tuple(range(blobs.n_train))), blobs, det_config)
        b = train_deterministic(Coalition(tuple(range(2 * blobs.n_train))), doubled, det_config)
        assert np.allclose(a.theta, b.theta, atol=1e-9)

    def test_wrong_regime(self, blobs, sgd_config):
        with pytest.raises(ConfigError):
            train_deterministic(Coalition(()), blobs, sgd_config)

    def test_multiclass(self):
        rng = np.random.default_rng(0)
        y = np.arange(60) % 3
        X = rng.standard_normal((60, 2)) + np.array([[0, 0], [4, 0], [0, 4]])[y]
        d = tiny(X, y)
        m = train_deterministic(Coalition(tuple(range(60))), d, make_config(d, lam=0.01))
        assert m.out == 3 and test_loss(m, d) < 0.5


class TestSGD:
    def test_zero_steps(self, blobs, sgd_config):
        cfg = TrainConfig(CONVEX_SGD, sgd_config.constants, epochs=0)
        m = sgd_train([0, 1, 2], blobs, cfg)
        assert not np.any(m.theta)

    def test_empty_sequence(self, blobs, mlp_config, seeds):
        assert sgd_train([], blobs, mlp_config, seeds) == initial_params(blobs, mlp_config, seeds)

    def test_deterministic(self, blobs, mlp_config, seeds):
        a = sgd_train([3, 1, 2], blobs, mlp_config, seeds)
        b = sgd_train([3, 1, 2], blobs, mlp_config, seeds)
        assert np.array_equal(a.theta, b.theta)

    def test_order_matters(self, blobs, sgd_config):
        a = sgd_train([0, 1, 2, 3], blobs, sgd_config)
        b = sgd_train([3, 2, 1, 0], blobs, sgd_config)
        assert not np.array_equal(a.theta, b.theta)

    def test_single_point_monotone(self):
        d = Dataset(np.array([[1.0], [-1.0]]), np.array([1, 0]), np.array([[1.0]]), np.array([1]))
        cfg = make_config(d, CONVEX_SGD, lam=1e-3, T=1)
        losses = []
        theta = np.zeros(2)
        for _ in range(20):
            theta = K.sgd(theta, d.features[:1], d.labels[:1], 1, K.ARCH_LINEAR, 1, 0, 1, 0, 1e-3,
                          K.SCHEDULE_CONSTANT, 1.0 / cfg.constants.beta, 1.0)
            losses.append(test_loss(ModelParams("logistic", theta, 1, 1), d))
        assert all(b < a for a, b in zip(losses, losses[1:]))

    def test_constant_step_validated(self, blobs, sgd_config):
        with pytest.raises(ConfigError):
            TrainConfig(CONVEX_SGD, sgd_config.constants, schedule="constant", learning_rate=3 / sgd_config.constants.beta)

    def test_nonconvex_needs_decay(self, blobs, mlp_config):
        with pytest.raises(ConfigError):
            TrainConfig(NONCONVEX_SGD, mlp_config.constants, schedule="constant", architecture="mlp")

    def test_mlp_width_guard(self, mlp_config):
        with pytest.raises(ConfigError):
            TrainConfig(NONCONVEX_SGD, mlp_config.constants, architecture="mlp", hidden=64)

    def test_params_json_roundtrip(self, blobs, mlp_config, seeds):
        m = sgd_train([0, 1, 2], blobs, mlp_config, seeds)
        assert ModelParams.from_json(m.to_json()) == m

    def test_warm_start(self, blobs, sgd_config):
        warm = sgd_train([5, 6, 7], blobs, sgd_config)
        cfg = TrainConfig(CONVEX_SGD, sgd_config.constants, warm_start=warm)
        assert sgd_train([], blobs, cfg) == warm


class TestLossAndUtility:
    def test_zero_model_ln2(self, blobs):
        m = ModelParams("logistic", np.zeros(blobs.dim + 1), blobs.dim, 1)
        assert test_loss(m, blobs) == pytest.approx(math.log(2))

    def test_saturated_separator(self):
        d = tiny([[1.0], [-1.0]], [1, 0])
        m = ModelParams("logistic", np.array([50.0, 0.0]), 1, 1)
        assert test_loss(m, d) <= 0.01

    @given(st.floats(-50, 50), st.floats(-50, 50))
    def test_clamped(self, w, b):
        d = tiny([[1.0], [-1.0], [0.5]], [1, 0, 0])
        loss = test_loss(ModelParams("logistic", np.array([w, b]), 1, 1), d, cap=2.0)
        assert 0.0 <= loss <= 2.0

    def test_utility_of_empty(self, blobs, det_config, seeds):
        assert utility(Coalition(()), blobs, det_config, seeds) == pytest.approx(-math.log(2))

    @pytest.mark.parametrize("fixture", ["det_config", "sgd_config", "mlp_config"])
    def test_utility_range(self, request, blobs, seeds, fixture):
        cfg = request.getfixturevalue(fixture)
        for k in (0, 1, 5, 19):
            v = utility(sample_coalition(seeds.child("u", k), 20, k, None), blobs, cfg, seeds)
            assert -cfg.constants.G <= v <= 0

    def test_more_data_helps(self):
        d = synth_dataset("gaussian-blobs", 60, 400, 3, 3.0, SeedTree(3))
        cfg = make_config(d)
        root = SeedTree(4)

        def mean_utility(k):
            return np.mean([utility(sample_coalition(root.child(str(k), j), 60, k, None), d, cfg, root)
                            for j in range(50)])

        assert mean_utility(20) >= mean_utility(2)


class TestMarginals:
    def test_duplicate_member(self, blobs, det_config, sgd_config, seeds):
        for cfg in (det_config, sgd_config):
            with pytest.raises(DuplicateMemberError):
                marginal_contribution(1, Coalition.of([1, 2]), blobs, cfg, seeds)

    def test_sgd_marginal_uses_shared_order(self, blobs, sgd_config, seeds):
        game = ModelGame(blobs, sgd_config, seeds)
        S = Coalition.of([2, 5, 9])
        v = game.marginal(4, S)
        assert v == game.marginal(4, S)
        # the without-i run is v(S) exactly
        cache = UtilityCache()
        game.marginal(4, S, cache)
        assert cache.get(("v", S.members), lambda: None) == game.value(S)

    def test_shift_invariance_of_marginals(self, blobs, det_config, seeds):
        game = ModelGame(blobs, det_config, seeds)
        S = Coalition.of([1, 3])
        direct = game.value(S.with_member(0)) - game.value(S)
        assert game.marginal(0, S) == direct

    def test_stability_envelope_small(self, blobs, det_config, seeds):
        game = ModelGame(blobs, det_config, seeds)
        L, lam = det_config.constants.L, det_config.constants.lambda_
        for j in range(60):
            k = 1 + j % 19
            i = j % 20
            S = sample_coalition(seeds.child("e", j), 20, k, i)
            assert abs(game.marginal(i, S)) <= L ** 2 / (2 * lam * k)

    def test_zero_information_point(self):
        base = synth_dataset("gaussian-blobs", 40, 400, 3, 1.0, SeedTree(8))
        X = np.array(base.features)
        X[0] = X.mean(axis=0)
        d = Dataset(X, base.labels, base.eval_features, base.eval_labels)
        game = ModelGame(d, make_config(d), SeedTree(0))
        root = SeedTree(9)
        zero, others = [], []
        for t in range(100):
            S = sample_coalition(root.child("s", t), 40, 10, 0)
            zero.append(abs(game.marginal(0, S)))
            others.append(np.median([abs(game.marginal(q, S)) for q in range(1, 40) if q not in S]))
        assert np.mean(zero) < np.mean(others)


class TestExpectedMarginal:
    def test_h1_is_one_fixed_subsequence_marginal(self, blobs, sgd_config, seeds):
        game = ModelGame(blobs, sgd_config, seeds)
        S = Coalition.of([1, 2, 3])
        from deltashap.core import coalition_key, sample_permutation

        seq = sample_permutation(seeds.child("expected", coalition_key(S)).child("point", 0).child("perm", 0),
                                 S.with_member(0))
        without = tuple(p for p in seq if p != 0)
        want = test_loss(sgd_train(without, blobs, sgd_config, seeds), blobs) - \
            test_loss(sgd_train(seq, blobs, sgd_config, seeds), blobs)
        assert expected_marginal(0, S, blobs, sgd_config, 1, seeds) == pytest.approx(want, abs=1e-15)

    def test_deterministic_regime_ignores_h(self, blobs, det_config, seeds):
        S = Coalition.of([1, 2])
        vals = {expected_marginal(0, S, blobs, det_config, h, seeds) for h in (1, 4, 9)}
        assert len(vals) == 1

    def test_variance_shrinks(self):
        d = synth_dataset("gaussian-blobs", 12, 60, 2, 1.0, SeedTree(5))
        cfg = make_config(d, CONVEX_SGD, T=12, lam=0.01)
        S = Coalition.of([1, 2, 3, 4, 5])

        def draws(h):
            return np.array([ModelGame(d, cfg, SeedTree(1000 + t)).expected_marginal(0, S, h) for t in range(200)])

        v1, v16 = draws(1).var(ddof=1), draws(16).var(ddof=1)
        assert v16 <= v1 / 8 + 1e-6

    def test_h_validated(self, blobs, sgd_config, seeds):
        with pytest.raises(ConfigError):
            ModelGame(blobs, sgd_config, seeds).expected_marginal(0, Coalition(()), 0)


def test_default_G():
    assert DEFAULT_G == pytest.approx(10 * math.log(2))
