import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from deltashap.core import Coalition, SeedTree, synth_dataset
from deltashap.errors import ConfigError, EnumerationLimitError, InvalidBandError
from deltashap.estimators import (
    EXPECTED,
    AccuracyTarget,
    SemiValueSpec,
    ValuationResult,
    band_presets,
    delta_shapley,
    exact_layer_contributions,
    exact_shapley,
    h_hat,
    h_permutations,
    layer_estimate,
    mk_bounded,
    mk_convex_sgd,
    mk_nonconvex_sgd,
    mk_strongly_convex,
    monte_carlo_shapley,
    relative_deviation,
    semivalue_weight_check,
    stratified_shapley,
    theoretical_plan,
)
from deltashap.games import AdditiveGame, ConstantMarginalGame, TableGame, UtilityCache, WeightedVotingGame
from deltashap.models import CONVEX_SGD, NONCONVEX_SGD, STRONGLY_CONVEX, LossConstants, ModelGame, make_config

positive = st.floats(0.05, 20, allow_nan=False)


def consts(L=1.0, beta=1.0, lam=1.0, G=1.0, c=1.0, T=1, C=1.0):
    return LossConstants(L=L, beta=beta, lambda_=lam, G=G, c=c, T=T, C=C)


class TestTargets:
    def test_validation(self):
        with pytest.raises(ConfigError):
            AccuracyTarget(0, 0.1)
        with pytest.raises(ConfigError):
            AccuracyTarget(0.1, 1.0)

    def test_halved(self):
        assert AccuracyTarget(0.2, 0.1).halved() == AccuracyTarget(0.1, 0.05)


class TestSampleSizes:
    def test_strongly_convex_spots(self):
        t = AccuracyTarget(0.1, 0.1)
        assert mk_strongly_convex(10, 100, t, consts()) == 1
        assert mk_strongly_convex(1, 100, t, consts()) == 96
        assert mk_strongly_convex(0, 100, t, consts()) == 0

    def test_convex_sgd_spot(self):
        assert mk_convex_sgd(10, 50, AccuracyTarget(0.5, 0.1), consts(T=10)) == 1124
        assert mk_convex_sgd(0, 50, AccuracyTarget(0.5, 0.1), consts(T=10)) == 0

    def test_convex_sgd_huge_a(self):
        assert mk_convex_sgd(3, 50, AccuracyTarget(1e9, 0.1), consts(T=10)) == 1

    def test_h_hat_spot(self):
        assert h_hat(5, consts(T=16)) == pytest.approx(2 * math.sqrt(2), rel=1e-12)

    def test_nonconvex_spot(self):
        assert mk_nonconvex_sgd(5, 20, AccuracyTarget(1.0, 0.1), consts(T=16)) == 276
        assert mk_nonconvex_sgd(1, 20, AccuracyTarget(1.0, 0.1), consts(T=16)) == 0
        assert mk_nonconvex_sgd(0, 20, AccuracyTarget(1.0, 0.1), consts(T=16)) == 0

    def test_h_permutations_spot(self):
        assert h_permutations(0.1, consts(), AccuracyTarget(0.5, 0.1), 10, 10) == 74

    def test_h_permutations_small_epsilon_limit(self):
        t = AccuracyTarget(0.5, 0.1)
        limit = 8 * 1.0 / (3 * 0.5) * math.log(4 * 10 * 10 / 0.1)
        assert h_permutations(1e-12, consts(), t, 10, 10) == math.ceil(limit - 1e-9)

    def test_h_permutations_increasing_in_mk(self):
        t = AccuracyTarget(0.05, 0.1)
        hs = [h_permutations(0.3, consts(), t, 10, m) for m in (1, 10, 100, 10_000)]
        assert hs == sorted(hs) and hs[0] < hs[-1]

    def test_bounded(self):
        assert mk_bounded(1.0, 1, AccuracyTarget(1.0, 0.5)) == math.ceil(0.5 * math.log(4))

    @given(positive, positive, positive, positive, positive, st.integers(1, 500), positive,
           st.floats(0.01, 5), st.floats(0.01, 0.99), st.integers(3, 200))
    def test_monotone_in_k(self, L, beta, lam, G, c, T, C, a, b, n):
        k_const = consts(L, beta, lam, G, c, T, C)
        t = AccuracyTarget(a, b)
        for fn in (mk_strongly_convex, mk_convex_sgd, mk_nonconvex_sgd):
            ms = [fn(k, n, t, k_const) for k in range(2, n)]
            assert all(x >= y for x, y in zip(ms, ms[1:]))
        hs = [h_hat(k, k_const) for k in range(2, n)]
        assert all(x > y for x, y in zip(hs, hs[1:]))

    def test_mk_convex_strict_halving(self):
        t = AccuracyTarget(0.01, 0.1)
        assert mk_convex_sgd(4, 50, t, consts(T=100)) > mk_convex_sgd(8, 50, t, consts(T=100))

    def test_plan_expected_mode(self):
        c = consts(T=10)
        mks, hs = theoretical_plan(10, AccuracyTarget(0.5, 0.1), CONVEX_SGD, c, EXPECTED)
        assert mks[0] == 0 and hs[0] == 0
        assert mks[3] == mk_convex_sgd(3, 10, AccuracyTarget(0.25, 0.05), c)
        assert hs[3] == h_permutations(4 * 10 / 3, c, AccuracyTarget(0.5, 0.1), 10, mks[3])

    def test_plan_rejects_expected_deterministic(self):
        with pytest.raises(ConfigError):
            theoretical_plan(10, AccuracyTarget(0.5, 0.1), STRONGLY_CONVEX, consts(), EXPECTED)


class TestExact:
    def test_voting(self):
        assert np.allclose(exact_shapley(WeightedVotingGame([3, 2, 1], 4)), [2 / 3, 1 / 6, 1 / 6], atol=1e-12)

    def test_two_player_symmetric(self):
        table = [0.0, 0.3, 0.3, 1.1]
        assert np.allclose(exact_shapley(TableGame(table)), [0.55, 0.55])

    def test_dummy(self):
        g = ConstantMarginalGame(TableGame.random(5, np.random.default_rng(0)), dummy=2, c=0.37)
        assert exact_shapley(g)[2] == pytest.approx(0.37, abs=1e-12)

    def test_callable(self):
        assert np.allclose(exact_shapley(lambda S: float(len(S) ** 2), 4), [4.0] * 4)

    def test_guard(self):
        with pytest.raises(EnumerationLimitError):
            exact_shapley(AdditiveGame(np.ones(21)))

    def test_layers_average_to_shapley(self):
        g = TableGame.random(6, np.random.default_rng(3))
        assert np.allclose(exact_layer_contributions(g).mean(axis=1), exact_shapley(g), atol=1e-12)


class TestLayerEstimate:
    def test_additive(self, seeds):
        g = AdditiveGame([0.5, -1.0, 2.0, 0.25])
        for k in range(4):
            est = layer_estimate(g, 2, k, 7, seeds)
            assert est.mean_contribution == pytest.approx(2.0) and est.contribution_variance == pytest.approx(0.0)

    def test_matches_exact_layer(self):
        g = TableGame.random(8, np.random.default_rng(2))
        exact = exact_layer_contributions(g)
        for k in (1, 3, 6):
            m = 10 * math.comb(7, k)
            est = layer_estimate(g, 0, k, m, SeedTree(k))
            se = math.sqrt(est.contribution_variance / m)
            assert abs(est.mean_contribution - exact[0, k]) <= 3 * se

    def test_unbiased_over_seeds(self):
        g = TableGame.random(6, np.random.default_rng(4))
        truth = exact_layer_contributions(g)[1, 2]
        means = np.array([layer_estimate(g, 1, 2, 3, SeedTree(s)).mean_contribution for s in range(1000)])
        assert abs(means.mean() - truth) <= 3 * means.std(ddof=1) / math.sqrt(len(means))

    def test_exhaustive_counts(self, seeds):
        g = TableGame.random(6, np.random.default_rng(0))
        est = layer_estimate(g, 0, 2, 1, seeds, exhaustive=True)
        assert est.samples_used == math.comb(5, 2)

    def test_invalid(self, seeds):
        g = AdditiveGame([1.0, 2.0])
        with pytest.raises(ConfigError):
            layer_estimate(g, 0, 2, 1, seeds)
        with pytest.raises(ConfigError):
            layer_estimate(g, 0, 1, 0, seeds)


class TestStratified:
    @given(st.integers(0, 10_000), st.integers(2, 7))
    def test_exhaustive_equals_exact(self, seed, n):
        g = TableGame.random(n, np.random.default_rng(seed))
        res = stratified_shapley(g, seeds=SeedTree(seed), sample_sizes="exhaustive")
        assert np.allclose(res.values, exact_shapley(g), atol=1e-9, rtol=0)

    def test_additive_with_skipped_layer(self, seeds):
        g = AdditiveGame([1.0, 2.0, 3.0, 4.0])
        res = stratified_shapley(g, seeds=seeds, sample_sizes=[0, 2, 2, 2])
        assert np.allclose(res.values, np.array([1.0, 2.0, 3.0, 4.0]) * 3 / 4)

    def test_needs_constants(self, seeds):
        with pytest.raises(ConfigError, match="regime constants missing"):
            stratified_shapley(AdditiveGame([1.0, 2.0]), target=AccuracyTarget(0.1, 0.1), seeds=seeds)

    def test_dummy_zero(self, seeds):
        g = ConstantMarginalGame(TableGame.random(5, np.random.default_rng(1)), dummy=4, c=0.0)
        res = stratified_shapley(g, seeds=seeds, sample_sizes=[3] * 5)
        assert res.value_of(4) == 0.0

    def test_voting_within_target(self):
        g = WeightedVotingGame([3, 2, 2, 1, 0, 0, 0, 0], 5)
        exact = exact_shapley(g)
        t = AccuracyTarget(0.05, 0.1)
        # marginals lie in [0, 1]: Hoeffding count per layer at risk b/n
        m = mk_bounded(1.0, 8, t)
        points = [0, 3]
        hits = sum(np.all(np.abs(stratified_shapley(g, points, seeds=SeedTree(s), sample_sizes=[m] * 8).values
                                 - exact[points]) <= t.a)
                   for s in range(50))
        assert hits >= 45

    def test_budget_accounting(self, blobs, det_config, seeds):
        game = ModelGame(blobs.restrict(range(8)), det_config, seeds)
        res = stratified_shapley(game, points=[0, 3], seeds=seeds, sample_sizes=[0, 2, 1, 1, 0, 0, 0, 3],
                                 use_cache=False)
        assert res.trainings_performed == 2 * (2 + 1 + 1 + 3) * game.evaluations_per_marginal()

    def test_cache_is_invisible(self, blobs, sgd_config, seeds):
        game = ModelGame(blobs.restrict(range(8)), sgd_config, seeds)
        a = stratified_shapley(game, seeds=seeds, sample_sizes=[1] + [4] * 7, use_cache=True)
        b = stratified_shapley(game, seeds=seeds, sample_sizes=[1] + [4] * 7, use_cache=False)
        assert np.array_equal(a.values, b.values)
        assert a.trainings_performed + a.cache_hits == b.trainings_performed

    def test_theory_sizes_capped(self, blobs, det_config, seeds):
        game = ModelGame(blobs.restrict(range(6)), det_config, seeds)
        res = stratified_shapley(game, target=AccuracyTarget(0.5, 0.1), seeds=seeds, mk_cap=3)
        assert res.meta["sample_sizes"][0] == 0
        assert all(m <= 3 for m in res.meta["sample_sizes"])
        assert all(le.theoretical_samples >= le.samples_used for le in res.layers)

    def test_expected_mode_nonconvex(self, blobs, mlp_config, seeds):
        game = ModelGame(blobs.restrict(range(5)), mlp_config, seeds)
        res = stratified_shapley(game, points=[0], target=AccuracyTarget(2.0, 0.5), seeds=seeds, mk_cap=1,
                                 mode=EXPECTED, h_cap=2)
        assert res.meta["skipped_layers"] == [0, 1]
        assert res.meta["h"][2] == 2 and np.isfinite(res.values[0])

    def test_workers_do_not_change_values(self, blobs, det_config, seeds):
        game = ModelGame(blobs.restrict(range(6)), det_config, seeds)
        a = stratified_shapley(game, seeds=seeds, sample_sizes=[2] * 6, workers=1)
        b = stratified_shapley(game, seeds=seeds, sample_sizes=[2] * 6, workers=3)
        assert np.array_equal(a.values, b.values)

    def test_shift_invariance(self, seeds):
        g = TableGame.random(5, np.random.default_rng(6))
        shifted = TableGame(g.table + 3.0)
        a = stratified_shapley(g, seeds=seeds, sample_sizes=[2] * 5)
        b = stratified_shapley(shifted, seeds=seeds, sample_sizes=[2] * 5)
        assert np.allclose(a.values, b.values, atol=1e-12)


class TestBands:
    @pytest.mark.parametrize("n, preset, band", [(100, "mid", (33, 67)), (100, "low", (20, 30)),
                                                  (50, "mid", (17, 33)), (4, "low", (1, 1)), (50, "low", (10, 15))])
    def test_presets(self, n, preset, band):
        spec = band_presets(n, preset)
        assert spec.band == band
        assert math.fsum(spec.p) == pytest.approx(1.0, abs=1e-12)

    def test_invalid_band(self):
        with pytest.raises(InvalidBandError):
            SemiValueSpec.banded(10, 0, 3)
        with pytest.raises(InvalidBandError):
            SemiValueSpec.banded(10, 5, 10)
        with pytest.raises(InvalidBandError):
            delta_shapley(AdditiveGame(np.ones(10)), spec=(4, 2), seeds=SeedTree(0))

    @pytest.mark.parametrize("n", [10, 50, 100])
    def test_weight_check(self, n):
        for spec in (SemiValueSpec.shapley(n), band_presets(n, "mid"), band_presets(n, "low")):
            ok, residual = semivalue_weight_check(spec)
            assert ok and residual < 1e-9

    def test_weight_check_fails_on_zero(self):
        ok, residual = semivalue_weight_check(SemiValueSpec(np.zeros(7)))
        assert not ok and residual == pytest.approx(7)


class TestDelta:
    def test_additive(self, seeds):
        g = AdditiveGame([0.1, 0.2, 0.3, 0.4, 0.5])
        res = delta_shapley(g, spec=(1, 3), seeds=seeds, budget=3)
        assert np.allclose(res.values, g.weights)

    def test_full_band_exhaustive_equals_exact_layers(self, seeds):
        g = TableGame.random(7, np.random.default_rng(9))
        res = delta_shapley(g, spec=(1, 6), seeds=seeds, budget="exhaustive")
        want = exact_layer_contributions(g)[:, 1:].mean(axis=1)
        assert np.allclose(res.values, want, atol=1e-12)

    def test_iterations_and_determinism(self, seeds):
        g = TableGame.random(6, np.random.default_rng(1))
        a = delta_shapley(g, spec=(2, 4), seeds=seeds, budget=40)
        b = delta_shapley(g, spec=(2, 4), seeds=seeds, budget=40, block=7)
        assert a.iterations == 40 and np.array_equal(a.values, b.values)

    def test_converges_to_band_average(self, seeds):
        g = TableGame.random(6, np.random.default_rng(2))
        res = delta_shapley(g, spec=(2, 3), seeds=seeds, budget=6000)
        want = exact_layer_contributions(g)[:, 2:4].mean(axis=1)
        assert np.allclose(res.values, want, atol=0.05)

    def test_convergence_stops(self, seeds):
        res = delta_shapley(AdditiveGame(np.arange(1.0, 6.0)), spec=(1, 3), seeds=seeds)
        assert res.converged and res.iterations == 101


class TestMonteCarlo:
    def test_additive(self, seeds):
        g = AdditiveGame([1.0, -2.0, 0.5])
        one = monte_carlo_shapley(g, seeds=seeds, budget=1)
        assert np.allclose(one.values, g.weights)
        conv = monte_carlo_shapley(g, seeds=seeds)
        assert conv.converged and conv.iterations == 101

    def test_voting_close_to_exact(self, seeds):
        g = WeightedVotingGame([3, 2, 2, 1, 0, 0, 0, 0], 5)
        res = monte_carlo_shapley(g, seeds=seeds, budget=5000)
        assert np.max(np.abs(res.values - exact_shapley(g))) <= 0.02

    def test_efficiency_trend(self, seeds):
        g = TableGame.random(6, np.random.default_rng(5))
        total = g.table[-1] - g.table[0]
        assert math.fsum(exact_shapley(g)) == pytest.approx(total, abs=1e-12)
        # every permutation telescopes, so the estimate sum is exact too
        assert math.fsum(monte_carlo_shapley(g, seeds=seeds, budget=20).values) == pytest.approx(total, abs=1e-12)

    def test_subset_points(self, seeds):
        g = AdditiveGame([1.0, 2.0, 3.0, 4.0])
        res = monte_carlo_shapley(g, points=[3, 1], seeds=seeds, budget=2)
        assert res.points == [3, 1] and np.allclose(res.values, [4.0, 2.0])

    def test_deterministic_training_count(self, blobs, det_config, seeds):
        game = ModelGame(blobs.restrict(range(8)), det_config, seeds)
        res = monte_carlo_shapley(game, seeds=seeds, budget=3)
        assert res.trainings_performed == 3 * 9

    def test_cap(self, seeds):
        g = TableGame.random(5, np.random.default_rng(0), low=-1e-3, high=1e-3)
        res = monte_carlo_shapley(g, seeds=seeds, tolerance=1e-12)
        assert res.iterations == 200 and res.converged is False


class TestRelativeDeviation:
    def test_floor(self):
        assert relative_deviation(np.array([0.0, 1.0]), np.array([5.0, 0.5])) == pytest.approx(0.25)

    def test_sign_insensitive(self):
        assert relative_deviation(np.array([-1.0]), np.array([-1.5])) == pytest.approx(0.5)


class TestResult:
    def test_roundtrip(self, seeds):
        res = stratified_shapley(AdditiveGame([1.0, 2.0, 3.0]), seeds=seeds, sample_sizes=[1, 1, 1])
        back = ValuationResult.from_dict(res.to_dict())
        assert np.array_equal(back.values, res.values) and back.layers == res.layers
