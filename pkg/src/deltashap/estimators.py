"""Value estimators.

Coalition sizes ("layers") are indexed by ``k = |S|`` in ``0 .. n-1``. The
Shapley value of point ``i`` is the plain average of its per-layer mean
marginal contributions::

    phi_i = (1/n) * sum_k phi_i^k,   phi_i^k = mean over |S| = k of v(S + i) - v(S)

The stratified estimator samples each ``phi_i^k`` independently with a
per-layer sample count ``m_k`` derived from the stability of the learner,
budgeting failure probability ``b/n`` per layer so the average meets an
overall ``(a, b)`` target.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import Coalition, LayerEstimate, SeedTree, sample_coalition, sample_permutation
from .errors import ConfigError, EnumerationLimitError, InvalidBandError
from .games import Game, UtilityCache
from .models import CONVEX_SGD, NONCONVEX_SGD, SGD_REGIMES, STRONGLY_CONVEX, LossConstants
from .parallel import WorkerPool

FIXED = "fixed-subsequence"
EXPECTED = "expected-utility"
MODES = (FIXED, EXPECTED)

EXACT_LIMIT = 20
RELATIVE_FLOOR = 1e-9
CONVERGENCE_LAG = 100


@dataclass(frozen=True)
class AccuracyTarget:
    """Estimate within ``a`` of the truth with probability at least ``1 - b``."""

    a: float
    b: float

    def __post_init__(self):
        if not self.a > 0:
            raise ConfigError(f"accuracy a must be > 0, got {self.a}")
        if not 0 < self.b < 1:
            raise ConfigError(f"failure probability b must be in (0, 1), got {self.b}")

    def halved(self) -> AccuracyTarget:
        return AccuracyTarget(self.a / 2, self.b / 2)


@dataclass(frozen=True, eq=False)
class SemiValueSpec:
    """Layer probabilities ``p[k]`` over coalition sizes ``0 .. n-1``."""

    p: np.ndarray
    band: tuple[int, int] | None = None

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        if p.ndim != 1 or np.any(p < 0):
            raise ConfigError("layer probabilities must be a non-negative vector")
        object.__setattr__(self, "p", p)

    @property
    def n(self) -> int:
        return len(self.p)

    @classmethod
    def shapley(cls, n: int) -> SemiValueSpec:
        return cls(np.full(n, 1.0 / n))

    @classmethod
    def banded(cls, n: int, lower: int, upper: int) -> SemiValueSpec:
        if not 1 <= lower <= upper <= n - 1:
            raise InvalidBandError(f"band ({lower}, {upper}) must satisfy 1 <= lower <= upper <= {n - 1}")
        p = np.zeros(n)
        p[lower: upper + 1] = 1.0 / (upper - lower + 1)
        return cls(p, (lower, upper))


# ---------------------------------------------------------------------------
# Sample sizes
# ---------------------------------------------------------------------------


def _ceil(x: float) -> int:
    # guard against 96.00000000000001-style rounding noise
    return max(1, math.ceil(x * (1 - 1e-12)))


def mk_bounded(spread: float, n: int, target: AccuracyTarget) -> int:
    """Hoeffding count for marginals confined to an interval of width ``spread``."""
    return _ceil(spread ** 2 / (2 * target.a ** 2) * math.log(2 * n / target.b))


def mk_strongly_convex(k: int, n: int, target: AccuracyTarget, consts: LossConstants) -> int:
    if k == 0:
        return 0
    gamma = consts.L ** 2 * consts.C ** 2 / (2 * consts.lambda_ * k)
    return mk_bounded(gamma, n, target)


def mk_convex_sgd(k: int, n: int, target: AccuracyTarget, consts: LossConstants) -> int:
    if k == 0:
        return 0
    L, beta, G, T, a = consts.L, consts.beta, consts.G, consts.T, target.a
    bound = (32 * T ** 2 * L ** 4 / (beta ** 2 * k ** 2) + 8 * G * T * L ** 2 / (k * beta) + 4 * G * a / 3) / a ** 2
    return _ceil(bound * math.log(2 * n / target.b))


def h_hat(k: int, consts: LossConstants) -> float:
    """Expected-stability bound of SGD on a non-convex loss for coalition size ``k >= 2``."""
    if k < 2:
        raise ConfigError("the non-convex stability bound needs k >= 2")
    q = consts.beta * consts.c
    return (consts.G ** (q / (q + 1)) * (2 * consts.c * consts.L ** 2) ** (1 / (q + 1))
            * consts.T ** (q / (q + 1)) * (1 + 1 / q) / (k - 1))


def mk_nonconvex_sgd(k: int, n: int, target: AccuracyTarget, consts: LossConstants) -> int:
    if k < 2:
        return 0
    H, G, a = h_hat(k, consts), consts.G, target.a
    return _ceil(2 * math.log(2 * n / target.b) * (2 * H ** 2 + 2 * G * H + 4 * G * a / 3) / a ** 2)


def stability_epsilon(k: int, regime: str, consts: LossConstants) -> float:
    """Expected uniform stability of SGD at coalition size ``k``.

    Convex: ``2 L^2 / k * sum(alpha_t)`` with ``alpha_t <= 2/beta``, i.e.
    ``4 T L^2 / (beta k)``. Non-convex: :func:`h_hat`.
    """
    if regime == CONVEX_SGD:
        return 4 * consts.T * consts.L ** 2 / (consts.beta * k)
    if regime == NONCONVEX_SGD:
        return h_hat(k, consts)
    raise ConfigError(f"no expected-stability bound for regime {regime!r}")


def h_permutations(epsilon: float, consts: LossConstants, target: AccuracyTarget, n: int, m_k: int) -> int:
    if not epsilon > 0:
        raise ConfigError("epsilon must be > 0")
    if m_k < 1:
        raise ConfigError("m_k must be >= 1")
    G, a = consts.G, target.a
    return _ceil(8 * (epsilon ** 2 + epsilon * G + G * a / 3) / a ** 2 * math.log(4 * n * m_k / target.b))


_MK_RULES: dict[str, Callable[[int, int, AccuracyTarget, LossConstants], int]] = {
    STRONGLY_CONVEX: mk_strongly_convex,
    CONVEX_SGD: mk_convex_sgd,
    NONCONVEX_SGD: mk_nonconvex_sgd,
}


def theoretical_plan(n: int, target: AccuracyTarget, regime: str, consts: LossConstants,
                     mode: str = FIXED) -> tuple[list[int], list[int]]:
    """Uncapped ``(m_k, h_k)`` for every layer ``k = 0 .. n-1``.

    In expected-utility mode the coalition counts are sized for ``(a/2, b/2)``
    and each coalition is averaged over ``h_k`` orderings so that the
    combined estimate meets ``(a, b/n)`` per layer. Skipped layers get 0.
    """
    if regime not in _MK_RULES:
        raise ConfigError(f"unknown regime {regime!r}")
    if mode == EXPECTED and regime not in SGD_REGIMES:
        raise ConfigError("expected-utility mode requires an SGD regime")
    rule = _MK_RULES[regime]
    inner = target.halved() if mode == EXPECTED else target
    mks = [rule(k, n, inner, consts) for k in range(n)]
    if mode != EXPECTED:
        return mks, [1 if m else 0 for m in mks]
    hs = [h_permutations(stability_epsilon(k, regime, consts), consts, target, n, m) if m else 0
          for k, m in enumerate(mks)]
    return mks, hs


# ---------------------------------------------------------------------------
# Results
# ---------------------------------------------------------------------------


@dataclass
class ValuationResult:
    method: str
    points: list[int]
    values: np.ndarray
    seed: int
    layers: list[LayerEstimate] = field(default_factory=list)
    trainings_performed: int = 0
    cache_hits: int = 0
    wall_time: float = 0.0
    iterations: int = 0
    converged: bool | None = None
    trace: list[tuple[int, float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def value_of(self, point: int) -> float:
        return float(self.values[self.points.index(point)])

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "points": list(self.points),
            "values": [float(v) for v in self.values],
            "trainings_performed": self.trainings_performed,
            "cache_hits": self.cache_hits,
            "wall_time": self.wall_time,
            "iterations": self.iterations,
            "converged": self.converged,
            "trace": [[t, d] for t, d in self.trace],
            "layers": [le.to_dict() for le in self.layers],
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ValuationResult:
        return cls(
            method=d["method"], points=list(d["points"]), values=np.asarray(d["values"], dtype=float),
            seed=d["seed"], layers=[LayerEstimate.from_dict(x) for x in d.get("layers", [])],
            trainings_performed=d.get("trainings_performed", 0), cache_hits=d.get("cache_hits", 0),
            wall_time=d.get("wall_time", 0.0), iterations=d.get("iterations", 0),
            converged=d.get("converged"), trace=[tuple(x) for x in d.get("trace", [])],
            meta=d.get("meta", {}),
        )


def _resolve_points(game: Game, points: Sequence[int] | None) -> list[int]:
    if points is None:
        return list(range(game.n))
    pts = [int(p) for p in points]
    if not pts:
        raise ConfigError("no points to evaluate")
    if len(set(pts)) != len(pts) or min(pts) < 0 or max(pts) >= game.n:
        raise ConfigError(f"points must be distinct indices in [0, {game.n})")
    return pts


def _marginal(game: Game, i: int, coalition: Coalition, mode: str, h: int, cache: UtilityCache) -> float:
    if mode == EXPECTED:
        return game.expected_marginal(i, coalition, h, cache)
    return game.marginal(i, coalition, cache)


def _mean_var(xs: Sequence[float]) -> tuple[float, float]:
    m = len(xs)
    mean = math.fsum(xs) / m
    if m < 2:
        return mean, 0.0
    return mean, math.fsum((x - mean) ** 2 for x in xs) / (m - 1)


# ---------------------------------------------------------------------------
# Layer estimates and the stratified estimator
# ---------------------------------------------------------------------------


def _layer_marginals(game, i, k, m_k, seeds, mode, h, cache, exhaustive):
    if exhaustive:
        others = [j for j in range(game.n) if j != i]
        coalitions = (Coalition(c) for c in itertools.combinations(others, k))
    else:
        coalitions = (sample_coalition(seeds.child("draw", j), game.n, k, i) for j in range(m_k))
    return [_marginal(game, i, c, mode, h, cache) for c in coalitions]


def layer_estimate(game: Game, i: int, k: int, m_k: int, seeds: SeedTree, mode: str = FIXED, h: int = 1,
                   cache: UtilityCache | None = None, exhaustive: bool = False) -> LayerEstimate:
    """Mean marginal contribution of ``i`` over ``m_k`` random size-``k`` coalitions.

    Coalitions are drawn independently (with replacement across draws).
    With ``exhaustive=True`` every size-``k`` coalition is visited once and
    ``m_k`` is ignored.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    if not exhaustive and m_k < 1:
        raise ConfigError("m_k must be >= 1")
    if not 0 <= k <= game.n - 1:
        raise ConfigError(f"layer k={k} outside [0, {game.n - 1}]")
    cache = cache if cache is not None else UtilityCache()
    before = cache.misses
    xs = _layer_marginals(game, i, k, m_k, seeds, mode, h, cache, exhaustive)
    mean, var = _mean_var(xs)
    return LayerEstimate(i, k, mean, len(xs), var, evaluations=cache.misses - before)


def _layer_task(game, payload):
    i, k, m_k, theory, seeds, mode, h, exhaustive, use_cache = payload
    cache = UtilityCache(enabled=use_cache)
    est = layer_estimate(game, i, k, m_k, seeds, mode, h, cache, exhaustive)
    est = LayerEstimate(est.point, est.layer, est.mean_contribution, est.samples_used,
                        est.contribution_variance, theory, est.evaluations)
    return est, cache.hits


def stratified_shapley(
    game: Game,
    points: Sequence[int] | None = None,
    target: AccuracyTarget | None = None,
    *,
    seeds: SeedTree,
    sample_sizes: Sequence[int] | str | None = None,
    mk_cap: int | None = None,
    mode: str = FIXED,
    h: int | None = None,
    h_cap: int | None = None,
    workers: int = 1,
    use_cache: bool = True,
) -> ValuationResult:
    """Layer-stratified Shapley estimate ``(1/n) * sum_k phi_hat_i^k``.

    ``sample_sizes`` selects the per-layer counts: ``None`` derives them from
    the game's regime and loss constants for ``target`` (capped at
    ``mk_cap``), ``"exhaustive"`` enumerates every coalition of every layer,
    and a sequence gives ``m_k`` for ``k = 0 .. n-1`` directly. Layers with
    ``m_k = 0`` are skipped and contribute 0; the divisor stays ``n``.
    """
    if mode not in MODES:
        raise ConfigError(f"unknown mode {mode!r}")
    started = time.perf_counter()
    n = game.n
    pts = _resolve_points(game, points)
    exhaustive = isinstance(sample_sizes, str)
    if exhaustive and sample_sizes != "exhaustive":
        raise ConfigError(f"unknown sample_sizes {sample_sizes!r}")

    hs = [h or 1] * n
    theory: list[int | None] = [None] * n
    if exhaustive:
        mks = [1] * n
    elif sample_sizes is None:
        if game.regime is None or game.constants is None:
            raise ConfigError("regime constants missing: pass sample_sizes or use a model-backed game")
        if target is None:
            raise ConfigError("an accuracy target is required for theory-derived sample sizes")
        theory, theory_h = theoretical_plan(n, target, game.regime, game.constants, mode)
        mks = [min(m, mk_cap) if mk_cap else m for m in theory]
        if mode == EXPECTED and h is None:
            hs = [min(x, h_cap) if h_cap else x for x in theory_h]
    else:
        mks = [int(m) for m in sample_sizes]
        if len(mks) != n or min(mks) < 0:
            raise ConfigError(f"sample_sizes must list {n} non-negative counts")
    if mode == FIXED:
        hs = [1] * n

    tasks = [(i, k, mks[k], theory[k], seeds.child("point", i).child("layer", k), mode, max(hs[k], 1),
              exhaustive, use_cache)
             for i in pts for k in range(n) if mks[k] > 0]
    with WorkerPool(game, workers) as pool:
        out = pool.map(_layer_task, tasks)

    by_point: dict[int, list[float]] = {i: [] for i in pts}
    layers = []
    hits = 0
    for est, task_hits in out:
        by_point[est.point].append(est.mean_contribution)
        layers.append(est)
        hits += task_hits
    values = np.array([math.fsum(by_point[i]) / n for i in pts])
    return ValuationResult(
        method="stratified", points=pts, values=values, seed=seeds.master_seed, layers=layers,
        trainings_performed=sum(le.evaluations for le in layers), cache_hits=hits,
        wall_time=time.perf_counter() - started, iterations=1,
        meta={"mode": mode, "sample_sizes": "exhaustive" if exhaustive else mks, "h": hs,
              "theoretical_m_k": theory, "skipped_layers": [k for k in range(n) if mks[k] == 0],
              "target": None if target is None else {"a": target.a, "b": target.b}},
    )


# ---------------------------------------------------------------------------
# Iterative estimators: delta-Shapley and Monte Carlo permutations
# ---------------------------------------------------------------------------


def default_cap(n: int) -> int:
    """Iteration cap when none is given: 25 per point, never below two lags."""
    return max(25 * n, 2 * CONVERGENCE_LAG)


def relative_deviation(current: np.ndarray, earlier: np.ndarray) -> float:
    """Mean over points of ``|current - earlier| / |current|``; near-zero points count 0."""
    cur = np.asarray(current, dtype=float)
    mag = np.abs(cur)
    ok = mag >= RELATIVE_FLOOR
    ratios = np.zeros_like(cur)
    ratios[ok] = np.abs(cur[ok] - np.asarray(earlier, dtype=float)[ok]) / mag[ok]
    return float(ratios.mean())


class _RunningMean:
    """Per-point running means with the lagged convergence test."""

    def __init__(self, n_points: int, tolerance: float):
        self.tolerance = tolerance
        self.rows: list[np.ndarray] = []
        self.sums = np.zeros(n_points)
        self.history: list[np.ndarray] = []
        self.trace: list[tuple[int, float]] = []

    def push(self, row: np.ndarray) -> bool:
        self.rows.append(row)
        self.sums = self.sums + row
        t = len(self.rows)
        self.history.append(self.sums / t)
        if t - CONVERGENCE_LAG < 1:
            return False
        dev = relative_deviation(self.history[-1], self.history[-1 - CONVERGENCE_LAG])
        self.trace.append((t, dev))
        return dev < self.tolerance

    def final(self) -> np.ndarray:
        table = np.vstack(self.rows)
        return np.array([math.fsum(col) / table.shape[0] for col in table.T])


def _delta_task(game, payload):
    t, k, pts, seeds, mode, h, use_cache = payload
    cache = UtilityCache(enabled=use_cache)
    node = seeds.child("iter", t)
    row = [_marginal(game, i, sample_coalition(node.child("point", i), game.n, k, i), mode, h, cache)
           for i in pts]
    return np.array(row), cache.misses, cache.hits


def band_presets(n: int, preset: str) -> SemiValueSpec:
    """Uniform band over coalition sizes: ``mid`` = [n/3, 2n/3], ``low`` = [2n/10, 3n/10].

    Bounds are rounded half-up and clamped to ``[1, n-1]``.
    """
    if n < 4:
        raise ConfigError(f"band presets need n >= 4, got {n}")
    fractions = {"mid": (1 / 3, 2 / 3), "low": (2 / 10, 3 / 10)}
    if preset not in fractions:
        raise ConfigError(f"unknown band preset {preset!r}; expected 'mid' or 'low'")
    lo_f, hi_f = fractions[preset]
    lo = min(max(math.floor(n * lo_f + 0.5), 1), n - 1)
    hi = min(max(math.floor(n * hi_f + 0.5), 1), n - 1)
    return SemiValueSpec.banded(n, lo, max(lo, hi))


def delta_shapley(
    game: Game,
    points: Sequence[int] | None = None,
    spec: SemiValueSpec | tuple[int, int] | None = None,
    *,
    seeds: SeedTree,
    budget: int | str = "convergence",
    max_iter: int | None = None,
    tolerance: float = 0.05,
    mode: str = FIXED,
    h: int = 1,
    workers: int = 1,
    block: int = 25,
    use_cache: bool = True,
) -> ValuationResult:
    """Banded semi-value: average marginal contribution over a band of coalition sizes.

    Each iteration draws one size ``k`` uniformly from the band and one
    size-``k`` coalition per point. ``budget`` is an iteration count,
    ``"convergence"`` (stop when the lagged relative deviation drops below
    ``tolerance``, or at ``max_iter``) or ``"exhaustive"`` (exact layer
    averages weighted by the band probabilities).
    """
    started = time.perf_counter()
    n = game.n
    pts = _resolve_points(game, points)
    if spec is None:
        spec = band_presets(n, "mid")
    elif isinstance(spec, tuple):
        spec = SemiValueSpec.banded(n, *spec)
    if spec.band is None:
        raise InvalidBandError("delta_shapley needs a banded spec")
    lo, hi = spec.band
    if not 1 <= lo <= hi <= n - 1:
        raise InvalidBandError(f"band ({lo}, {hi}) must satisfy 1 <= lower <= upper <= {n - 1}")
    meta = {"band": [lo, hi], "mode": mode, "h": h, "budget": budget, "tolerance": tolerance}

    if budget == "exhaustive":
        layers = []
        with WorkerPool(game, workers) as pool:
            tasks = [(i, k, 1, None, seeds, mode, h, True, use_cache) for i in pts for k in range(lo, hi + 1)]
            out = pool.map(_layer_task, tasks)
        per_point: dict[int, list[float]] = {i: [] for i in pts}
        hits = 0
        for est, task_hits in out:
            per_point[est.point].append(spec.p[est.layer] * est.mean_contribution)
            layers.append(est)
            hits += task_hits
        values = np.array([math.fsum(per_point[i]) for i in pts])
        return ValuationResult("delta", pts, values, seeds.master_seed, layers,
                               sum(le.evaluations for le in layers), hits,
                               time.perf_counter() - started, 1, True, meta=meta)

    if isinstance(budget, str):
        if budget != "convergence":
            raise ConfigError(f"unknown budget {budget!r}")
        limit = max_iter if max_iter is not None else default_cap(n)
        check = True
    else:
        limit = int(budget)
        check = False
    if limit < 1:
        raise ConfigError("iteration budget must be >= 1")

    running = _RunningMean(len(pts), tolerance)
    evals = hits = 0
    converged = False
    t_next = 1
    with WorkerPool(game, workers) as pool:
        while t_next <= limit and not converged:
            ts = range(t_next, min(t_next + block, limit + 1))
            tasks = []
            for t in ts:
                k = lo + int(seeds.child("iter", t).child("layer").generator().integers(hi - lo + 1))
                tasks.append((t, k, pts, seeds, mode, h, use_cache))
            for row, misses, task_hits in pool.map(_delta_task, tasks):
                evals += misses
                hits += task_hits
                if not converged:
                    converged = running.push(row) and check
            t_next = ts[-1] + 1
    return ValuationResult(
        "delta", pts, running.final(), seeds.master_seed, [], evals, hits,
        time.perf_counter() - started, len(running.rows), converged if check else None,
        running.trace, meta=meta,
    )


def _mc_task(game, payload):
    t, pts, seeds, use_cache = payload
    cache = UtilityCache(enabled=use_cache)
    perm = sample_permutation(seeds.child("perm", t), range(game.n))
    wanted = set(pts)
    contrib = {}
    for pos, p in enumerate(perm):
        if p in wanted:
            contrib[p] = game.marginal(p, Coalition(tuple(sorted(perm[:pos]))), cache)
    return np.array([contrib[i] for i in pts]), cache.misses, cache.hits


def monte_carlo_shapley(
    game: Game,
    points: Sequence[int] | None = None,
    *,
    seeds: SeedTree,
    max_iter: int | None = None,
    tolerance: float = 0.05,
    budget: int | str = "convergence",
    workers: int = 1,
    block: int = 25,
    use_cache: bool = True,
) -> ValuationResult:
    """Permutation-sampling Shapley baseline.

    Each iteration samples a permutation of all points; an evaluated point's
    predecessors form its coalition. Only the evaluated points' marginals
    are computed. Within one permutation utilities are memoized, so a full
    evaluation under deterministic training costs ``n + 1`` trainings.
    """
    started = time.perf_counter()
    n = game.n
    pts = _resolve_points(game, points)
    if isinstance(budget, str):
        if budget != "convergence":
            raise ConfigError(f"unknown budget {budget!r}")
        limit = max_iter if max_iter is not None else default_cap(n)
        check = True
    else:
        limit, check = int(budget), False
    if limit < 1:
        raise ConfigError("iteration budget must be >= 1")

    running = _RunningMean(len(pts), tolerance)
    evals = hits = 0
    converged = False
    t_next = 1
    with WorkerPool(game, workers) as pool:
        while t_next <= limit and not converged:
            ts = range(t_next, min(t_next + block, limit + 1))
            for row, misses, task_hits in pool.map(_mc_task, [(t, pts, seeds, use_cache) for t in ts]):
                evals += misses
                hits += task_hits
                if not converged:
                    converged = running.push(row) and check
            t_next = ts[-1] + 1
    return ValuationResult(
        "mc", pts, running.final(), seeds.master_seed, [], evals, hits,
        time.perf_counter() - started, len(running.rows), converged if check else None,
        running.trace, meta={"max_iter": limit, "tolerance": tolerance},
    )


# ---------------------------------------------------------------------------
# Exact oracle and semi-value weights
# ---------------------------------------------------------------------------


def _utility_table(utility, n: int) -> np.ndarray:
    if n > EXACT_LIMIT:
        raise EnumerationLimitError(f"exact enumeration refused: n={n} exceeds the guard n <= {EXACT_LIMIT}")
    fn = utility.value if isinstance(utility, Game) else utility
    table = np.empty(1 << n)
    for mask in range(1 << n):
        table[mask] = fn(tuple(j for j in range(n) if mask >> j & 1))
    return table


def _popcounts(n: int) -> np.ndarray:
    masks = np.arange(1 << n)
    counts = np.zeros(1 << n, dtype=np.int64)
    for j in range(n):
        counts += (masks >> j) & 1
    return counts


def exact_shapley(utility: Game | Callable[[tuple[int, ...]], float], n: int | None = None) -> np.ndarray:
    """Shapley values by full enumeration of all ``2^(n-1)`` coalitions per point.

    Each marginal ``v(S + i) - v(S)`` is weighted ``|S|! (n-|S|-1)! / n!``.
    ``utility`` is a game or a callable on sorted index tuples.
    """
    if n is None:
        n = utility.n
    table = _utility_table(utility, n)
    size = _popcounts(n)
    weight = np.array([math.factorial(s) * math.factorial(n - s - 1) / math.factorial(n) for s in range(n)])
    masks = np.arange(1 << n)
    values = np.empty(n)
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        diffs = table[without | (1 << i)] - table[without]
        values[i] = math.fsum(weight[size[without]] * diffs)
    return values


def exact_layer_contributions(utility: Game | Callable[[tuple[int, ...]], float], n: int | None = None) -> np.ndarray:
    """``out[i, k]``: exact mean marginal contribution of ``i`` over all ``|S| = k``."""
    if n is None:
        n = utility.n
    table = _utility_table(utility, n)
    size = _popcounts(n)
    masks = np.arange(1 << n)
    out = np.empty((n, n))
    for i in range(n):
        without = masks[(masks >> i) & 1 == 0]
        diffs = table[without | (1 << i)] - table[without]
        sizes = size[without]
        for k in range(n):
            out[i, k] = math.fsum(diffs[sizes == k]) / math.comb(n - 1, k)
    return out


def semivalue_weight_check(spec: SemiValueSpec, n: int | None = None, tol: float = 1e-9) -> tuple[bool, float]:
    """Normalization check ``sum_j C(n-1, j-1) w(j) = n`` for ``j = 1 .. n``.

    The per-coalition weight for coalitions of size ``j - 1`` is
    ``w(j) = n * p[j-1] / C(n-1, j-1)`` (layer-average reading).
    """
    n = n or spec.n
    if spec.n != n:
        raise ConfigError(f"spec covers {spec.n} layers, expected {n}")
    terms = []
    for j in range(1, n + 1):
        binom = math.comb(n - 1, j - 1)
        w = n * spec.p[j - 1] / binom
        terms.append(binom * w)
    residual = abs(math.fsum(terms) - n)
    return residual < tol, residual
