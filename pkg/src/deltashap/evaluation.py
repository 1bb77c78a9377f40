"""Experiment protocol: rank correlation, removal curves, noise profiles, method comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .core import Coalition, Dataset, SeedTree, sample_coalition
from .errors import AlignmentError, ConfigError, DataError, UndefinedCorrelationError
from .estimators import ValuationResult
from .games import Game, UtilityCache
from .models import STRONGLY_CONVEX, TrainConfig, accuracy, test_loss, train_deterministic
from .parallel import WorkerPool

DIRECTIONS = ("highest-first", "lowest-first", "random")


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks; tied entries share the mean of the ranks they span."""
    x = np.asarray(x, dtype=float)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sorted_x = x[order]
    start = 0
    while start < len(x):
        stop = start + 1
        while stop < len(x) and sorted_x[stop] == sorted_x[start]:
            stop += 1
        ranks[order[start:stop]] = (start + stop + 1) / 2.0
        start = stop
    return ranks


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman's rho as the Pearson correlation of average ranks."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"spearman needs two equal-length vectors, got {x.shape} and {y.shape}")
    if len(x) < 2:
        raise DataError("spearman needs at least 2 observations")
    rx = average_ranks(x) - (len(x) + 1) / 2.0
    ry = average_ranks(y) - (len(y) + 1) / 2.0
    sxx = math.fsum(rx * rx)
    syy = math.fsum(ry * ry)
    if sxx == 0 or syy == 0:
        raise UndefinedCorrelationError("correlation undefined for a constant vector")
    rho = math.fsum(rx * ry) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, rho))


# ---------------------------------------------------------------------------
# Removal curves
# ---------------------------------------------------------------------------


@dataclass
class RemovalCurve:
    fractions_removed: list[float]
    accuracies: list[float]
    direction: str
    losses: list[float] = field(default_factory=list)
    truncated: bool = False

    def __post_init__(self):
        if len(self.fractions_removed) != len(self.accuracies):
            raise ValueError("fractions and accuracies must have equal length")
        if any(not 0.0 <= a <= 1.0 for a in self.accuracies):
            raise ValueError("accuracies must lie in [0, 1]")

    def mean_accuracy(self, lo: float = 0.1, hi: float = 0.4) -> float:
        sel = [a for f, a in zip(self.fractions_removed, self.accuracies) if lo - 1e-9 <= f <= hi + 1e-9]
        return math.fsum(sel) / len(sel)

    def to_rows(self) -> list[dict]:
        """Tidy rows: one per (fraction, statistic)."""
        rows = []
        for j, (f, a) in enumerate(zip(self.fractions_removed, self.accuracies)):
            loss = self.losses[j] if j < len(self.losses) else float("nan")
            for stat, value in (("accuracy", a), ("loss", loss)):
                rows.append({"direction": self.direction, "fraction_removed": f, "statistic": stat, "value": value})
        return rows


def removal_order(values: Sequence[float], direction: str, seeds: SeedTree | None = None) -> np.ndarray:
    """Indices in removal order; ties go to the lower index first."""
    v = np.asarray(values, dtype=float)
    idx = np.arange(len(v))
    if direction == "highest-first":
        return np.lexsort((idx, -v))
    if direction == "lowest-first":
        return np.lexsort((idx, v))
    if direction == "random":
        if seeds is None:
            raise ConfigError("random removal needs seeds")
        return seeds.child("removal-random").generator().permutation(len(v))
    raise ConfigError(f"unknown direction {direction!r}; expected one of {DIRECTIONS}")


def removal_curve(
    values: Sequence[float],
    data: Dataset,
    config: TrainConfig,
    direction: str,
    step_fraction: float = 0.1,
    seeds: SeedTree | None = None,
    max_fraction: float = 0.5,
) -> RemovalCurve:
    """Test accuracy after removing growing fractions of points in value order.

    Models are refitted with the deterministic (strongly convex) trainer.
    The curve stops at ``max_fraction`` removed, or early (flagged as
    truncated) once any class would keep fewer than 2 training points.
    """
    values = np.asarray(values, dtype=float)
    if values.shape != (data.n_train,):
        raise DataError(f"need one value per training point ({data.n_train}), got {values.shape}")
    if not 0 < step_fraction <= 0.5:
        raise ConfigError("step_fraction must be in (0, 0.5]")
    if config.regime != STRONGLY_CONVEX or config.architecture != "logistic":
        config = replace(config, regime=STRONGLY_CONVEX, architecture="logistic")
    order = removal_order(values, direction, seeds)
    n = data.n_train
    steps = int(math.floor(max_fraction / step_fraction + 1e-9))
    fractions, accs, losses = [], [], []
    truncated = False
    for j in range(steps + 1):
        f = round(j * step_fraction, 12)
        n_remove = int(math.floor(f * n + 0.5))
        keep = np.sort(order[n_remove:])
        counts = np.bincount(data.labels[keep], minlength=data.n_classes)
        if counts.min() < 2:
            truncated = True
            break
        model = train_deterministic(Coalition(tuple(int(k) for k in keep)), data, config)
        fractions.append(f)
        accs.append(accuracy(model, data))
        losses.append(test_loss(model, data, config.constants.G))
    return RemovalCurve(fractions, accs, direction, losses, truncated)


# ---------------------------------------------------------------------------
# Stability / noise profile
# ---------------------------------------------------------------------------


@dataclass
class StabilityProfile:
    layer_sizes: list[int]
    stats: list[dict]
    sample_counts: list[int]

    def __post_init__(self):
        if not (len(self.layer_sizes) == len(self.stats) == len(self.sample_counts)):
            raise ValueError("one stats entry per layer size is required")

    def column(self, name: str) -> list[float]:
        return [s[name] for s in self.stats]

    def to_rows(self) -> list[dict]:
        """Tidy rows: one per (k, statistic)."""
        return [{"k": k, "samples": c, "statistic": name, "value": v}
                for k, s, c in zip(self.layer_sizes, self.stats, self.sample_counts) for name, v in s.items()]


def summarize_contributions(contribs: Sequence[float]) -> dict:
    """Order-independent summary of signed marginals and their magnitudes."""
    v = np.sort(np.asarray(contribs, dtype=float))
    a = np.sort(np.abs(v))
    m = len(v)

    def mean(x):
        return math.fsum(x) / m

    def std(x):
        mu = mean(x)
        return math.sqrt(math.fsum((x - mu) ** 2) / (m - 1)) if m > 1 else 0.0

    return {
        "mean_abs": mean(a),
        "median_abs": float(np.median(a)),
        "max_abs": float(a[-1]),
        "std_abs": std(a),
        "mean": mean(v),
        "std": std(v),
    }


def _profile_task(game, payload):
    k, samples, seeds, points = payload
    rng = seeds.child("points").generator()
    cache = UtilityCache()
    out = []
    for j in range(samples):
        i = int(points[rng.integers(len(points))]) if points is not None else int(rng.integers(game.n))
        coalition = sample_coalition(seeds.child("draw", j), game.n, k, i)
        out.append(game.marginal(i, coalition, cache))
    return out


def stability_profile(
    game: Game,
    layer_sizes: Sequence[int],
    samples_per_layer: int,
    seeds: SeedTree,
    points: Sequence[int] | None = None,
    workers: int = 1,
) -> StabilityProfile:
    """Statistics of ``|v_i(S)|`` over random points and size-``k`` coalitions."""
    if samples_per_layer < 10:
        raise ConfigError("samples_per_layer must be >= 10")
    for k in layer_sizes:
        if not 0 <= k <= game.n - 1:
            raise ConfigError(f"layer size {k} outside [0, {game.n - 1}]")
    tasks = [(int(k), samples_per_layer, seeds.child("profile", int(k)), points) for k in layer_sizes]
    with WorkerPool(game, workers) as pool:
        samples = pool.map(_profile_task, tasks)
    return StabilityProfile([int(k) for k in layer_sizes], [summarize_contributions(s) for s in samples],
                            [len(s) for s in samples])


# ---------------------------------------------------------------------------
# Method comparison
# ---------------------------------------------------------------------------


def result_label(result: ValuationResult) -> str:
    label = result.meta.get("label")
    if label:
        return label
    band = result.meta.get("band")
    return f"{result.method}({band[0]}-{band[1]})" if band else result.method


def compare_methods(results: Sequence[ValuationResult], reference: ValuationResult) -> dict:
    """Per-method Spearman rho against ``reference``, costs and speedups."""
    ref_order = {p: j for j, p in enumerate(reference.points)}
    rows = []
    for res in results:
        if set(res.points) != set(reference.points):
            raise AlignmentError(f"{result_label(res)} covers different points than the reference")
        aligned = np.empty(len(ref_order))
        for p, v in zip(res.points, res.values):
            aligned[ref_order[p]] = v
        speedup = (reference.trainings_performed / res.trainings_performed
                   if res.trainings_performed else float("inf"))
        rows.append({
            "method": result_label(res),
            "rho": spearman(aligned, reference.values),
            "trainings_performed": res.trainings_performed,
            "cache_hits": res.cache_hits,
            "wall_time": res.wall_time,
            "iterations": res.iterations,
            "training_speedup": speedup,
            "time_speedup": reference.wall_time / res.wall_time if res.wall_time else float("inf"),
        })
    return {
        "reference": result_label(reference),
        "reference_trainings": reference.trainings_performed,
        "reference_wall_time": reference.wall_time,
        "rows": rows,
    }
