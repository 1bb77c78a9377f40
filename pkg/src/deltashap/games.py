"""Cooperative games consumed by the estimators.

A game exposes ``n`` players, ``value(members)`` for a canonical tuple of
player indices, and ``marginal(i, coalition, cache)``. Model-backed games
live in :mod:`deltashap.models`; the closed-form ones here serve as exact
test doubles.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .core import Coalition
from .errors import DuplicateMemberError


class UtilityCache:
    """Memo table for utility evaluations, counting hits and misses.

    Misses are evaluations actually executed (trainings for model games).
    A cache built with ``enabled=False`` still counts, but never stores.
    """

    def __init__(self, enabled: bool = True):
        self.enabled = enabled
        self._store: dict[Hashable, float] = {}
        self.hits = 0
        self.misses = 0

    def get(self, key: Hashable, compute: Callable[[], float]) -> float:
        if self.enabled:
            try:
                value = self._store[key]
            except KeyError:
                pass
            else:
                self.hits += 1
                return value
        self.misses += 1
        value = compute()
        if self.enabled:
            self._store[key] = value
        return value

    def __len__(self) -> int:
        return len(self._store)


class Game:
    """Base class: marginals from ``value`` with a per-call memo table."""

    n: int
    regime: str | None = None
    constants = None

    def value(self, members: tuple[int, ...]) -> float:
        raise NotImplementedError

    def marginal(self, i: int, coalition: Coalition, cache: UtilityCache | None = None) -> float:
        if i in coalition:
            raise DuplicateMemberError(f"point {i} already in coalition {coalition.members}")
        cache = cache if cache is not None else UtilityCache(enabled=False)
        base = coalition.members
        grown = coalition.with_member(i).members
        with_i = cache.get(("v", grown), lambda: self.value(grown))
        without = cache.get(("v", base), lambda: self.value(base))
        return with_i - without

    def expected_marginal(self, i: int, coalition: Coalition, h: int, cache: UtilityCache | None = None) -> float:
        # closed-form games carry no ordering randomness
        return self.marginal(i, coalition, cache)

    def evaluations_per_marginal(self, h: int = 1) -> int:
        return 2


@dataclass
class AdditiveGame(Game):
    """``v(S) = offset + sum of weights[j] for j in S``; every marginal is constant."""

    weights: Sequence[float]
    offset: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.n = len(self.weights)

    def value(self, members):
        return self.offset + float(sum(self.weights[j] for j in members))

    def marginal(self, i: int, coalition: Coalition, cache: UtilityCache | None = None) -> float:
        # exact: differencing two float sums would add rounding noise
        if i in coalition:
            raise DuplicateMemberError(f"point {i} already in coalition {coalition.members}")
        return float(self.weights[i])


@dataclass
class WeightedVotingGame(Game):
    """``v(S) = 1`` when the members' total weight reaches ``quota``, else 0."""

    weights: Sequence[float]
    quota: float

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        self.n = len(self.weights)

    def value(self, members):
        return 1.0 if float(sum(self.weights[j] for j in members)) >= self.quota else 0.0


def mask_of(members) -> int:
    m = 0
    for j in members:
        m |= 1 << j
    return m


@dataclass
class TableGame(Game):
    """Arbitrary game given as a lookup table indexed by the coalition bitmask."""

    table: np.ndarray
    n: int = field(init=False)

    def __post_init__(self):
        self.table = np.asarray(self.table, dtype=float)
        n = int(np.log2(len(self.table)))
        if 1 << n != len(self.table):
            raise ValueError("table length must be a power of two")
        self.n = n

    def value(self, members):
        return float(self.table[mask_of(members)])

    @classmethod
    def from_function(cls, n: int, fn: Callable[[tuple[int, ...]], float]) -> TableGame:
        table = np.empty(1 << n)
        for mask in range(1 << n):
            table[mask] = fn(tuple(j for j in range(n) if mask >> j & 1))
        return cls(table)

    @classmethod
    def random(cls, n: int, rng: np.random.Generator, low: float = -1.0, high: float = 1.0) -> TableGame:
        return cls(rng.uniform(low, high, size=1 << n))


@dataclass
class ConstantMarginalGame(Game):
    """Wraps a game so that point ``dummy`` adds exactly ``c`` to every coalition."""

    base: Game
    dummy: int
    c: float = 0.0

    def __post_init__(self):
        self.n = self.base.n

    def value(self, members):
        rest = tuple(j for j in members if j != self.dummy)
        return self.base.value(rest) + (self.c if len(rest) != len(members) else 0.0)


def all_subsets(players: Sequence[int]):
    for k in range(len(players) + 1):
        yield from itertools.combinations(players, k)
