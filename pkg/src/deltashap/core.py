"""Shared domain types, seeded randomness, datasets and coalition samplers."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CSVParseError,
    DataError,
    DegenerateDataError,
    DuplicateMemberError,
    InputFileNotFound,
    InvalidLayerError,
)

VARIANCE_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Seeds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SeedTree:
    """A node in a hierarchy of deterministic random streams.

    Each node is identified by the master seed plus an ordered path of
    ``(label, index)`` pairs. The stream for a node is a Philox generator
    keyed by a hash of that identity, so it does not depend on which
    process asks for it or in what order.

    >>> root = SeedTree(7)
    >>> a = root.child("perm", 3).generator().integers(1 << 30)
    >>> b = root.child("perm", 3).generator().integers(1 << 30)
    >>> bool(a == b)
    True
    """

    master_seed: int
    path: tuple[tuple[str, int], ...] = ()

    def child(self, label: str, index: int = 0) -> SeedTree:
        return SeedTree(self.master_seed, self.path + ((str(label), int(index)),))

    def key(self) -> int:
        ident = json.dumps([int(self.master_seed), [list(p) for p in self.path]], separators=(",", ":"))
        return int.from_bytes(hashlib.blake2b(ident.encode(), digest_size=16).digest(), "little")

    def generator(self) -> np.random.Generator:
        return np.random.Generator(np.random.Philox(key=self.key()))

    def __str__(self) -> str:
        tail = "/".join(f"{label}:{index}" for label, index in self.path)
        return f"{self.master_seed}/{tail}" if tail else str(self.master_seed)


def coalition_key(members: Iterable[int]) -> int:
    """Stable 63-bit integer identifying a set of indices, for seed paths."""
    arr = np.asarray(sorted(members), dtype="<i8")
    digest = hashlib.blake2b(arr.tobytes(), digest_size=8).digest()
    return int.from_bytes(digest, "little") >> 1


# ---------------------------------------------------------------------------
# Coalitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Coalition:
    """A set of training indices held in canonical (sorted, unique) form."""

    members: tuple[int, ...] = ()

    def __post_init__(self):
        m = self.members
        if any(b <= a for a, b in zip(m, m[1:])):
            raise DuplicateMemberError(f"coalition members must be strictly increasing: {m}")
        if m and m[0] < 0:
            raise ValueError(f"negative index in coalition: {m[0]}")

    @classmethod
    def of(cls, indices: Iterable[int]) -> Coalition:
        items = [int(i) for i in indices]
        unique = sorted(set(items))
        if len(unique) != len(items):
            raise DuplicateMemberError(f"duplicate indices in {items}")
        return cls(tuple(unique))

    @property
    def layer(self) -> int:
        return len(self.members)

    def __len__(self) -> int:
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    def __contains__(self, item) -> bool:
        return item in self.members

    def with_member(self, i: int) -> Coalition:
        if i in self.members:
            raise DuplicateMemberError(f"point {i} already in coalition")
        return Coalition(tuple(sorted(self.members + (int(i),))))

    def check_bounds(self, n: int) -> None:
        if self.members and self.members[-1] >= n:
            raise ValueError(f"index {self.members[-1]} out of range for n={n}")


@dataclass(frozen=True)
class LayerEstimate:
    """Sampled mean marginal contribution of one point at one coalition size."""

    point: int
    layer: int
    mean_contribution: float
    samples_used: int
    contribution_variance: float = 0.0
    theoretical_samples: int | None = None
    evaluations: int = 0

    def __post_init__(self):
        if self.samples_used < 1:
            raise ValueError("samples_used must be >= 1")
        if not math.isfinite(self.mean_contribution):
            raise ValueError("mean_contribution must be finite")

    def to_dict(self) -> dict:
        return {
            "point": self.point,
            "layer": self.layer,
            "mean_contribution": self.mean_contribution,
            "samples_used": self.samples_used,
            "contribution_variance": self.contribution_variance,
            "theoretical_samples": self.theoretical_samples,
            "evaluations": self.evaluations,
        }

    @classmethod
    def from_dict(cls, d: dict) -> LayerEstimate:
        return cls(**d)


def sample_coalition(seeds: SeedTree, n: int, k: int, exclude: int | None) -> Coalition:
    """Uniform random size-``k`` subset of ``range(n)`` minus ``exclude``."""
    pool = n - (exclude is not None)
    if k < 0 or k > pool:
        raise InvalidLayerError(f"layer k={k} outside [0, {pool}] for n={n}")
    if exclude is not None and not 0 <= exclude < n:
        raise ValueError(f"exclude={exclude} outside [0, {n})")
    if k == 0:
        return Coalition()
    picks = seeds.generator().choice(pool, size=k, replace=False)
    if exclude is not None:
        picks = np.where(picks >= exclude, picks + 1, picks)
    return Coalition(tuple(int(p) for p in np.sort(picks)))


def sample_permutation(seeds: SeedTree, coalition: Coalition | Sequence[int]) -> tuple[int, ...]:
    members = tuple(coalition)
    if len(members) <= 1:
        return members
    order = seeds.generator().permutation(len(members))
    return tuple(members[j] for j in order)


def insert_into_sequence(seq: Sequence[int], i: int, seeds: SeedTree) -> tuple[int, ...]:
    """Splice ``i`` into ``seq`` at a uniformly random slot in ``[0, len(seq)]``."""
    if i in seq:
        raise DuplicateMemberError(f"point {i} already in sequence")
    pos = int(seeds.generator().integers(0, len(seq) + 1))
    return tuple(seq[:pos]) + (int(i),) + tuple(seq[pos:])


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    eval_features: np.ndarray
    eval_labels: np.ndarray
    name: str = "dataset"
    n_classes: int = field(default=0)

    def __post_init__(self):
        X = np.ascontiguousarray(self.features, dtype=np.float64)
        Xe = np.ascontiguousarray(self.eval_features, dtype=np.float64)
        y = np.ascontiguousarray(self.labels, dtype=np.int64)
        ye = np.ascontiguousarray(self.eval_labels, dtype=np.int64)
        if X.ndim != 2 or Xe.ndim != 2:
            raise DataError("feature matrices must be 2-D")
        if X.shape[0] < 2:
            raise DataError(f"need at least 2 training rows, got {X.shape[0]}")
        if Xe.shape[0] < 1:
            raise DataError("evaluation split is empty")
        if X.shape[1] != Xe.shape[1]:
            raise DataError(f"dimension mismatch: train d={X.shape[1]}, eval d={Xe.shape[1]}")
        if y.shape != (X.shape[0],) or ye.shape != (Xe.shape[0],):
            raise DataError("label vectors must match the number of rows")
        n_classes = self.n_classes or int(max(y.max(), ye.max())) + 1
        n_classes = max(n_classes, 2)
        if y.min() < 0 or ye.min() < 0 or y.max() >= n_classes or ye.max() >= n_classes:
            raise DataError(f"labels must lie in [0, {n_classes})")
        for arr in (X, Xe, y, ye):
            arr.setflags(write=False)
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "eval_features", Xe)
        object.__setattr__(self, "labels", y)
        object.__setattr__(self, "eval_labels", ye)
        object.__setattr__(self, "n_classes", n_classes)

    @property
    def n_train(self) -> int:
        return self.features.shape[0]

    @property
    def n_eval(self) -> int:
        return self.eval_features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for arr in (self.features, self.labels, self.eval_features, self.eval_labels):
            h.update(str(arr.shape).encode())
            h.update(np.ascontiguousarray(arr).astype(arr.dtype.newbyteorder("<")).tobytes())
        return h.hexdigest()

    def restrict(self, indices: Sequence[int]) -> Dataset:
        """Training rows ``indices`` only; the evaluation split is kept."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.features[idx], self.labels[idx], self.eval_features, self.eval_labels,
            name=self.name, n_classes=self.n_classes,
        )

    def summary(self) -> dict:
        return {
            "name": self.name,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "dim": self.dim,
            "n_classes": self.n_classes,
            "train_class_counts": np.bincount(self.labels, minlength=self.n_classes).tolist(),
            "eval_class_counts": np.bincount(self.eval_labels, minlength=self.n_classes).tolist(),
            "hash": self.content_hash(),
        }


def standardize(train: np.ndarray, other: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale both splits with the training split's mean and std."""
    mean = train.mean(axis=0)
    std = np.sqrt(np.maximum(train.var(axis=0), VARIANCE_FLOOR))
    return (train - mean) / std, (other - mean) / std


SPLIT_COLUMN = "split"


def load_csv(
    path: str | Path,
    label_column: str,
    eval_fraction: float,
    seeds: SeedTree,
    name: str | None = None,
) -> Dataset:
    path = Path(path)
    if not 0.0 < eval_fraction < 1.0:
        raise DataError(f"eval_fraction must be in (0, 1), got {eval_fraction}")
    if not path.is_file():
        raise InputFileNotFound(f"no such file: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CSVParseError("empty file") from None
        header = [h.strip() for h in header]
        if label_column not in header:
            raise CSVParseError(f"label column {label_column!r} not in header {header}")
        split_pos = header.index(SPLIT_COLUMN) if SPLIT_COLUMN in header else None
        numeric = [h for j, h in enumerate(header) if j != split_pos]
        label_pos = numeric.index(label_column)
        rows, splits = [], []
        for lineno, raw in enumerate(reader, start=2):
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise CSVParseError(f"expected {len(header)} cells, found {len(raw)}", row=lineno)
            parsed = []
            for j, (col, cell) in enumerate(zip(header, raw)):
                if j == split_pos:
                    if cell.strip() not in ("train", "eval"):
                        raise CSVParseError(f"split must be 'train' or 'eval', got {cell!r}", row=lineno, column=col)
                    splits.append(cell.strip())
                    continue
                try:
                    parsed.append(float(cell))
                except ValueError:
                    raise CSVParseError(f"non-numeric cell {cell!r}", row=lineno, column=col) from None
            rows.append(parsed)
    if len(rows) < 3:
        raise DegenerateDataError(f"need at least 3 data rows, found {len(rows)}")
    table = np.asarray(rows, dtype=np.float64)
    raw_labels = table[:, label_pos]
    X = np.delete(table, label_pos, axis=1)
    classes, y = np.unique(raw_labels, return_inverse=True)

    n = len(rows)
    if splits:
        flags = np.array(splits)
        eval_idx, train_idx = np.flatnonzero(flags == "eval"), np.flatnonzero(flags == "train")
        if len(eval_idx) < 1 or len(train_idx) < 2:
            raise DegenerateDataError("split column needs >= 2 train rows and >= 1 eval row")
    else:
        n_eval = min(max(1, int(round(eval_fraction * n))), n - 2)
        order = seeds.child("split").generator().permutation(n)
        eval_idx, train_idx = np.sort(order[:n_eval]), np.sort(order[n_eval:])
    if len(np.unique(y[train_idx])) < 2:
        raise DegenerateDataError("training split contains a single class")
    Xtr, Xev = standardize(X[train_idx], X[eval_idx])
    return Dataset(Xtr, y[train_idx], Xev, y[eval_idx], name=name or path.stem, n_classes=len(classes))


SYNTH_KINDS = ("gaussian-blobs", "two-class-images")


def _balanced_labels(n: int, rng: np.random.Generator) -> np.ndarray:
    labels = np.arange(n) % 2
    return rng.permutation(labels)


def _image_templates(d: int) -> tuple[np.ndarray, np.ndarray]:
    side = int(math.isqrt(d))
    if side * side == d:
        r, c = np.mgrid[0:side, 0:side]
        horiz = np.cos(2 * np.pi * r / max(side / 2, 1)).ravel()
        vert = np.cos(2 * np.pi * c / max(side / 2, 1)).ravel()
    else:
        t = np.arange(d)
        horiz = np.cos(2 * np.pi * t / max(d / 2, 1))
        vert = np.sin(2 * np.pi * t / max(d / 2, 1))
    diff = horiz - vert
    scale = np.linalg.norm(diff)
    if scale == 0:
        diff = np.ones(d)
        scale = np.linalg.norm(diff)
    # templates placed symmetrically so the class means are 1 unit apart
    return 0.5 * diff / scale, -0.5 * diff / scale


def synth_dataset(
    kind: str,
    n_train: int,
    n_eval: int,
    d: int,
    class_separation: float,
    seeds: SeedTree,
) -> Dataset:
    """Balanced two-class synthetic task.

    ``class_separation`` is the distance between the two class means in units
    of the per-coordinate noise standard deviation, so the Bayes accuracy is
    ``Phi(class_separation / 2)``. ``gaussian-blobs`` separates the classes
    along a random direction; ``two-class-images`` uses two fixed stripe
    patterns on a ``sqrt(d) x sqrt(d)`` grid (horizontal vs vertical).
    """
    if kind not in SYNTH_KINDS:
        raise DataError(f"unknown synthetic kind {kind!r}; expected one of {SYNTH_KINDS}")
    if n_train < 2 or n_eval < 1 or d < 1:
        raise DataError(f"invalid sizes n_train={n_train}, n_eval={n_eval}, d={d}")
    rng = seeds.child("synth").generator()
    if kind == "gaussian-blobs":
        direction = rng.standard_normal(d)
        direction /= np.linalg.norm(direction)
        means = (0.5 * direction, -0.5 * direction)
    else:
        means = _image_templates(d)
    means = np.stack(means) * class_separation

    def draw(count: int) -> tuple[np.ndarray, np.ndarray]:
        y = _balanced_labels(count, rng)
        X = means[y] + rng.standard_normal((count, d))
        return X, y

    Xtr, ytr = draw(n_train)
    Xev, yev = draw(n_eval)
    Xtr, Xev = standardize(Xtr, Xev)
    return Dataset(Xtr, ytr, Xev, yev, name=f"{kind}-n{n_train}-d{d}-sep{class_separation:g}", n_classes=2)
