"""Model training and utilities.

Three training regimes share one parameter representation:

* ``strongly-convex``: L2-regularized logistic regression fitted to its
  unique minimizer (deterministic, no randomness).
* ``convex-sgd``: logistic regression trained by single-example SGD over a
  fixed visiting order.
* ``nonconvex-sgd``: the same SGD engine on a one-hidden-layer MLP.

The regularizer is ``lam * ||theta||^2`` on every parameter (biases
included), added to the mean training loss.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import _kernels as K
from .core import Coalition, Dataset, SeedTree, coalition_key, insert_into_sequence, sample_permutation
from .errors import ConfigError, DivergenceError, DuplicateMemberError
from .games import Game, UtilityCache

STRONGLY_CONVEX = "strongly-convex"
CONVEX_SGD = "convex-sgd"
NONCONVEX_SGD = "nonconvex-sgd"
REGIMES = (STRONGLY_CONVEX, CONVEX_SGD, NONCONVEX_SGD)
SGD_REGIMES = (CONVEX_SGD, NONCONVEX_SGD)

DEFAULT_G = 10 * math.log(2)
L_FLOOR = 1e-6


@dataclass(frozen=True)
class LossConstants:
    """Constants of the loss and optimizer that feed the sample-size bounds.

    L: Lipschitz constant; beta: smoothness; lambda_: strong convexity;
    G: loss upper bound; c: step-size scale (alpha_t <= c/t); T: SGD steps;
    C: kernel bound.
    """

    L: float = 1.0
    beta: float = 1.0
    lambda_: float = 0.1
    G: float = DEFAULT_G
    c: float = 1.0
    T: int = 100
    C: float = 1.0

    def __post_init__(self):
        for name in ("L", "beta", "lambda_", "G", "c", "T", "C"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ConfigError(f"loss constant {name} must be positive and finite, got {v}")

    def to_dict(self) -> dict:
        return {"L": self.L, "beta": self.beta, "lambda": self.lambda_, "G": self.G,
                "c": self.c, "T": self.T, "C": self.C}

    @classmethod
    def from_dict(cls, d: dict) -> LossConstants:
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        return cls(**d)


@dataclass(frozen=True, eq=False)
class ModelParams:
    architecture: str
    theta: np.ndarray
    d: int
    out: int
    hidden: int = 0
    activation: str = "softplus"

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64)
        expected = param_count(self.architecture, self.d, self.out, self.hidden)
        if theta.shape != (expected,):
            raise ValueError(f"{self.architecture} with d={self.d}, out={self.out}, hidden={self.hidden} "
                             f"needs {expected} parameters, got {theta.shape}")
        theta.setflags(write=False)
        object.__setattr__(self, "theta", theta)

    @property
    def arch_code(self) -> int:
        return K.ARCH_LINEAR if self.architecture == "logistic" else K.ARCH_MLP

    @property
    def act_code(self) -> int:
        return K.ACT_SOFTPLUS if self.activation == "softplus" else K.ACT_RELU

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(weights, bias) per layer, weights shaped (fan_in, fan_out)."""
        t = self.theta
        if self.architecture == "logistic":
            mat = t.reshape(self.d + 1, self.out)
            return [(mat[:-1], mat[-1])]
        d, H, o = self.d, self.hidden, self.out
        w1 = t[: d * H].reshape(d, H)
        b1 = t[d * H: d * H + H]
        w2 = t[d * H + H: d * H + H + H * o].reshape(H, o)
        b2 = t[d * H + H + H * o:]
        return [(w1, b1), (w2, b2)]

    def to_json(self) -> str:
        layers = self.layers()
        return json.dumps({
            "architecture": self.architecture,
            "activation": self.activation,
            "d": self.d, "out": self.out, "hidden": self.hidden,
            "weights": [w.tolist() for w, _ in layers],
            "bias": [b.tolist() for _, b in layers],
        })

    @classmethod
    def from_json(cls, text: str) -> ModelParams:
        obj = json.loads(text)
        parts = []
        if obj["architecture"] == "logistic":
            w, b = np.asarray(obj["weights"][0]), np.asarray(obj["bias"][0])
            parts.append(np.vstack([w, b[None, :]]).ravel())
        else:
            for w, b in zip(obj["weights"], obj["bias"]):
                parts.extend([np.asarray(w).ravel(), np.asarray(b).ravel()])
        return cls(obj["architecture"], np.concatenate(parts), obj["d"], obj["out"],
                   obj.get("hidden", 0), obj.get("activation", "softplus"))

    def __eq__(self, other) -> bool:
        return (isinstance(other, ModelParams) and self.architecture == other.architecture
                and self.d == other.d and self.out == other.out and self.hidden == other.hidden
                and np.array_equal(self.theta, other.theta))


def param_count(architecture: str, d: int, out: int, hidden: int = 0) -> int:
    if architecture == "logistic":
        return (d + 1) * out
    if architecture == "mlp":
        return d * hidden + hidden + hidden * out + out
    raise ConfigError(f"unknown architecture {architecture!r}")


def head_width(n_classes: int) -> int:
    return 1 if n_classes == 2 else n_classes


@dataclass(frozen=True)
class TrainConfig:
    """How every coalition model is trained.

    ``schedule`` is ``"constant"`` (step ``learning_rate``, which must not
    exceed 2/beta in the convex regime) or ``"decaying"`` (``min(c/t, 2/beta)``).
    SGD runs ``constants.T`` steps unless ``epochs`` is set, in which case it
    runs ``epochs * len(sequence)``.
    """

    regime: str = STRONGLY_CONVEX
    constants: LossConstants = field(default_factory=LossConstants)
    schedule: str = "decaying"
    learning_rate: float | None = None
    epochs: int | None = None
    architecture: str = "logistic"
    hidden: int = 16
    activation: str = "softplus"
    solver: str = "newton"
    tol: float = 1e-8
    max_iter: int = 10_000
    warm_start: ModelParams | None = None

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.schedule not in ("constant", "decaying"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.architecture not in ("logistic", "mlp"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.activation not in ("softplus", "relu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.solver not in ("newton", "gd"):
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.architecture == "mlp" and not 1 <= self.hidden <= 32:
            raise ConfigError(f"MLP hidden width must be in [1, 32], got {self.hidden}")
        if self.regime in (STRONGLY_CONVEX, CONVEX_SGD) and self.architecture != "logistic":
            raise ConfigError(f"regime {self.regime} requires the logistic model")
        if self.epochs is not None and self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.regime == CONVEX_SGD and self.schedule == "constant":
            if self.step_size() > 2.0 / self.constants.beta * (1 + 1e-12):
                raise ConfigError(f"constant step {self.step_size()} exceeds 2/beta = {2 / self.constants.beta}")
        if self.regime == NONCONVEX_SGD and self.schedule != "decaying":
            raise ConfigError("nonconvex-sgd requires the decaying schedule alpha_t <= c/t")
        if self.learning_rate is not None and not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")

    def step_size(self) -> float:
        """Constant step, or the cap of the decaying schedule."""
        cap = 2.0 / self.constants.beta
        if self.schedule == "constant":
            return self.learning_rate if self.learning_rate is not None else cap / 2
        return min(cap, self.learning_rate) if self.learning_rate is not None else cap

    def steps_for(self, length: int) -> int:
        return self.epochs * length if self.epochs is not None else self.constants.T

    def with_constants(self, constants: LossConstants) -> TrainConfig:
        return replace(self, constants=constants)

    def to_dict(self) -> dict:
        return {
            "regime": self.regime, "constants": self.constants.to_dict(), "schedule": self.schedule,
            "learning_rate": self.learning_rate, "epochs": self.epochs,
            "architecture": self.architecture, "hidden": self.hidden, "activation": self.activation,
            "solver": self.solver, "tol": self.tol, "max_iter": self.max_iter,
            "warm_start": self.warm_start is not None,
        }


def estimate_constants(data: Dataset, config: TrainConfig) -> LossConstants:
    """Heuristic L and beta for the logistic loss on ``data``.

    L is the largest norm of a training row augmented with the bias input 1,
    which bounds the per-example gradient norm. beta = L^2/4 + 2*lam bounds
    the Hessian of the regularized per-example loss (binary head; the
    softmax head uses L^2/2). G, lam, c, T and C are taken from the config.
    The same numbers are used for the MLP, where they carry no guarantee.
    """
    X = data.features
    norms = np.sqrt((X ** 2).sum(axis=1) + 1.0)
    L = max(float(norms.max()), L_FLOOR)
    curv = 0.25 if head_width(data.n_classes) == 1 else 0.5
    base = config.constants
    return replace(base, L=L, beta=curv * L * L + 2 * base.lambda_)


def make_config(data: Dataset, regime: str = STRONGLY_CONVEX, *, lam: float = 0.1, G: float = DEFAULT_G,
                c: float = 1.0, T: int = 100, C: float = 1.0, **kwargs) -> TrainConfig:
    """TrainConfig with data-derived L and beta."""
    if regime == NONCONVEX_SGD:
        kwargs.setdefault("architecture", "mlp")
    base = TrainConfig(regime=regime, constants=LossConstants(lambda_=lam, G=G, c=c, T=T, C=C), **kwargs)
    return base.with_constants(estimate_constants(data, base))


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


def initial_params(data: Dataset, config: TrainConfig, seeds: SeedTree | None = None) -> ModelParams:
    """Zeros for the logistic model; for the MLP a fixed draw from ``seeds``.

    The MLP cannot start from zeros (hidden units would stay identical), so
    every coalition shares one seeded initialization instead.
    """
    if config.warm_start is not None:
        return config.warm_start
    out = head_width(data.n_classes)
    d = data.dim
    if config.architecture == "logistic":
        return ModelParams("logistic", np.zeros((d + 1) * out), d, out)
    H = config.hidden
    rng = (seeds or SeedTree(0)).child("mlp-init").generator()
    w1 = rng.standard_normal((d, H)) / math.sqrt(d)
    w2 = rng.standard_normal((H, out)) / math.sqrt(H)
    theta = np.concatenate([w1.ravel(), np.zeros(H), w2.ravel(), np.zeros(out)])
    return ModelParams("mlp", theta, d, out, H, config.activation)


def _rows(data: Dataset, indices: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    idx = np.asarray(indices, dtype=np.int64)
    return np.ascontiguousarray(data.features[idx]), np.ascontiguousarray(data.labels[idx])


def train_deterministic(coalition: Coalition, data: Dataset, config: TrainConfig) -> ModelParams:
    """Minimizer of the regularized logistic objective on ``coalition``.

    Newton's method by default (``solver="gd"`` runs plain gradient descent
    with step 1/beta); both stop at gradient norm ``tol`` or ``max_iter``.
    The empty coalition yields the zero model.
    """
    if config.regime != STRONGLY_CONVEX:
        raise ConfigError(f"train_deterministic needs the strongly-convex regime, got {config.regime}")
    out = head_width(data.n_classes)
    theta0 = np.zeros((data.dim + 1) * out)
    if len(coalition) == 0:
        return ModelParams("logistic", theta0, data.dim, out)
    X, y = _rows(data, coalition.members)
    lam = config.constants.lambda_
    if config.solver == "newton":
        theta, _, _ = K.newton(theta0, X, y, data.dim, out, lam, config.tol, config.max_iter)
    else:
        curv = 0.25 if out == 1 else 0.5
        beta = curv * float(((X ** 2).sum(axis=1) + 1.0).max()) + 2 * lam
        theta, _, _ = K.gradient_descent(theta0, X, y, data.dim, out, lam, 1.0 / beta, config.tol, config.max_iter)
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameters in deterministic training")
    return ModelParams("logistic", theta, data.dim, out)


def sgd_train(sequence: Sequence[int], data: Dataset, config: TrainConfig, seeds: SeedTree | None = None) -> ModelParams:
    """Single-example SGD visiting ``sequence`` cyclically, in order.

    ``seeds`` only fixes the MLP initialization; the run itself has no
    randomness beyond the given order.
    """
    if config.regime not in SGD_REGIMES:
        raise ConfigError(f"sgd_train needs an SGD regime, got {config.regime}")
    init = initial_params(data, config, seeds)
    if len(sequence) == 0:
        return init
    X, y = _rows(data, sequence)
    steps = config.steps_for(len(sequence))
    schedule = K.SCHEDULE_CONSTANT if config.schedule == "constant" else K.SCHEDULE_DECAYING
    theta = K.sgd(np.array(init.theta), X, y, steps, init.arch_code, init.d, init.hidden, init.out,
                  init.act_code, config.constants.lambda_, schedule, config.step_size(), config.constants.c)
    if not np.all(np.isfinite(theta)):
        raise DivergenceError("non-finite parameters after SGD")
    return replace(init, theta=theta)


def _eval(model: ModelParams, X: np.ndarray, y: np.ndarray, cap: float) -> tuple[float, float]:
    return K.evaluate(model.theta, X, y, model.arch_code, model.d, model.hidden, model.out, model.act_code, cap)


def test_loss(model: ModelParams, data: Dataset, cap: float = DEFAULT_G) -> float:
    """Mean cross-entropy on the evaluation split, each term clamped to [0, cap]."""
    return _eval(model, data.eval_features, data.eval_labels, cap)[0]


test_loss.__test__ = False  # not a pytest test when imported into test modules


def accuracy(model: ModelParams, data: Dataset) -> float:
    return _eval(model, data.eval_features, data.eval_labels, math.inf)[1]


def predict_logits(model: ModelParams, X: np.ndarray) -> np.ndarray:
    return K.logits(model.theta, np.ascontiguousarray(X, dtype=np.float64), model.arch_code,
                    model.d, model.hidden, model.out, model.act_code)


# ---------------------------------------------------------------------------
# Utility game
# ---------------------------------------------------------------------------


class ModelGame(Game):
    """Data-valuation game: ``v(S) = -test_loss(train(S))``.

    In the SGD regimes the visiting order of ``S`` is ``pi(S)``, a permutation
    drawn from a seed path keyed by the contents of ``S``, so ``v`` is a
    fixed function of the coalition. For a marginal, ``i`` is spliced into
    ``pi(S)`` at a position drawn once per ``(S, i)``.
    """

    def __init__(self, data: Dataset, config: TrainConfig, seeds: SeedTree):
        self.data = data
        self.config = config
        self.seeds = seeds
        self.n = data.n_train

    @property
    def regime(self) -> str:
        return self.config.regime

    @property
    def constants(self) -> LossConstants:
        return self.config.constants

    def _loss_of_sequence(self, seq: Sequence[int]) -> float:
        model = sgd_train(seq, self.data, self.config, self.seeds)
        return test_loss(model, self.data, self.config.constants.G)

    def order(self, coalition: Coalition) -> tuple[int, ...]:
        return sample_permutation(self.seeds.child("order", coalition_key(coalition)), coalition)

    def value(self, members) -> float:
        coalition = members if isinstance(members, Coalition) else Coalition(tuple(members))
        if self.regime == STRONGLY_CONVEX:
            model = train_deterministic(coalition, self.data, self.config)
            return -test_loss(model, self.data, self.config.constants.G)
        return -self._loss_of_sequence(self.order(coalition))

    def marginal(self, i: int, coalition: Coalition, cache: UtilityCache | None = None) -> float:
        if self.regime == STRONGLY_CONVEX:
            return super().marginal(i, coalition, cache)
        if i in coalition:
            raise DuplicateMemberError(f"point {i} already in coalition {coalition.members}")
        cache = cache if cache is not None else UtilityCache(enabled=False)
        key = coalition_key(coalition)
        base = self.order(coalition)
        grown = insert_into_sequence(base, i, self.seeds.child("insert", key).child("point", i))
        without = cache.get(("v", coalition.members), lambda: -self._loss_of_sequence(base))
        with_i = cache.get(("ins", coalition.members, i), lambda: -self._loss_of_sequence(grown))
        return with_i - without

    def expected_marginal(self, i: int, coalition: Coalition, h: int, cache: UtilityCache | None = None) -> float:
        """Mean over ``h`` seeded orders of ``S + i`` of the with/without-``i`` loss gap."""
        if h < 1:
            raise ConfigError("h must be >= 1")
        if self.regime == STRONGLY_CONVEX:
            return self.marginal(i, coalition, cache)
        grown = coalition.with_member(i)
        cache = cache if cache is not None else UtilityCache(enabled=False)
        node = self.seeds.child("expected", coalition_key(coalition)).child("point", i)
        diffs = []
        for j in range(h):
            seq = sample_permutation(node.child("perm", j), grown)
            without_seq = tuple(p for p in seq if p != i)
            without = cache.get(("eu-", coalition.members, i, j), lambda: self._loss_of_sequence(without_seq))
            with_i = cache.get(("eu+", coalition.members, i, j), lambda: self._loss_of_sequence(seq))
            diffs.append(without - with_i)
        return math.fsum(diffs) / h

    def evaluations_per_marginal(self, h: int = 1) -> int:
        return 2 * h if self.regime in SGD_REGIMES else 2


def utility(coalition: Coalition, data: Dataset, config: TrainConfig, seeds: SeedTree) -> float:
    return ModelGame(data, config, seeds).value(coalition)


def marginal_contribution(i: int, coalition: Coalition, data: Dataset, config: TrainConfig, seeds: SeedTree) -> float:
    return ModelGame(data, config, seeds).marginal(i, coalition)


def expected_marginal(i: int, coalition: Coalition, data: Dataset, config: TrainConfig, h: int, seeds: SeedTree) -> float:
    return ModelGame(data, config, seeds).expected_marginal(i, coalition, h)
