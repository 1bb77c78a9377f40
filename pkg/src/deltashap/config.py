"""Run configuration: INI file sections overridden by command-line values."""

from __future__ import annotations

import configparser
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .core import SYNTH_KINDS, Dataset, SeedTree, load_csv, synth_dataset
from .errors import ConfigError, EnumerationLimitError, InputFileNotFound
from .estimators import EXACT_LIMIT, EXPECTED, MODES, AccuracyTarget, SemiValueSpec, band_presets
from .parallel import default_workers
from .models import REGIMES, SGD_REGIMES, TrainConfig, make_config

METHODS = ("exact", "mc", "stratified", "delta")
PRESETS = ("mid", "low")

# INI section for every RunConfig field
SECTIONS = {
    "data": ("csv", "label_column", "eval_fraction", "synth", "n_train", "n_eval", "dim", "separation"),
    "model": ("regime", "lam", "G", "c", "T", "C", "hidden", "activation", "schedule", "learning_rate", "solver"),
    "estimator": ("method", "a", "b", "preset", "band", "mode", "h", "h_cap", "mk_cap", "budget", "max_iter",
                  "tolerance"),
    "run": ("seed", "workers", "out"),
}


@dataclass
class RunConfig:
    csv: str | None = None
    label_column: str = "label"
    eval_fraction: float = 0.5
    synth: str = "gaussian-blobs"
    n_train: int = 50
    n_eval: int = 1000
    dim: int = 5
    separation: float = 1.0

    regime: str = "strongly-convex"
    lam: float = 0.1
    G: float | None = None
    c: float = 1.0
    T: int = 100
    C: float = 1.0
    hidden: int = 16
    activation: str = "softplus"
    schedule: str = "decaying"
    learning_rate: float | None = None
    solver: str = "newton"

    method: str = "delta"
    a: float = 0.05
    b: float = 0.05
    preset: str = "mid"
    band: str | None = None
    mode: str = "fixed-subsequence"
    h: int | None = None
    h_cap: int | None = 64
    mk_cap: int | None = 200
    budget: str = "convergence"
    max_iter: int | None = None
    tolerance: float = 0.05

    seed: int = 0
    workers: int | None = None
    out: str = "out"

    def validate(self) -> RunConfig:
        """Reject invalid settings before any data is loaded or model trained."""
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.mode == EXPECTED and self.regime not in SGD_REGIMES:
            raise ConfigError("expected-utility mode requires an SGD regime")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; expected one of {PRESETS}")
        if self.csv is None and self.synth not in SYNTH_KINDS:
            raise ConfigError(f"unknown synthetic kind {self.synth!r}; expected one of {SYNTH_KINDS}")
        if self.csv is None and self.method == "exact" and self.n_train > EXACT_LIMIT:
            raise EnumerationLimitError(f"exact method needs n <= {EXACT_LIMIT}, got n_train={self.n_train}")
        if self.workers is not None and self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.h is not None and self.h < 1:
            raise ConfigError("h must be >= 1")
        if self.band is not None:
            self.band_tuple()
        self.budget_value()
        AccuracyTarget(self.a, self.b)
        return self

    def band_tuple(self) -> tuple[int, int] | None:
        if self.band is None:
            return None
        try:
            lo, hi = (int(x) for x in str(self.band).split(","))
        except ValueError:
            raise ConfigError(f"band must be 'LOWER,UPPER', got {self.band!r}") from None
        return lo, hi

    def budget_value(self) -> int | str:
        if self.budget in ("convergence", "exhaustive"):
            return self.budget
        try:
            value = int(self.budget)
        except ValueError:
            raise ConfigError(f"budget must be an integer, 'convergence' or 'exhaustive', got {self.budget!r}") from None
        if value < 1:
            raise ConfigError("budget must be >= 1")
        return value

    def semivalue(self, n: int) -> SemiValueSpec:
        band = self.band_tuple()
        if band is not None:
            return SemiValueSpec.banded(n, *band)
        return band_presets(n, self.preset)

    def worker_count(self) -> int:
        return self.workers if self.workers is not None else default_workers()

    def seeds(self) -> SeedTree:
        return SeedTree(self.seed)

    def load_data(self) -> Dataset:
        seeds = self.seeds().child("data")
        if self.csv is not None:
            data = load_csv(self.csv, self.label_column, self.eval_fraction, seeds)
        else:
            data = synth_dataset(self.synth, self.n_train, self.n_eval, self.dim, self.separation, seeds)
        if self.method == "exact" and data.n_train > EXACT_LIMIT:
            raise EnumerationLimitError(f"exact method needs n <= {EXACT_LIMIT}, got {data.n_train} points")
        return data

    def train_config(self, data: Dataset) -> TrainConfig:
        extra = {} if self.G is None else {"G": self.G}
        return make_config(data, self.regime, lam=self.lam, c=self.c, T=self.T, C=self.C, hidden=self.hidden,
                           activation=self.activation, schedule=self.schedule,
                           learning_rate=self.learning_rate, solver=self.solver, **extra)

    def to_dict(self) -> dict:
        return asdict(self)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    text = raw.strip()
    if "None" in kind and text.lower() in ("", "none"):
        return None
    try:
        if kind.startswith("int"):
            return int(text)
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"{key} expects a number, got {raw!r}") from None
    return text


def apply_overrides(config: RunConfig, values: dict) -> RunConfig:
    for key, raw in values.items():
        if key not in _TYPES:
            raise ConfigError(f"unknown setting {key!r}")
        setattr(config, key, _coerce(key, raw) if isinstance(raw, str) else raw)
    return config


def read_ini(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise InputFileNotFound(f"no such config file: {path}")
    parser = configparser.ConfigParser()
    # keep key case: G and C are distinct from g and c
    parser.optionxform = str
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from None
    values = {}
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"unknown section [{section}] in {path}")
        for key, raw in parser.items(section):
            if key not in SECTIONS[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            values[key] = raw
    return values


def write_ini(config: RunConfig, path: str | Path) -> None:
    parser = configparser.ConfigParser()
    parser.optionxform = str
    d = config.to_dict()
    for section, keys in SECTIONS.items():
        parser[section] = {k: "none" if d[k] is None else str(d[k]) for k in keys}
    with open(path, "w", encoding="utf-8") as fh:
        parser.write(fh)


def build_config(path: str | None, overrides: dict) -> RunConfig:
    """File values first, then flag overrides; flags win."""
    config = RunConfig()
    if path is not None:
        apply_overrides(config, read_ini(path))
    apply_overrides(config, {k: v for k, v in overrides.items() if v is not None})
    return config.validate()
