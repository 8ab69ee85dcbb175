"""Experiment configuration read from TOML.

A config file has up to six sections; every key is optional and falls back
to the defaults below::

    seed = 0
    output = "results"

    [data]        # fixture or IDX files
    [oracle]      # target model: trained locally, loaded, or remote
    [substitute]  # TrainConfig
    [attack]      # AttackConfig
    [run]         # RunConfig minus the nested parts
    [sweep]       # strategies x attacks x seeds matrix

Unknown sections or keys are rejected so typos fail loudly.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .attacks import AttackConfig
from .datasets import Dataset, TaskData, gen_blobs, gen_moons, load_idx, split_task
from .errors import UsageError
from .netcore import NetworkSpec, Params, init_params, load_params, train
from .oracle import LocalOracle, Oracle, RemoteOracle
from .pipeline import RunConfig, TrainConfig, derive_seed


@dataclass(frozen=True)
class DataSpec:
    source: str = "blobs"
    n_classes: int = 10
    n_per_class: int = 300
    n_features: int = 16
    spread: float = 0.2
    center_low: float = 0.2
    center_high: float = 0.8
    noise: float = 0.1
    images: str | None = None
    labels: str | None = None
    oracle_frac: float = 0.5
    pool_frac: float = 0.2
    seed: int | None = None

    def __post_init__(self):
        if self.source not in ("blobs", "moons", "idx"):
            raise UsageError(f"unknown data source {self.source!r}")
        if self.source == "idx" and (self.images is None or self.labels is None):
            raise UsageError("idx data needs images and labels paths")


@dataclass(frozen=True)
class OracleSpec:
    hidden: tuple[int, ...] = (16,)
    activation: str = "tanh"
    epochs: int = 30
    batch_size: int = 32
    params: str | None = None
    url: str | None = None
    cache: bool = False
    timeout: float = 10.0
    retries: int = 2
    seed: int | None = None


@dataclass(frozen=True)
class SweepSpec:
    strategies: tuple[str, ...] = ("RS", "ME", "MB", "ME+div", "MB+div")
    attacks: tuple[str, ...] | None = None  # default: the [attack] method
    seeds: tuple[int, ...] = tuple(range(20))
    workers: int = 1


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    output: str = "results"
    data: DataSpec = field(default_factory=DataSpec)
    oracle: OracleSpec = field(default_factory=OracleSpec)
    run: RunConfig = field(default_factory=RunConfig)
    sweep: SweepSpec = field(default_factory=SweepSpec)

    def run_config(self, seed: int | None = None, **overrides) -> RunConfig:
        return dataclasses.replace(self.run, seed=self.seed if seed is None else seed,
                                   **overrides)


def _build(cls, table: dict, where: str, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(table) - names
    if unknown:
        raise UsageError(f"unknown key(s) in [{where}]: {', '.join(sorted(unknown))}")
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in table:
            v = table[f.name]
            kw[f.name] = tuple(v) if isinstance(v, list) else v
    kw.update(extra)
    try:
        return cls(**kw)
    except TypeError as exc:
        raise UsageError(f"[{where}]: {exc}") from exc


def parse_config(doc: dict) -> ExperimentConfig:
    top = {"seed", "output", "data", "oracle", "substitute", "attack", "run", "sweep"}
    unknown = set(doc) - top
    if unknown:
        raise UsageError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    for name in top - {"seed", "output"}:
        if name in doc and not isinstance(doc[name], dict):
            raise UsageError(f"[{name}] must be a table")
    attack = _build(AttackConfig, doc.get("attack", {}), "attack")
    training = _build(TrainConfig, doc.get("substitute", {}), "substitute")
    run_table = dict(doc.get("run", {}))
    for nested in ("attack", "training", "seed"):
        if nested in run_table:
            raise UsageError(f"[run] may not set {nested!r}; use its own section")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        raise UsageError("seed must be an integer")
    run = _build(RunConfig, run_table, "run", attack=attack, training=training, seed=seed)
    return ExperimentConfig(
        seed=seed,
        output=str(doc.get("output", "results")),
        data=_build(DataSpec, doc.get("data", {}), "data"),
        oracle=_build(OracleSpec, doc.get("oracle", {}), "oracle"),
        run=run,
        sweep=_build(SweepSpec, doc.get("sweep", {}), "sweep"),
    )


def load_config(path) -> ExperimentConfig:
    """Read and validate a TOML config. Parse problems raise UsageError."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from exc
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    return parse_config(doc)


def build_dataset(spec: DataSpec, seed: int) -> Dataset:
    s = derive_seed(seed, "data") if spec.seed is None else spec.seed
    if spec.source == "blobs":
        return gen_blobs(spec.n_classes, spec.n_per_class, spec.n_features, spec.spread, s,
                         spec.center_low, spec.center_high)
    if spec.source == "moons":
        return gen_moons(spec.n_per_class, spec.noise, s)
    return load_idx(spec.images, spec.labels, spec.n_classes)


def build_task(cfg: ExperimentConfig, seed: int | None = None) -> TaskData:
    seed = cfg.seed if seed is None else seed
    d = cfg.data
    s = derive_seed(seed, "split") if d.seed is None else d.seed
    return split_task(build_dataset(d, seed), s, d.oracle_frac, d.pool_frac)


def train_oracle(spec: OracleSpec, task: TaskData, seed: int) -> Params:
    s = derive_seed(seed, "oracle") if spec.seed is None else spec.seed
    tr = task.oracle_train
    net = NetworkSpec((tr.X.shape[1], *spec.hidden, task.n_classes), spec.activation)
    return train(init_params(net, s), tr.X, tr.y, epochs=spec.epochs, seed=s,
                 batch_size=spec.batch_size)


def build_oracle(cfg: ExperimentConfig, task: TaskData, seed: int | None = None) -> Oracle:
    """Remote when a URL is set, else a saved model, else one trained here."""
    seed = cfg.seed if seed is None else seed
    o = cfg.oracle
    if o.url is not None:
        return RemoteOracle(o.url, task.n_features, task.n_classes, timeout=o.timeout,
                            retries=o.retries, cache=o.cache)
    if o.params is not None:
        params = load_params(Path(o.params))
        if params.spec.n_inputs != task.n_features:
            raise UsageError("saved oracle does not match the data dimension")
    else:
        params = train_oracle(o, task, seed)
    return LocalOracle(params, cache=o.cache)
