"""Substitute training loops: passive doubling, active selection, Raw baseline.

Each iteration labels the pending candidates with the oracle, retrains the
substitute from a fresh seeded initialization on everything labeled so far,
records metrics, then crafts the next batch of candidates from the current
training set.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .attacks import AttackConfig, craft_pool
from .datasets import TaskData
from .errors import UsageError
from .evalmetrics import EvalSet, simi_metric, transfer_accuracy
from .netcore import NetworkSpec, init_params, train
from .oracle import Oracle
from .selector import CandidatePool, SelectionPlan, reservoir_sample, select

log = logging.getLogger(__name__)

SCHEDULES = ("passive", "active", "raw")
CSV_HEADER = ("itr", "query", "acc", "simi", "set_size", "wall_ms")


@dataclass(frozen=True)
class TrainConfig:
    hidden: tuple[int, ...] = (32,)
    activation: str = "relu"
    epochs: int = 100
    batch_size: int = 32
    optimizer: str = "adam"
    learning_rate: float | None = None
    warm_start: bool = False

    def spec(self, n_inputs: int, n_classes: int) -> NetworkSpec:
        return NetworkSpec((n_inputs, *self.hidden, n_classes), self.activation)


@dataclass(frozen=True)
class RunConfig:
    """One substitute-training run.

    ``rho_max`` counts loop iterations, so records run from itr 0 to
    ``rho_max - 1``. ``raw_switch`` is the first iteration whose crafted
    batch is reservoir-sampled down to ``raw_k`` in the Raw baseline.
    """

    schedule: str = "active"
    rho_max: int = 41
    initial_size: int = 100
    per_class: int | None = 10
    attack: AttackConfig = field(default_factory=AttackConfig)
    strategy: str = "ME+div"
    k: int = 10
    raw_switch: int | None = None
    raw_k: int | None = None
    training: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    metric_every: int = 1
    lam_eval: float = 0.2
    pool_cap: int | None = None
    prelabeled_s0: bool = False

    def __post_init__(self):
        if self.schedule not in SCHEDULES:
            raise UsageError(f"unknown schedule {self.schedule!r}")
        if self.rho_max < 1:
            raise UsageError("rho_max must be at least 1")
        if self.initial_size < 1:
            raise UsageError("initial set must be nonempty")
        if self.per_class is not None and self.per_class < 1:
            raise UsageError("per_class must be positive")
        if self.metric_every < 1:
            raise UsageError("metric_every must be positive")
        if self.schedule == "raw" and (self.raw_switch is None or self.raw_k is None):
            raise UsageError("the raw schedule needs raw_switch and raw_k")
        SelectionPlan(self.strategy, self.k)


@dataclass
class RunRecord:
    itr: int
    query: int
    acc: float
    simi: float
    set_size: int
    wall_ms: float = 0.0
    acc_truth: float = float("nan")
    eval_queries: int = 0

    def csv_row(self, wall_time: bool) -> list[str]:
        wall = f"{self.wall_ms:.1f}" if wall_time else "0"
        return [str(self.itr), str(self.query), _fmt(self.acc), _fmt(self.simi),
                str(self.set_size), wall]


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else f"{v:.6f}"


@dataclass
class RunOutcome:
    records: list[RunRecord]
    substitute: object
    inputs: np.ndarray
    labels: np.ndarray


def derive_seed(seed: int, name: str, rho: int = 0) -> int:
    """Stable per-purpose seed; independent of Python's hash randomization."""
    ss = np.random.SeedSequence([seed & 0xFFFFFFFF, zlib.crc32(name.encode()), rho])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def initial_indices(labels, size: int, per_class: int | None, seed: int) -> np.ndarray:
    """Seeded choice of the starting set, balanced per class when asked."""
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    if per_class is None:
        if size > labels.size:
            raise UsageError("initial set larger than the attacker pool")
        return np.sort(rng.choice(labels.size, size=size, replace=False))
    classes = np.unique(labels)
    if size != per_class * classes.size:
        raise UsageError(
            f"initial size {size} != {per_class} per class x {classes.size} classes"
        )
    picked = []
    for c in classes:
        members = np.flatnonzero(labels == c)
        if members.size < per_class:
            raise UsageError(f"class {c} has only {members.size} pool samples")
        picked.append(rng.choice(members, size=per_class, replace=False))
    return np.sort(np.concatenate(picked))


def _key(row: np.ndarray) -> bytes:
    # + 0.0 folds -0.0 into 0.0
    return (row + 0.0).tobytes()


def _drop_duplicates(candidates: np.ndarray, seen: set[bytes]) -> np.ndarray:
    keep = []
    local = set()
    for r, row in enumerate(candidates):
        key = _key(row)
        if key in seen or key in local:
            continue
        local.add(key)
        keep.append(r)
    return np.asarray(keep, dtype=np.int64)


class _CsvSink:
    def __init__(self, path, wall_time: bool):
        self.wall_time = wall_time
        self.fh = None
        if path is not None:
            Path(path).parent.mkdir(parents=True, exist_ok=True)
            self.fh = open(path, "w", newline="")
            self.writer = csv.writer(self.fh, lineterminator="\n")
            self.writer.writerow(CSV_HEADER)
            self.fh.flush()

    def write(self, rec: RunRecord):
        if self.fh is not None:
            self.writer.writerow(rec.csv_row(self.wall_time))
            self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def _craft_next(config: RunConfig, rho: int, params, S: np.ndarray, seen: set[bytes],
                audit) -> np.ndarray:
    """Candidates to label at the start of iteration ``rho + 1``."""
    source = S
    if config.pool_cap is not None and S.shape[0] > config.pool_cap:
        rng = np.random.default_rng(derive_seed(config.seed, "pool_cap", rho))
        source = S[np.sort(rng.choice(S.shape[0], size=config.pool_cap, replace=False))]
    pool = craft_pool(params, source, config.attack)
    fresh = _drop_duplicates(pool.inputs, seen)
    if fresh.size < len(pool):
        log.debug("itr %d: dropped %d duplicate candidates", rho, len(pool) - fresh.size)
    pool = pool.subset(fresh)
    if len(pool) == 0:
        return np.zeros((0, S.shape[1]))

    if config.schedule == "passive" or (
        config.schedule == "raw" and rho < config.raw_switch
    ):
        chosen = np.arange(len(pool))
    elif config.schedule == "raw":
        chosen = np.asarray(
            reservoir_sample(range(len(pool)), config.raw_k,
                             derive_seed(config.seed, "reservoir", rho)),
            dtype=np.int64,
        )
    else:
        plan = SelectionPlan(config.strategy, min(config.k, len(pool)),
                             derive_seed(config.seed, "select", rho))
        chosen = select(pool, S, params, plan)
        if audit is not None:
            _audit(audit, rho, pool, S, params, chosen)
    return pool.inputs[chosen]


def _audit(fh, rho, pool: CandidatePool, S, params, chosen):
    row = {
        "itr": rho,
        "entropy": pool.entropies(params).round(6).tolist(),
        "margin": pool.margins(params).round(6).tolist(),
        "distance": pool.distances(S).round(6).tolist(),
        "selected": [int(i) for i in chosen],
    }
    fh.write(json.dumps(row) + "\n")
    fh.flush()


def run_schedule(config: RunConfig, oracle: Oracle, data: TaskData, csv_path=None,
                 wall_time: bool = False, audit_path=None) -> RunOutcome:
    """Run any schedule. Records stream to ``csv_path`` as they are produced,
    so a failed run leaves its completed rows on disk.
    """
    pool = data.attacker_pool
    if oracle.n_inputs != pool.X.shape[1]:
        raise UsageError("oracle input dimension does not match the data")
    eval_set = EvalSet(data.eval.X, data.eval.y)
    spec = config.training.spec(pool.X.shape[1], data.n_classes)
    init_seed = derive_seed(config.seed, "init")
    train_seed = derive_seed(config.seed, "train")

    s0 = initial_indices(pool.y, config.initial_size, config.per_class,
                         derive_seed(config.seed, "s0"))
    S = pool.X[s0].copy()
    sink = _CsvSink(csv_path, wall_time)
    audit = open(audit_path, "w") if audit_path is not None else None
    records: list[RunRecord] = []
    params = None
    labels = np.zeros(0, dtype=np.int64)
    try:
        t0 = time.perf_counter()
        labels = pool.y[s0].copy() if config.prelabeled_s0 else oracle.query_batch(S)
        seen = {_key(row) for row in S}
        pending = None
        for rho in range(config.rho_max):
            if rho > 0:
                t0 = time.perf_counter()
                oracle.ledger.begin_iteration()
                new_labels = oracle.query_batch(pending)
                S = np.vstack([S, pending])
                labels = np.concatenate([labels, new_labels])
                seen.update(_key(row) for row in pending)
            t = config.training
            start = params if (t.warm_start and params is not None) else init_params(spec, init_seed)
            seed_rho = derive_seed(config.seed, "train", rho) if t.warm_start else train_seed
            params = train(start, S, labels, epochs=t.epochs, optimizer=t.optimizer,
                           seed=seed_rho, batch_size=t.batch_size,
                           learning_rate=t.learning_rate)
            last = rho == config.rho_max - 1
            if rho % config.metric_every == 0 or last:
                acc = transfer_accuracy(params, oracle, eval_set, config.lam_eval)
                simi = simi_metric(params, oracle, eval_set)
            else:
                acc = {"acc": float("nan"), "acc_truth": float("nan")}
                simi = float("nan")
            rec = RunRecord(rho, oracle.ledger.total, acc["acc"], simi, S.shape[0],
                            (time.perf_counter() - t0) * 1000.0, acc["acc_truth"],
                            oracle.eval_queries)
            records.append(rec)
            sink.write(rec)
            log.info("itr %d query %d acc %.4f simi %.4f |S| %d",
                     rec.itr, rec.query, rec.acc, rec.simi, rec.set_size)
            if not last:
                pending = _craft_next(config, rho, params, S, seen, audit)
    finally:
        sink.close()
        if audit is not None:
            audit.close()
    return RunOutcome(records, params, S, labels)


def run_passive(config: RunConfig, oracle: Oracle, data: TaskData, **kw) -> list[RunRecord]:
    """Doubling schedule: every crafted candidate is labeled."""
    return run_schedule(replace(config, schedule="passive"), oracle, data, **kw).records


def run_active(config: RunConfig, oracle: Oracle, data: TaskData, **kw) -> list[RunRecord]:
    """k queries per iteration chosen by the configured selection strategy."""
    return run_schedule(replace(config, schedule="active"), oracle, data, **kw).records


def run_raw_baseline(config: RunConfig, oracle: Oracle, data: TaskData,
                     **kw) -> list[RunRecord]:
    """Doubling until ``raw_switch``, then reservoir batches of ``raw_k``."""
    return run_schedule(replace(config, schedule="raw"), oracle, data, **kw).records


def write_records_csv(path, records, wall_time: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for rec in records:
            w.writerow(rec.csv_row(wall_time))


def read_records_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {"itr": int(r["itr"]), "query": int(r["query"]), "acc": float(r["acc"]),
             "simi": float(r["simi"]), "set_size": int(r["set_size"]),
             "wall_ms": float(r["wall_ms"])}
            for r in csv.DictReader(fh)
        ]
