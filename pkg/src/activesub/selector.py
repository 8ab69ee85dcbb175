"""Choosing which crafted candidates are worth an oracle query.

Selection only sees the substitute and the candidates; it never gets an
oracle handle, so it cannot peek at labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError
from .netcore import forward

STRATEGIES = ("RS", "ME", "MB", "RS+div", "ME+div", "MB+div", "reservoir")


def _normalize_strategy(name: str) -> str:
    key = name.strip().replace(" ", "").replace("_", "+").lower()
    for s in STRATEGIES:
        if s.lower() == key:
            return s
    raise UsageError(f"unknown selection strategy {name!r}")


def entropy(probs) -> np.ndarray | float:
    """Natural-log entropy of probability vectors along the last axis (0 log 0 = 0)."""
    p = np.asarray(probs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    h = -terms.sum(axis=-1)
    h = np.maximum(h, 0.0)
    return float(h) if h.ndim == 0 else h


def margin(probs) -> np.ndarray | float:
    """Gap between the two largest probabilities."""
    p = np.asarray(probs, dtype=np.float64)
    if p.shape[-1] < 2:
        raise UsageError("margin needs at least two classes")
    top2 = np.sort(p, axis=-1)[..., -2:]
    d = top2[..., 1] - top2[..., 0]
    return float(d) if d.ndim == 0 else d


def diversity_distance(x, reference) -> np.ndarray | float:
    """Minimum Euclidean distance from each x to the reference set (full scan).

    Accepts a single vector or a batch of rows for ``x``.
    """
    R = np.asarray(reference, dtype=np.float64)
    if R.ndim != 2 or R.shape[0] == 0:
        raise UsageError("reference set must be a nonempty 2-D array")
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    X = np.atleast_2d(X)
    out = np.empty(X.shape[0])
    # chunk to bound the (chunk, |R|) distance matrix
    r_sq = np.sum(R * R, axis=1)
    step = max(1, 2_000_000 // max(1, R.shape[0]))
    for start in range(0, X.shape[0], step):
        blk = X[start:start + step]
        d2 = np.sum(blk * blk, axis=1)[:, None] + r_sq[None, :] - 2.0 * blk @ R.T
        nearest = np.argmin(d2, axis=1)
        # recompute the winning distance exactly so members of R give 0
        diff = blk - R[nearest]
        out[start:start + step] = np.sqrt(np.sum(diff * diff, axis=1))
    return float(out[0]) if single else out


class CandidatePool:
    """Crafted candidates plus lazily computed selection scores.

    ``samples`` are :class:`~activesub.attacks.CraftedSample` objects (or
    anything with an ``x_adv`` attribute); a plain 2-D array is accepted too.
    """

    def __init__(self, samples):
        if isinstance(samples, np.ndarray):
            self.samples = None
            self.inputs = np.asarray(samples, dtype=np.float64)
        else:
            self.samples = list(samples)
            self.inputs = (
                np.array([s.x_adv for s in self.samples], dtype=np.float64)
                if self.samples else np.zeros((0, 0))
            )
        self._probs = None
        self._dist = None
        self._dist_ref = None

    def __len__(self):
        return self.inputs.shape[0]

    def probs(self, params):
        if self._probs is None or self._probs[0] is not params:
            self._probs = (params, forward(params, self.inputs).probs)
        return self._probs[1]

    def entropies(self, params) -> np.ndarray:
        return entropy(self.probs(params))

    def margins(self, params) -> np.ndarray:
        return margin(self.probs(params))

    def distances(self, reference) -> np.ndarray:
        if self._dist is None or self._dist_ref is not reference:
            self._dist = diversity_distance(self.inputs, reference)
            self._dist_ref = reference
        return self._dist

    def subset(self, indices):
        idx = list(indices)
        if self.samples is None:
            return CandidatePool(self.inputs[idx])
        return CandidatePool([self.samples[i] for i in idx])


@dataclass(frozen=True)
class SelectionPlan:
    strategy: str = "ME+div"
    k: int = 10
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "strategy", _normalize_strategy(self.strategy))
        if self.k < 1:
            raise UsageError("k must be positive")


def ordinal_rank(scores, descending: bool) -> np.ndarray:
    """1-based ordinal ranks; ties keep pool-index order."""
    s = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-s if descending else s, kind="stable")
    ranks = np.empty(s.size, dtype=np.int64)
    ranks[order] = np.arange(1, s.size + 1)
    return ranks


def _smallest_k(keys, k):
    order = np.argsort(np.asarray(keys), kind="stable")
    return np.sort(order[:k])


def select(pool: CandidatePool, reference, params, plan: SelectionPlan) -> np.ndarray:
    """Indices (ascending pool order) of the ``plan.k`` candidates to query.

    ``reference`` is the current labeled set; ``params`` the substitute.
    """
    n = len(pool)
    k = plan.k
    if k > n:
        raise UsageError(f"cannot select k={k} from a pool of {n}")
    s = plan.strategy
    if s == "RS":
        rng = np.random.default_rng(plan.seed)
        return np.sort(rng.choice(n, size=k, replace=False))
    if s == "reservoir":
        return np.asarray(reservoir_sample(range(n), k, plan.seed), dtype=np.int64)
    if s == "ME":
        return _smallest_k(ordinal_rank(pool.entropies(params), descending=True), k)
    if s == "MB":
        return _smallest_k(ordinal_rank(pool.margins(params), descending=False), k)
    dist_rank = ordinal_rank(pool.distances(reference), descending=True)
    if s == "RS+div":
        return _smallest_k(dist_rank, k)
    if s == "ME+div":
        combined = ordinal_rank(pool.entropies(params), descending=True) + dist_rank
    else:
        combined = ordinal_rank(pool.margins(params), descending=False) + dist_rank
    return _smallest_k(combined, k)


def reservoir_sample(stream, k: int, seed: int) -> list:
    """Single-pass uniform sample of ``k`` items (Algorithm R).

    Returns the whole stream when it is shorter than ``k``. Output keeps
    stream order.
    """
    if k < 1:
        raise UsageError("reservoir size must be positive")
    rng = np.random.default_rng(seed)
    slots: list[tuple[int, object]] = []
    for i, item in enumerate(stream):
        if i < k:
            slots.append((i, item))
        else:
            j = int(rng.integers(0, i + 1))
            if j < k:
                slots[j] = (i, item)
    return [item for _, item in sorted(slots, key=lambda p: p[0])]
