import itertools
import zlib

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from activesub.errors import UsageError
from activesub.netcore import NetworkSpec, forward, zero_params
from activesub.selector import (
    CandidatePool,
    SelectionPlan,
    diversity_distance,
    entropy,
    margin,
    ordinal_rank,
    reservoir_sample,
    select,
)

from conftest import random_net


class ScoredPool(CandidatePool):
    """Pool with scores fixed by the test, bypassing the substitute."""

    def __init__(self, H=None, dis=None, d=None):
        n = len(next(v for v in (H, dis, d) if v is not None))
        super().__init__(np.zeros((n, 1)))
        self._H, self._dis, self._d = H, dis, d

    def entropies(self, params):
        return np.asarray(self._H, dtype=float)

    def margins(self, params):
        return np.asarray(self._dis, dtype=float)

    def distances(self, reference):
        return np.asarray(self._d, dtype=float)


def brute_rank(scores, descending):
    # rank = 1 + number of entries that come strictly earlier
    s = np.asarray(scores, dtype=float)
    idx = np.arange(s.size)
    better = s[None, :] > s[:, None] if descending else s[None, :] < s[:, None]
    tie_before = (s[None, :] == s[:, None]) & (idx[None, :] < idx[:, None])
    return 1 + np.sum(better | tie_before, axis=1)


def brute_select(keys, k):
    best = sorted(range(len(keys)), key=lambda i: (keys[i], i))[:k]
    return sorted(best)


def test_entropy_examples():
    assert entropy(np.full(10, 0.1)) == pytest.approx(np.log(10), abs=1e-12)
    assert entropy(np.eye(5)[2]) == 0.0
    assert entropy([0.5, 0.5, 0.0, 0.0]) == pytest.approx(np.log(2))


def test_margin_examples():
    assert margin(np.eye(4)[1]) == 1.0
    assert margin(np.full(4, 0.25)) == 0.0
    assert margin([0.6, 0.3, 0.1]) == pytest.approx(0.3)
    with pytest.raises(UsageError):
        margin([1.0])


def test_score_ranges_on_random_probs():
    rng = np.random.default_rng(0)
    P = rng.dirichlet(np.ones(7) * 0.3, size=500)
    H, D = entropy(P), margin(P)
    assert np.all((H >= 0) & (H <= np.log(7) + 1e-12))
    assert np.all((D >= 0) & (D <= 1))


def test_diversity_examples():
    assert diversity_distance([3.0, 4.0], np.zeros((1, 2))) == 5.0
    rng = np.random.default_rng(1)
    R = rng.uniform(size=(50, 6))
    X = np.vstack([R[7], rng.uniform(size=(49, 6))])
    got = diversity_distance(X, R)
    assert got[0] == 0.0
    want = [min(np.linalg.norm(x - r) for r in R) for x in X]
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)
    with pytest.raises(UsageError):
        diversity_distance([1.0], np.zeros((0, 1)))


def test_me_example():
    pool = ScoredPool(H=[0.1, 2.0, 1.0])
    assert select(pool, None, None, SelectionPlan("ME", 1)).tolist() == [1]


def test_mb_div_hand_example():
    dis, d = [0.4, 0.1, 0.3, 0.2], [1, 2, 4, 3]
    assert ordinal_rank(dis, descending=False).tolist() == [4, 1, 3, 2]
    assert ordinal_rank(d, descending=True).tolist() == [4, 3, 1, 2]
    got = select(ScoredPool(dis=dis, d=d), None, None, SelectionPlan("MB+div", 2))
    assert got.tolist() == [1, 2]
    # every ordering consistent with the rank sums (8, 4, 4, 4) and index tiebreak
    sums = [8, 4, 4, 4]
    orders = [p for p in itertools.permutations(range(4))
              if all((sums[a], a) < (sums[b], b) for a, b in zip(p, p[1:]))]
    assert len(orders) == 1
    assert sorted(orders[0][:2]) == [1, 2]


@pytest.mark.parametrize("strategy", ["ME", "MB", "RS+div", "ME+div", "MB+div"])
def test_selection_matches_brute_force(strategy):
    rng = np.random.default_rng(zlib.crc32(strategy.encode()))
    for trial in range(40):
        n = int(rng.integers(1, 1001))
        k = int(rng.integers(1, n + 1))
        # coarse rounding forces ties
        H = np.round(rng.uniform(0, 2.3, n), int(rng.integers(1, 4)))
        dis = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 4)))
        d = np.round(rng.uniform(0, 3, n), int(rng.integers(1, 4)))
        keys = {
            "ME": brute_rank(H, True),
            "MB": brute_rank(dis, False),
            "RS+div": brute_rank(d, True),
            "ME+div": brute_rank(H, True) + brute_rank(d, True),
            "MB+div": brute_rank(dis, False) + brute_rank(d, True),
        }[strategy]
        got = select(ScoredPool(H, dis, d), None, None, SelectionPlan(strategy, k))
        assert got.tolist() == brute_select(list(keys), k)


def test_net_backed_pool_matches_brute_force():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = random_net(rng, n_in=5, n_out=4, scale=2.0)
        X = rng.uniform(size=(int(rng.integers(5, 200)), 5))
        R = rng.uniform(size=(30, 5))
        pool = CandidatePool(X)
        P = forward(p, X).probs
        H = -np.sum(np.where(P > 0, P * np.log(np.where(P > 0, P, 1)), 0), axis=1)
        d = np.array([min(np.linalg.norm(x - r) for r in R) for x in X])
        got = select(pool, R, p, SelectionPlan("ME+div", 7))
        want = brute_select(list(brute_rank(H, True) + brute_rank(d, True)), 7)
        assert got.tolist() == want


@pytest.mark.parametrize("strategy", ["ME", "ME+div"])
def test_monotone_transform_invariance(strategy):
    rng = np.random.default_rng(3)
    for _ in range(100):
        n = int(rng.integers(2, 300))
        k = int(rng.integers(1, n + 1))
        H = rng.uniform(0, 2.3, n)
        d = rng.uniform(0, 1, n)
        plan = SelectionPlan(strategy, k)
        a = select(ScoredPool(H=H, d=d), None, None, plan)
        b = select(ScoredPool(H=2 * H + 1, d=d), None, None, plan)
        c = select(ScoredPool(H=np.exp(H), d=d), None, None, plan)
        assert a.tolist() == b.tolist() == c.tolist()


def test_div_variants_pick_more_distant_points():
    wins = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n = 200
        H, dis, d = rng.uniform(0, 2, n), rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        pool = ScoredPool(H, dis, d)
        ok = True
        for base, div in (("ME", "ME+div"), ("MB", "MB+div"), ("RS", "RS+div")):
            a = select(pool, None, None, SelectionPlan(base, 10, seed))
            b = select(pool, None, None, SelectionPlan(div, 10, seed))
            ok &= d[b].mean() >= d[a].mean()
        wins += ok
    assert wins >= 18


def test_rs_seeded_and_k_bounds():
    pool = CandidatePool(np.zeros((50, 2)))
    a = select(pool, None, None, SelectionPlan("RS", 5, seed=9))
    b = select(pool, None, None, SelectionPlan("RS", 5, seed=9))
    assert a.tolist() == b.tolist()
    assert len(set(a.tolist())) == 5 and list(a) == sorted(a)
    with pytest.raises(UsageError):
        select(pool, None, None, SelectionPlan("RS", 51))
    with pytest.raises(UsageError):
        SelectionPlan("RS", 0)
    with pytest.raises(UsageError):
        SelectionPlan("best", 1)
    assert SelectionPlan("me_div").strategy == "ME+div"


def test_pool_caches_scores():
    p = zero_params(NetworkSpec((2, 3)))
    pool = CandidatePool(np.full((4, 2), 0.5))
    first = pool.entropies(p)
    assert pool.probs(p) is pool.probs(p)
    np.testing.assert_allclose(first, np.log(3))
    assert pool.subset([0, 2]).inputs.shape == (2, 2)


def test_reservoir_examples():
    assert reservoir_sample(range(5), 5, 0) == [0, 1, 2, 3, 4]
    assert reservoir_sample([], 3, 0) == []
    assert reservoir_sample("ab", 5, 0) == ["a", "b"]
    with pytest.raises(UsageError):
        reservoir_sample(range(3), 0, 0)


def test_reservoir_uniform_frequency():
    counts = np.zeros(5)
    for t in range(10_000):
        for item in reservoir_sample(range(5), 2, t):
            counts[item] += 1
    np.testing.assert_allclose(counts / 10_000, 0.4, atol=0.02)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 60), st.integers(1, 10), st.integers(0, 2**32 - 1))
def test_reservoir_properties(n, k, seed):
    out = reservoir_sample(range(n), k, seed)
    assert len(out) == min(n, k)
    assert out == sorted(set(out))
    assert all(0 <= v < n for v in out)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 10, allow_nan=False), min_size=1, max_size=60),
       st.booleans())
def test_ordinal_rank_is_permutation(scores, descending):
    r = ordinal_rank(scores, descending)
    assert sorted(r.tolist()) == list(range(1, len(scores) + 1))
    assert r.tolist() == brute_rank(scores, descending).tolist()
