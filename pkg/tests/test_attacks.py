import itertools

import numpy as np
import pytest

from activesub.attacks import (
    AttackConfig,
    best_pair,
    craft_pool,
    cw_l2,
    deepfool,
    deepfool_step,
    fgsm,
    fgsm_step,
    fgv,
    fgv_step,
    igs,
    jsma,
    saliency_map,
)
from activesub.errors import SingularGradientError, UsageError
from activesub.netcore import Head, NetworkSpec, input_gradient, predict, zero_params

from conftest import linear_binary, random_net


def brute_force_pair(S, domain):
    best, arg = 0.0, None
    for i, j in itertools.combinations(range(S.size), 2):
        if domain[i] and domain[j] and S[i] + S[j] > best:
            best, arg = S[i] + S[j], (i, j)
    return arg


def test_fgsm_linear_sign_pattern():
    w = np.array([0.5, -2.0, 0.0, 1.0])
    p = linear_binary(w, 1.0)
    x = np.full(4, 0.5)  # f = 0.25
    # predicted class 1; the loss gradient points along -w
    step = fgsm_step(p, x, 0.2)[0]
    np.testing.assert_array_equal(step, -0.2 * np.sign(w))
    out = fgsm(p, x, 0.2)
    np.testing.assert_allclose(out.x_adv, np.clip(x - 0.2 * np.sign(w), 0, 1))


def test_fgsm_budget_random_nets():
    rng = np.random.default_rng(0)
    for _ in range(100):
        p = random_net(rng)
        X = rng.uniform(size=(3, p.spec.n_inputs))
        step = fgsm_step(p, X, 0.2)
        assert np.all(np.isin(np.abs(step), [0.0, 0.2]))
        out = fgsm(p, X[0], 0.2)
        assert np.all((out.x_adv >= 0) & (out.x_adv <= 1))


def test_fgsm_default_lambda():
    assert AttackConfig().lam == 0.2
    assert AttackConfig().eps == 0.2
    assert AttackConfig().alpha == 10


def test_igs_single_saturated_step_equals_fgsm():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p = random_net(rng)
        x = rng.uniform(size=p.spec.n_inputs)
        a = igs(p, x, eps=0.2, alpha=0.5, iters=1, alpha_mode="step_size")
        b = fgsm(p, x, 0.2)
        np.testing.assert_array_equal(a.x_adv, b.x_adv)


def test_igs_stays_in_ball_after_every_step():
    rng = np.random.default_rng(2)
    for _ in range(30):
        p = random_net(rng, scale=2.0)
        x = rng.uniform(size=p.spec.n_inputs)
        for steps in range(1, 11):
            out = igs(p, x, eps=0.2, alpha=0.05, iters=steps, alpha_mode="step_size")
            assert np.max(np.abs(out.x_adv - x)) <= 0.2 + 1e-12
            assert np.all((out.x_adv >= 0) & (out.x_adv <= 1))


def test_igs_step_count_reading():
    cfg = AttackConfig("igs", eps=0.2, alpha=10)
    size, n = cfg.igs_schedule()
    assert n == 10 and size == pytest.approx(0.02)
    size, n = AttackConfig("igs", alpha=0.05, iters=7, igs_alpha_mode="step_size").igs_schedule()
    assert (size, n) == (0.05, 7)


def test_igs_stops_when_label_flips():
    p = linear_binary(np.array([1.0, 1.0]), -1.0)
    x = np.array([0.525, 0.525])  # f = 0.05, class 1
    out = igs(p, x, eps=0.2, alpha=0.01, iters=50, alpha_mode="step_size")
    assert out.flipped
    assert out.info["steps"] == 3  # f drops by 0.02 per step


def test_fgv_parallel_to_gradient():
    rng = np.random.default_rng(3)
    for _ in range(50):
        p = random_net(rng)
        x = rng.uniform(size=p.spec.n_inputs)
        step = fgv_step(p, x, 0.2)[0]
        g = input_gradient(p, x, Head.loss(int(predict(p, x))))
        if np.linalg.norm(g) == 0:
            continue
        cos = step @ g / (np.linalg.norm(step) * np.linalg.norm(g))
        assert cos == pytest.approx(1.0, abs=1e-9)


def test_fgv_linear_direction_and_zero_gradient_flag():
    w = np.array([1.0, -1.0, 2.0])
    p = linear_binary(w, 0.0)
    x = np.array([0.6, 0.3, 0.5])
    step = fgv_step(p, x, 0.2)[0]
    cos = step @ w / (np.linalg.norm(step) * np.linalg.norm(w))
    assert abs(cos) == pytest.approx(1.0, abs=1e-12)
    flat = zero_params(NetworkSpec((3, 2)))
    out = fgv(flat, x, 0.2)
    assert out.flag == "zero-gradient"
    np.testing.assert_array_equal(out.x_adv, x)


def test_jsma_zero_gradient_no_perturbation():
    p = zero_params(NetworkSpec((4, 3)))
    x = np.full(4, 0.5)
    np.testing.assert_array_equal(saliency_map(p, x, 1), 0.0)
    out = jsma(p, x, target=1)
    assert out.flag == "no-saliency"
    np.testing.assert_array_equal(out.x_adv, x)


def test_jsma_pair_matches_brute_force_three_features():
    rng = np.random.default_rng(4)
    checked = 0
    for _ in range(100):
        p = random_net(rng, n_in=3, n_out=3)
        x = rng.uniform(0.1, 0.9, size=3)
        S = saliency_map(p, x, 2)
        domain = np.ones(3, dtype=bool)
        want = brute_force_pair(S, domain)
        assert best_pair(S, domain) == want
        if want is not None and predict(p, x) != 2:
            out = jsma(p, x, target=2, theta=0.1, iters=1)
            changed = tuple(np.flatnonzero(out.x_adv != x))
            assert changed == want
            checked += 1
    assert checked > 10


def test_saliency_rule_zeroes():
    rng = np.random.default_rng(5)
    from activesub.netcore import prob_jacobian
    for _ in range(20):
        p = random_net(rng, n_in=6, n_out=4)
        x = rng.uniform(size=6)
        J = prob_jacobian(p, x)
        S = saliency_map(p, x, 0)
        other = J.sum(0) - J[0]
        assert np.all(S[(J[0] < 0) | (other > 0)] == 0)
        keep = (J[0] >= 0) & (other <= 0)
        np.testing.assert_allclose(S[keep], J[0][keep] * np.abs(other[keep]))


def test_jsma_target_must_differ_and_budget(blob_substitute, blob_task):
    x = blob_task.eval.X[0]
    with pytest.raises(UsageError):
        jsma(blob_substitute, x, target=int(predict(blob_substitute, x)))
    with pytest.raises(UsageError):
        jsma(blob_substitute, x, max_features=17)
    out = jsma(blob_substitute, x, max_features=4, theta=0.05)
    assert out.info["features"] <= 4
    assert out.info["target"] != out.label_before


def test_jsma_success_rate_on_blob_substitute(blob_substitute, blob_task):
    X = blob_task.eval.X[:40]
    hits = 0
    for x in X:
        out = jsma(blob_substitute, x, max_features=16, theta=0.1)
        hits += out.label_after == out.info["target"]
    rate = hits / len(X)
    print(f"JSMA target reached within 16 features: {rate:.2%}")
    assert 0 < rate <= 1


def test_deepfool_linear_projection_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        w = rng.standard_normal(5)
        x = rng.uniform(0.4, 0.6, size=5)
        b = -w @ x + rng.uniform(0.01, 0.1) * rng.choice([-1, 1])
        p = linear_binary(w, b)
        f0 = w @ x + b
        step, singular = deepfool_step(p, x)
        assert not singular[0]
        assert abs(w @ (x + step[0]) + b) <= 1e-6
        out = deepfool(p, x, eta=0.0, iters=1)
        assert abs(w @ out.x_adv + b) <= 1e-6
        assert out.l2 == pytest.approx(abs(f0) / np.linalg.norm(w), abs=1e-9)
        over = deepfool(p, x, eta=0.02, iters=1)
        assert np.sign(w @ over.x_adv + b) == -np.sign(f0)
        assert over.l2 == pytest.approx(abs(f0) / np.linalg.norm(w) * 1.02, abs=1e-9)


def test_deepfool_singular():
    with pytest.raises(SingularGradientError):
        deepfool(zero_params(NetworkSpec((3, 2))), np.full(3, 0.5))


def test_deepfool_flips_multiclass(blob_substitute, blob_task):
    X = blob_task.eval.X[:30]
    pool = craft_pool(blob_substitute, X, AttackConfig("deepfool", iters=50))
    assert np.mean([s.flipped for s in pool.samples]) >= 0.9


def test_cw_saturated_hinge_only_shrinks():
    w = np.array([2.0, -1.0, 1.0])
    p = linear_binary(w, 0.0)
    x = np.array([0.8, 0.2, 0.7])  # f = 2.1, predicted 1
    out = cw_l2(p, x, label=0, c=1.0, kappa=0.0, iters=100)
    # attacking class 0, already on the other side by 2.1 > kappa
    assert out.info["objective_best"] <= out.info["objective_initial"]
    assert out.l2 < 1e-6
    assert out.label_after == 1


def test_cw_defaults():
    cfg = AttackConfig("cw")
    assert cfg.iters == 100 and cfg.step == 0.005 and cfg.c == 1.0 and cfg.kappa == 0.0


def test_cw_objective_never_worse(blob_substitute, blob_task):
    X = blob_task.eval.X[:50]
    pool = craft_pool(blob_substitute, X, AttackConfig("cw"))
    for s in pool.samples:
        assert s.info["objective_best"] <= s.info["objective_initial"]
    print("C&W flip rate:", np.mean([s.flipped for s in pool.samples]))


def test_attack_config_validation():
    with pytest.raises(UsageError):
        AttackConfig("cw", iters=0)
    with pytest.raises(UsageError):
        AttackConfig("nope")
    with pytest.raises(UsageError):
        AttackConfig("jsma", theta=0.0)
    assert AttackConfig("C&W").method == "cw"


@pytest.mark.parametrize("method", ["fgsm", "igs", "fgv", "jsma", "deepfool", "cw"])
def test_craft_pool_contract(method, blob_substitute, blob_task):
    X = blob_task.attacker_pool.X[:20]
    cfg = AttackConfig(method, iters=20)
    a = craft_pool(blob_substitute, X, cfg)
    b = craft_pool(blob_substitute, X, cfg)
    assert len(a) == len(X)
    assert np.array_equal(a.inputs, b.inputs)
    assert np.all((a.inputs >= 0) & (a.inputs <= 1))
    labels = predict(blob_substitute, a.inputs)
    for r, s in enumerate(a.samples):
        assert s.source_index == r
        d = s.x_adv - X[r]
        assert s.l2 == pytest.approx(np.linalg.norm(d), abs=1e-9)
        assert s.linf == pytest.approx(np.max(np.abs(d)), abs=1e-9)
        assert s.label_after == labels[r]


def test_craft_pool_rejects_empty(blob_substitute):
    with pytest.raises(UsageError):
        craft_pool(blob_substitute, np.zeros((0, 16)), AttackConfig())
