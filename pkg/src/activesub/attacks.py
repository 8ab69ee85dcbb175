"""White-box crafting methods used to generate oracle queries.

Every method takes the current substitute's :class:`~activesub.netcore.Params`
and clean inputs in [0, 1]^n and returns points pushed toward (or over) the
substitute's decision boundary. The batch kernels (``_*_batch``) do the work;
the single-sample functions wrap them and return :class:`CraftedSample`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError, SingularGradientError, UsageError
from .netcore import Adam, Head, Params, forward, prob_jacobian, value_and_input_gradient
from .selector import CandidatePool

log = logging.getLogger(__name__)

METHODS = ("fgsm", "igs", "fgv", "jsma", "deepfool", "cw")

_ALIASES = {"c&w": "cw", "cw_l2": "cw", "cw-l2": "cw", "deep_fool": "deepfool"}


@dataclass(frozen=True)
class AttackConfig:
    """Crafting hyperparameters.

    ``igs_alpha_mode="steps"`` reads ``alpha`` as a step count with per-step
    size ``eps / alpha``; ``"step_size"`` reads it as the per-step size and
    runs ``iters`` steps. ``iters`` caps the iterative methods (C&W,
    DeepFool, JSMA).
    """

    method: str = "cw"
    lam: float = 0.2
    eps: float = 0.2
    alpha: float = 10.0
    igs_alpha_mode: str = "steps"
    kappa: float = 0.0
    c: float = 1.0
    iters: int = 100
    step: float = 0.005
    theta: float = 0.1
    eta: float = 0.02
    jsma_max_features: int | None = None
    jsma_l2_max: float | None = None

    def __post_init__(self):
        method = _ALIASES.get(self.method.lower(), self.method.lower())
        object.__setattr__(self, "method", method)
        if method not in METHODS:
            raise UsageError(f"unknown attack method {self.method!r}")
        if not (self.lam > 0 and self.eps > 0 and self.alpha > 0):
            raise UsageError("lam, eps and alpha must be positive")
        if self.iters < 1:
            raise UsageError("iters must be at least 1")
        if self.kappa < 0 or self.c <= 0 or self.step <= 0:
            raise UsageError("need kappa >= 0, c > 0, step > 0")
        if not (0 < self.theta <= 1):
            raise UsageError("theta must lie in (0, 1]")
        if self.eta < 0:
            raise UsageError("eta must be nonnegative")
        if self.igs_alpha_mode not in ("steps", "step_size"):
            raise UsageError(f"unknown igs_alpha_mode {self.igs_alpha_mode!r}")

    def igs_schedule(self) -> tuple[float, int]:
        """(per-step size, number of steps) for the iterative sign method."""
        if self.igs_alpha_mode == "steps":
            n = max(1, int(round(self.alpha)))
            return self.eps / n, n
        return self.alpha, self.iters


@dataclass
class CraftedSample:
    x_adv: np.ndarray
    source_index: int
    l2: float
    linf: float
    label_before: int
    label_after: int
    flag: str | None = None
    info: dict = field(default_factory=dict)

    @property
    def flipped(self) -> bool:
        return self.label_after != self.label_before


def _batch(x):
    X = np.asarray(x, dtype=np.float64)
    return X[None, :] if X.ndim == 1 else X


def _pred(params, X):
    return np.argmax(forward(params, X).logits, axis=-1)


def _loss_gradient(params, X, labels):
    _, g, _ = value_and_input_gradient(params, X, Head.loss(labels))
    return g


# -- fast gradient family ---------------------------------------------------

def fgsm_step(params: Params, X, lam: float, labels=None) -> np.ndarray:
    """Unclipped sign step ``lam * sign(grad)`` of the loss at ``labels``.

    ``labels`` defaults to the substitute's own prediction.
    """
    X = _batch(X)
    labels = _pred(params, X) if labels is None else labels
    return lam * np.sign(_loss_gradient(params, X, labels))


def fgv_step(params: Params, X, lam: float, labels=None) -> np.ndarray:
    """Unclipped raw-gradient step ``lam * grad``."""
    X = _batch(X)
    labels = _pred(params, X) if labels is None else labels
    return lam * _loss_gradient(params, X, labels)


def _fgsm_batch(params, X, cfg: AttackConfig):
    return np.clip(X + fgsm_step(params, X, cfg.lam), 0.0, 1.0), [None] * len(X), [{}] * len(X)


def _fgv_batch(params, X, cfg: AttackConfig):
    step = fgv_step(params, X, cfg.lam)
    flags = [None if np.any(row) else "zero-gradient" for row in step]
    return np.clip(X + step, 0.0, 1.0), flags, [{}] * len(X)


def _igs_batch(params, X, cfg: AttackConfig):
    size, n_steps = cfg.igs_schedule()
    y0 = _pred(params, X)
    Xa = X.copy()
    active = np.ones(len(X), dtype=bool)
    steps_taken = np.zeros(len(X), dtype=np.int64)
    for _ in range(n_steps):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = _loss_gradient(params, Xa[idx], y0[idx])
        moved = Xa[idx] + size * np.sign(g)
        delta = np.clip(moved - X[idx], -cfg.eps, cfg.eps)
        Xa[idx] = np.clip(X[idx] + delta, 0.0, 1.0)
        steps_taken[idx] += 1
        active[idx] = _pred(params, Xa[idx]) == y0[idx]
    return Xa, [None] * len(X), [{"steps": int(s)} for s in steps_taken]


# -- saliency map -------------------------------------------------------------

def saliency_map(params: Params, x, target: int) -> np.ndarray:
    """Per-feature saliency toward ``target`` from the softmax Jacobian.

    Zero where the target output decreases with the feature or the other
    outputs increase with it; otherwise the target derivative times the
    magnitude of the summed other derivatives.
    """
    J = prob_jacobian(params, np.asarray(x, dtype=np.float64))
    d_target = J[target]
    d_other = J.sum(axis=0) - d_target
    S = d_target * np.abs(d_other)
    S[(d_target < 0) | (d_other > 0)] = 0.0
    return S


def best_pair(saliency: np.ndarray, domain=None):
    """Feature pair maximizing ``S[i] + S[j]`` (i < j) over the search domain.

    Returns None when fewer than two features are searchable or the best sum
    is not positive. Ties go to the lexicographically smallest pair.
    """
    S = np.asarray(saliency, dtype=np.float64)
    idx = np.arange(S.size) if domain is None else np.flatnonzero(domain)
    if idx.size < 2:
        return None
    # stable descending sort keeps lower indices first among equal values
    order = idx[np.argsort(-S[idx], kind="stable")]
    i, j = order[0], order[1]
    if S[i] + S[j] <= 0:
        return None
    return (int(min(i, j)), int(max(i, j)))


def _jsma_one(params, x, cfg: AttackConfig, target=None):
    n = x.size
    max_features = n if cfg.jsma_max_features is None else min(cfg.jsma_max_features, n)
    probs = forward(params, x).probs
    y0 = int(np.argmax(probs))
    if target is None:
        target = int(np.argsort(-probs, kind="stable")[1])
    if target == y0:
        raise UsageError("JSMA target must differ from the current label")
    xa = x.copy()
    used: set[int] = set()
    flag = None
    for it in range(cfg.iters):
        if int(np.argmax(forward(params, xa).logits)) == target or len(used) >= max_features:
            break
        pair = best_pair(saliency_map(params, xa, target), xa < 1.0)
        if pair is None:
            if it == 0:
                flag = "no-saliency"
            break
        cand = xa.copy()
        cand[list(pair)] = np.minimum(cand[list(pair)] + cfg.theta, 1.0)
        if cfg.jsma_l2_max is not None and np.linalg.norm(cand - x) > cfg.jsma_l2_max:
            break
        xa = cand
        used.update(pair)
    return xa, flag, {"target": target, "features": len(used)}


def _jsma_batch(params, X, cfg: AttackConfig):
    out, flags, infos = [], [], []
    for x in X:
        xa, flag, info = _jsma_one(params, x, cfg)
        out.append(xa)
        flags.append(flag)
        infos.append(info)
    return np.array(out).reshape(X.shape), flags, infos


# -- DeepFool -----------------------------------------------------------------

def deepfool_step(params: Params, X, labels=None, min_norm=1e-12):
    """One projection step per row, without overshoot or clipping.

    The scalar is the gap ``Z_r - Z_l`` between the runner-up logit and the
    logit of class ``l`` (``labels``, default the current prediction); it is
    negative before the boundary and zero on it. The step is
    ``|s| * |grad s| / ||grad s||^2 * sign(grad s)``, which is exact for an
    affine scalar. Rows with a gradient norm below ``min_norm`` get a zero
    step and are reported in the returned mask.
    """
    X = _batch(X)
    res = forward(params, X)
    Z = res.logits
    labels = np.argmax(Z, axis=1) if labels is None else np.broadcast_to(labels, (len(X),))
    masked = Z.copy()
    masked[np.arange(len(X)), labels] = -np.inf
    runner = np.argmax(masked, axis=1)
    s, g, _ = value_and_input_gradient(params, X, Head.logit_diff(runner, labels))
    sq = np.sum(g * g, axis=1)
    singular = np.sqrt(sq) < min_norm
    coef = np.where(singular, 0.0, np.abs(s) / np.where(singular, 1.0, sq))
    step = coef[:, None] * np.abs(g) * np.sign(g)
    return step, singular


def _deepfool_batch(params, X, cfg: AttackConfig):
    y0 = _pred(params, X)
    Xa = X.copy()
    flags = [None] * len(X)
    active = np.ones(len(X), dtype=bool)
    for _ in range(cfg.iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        step, singular = deepfool_step(params, Xa[idx], y0[idx])
        for r in idx[singular]:
            flags[r] = "singular-gradient"
        Xa[idx] = np.clip(Xa[idx] + (1.0 + cfg.eta) * step, 0.0, 1.0)
        active[idx] = (~singular) & (_pred(params, Xa[idx]) == y0[idx])
    return Xa, flags, [{}] * len(X)


# -- Carlini & Wagner L2 --------------------------------------------------------

def _cw_objective(params, Xp, X, t, c, kappa):
    """Objective, its gradient wrt Xp, and the hinge term."""
    res = forward(params, Xp)
    Z = res.logits
    rows = np.arange(len(Xp))
    masked = Z.copy()
    masked[rows, t] = -np.inf
    other = np.argmax(masked, axis=1)
    gap = Z[rows, t] - Z[rows, other]
    hinge = np.maximum(gap, -kappa)
    delta = Xp - X
    dist = np.sqrt(np.sum(delta * delta, axis=1))
    obj = dist + c * hinge
    _, dgap, _ = value_and_input_gradient(params, Xp, Head.logit_diff(t, other), res=res)
    # subgradient 0 for the norm at delta = 0
    ddist = delta / np.where(dist > 0, dist, 1.0)[:, None]
    grad = ddist + c * (gap > -kappa)[:, None] * dgap
    return obj, grad, gap


def _cw_batch(params, X, cfg: AttackConfig, labels=None, strict=False):
    t = _pred(params, X) if labels is None else np.broadcast_to(np.asarray(labels), (len(X),))
    w = np.arctanh((2.0 * X - 1.0) * (1.0 - 1e-9))
    opt = Adam(learning_rate=cfg.step)
    Xp = (np.tanh(w) + 1.0) / 2.0
    obj0, grad, gap = _cw_objective(params, Xp, X, t, cfg.c, cfg.kappa)
    best_obj = obj0.copy()
    best_x = Xp.copy()
    best_flipped = gap < 0
    flags = [None] * len(X)
    bad = ~np.isfinite(obj0)
    for it in range(cfg.iters):
        g_w = grad * (1.0 - np.tanh(w) ** 2) / 2.0
        opt.step([w], [g_w])
        Xp = (np.tanh(w) + 1.0) / 2.0
        obj, grad, gap = _cw_objective(params, Xp, X, t, cfg.c, cfg.kappa)
        nonfinite = ~np.isfinite(obj)
        if nonfinite.any():
            if strict:
                r = int(np.flatnonzero(nonfinite)[0])
                raise NumericalError(
                    "C&W objective became non-finite",
                    {"iteration": it, "row": r, "objective": float(obj[r]),
                     "iterate": Xp[r].copy()},
                )
            bad |= nonfinite
            grad = np.where(nonfinite[:, None], 0.0, grad)
        flipped = gap < 0
        # admissible: no worse than the start; prefer label flips, then lowest objective
        admissible = np.isfinite(obj) & (obj <= obj0)
        better = admissible & (
            (flipped & ~best_flipped) | ((flipped == best_flipped) & (obj < best_obj))
        )
        best_obj = np.where(better, obj, best_obj)
        best_flipped = np.where(better, flipped, best_flipped)
        best_x[better] = Xp[better]
    for r in np.flatnonzero(bad):
        flags[r] = "non-finite"
    infos = [
        {"objective_initial": float(a), "objective_best": float(b)}
        for a, b in zip(obj0, best_obj)
    ]
    return np.clip(best_x, 0.0, 1.0), flags, infos


_KERNELS = {
    "fgsm": _fgsm_batch,
    "fgv": _fgv_batch,
    "igs": _igs_batch,
    "jsma": _jsma_batch,
    "deepfool": _deepfool_batch,
    "cw": _cw_batch,
}


def _package(params, X, Xa, flags, infos, labels_before=None, offset=0):
    before = _pred(params, X) if labels_before is None else labels_before
    after = _pred(params, Xa)
    out = []
    for r in range(len(X)):
        d = Xa[r] - X[r]
        out.append(CraftedSample(
            x_adv=Xa[r].copy(),
            source_index=offset + r,
            l2=float(np.linalg.norm(d)),
            linf=float(np.max(np.abs(d))) if d.size else 0.0,
            label_before=int(before[r]),
            label_after=int(after[r]),
            flag=flags[r],
            info=dict(infos[r]),
        ))
    return out


def _single(params, x, Xa, flags, infos):
    return _package(params, _batch(x), Xa, flags, infos)[0]


def fgsm(params: Params, x, lam: float = 0.2) -> CraftedSample:
    X = _batch(x)
    return _single(params, X, *_fgsm_batch(params, X, AttackConfig("fgsm", lam=lam)))


def fgv(params: Params, x, lam: float = 0.2) -> CraftedSample:
    X = _batch(x)
    return _single(params, X, *_fgv_batch(params, X, AttackConfig("fgv", lam=lam)))


def igs(params: Params, x, eps: float = 0.2, alpha: float = 10.0,
        iters: int = 100, alpha_mode: str = "steps") -> CraftedSample:
    X = _batch(x)
    cfg = AttackConfig("igs", eps=eps, alpha=alpha, iters=iters, igs_alpha_mode=alpha_mode)
    return _single(params, X, *_igs_batch(params, X, cfg))


def jsma(params: Params, x, target: int | None = None, theta: float = 0.1,
         max_features: int | None = None, iters: int = 100,
         l2_max: float | None = None) -> CraftedSample:
    x = np.asarray(x, dtype=np.float64)
    if max_features is not None and max_features > x.size:
        raise UsageError("max_features exceeds the number of features")
    cfg = AttackConfig("jsma", theta=theta, iters=iters,
                       jsma_max_features=max_features, jsma_l2_max=l2_max)
    xa, flag, info = _jsma_one(params, x, cfg, target)
    return _single(params, x, xa[None, :], [flag], [info])


def deepfool(params: Params, x, eta: float = 0.02, iters: int = 50) -> CraftedSample:
    """Iterated projection; raises :class:`SingularGradientError` on a flat start."""
    X = _batch(x)
    _, singular = deepfool_step(params, X)
    if singular[0]:
        raise SingularGradientError("logit-gap gradient norm below 1e-12")
    cfg = AttackConfig("deepfool", eta=eta, iters=iters)
    return _single(params, X, *_deepfool_batch(params, X, cfg))


def cw_l2(params: Params, x, label: int | None = None, c: float = 1.0,
          kappa: float = 0.0, iters: int = 100, step: float = 0.005) -> CraftedSample:
    """Untargeted C&W L2 against ``label`` (default: current prediction).

    ``info`` carries ``objective_initial`` and ``objective_best``.
    """
    X = _batch(x)
    cfg = AttackConfig("cw", c=c, kappa=kappa, iters=iters, step=step)
    labels = None if label is None else np.array([label])
    return _single(params, X, *_cw_batch(params, X, cfg, labels, strict=True))


def craft_pool(params: Params, S, config: AttackConfig) -> CandidatePool:
    """Craft one candidate per row of ``S``, ordered by source index.

    Degenerate samples are flagged on their ``CraftedSample`` rather than
    aborting the pool.
    """
    X = np.asarray(S, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("craft_pool needs a nonempty 2-D sample set")
    Xa, flags, infos = _KERNELS[config.method](params, X, config)
    samples = _package(params, X, Xa, flags, infos)
    n_flagged = sum(f is not None for f in flags)
    if n_flagged:
        log.debug("%s: %d of %d samples flagged", config.method, n_flagged, len(X))
    return CandidatePool(samples)
