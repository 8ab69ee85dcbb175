"""Attack-quality metrics: transfer accuracy (Acc) and agreement (Simi).

Both go through :meth:`Oracle.metric_query`, so evaluating never costs
attack queries.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .attacks import fgsm_step
from .errors import UsageError
from .netcore import Params, predict
from .oracle import Oracle


@dataclass
class EvalSet:
    """Held-out inputs with ground-truth labels (``labels`` may be None)."""

    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)

    def __len__(self):
        return self.inputs.shape[0]


def transfer_accuracy(params: Params, oracle: Oracle, eval_set: EvalSet,
                      lam_eval: float = 0.2) -> dict:
    """Oracle accuracy on FGSM examples crafted against the substitute.

    Returns ``{"acc": ..., "acc_truth": ...}``: agreement with the oracle's
    own clean labels, and with ground truth when the eval set carries it.
    """
    if len(eval_set) == 0:
        raise UsageError("empty evaluation set")
    if lam_eval <= 0:
        raise UsageError("lam_eval must be positive")
    X = eval_set.inputs
    X_adv = np.clip(X + fgsm_step(params, X, lam_eval), 0.0, 1.0)
    clean = oracle.metric_query(X)
    adv = oracle.metric_query(X_adv)
    out = {"acc": float(np.mean(adv == clean)), "acc_truth": float("nan")}
    if eval_set.labels is not None:
        out["acc_truth"] = float(np.mean(adv == eval_set.labels))
    return out


def acc_metric(params: Params, oracle: Oracle, eval_set: EvalSet,
               lam_eval: float = 0.2, reference: str = "oracle") -> float:
    """Acc in [0, 1]; lower means the transferred attack works better.

    ``reference="truth"`` scores against ground-truth labels instead of the
    oracle's clean predictions.
    """
    scores = transfer_accuracy(params, oracle, eval_set, lam_eval)
    if reference == "oracle":
        return scores["acc"]
    if reference == "truth":
        if eval_set.labels is None:
            raise UsageError("ground-truth Acc needs labeled eval data")
        return scores["acc_truth"]
    raise UsageError(f"unknown Acc reference {reference!r}")


def simi_metric(params: Params, oracle: Oracle, dataset) -> float:
    """Fraction of inputs where the substitute agrees with the oracle."""
    X = dataset.inputs if isinstance(dataset, EvalSet) else np.asarray(dataset, dtype=np.float64)
    if X.shape[0] == 0:
        raise UsageError("empty dataset")
    return float(np.mean(predict(params, X) == oracle.metric_query(X)))
