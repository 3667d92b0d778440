"""Task losses and the unweighted multi-task objective.

Age is trained with L1 in raw years so the reported loss is directly an
error in years; gender uses binary cross entropy on the sigmoid probability
and ethnicity categorical cross entropy on the softmax distribution.
Probabilities are clamped to [1e-7, 1 - 1e-7] before the log.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .models import ModelSpec, ParamStore, PredictionTriple
from .tensor import Tensor

__all__ = [
    "PROB_EPS",
    "LossBreakdown",
    "l1_loss",
    "bce_loss",
    "cce_loss",
    "soft_penalty",
    "multitask_loss",
]

PROB_EPS = 1e-7


@dataclass
class LossBreakdown:
    """Scalar loss tensors for one batch; ``total`` is what gets
    backpropagated. ``soft_penalty`` already includes its weight and is zero
    unless the model uses soft sharing."""

    age_l1: Tensor
    gender_bce: Tensor
    ethnicity_cce: Tensor
    soft_penalty: Tensor
    total: Tensor

    def as_floats(self) -> dict[str, float]:
        return {
            "age_l1": self.age_l1.item(),
            "gender_bce": self.gender_bce.item(),
            "ethnicity_cce": self.ethnicity_cce.item(),
            "soft_penalty": self.soft_penalty.item(),
            "total": self.total.item(),
        }


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def l1_loss(pred_age, true_age) -> Tensor:
    """Mean absolute error, in years."""
    pred, true = _wrap(pred_age), _wrap(true_age)
    if pred.size == 0:
        raise ValueError("l1_loss: empty batch")
    if pred.shape != true.shape:
        raise ValueError(f"l1_loss: shapes {pred.shape} and {true.shape} differ")
    return T.mean(T.absolute(pred - true))


def bce_loss(p, y) -> Tensor:
    """Mean binary cross entropy of probabilities ``p`` against 0/1 labels."""
    p, y = _wrap(p), _wrap(y)
    if p.size == 0:
        raise ValueError("bce_loss: empty batch")
    if p.shape != y.shape:
        raise ValueError(f"bce_loss: shapes {p.shape} and {y.shape} differ")
    pc = T.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    return T.mean(-(y * T.log(pc) + (1.0 - y) * T.log(1.0 - pc)))


def cce_loss(probs, y) -> Tensor:
    """Mean categorical cross entropy of row distributions against class
    indices in {0..4}."""
    probs = _wrap(probs)
    y = np.asarray(y)
    if probs.size == 0 or y.size == 0:
        raise ValueError("cce_loss: empty batch")
    if probs.ndim != 2 or probs.shape[0] != y.shape[0]:
        raise ValueError(f"cce_loss: probs {probs.shape} misaligned with labels {y.shape}")
    k = probs.shape[1]
    if y.min() < 0 or y.max() >= k:
        raise ValueError(f"cce_loss: class index out of range for {k} classes")
    onehot = np.zeros(probs.shape, dtype=probs.dtype)
    onehot[np.arange(y.shape[0]), y] = 1.0
    pc = T.clip(probs, PROB_EPS, 1.0 - PROB_EPS)
    return T.mean(-T.tsum(Tensor(onehot) * T.log(pc), axis=1))


def soft_penalty(params: ParamStore) -> Tensor:
    """Squared L2 distance between corresponding encoder tensors, summed over
    the three unordered task pairs. Requires the soft-sharing layout."""
    subtrees = {t: params.subtree(f"encoder_{t}") for t in ("age", "gender", "ethnicity")}
    if not all(subtrees.values()):
        raise ValueError("soft_penalty requires encoder_age/gender/ethnicity subtrees")
    suffixes = [sorted(n.split("/", 1)[1] for n in sub) for sub in subtrees.values()]
    if suffixes[0] != suffixes[1] or suffixes[1] != suffixes[2]:
        raise ValueError("soft_penalty: encoder subtrees are not structurally identical")

    total = Tensor(np.zeros((), dtype=np.float32))
    tasks = list(subtrees)
    for i in range(len(tasks)):
        for j in range(i + 1, len(tasks)):
            for suffix in suffixes[0]:
                a = params[f"encoder_{tasks[i]}/{suffix}"]
                b = params[f"encoder_{tasks[j]}/{suffix}"]
                diff = a - b
                total = total + T.tsum(diff * diff)
    return total


def multitask_loss(
    pred: PredictionTriple,
    labels,
    spec: ModelSpec,
    params: ParamStore | None = None,
    soft_lambda: float = 1e-3,
) -> LossBreakdown:
    """Unweighted sum of the three task losses, plus the weighted tying
    penalty when the spec uses soft sharing (which then needs ``params``)."""
    n = pred.age.shape[0]
    if not (labels.age.shape[0] == labels.gender.shape[0] == labels.ethnicity.shape[0] == n):
        raise ValueError("multitask_loss: batch misaligned with labels")
    dtype = pred.age.dtype
    age = l1_loss(pred.age, labels.age.astype(dtype))
    bce = bce_loss(pred.gender_prob, labels.gender.astype(dtype))
    cce = cce_loss(pred.ethnicity_probs, labels.ethnicity)
    if spec.sharing == "soft":
        if params is None:
            raise ValueError("multitask_loss: soft sharing requires params for the tying penalty")
        penalty = soft_lambda * soft_penalty(params)
    else:
        penalty = Tensor(np.zeros((), dtype=dtype))
    total = age + bce + cce + penalty
    return LossBreakdown(age_l1=age, gender_bce=bce, ethnicity_cce=cce,
                         soft_penalty=penalty, total=total)
