"""Classification losses: the margin loss used for finetuning and the
softmax cross-entropy used for pretraining and the baseline trims.

Both are fused tape ops with hand-derived backward rules. The margin
loss demands that the correct class logit exceed every other logit by at
least epsilon:

    L = (1/n) * sum_i sum_{j != correct_i} max(y_ij + eps - y_i,correct, 0)

The j == correct term (a constant eps with zero gradient) is excluded,
so the reported value is the meaningful slack. The hinge subgradient at
the kink is 0: satisfied margins contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import Tensor, as_tensor, make_op


class LabelError(ValueError):
    """A target label falls outside the number of classes."""


class EmptyBatchError(ValueError):
    """No items contribute to the loss (e.g. zero masked positions)."""


@dataclass(frozen=True)
class MarginLossConfig:
    epsilon: float
    reduction: str = "mean"  # batch mean is the only supported reduction

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be non-negative, got {self.epsilon}")
        if self.reduction != "mean":
            raise ValueError("only mean reduction is supported")


def _check_targets(targets: np.ndarray, n: int, n_classes: int) -> None:
    if targets.shape != (n,):
        raise LabelError(f"expected {n} targets, got shape {targets.shape}")
    if targets.size and (targets.min() < 0 or targets.max() >= n_classes):
        raise LabelError(
            f"target out of range for {n_classes} classes: {targets.tolist()}")


def multi_margin_loss(logits: Tensor, targets, epsilon: float) -> Tensor:
    """Mean hinge slack over the batch; zero iff every margin is satisfied."""
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    logits = as_tensor(logits)
    y = logits.data
    if y.ndim != 2:
        raise LabelError(f"expected a batch of logit rows, got shape {y.shape}")
    n, n_classes = y.shape
    if n < 1:
        raise EmptyBatchError("margin loss over an empty batch")
    t = np.asarray(targets, dtype=np.intp)
    _check_targets(t, n, n_classes)

    rows = np.arange(n)
    correct = y[rows, t][:, None]
    slack = y + epsilon - correct
    slack[rows, t] = 0.0
    violating = slack > 0.0
    value = np.asarray(slack[violating].sum() / n)

    def rule(g):
        grad = violating.astype(np.float64)
        grad[rows, t] = -violating.sum(axis=1)
        return (grad * (g / n),)

    return make_op(value, (logits,), rule)


def cross_entropy_loss(logits: Tensor, targets) -> Tensor:
    """Mean negative log softmax probability of the target class.

    For masked-language use, gather the contributing position rows first;
    an empty batch (no masked positions) is an error, not a zero.
    """
    logits = as_tensor(logits)
    y = logits.data
    if y.ndim != 2:
        raise LabelError(f"expected a batch of logit rows, got shape {y.shape}")
    n, n_classes = y.shape
    if n < 1:
        raise EmptyBatchError("cross-entropy over an empty batch")
    t = np.asarray(targets, dtype=np.intp)
    _check_targets(t, n, n_classes)

    shifted = y - y.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    rows = np.arange(n)
    value = np.asarray(-log_probs[rows, t].mean())

    softmax = np.exp(log_probs)

    def rule(g):
        grad = softmax.copy()
        grad[rows, t] -= 1.0
        return (grad * (g / n),)

    return make_op(value, (logits,), rule)
