"""Optimization: Adam with a linear warmup/decay schedule, decoupled
weight decay, per-step orthogonal reprojection of flagged weights, and
the masked-word pretraining and classification finetuning loops.

The defining invariant of the constrained loop: immediately after every
optimizer step with the constraint enabled, every flagged weight W
satisfies max|W^T W - I| < 1e-9. With the constraint disabled and
cross-entropy loss the loop is a plain baseline trainer and the
projection code path is never invoked (tracked by a call counter).

Weight decay applies to unconstrained weight *matrices* only. Flagged
matrices are reprojected right afterwards, which would cancel the decay;
biases and layer-norm vectors follow the usual convention and are left
undecayed.

Four finetuning trims toggle (loss, constraint): baseline
(cross_entropy, off), unitary_only (cross_entropy, on), margin_only
(multi_margin, off), unitary_margin (multi_margin, on).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from . import numerics as nm
from .data import CLS_ID, MASK_ID, Corpus, Tokenizer
from .losses import LabelError, cross_entropy_loss, multi_margin_loss
from .model import TransformerClassifier
from .numerics import Tape, backward

PHASES = ("pretrain", "finetune")
LOSSES = ("cross_entropy", "multi_margin")

TRIMS = {
    "baseline": ("cross_entropy", False),
    "unitary_only": ("cross_entropy", True),
    "margin_only": ("multi_margin", False),
    "unitary_margin": ("multi_margin", True),
}


class ConfigError(ValueError):
    """A training plan or its inputs are unusable."""


class GradientNaNError(RuntimeError):
    """A non-finite gradient appeared; names the offending parameter."""


@dataclass
class TrainPlan:
    phase: str
    loss: str = "cross_entropy"
    epsilon: float = 100.0
    lr_peak: float = 1e-3
    warmup_steps: int = 100
    total_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.01
    batch_size: int = 16
    mask_prob: float = 0.15
    unitary_enabled: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be non-negative")
        if not 0 <= self.warmup_steps <= self.total_steps:
            raise ConfigError("need 0 <= warmup_steps <= total_steps")
        if not 0.0 <= self.mask_prob <= 1.0:
            raise ConfigError("mask_prob must lie in [0, 1]")
        if self.batch_size < 1 or self.total_steps < 1:
            raise ConfigError("batch_size and total_steps must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")

    def for_trim(self, trim: str) -> "TrainPlan":
        if trim not in TRIMS:
            raise ConfigError(f"unknown trim {trim!r}; options: {sorted(TRIMS)}")
        loss, unitary = TRIMS[trim]
        return replace(self, loss=loss, unitary_enabled=unitary)


def lr_at(step: int, plan: TrainPlan) -> float:
    """Piecewise-linear rate: 0 -> lr_peak over warmup, then back to 0."""
    if not 0 <= step <= plan.total_steps:
        raise ValueError(f"step {step} outside [0, {plan.total_steps}]")
    if step <= plan.warmup_steps:
        return plan.lr_peak * step / max(plan.warmup_steps, 1)
    return (plan.lr_peak * (plan.total_steps - step)
            / (plan.total_steps - plan.warmup_steps))


class AdamState:

    def __init__(self, model: TransformerClassifier):
        self.m = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in model.params.items()}
        self.t = 0


def decayed_params(model: TransformerClassifier) -> set[str]:
    """Unconstrained weight matrices: everything 2-D minus flagged ones."""
    flagged = {id(e.matrix) for e in model.weight_entries() if e.unitary_flag}
    return {k for k, t in model.params.items()
            if t.data.ndim == 2 and id(t) not in flagged}


def adam_update(w: np.ndarray, g: np.ndarray, m: np.ndarray, v: np.ndarray,
                t: int, lr: float, plan: TrainPlan, decay: bool) -> None:
    """In-place bias-corrected Adam step with decoupled weight decay."""
    m += (1.0 - plan.beta1) * (g - m)
    v += (1.0 - plan.beta2) * (g * g - v)
    m_hat = m / (1.0 - plan.beta1 ** t)
    v_hat = v / (1.0 - plan.beta2 ** t)
    w -= lr * m_hat / (np.sqrt(v_hat) + 1e-8)
    if decay and plan.weight_decay:
        w *= 1.0 - lr * plan.weight_decay


def collect_grads(model: TransformerClassifier) -> dict[str, np.ndarray]:
    grads = {}
    for name, tensor in model.params.items():
        g = tensor.grad
        if g is None:
            g = np.zeros_like(tensor.data)
        elif not np.all(np.isfinite(g)):
            raise GradientNaNError(f"non-finite gradient in parameter {name!r}")
        grads[name] = g
    return grads


def adam_step(model: TransformerClassifier, grads: dict[str, np.ndarray],
              state: AdamState, lr: float, plan: TrainPlan) -> None:
    state.t += 1
    decay_set = decayed_params(model)
    for name, tensor in model.params.items():
        adam_update(tensor.data, grads[name], state.m[name], state.v[name],
                    state.t, lr, plan, name in decay_set)
    if plan.unitary_enabled:
        model.apply_unitary_constraints()


class TrainingLog:

    def __init__(self):
        self.records: list[dict] = []

    def append(self, step: int, lr: float, loss: float, residual: float) -> None:
        self.records.append({"step": step, "lr": lr, "loss": loss,
                             "max_unitarity_residual": residual})

    def losses(self) -> list[float]:
        return [r["loss"] for r in self.records]

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for record in self.records:
                fh.write(json.dumps(record) + "\n")


def _batches(n_items: int, plan: TrainPlan):
    """Yield (step, item indices) for total_steps batches of shuffled epochs."""
    step = 0
    epoch = 0
    while True:
        order = np.random.default_rng([plan.seed, 17, epoch]).permutation(n_items)
        for start in range(0, n_items, plan.batch_size):
            if step >= plan.total_steps:
                return
            yield step, order[start:start + plan.batch_size]
            step += 1
        epoch += 1


def mask_pattern(seed: int, sentence_index: int, n_words: int,
                 mask_prob: float) -> np.ndarray:
    """Fixed per-sentence mask: drawn once from (seed, index), never redrawn."""
    rng = np.random.default_rng([seed, 23, sentence_index])
    return rng.random(n_words) < mask_prob


def pretrain(model: TransformerClassifier, corpus: Corpus,
             tokenizer: Tokenizer, plan: TrainPlan) -> TrainingLog:
    """Masked-word training: each selected position is replaced by [MASK]
    and predicted from context; only masked positions enter the loss."""
    if plan.phase != "pretrain":
        raise ConfigError("plan.phase must be 'pretrain'")
    if len(corpus) == 0:
        raise ConfigError("pretraining corpus is empty")
    encoded = [np.asarray(tokenizer.encode(text), dtype=np.intp)
               for text in corpus.texts()]
    if plan.unitary_enabled:
        model.apply_unitary_constraints()
    state = AdamState(model)
    log = TrainingLog()
    for step, batch in _batches(len(encoded), plan):
        with Tape():
            rows = []
            targets: list[int] = []
            for idx in batch:
                ids = encoded[idx]
                mask = mask_pattern(plan.seed, int(idx), ids.size - 1,
                                    plan.mask_prob)
                positions = np.flatnonzero(mask) + 1  # never mask [CLS]
                if positions.size == 0:
                    continue
                masked = ids.copy()
                masked[positions] = MASK_ID
                hidden = model.encoder_output(masked)
                logits = model.masked_lm_head(hidden)
                rows.append(nm.gather_rows(logits, positions))
                targets.extend(int(t) for t in ids[positions])
            loss = cross_entropy_loss(nm.concat_rows(rows) if rows
                                      else nm.Tensor(np.zeros((0, 1))), targets)
            backward(loss)
        grads = collect_grads(model)
        model.zero_grads()
        lr = lr_at(min(step + 1, plan.total_steps), plan)
        adam_step(model, grads, state, lr, plan)
        log.append(step, lr, loss.item(), model.max_unitarity_residual())
    return log


def reinitialize_head(model: TransformerClassifier, seed: int) -> None:
    """Fresh random classifier/projection weights for an independent run."""
    rng = np.random.default_rng([seed, 31])
    for name in ("classifier", "projection"):
        tensor = model.params[name]
        tensor.data = rng.normal(0.0, 0.02, size=tensor.shape)
        model.params[name + "_bias"].data = np.zeros(tensor.shape[1])


def finetune(model: TransformerClassifier, dataset: Corpus,
             tokenizer: Tokenizer, plan: TrainPlan) -> TrainingLog:
    if plan.phase != "finetune":
        raise ConfigError("plan.phase must be 'finetune'")
    if len(dataset) == 0:
        raise ConfigError("finetuning dataset is empty")
    n_classes = model.config.num_classes
    for text, label in dataset.samples:
        if label is None or not 0 <= label < n_classes:
            raise LabelError(f"label {label!r} outside {n_classes} classes")
    encoded = [np.asarray(tokenizer.encode(text), dtype=np.intp)
               for text in dataset.texts()]
    labels = np.asarray([label for _, label in dataset.samples], dtype=np.intp)

    reinitialize_head(model, plan.seed)
    if plan.unitary_enabled:
        model.apply_unitary_constraints()
    state = AdamState(model)
    log = TrainingLog()
    for step, batch in _batches(len(encoded), plan):
        with Tape():
            rows = [nm.reshape(model.forward(encoded[idx]).logits, (1, n_classes))
                    for idx in batch]
            logits = nm.concat_rows(rows)
            if plan.loss == "multi_margin":
                loss = multi_margin_loss(logits, labels[batch], plan.epsilon)
            else:
                loss = cross_entropy_loss(logits, labels[batch])
            backward(loss)
        grads = collect_grads(model)
        model.zero_grads()
        lr = lr_at(min(step + 1, plan.total_steps), plan)
        adam_step(model, grads, state, lr, plan)
        log.append(step, lr, loss.item(), model.max_unitarity_residual())
    return log


def steps_for_epochs(n_samples: int, batch_size: int, epochs: int) -> int:
    per_epoch = -(-n_samples // batch_size)  # ceil
    return per_epoch * epochs


def accuracy(model: TransformerClassifier, tokenizer: Tokenizer,
             dataset: Corpus) -> float:
    correct = 0
    for text, label in dataset.samples:
        if model.predict(tokenizer.encode(text)) == label:
            correct += 1
    return correct / len(dataset)
