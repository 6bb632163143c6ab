"""Diagnostics for the robustness story.

For an argmax classifier the decision boundary between the labeled class
and class j is the hyperplane y_label = y_j; the shortest Euclidean
distance in logit space from a correctly classified logit vector to any
such boundary is min over j != label of (y_label - y_j) / sqrt(2). The
normalized distance d_s = Mean(d) / Var(d) over the correctly classified
samples summarizes how large that buffer is once a plain rescaling of
the logits is compensated away (population variance).

The propagation curve measures, layer by layer, the cosine similarity
between the mean-pooled activations of a clean sentence and its attacked
counterpart: a flat curve near 1 means perturbations are not being
amplified on the way to the classifier.

The margin sweep finetunes one fresh model per margin setting and reports
the clean/post-attack accuracy tradeoff per recipe.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .attacks import AttackRecipe, SynonymTable, cosine_similarity, \
    evaluate_robustness
from .data import Corpus, Tokenizer
from .model import TransformerClassifier
from .numerics import ContractError
from .training import TrainPlan, finetune


class ConditioningError(ValueError):
    """Covariance matrix is not symmetric positive definite."""


class EmptyStatisticsError(ValueError):
    """No samples qualify for the statistic."""


@dataclass
class BoundaryStats:
    mean_d: float
    var_d: float
    d_s: float
    sample_count: int
    degenerate_variance: bool = False


@dataclass
class PropagationCurve:
    points: list[tuple[float, float]]  # per layer (mean cos, std cos)
    excluded_pairs: int = 0


@dataclass
class SweepRow:
    epsilon: float
    pre_acc: float
    post_acc: dict[str, float] = field(default_factory=dict)
    failed: bool = False
    error: str | None = None


def mahalanobis(mu_i: np.ndarray, mu_j: np.ndarray, cov: np.ndarray) -> float:
    """(mu_i - mu_j)^T S^-1 (mu_i - mu_j) via a Cholesky solve."""
    mu_i = np.asarray(mu_i, dtype=np.float64)
    mu_j = np.asarray(mu_j, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ConditioningError(f"covariance must be square, got {cov.shape}")
    if not np.allclose(cov, cov.T, atol=1e-10):
        raise ConditioningError("covariance matrix is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ConditioningError("covariance matrix is not positive definite")
    delta = mu_i - mu_j
    # solve L z = delta, then d = z.z equals delta^T S^-1 delta
    z = np.linalg.solve(chol, delta)
    return float(z @ z)


def boundary_distance(logits: np.ndarray, label: int) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    if int(np.argmax(logits)) != label:
        raise ContractError("boundary distance is defined for correctly "
                            "classified samples only")
    others = np.delete(logits, label)
    return float(np.min(logits[label] - others) / np.sqrt(2.0))


def stats_from_distances(distances) -> BoundaryStats:
    d = np.asarray(list(distances), dtype=np.float64)
    if d.size == 0:
        raise EmptyStatisticsError("no correctly classified samples")
    mean = float(d.mean())
    var = float(d.var())  # population variance
    if var == 0.0:
        return BoundaryStats(mean, 0.0, float("inf"), d.size,
                             degenerate_variance=True)
    return BoundaryStats(mean, var, mean / var, d.size)


def boundary_stats(model: TransformerClassifier, tokenizer: Tokenizer,
                   dataset: Corpus) -> BoundaryStats:
    distances = []
    for text, label in dataset.samples:
        logits = model.forward(tokenizer.encode(text)).logits.data
        if int(np.argmax(logits)) == label:
            distances.append(boundary_distance(logits, label))
    return stats_from_distances(distances)


def propagation_curve(model: TransformerClassifier, tokenizer: Tokenizer,
                      clean_texts: list[str],
                      attacked_texts: list[str]) -> PropagationCurve:
    if len(clean_texts) != len(attacked_texts):
        raise ValueError("clean and attacked text lists must pair up")
    layers = model.config.layers
    per_layer: list[list[float]] = [[] for _ in range(layers)]
    excluded = 0
    for clean, attacked in zip(clean_texts, attacked_texts):
        a = model.forward(tokenizer.encode(clean), capture_trace=True)
        b = model.forward(tokenizer.encode(attacked), capture_trace=True)
        vectors = [(x.data, y.data)
                   for x, y in zip(a.block_outputs, b.block_outputs)]
        if any(np.linalg.norm(x) == 0.0 or np.linalg.norm(y) == 0.0
               for x, y in vectors):
            excluded += 1
            continue
        for layer, (x, y) in enumerate(vectors):
            per_layer[layer].append(cosine_similarity(x, y))
    points = []
    for sims in per_layer:
        if sims:
            arr = np.asarray(sims)
            points.append((float(arr.mean()), float(arr.std())))
        else:
            points.append((float("nan"), float("nan")))
    return PropagationCurve(points, excluded)


@dataclass
class SweepSetup:
    """Everything a sweep row needs besides its epsilon."""
    base_model: TransformerClassifier
    tokenizer: Tokenizer
    train_set: Corpus
    test_samples: list[tuple[str, int]]
    plan: TrainPlan  # margin-loss finetune template; epsilon is overridden
    recipes: dict[str, AttackRecipe]
    synonyms: SynonymTable | None = None
    attack_seed: int = 0


def margin_sweep(setup: SweepSetup, epsilons: list[float]) -> list[SweepRow]:
    """One fresh finetune per margin value, evaluated under every recipe.

    A failing row is recorded and the sweep continues.
    """
    if not epsilons:
        raise ValueError("epsilon grid must be non-empty")
    if any(e <= 0 for e in epsilons):
        raise ValueError("epsilon grid entries must be positive")
    rows = []
    for index, epsilon in enumerate(epsilons):
        try:
            plan = replace(setup.plan, loss="multi_margin", epsilon=epsilon,
                           seed=setup.plan.seed + index)
            model = setup.base_model.clone()
            finetune(model, setup.train_set, setup.tokenizer, plan)
            correct = sum(
                1 for text, label in setup.test_samples
                if model.predict(setup.tokenizer.encode(text)) == label)
            row = SweepRow(epsilon, correct / len(setup.test_samples))
            for name, recipe in setup.recipes.items():
                _, post, _ = evaluate_robustness(
                    model, setup.tokenizer, setup.test_samples, recipe,
                    seed=setup.attack_seed, synonyms=setup.synonyms)
                row.post_acc[name] = post
            rows.append(row)
        except Exception as exc:  # keep sweeping, mark the row
            rows.append(SweepRow(epsilon, float("nan"), failed=True,
                                 error=f"{type(exc).__name__}: {exc}"))
    return rows


DEFAULT_EPSILON_GRID = [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0]


# -- CSV exports ---------------------------------------------------------------

def write_propagation_csv(curve: PropagationCurve, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "mean_cos", "std_cos"])
        for layer, (mean, std) in enumerate(curve.points, start=1):
            writer.writerow([layer, f"{mean:.10g}", f"{std:.10g}"])


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epsilon", "pre_acc", "post_acc_typo",
                         "post_acc_embed", "post_acc_thesaurus"])
        for row in rows:
            writer.writerow([
                f"{row.epsilon:.10g}", f"{row.pre_acc:.10g}",
                f"{row.post_acc.get('typo', float('nan')):.10g}",
                f"{row.post_acc.get('embed_synonym', float('nan')):.10g}",
                f"{row.post_acc.get('thesaurus_synonym', float('nan')):.10g}",
            ])


def write_boundary_csv(stats: BoundaryStats, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mean_d", "var_d", "d_s", "sample_count"])
        writer.writerow([f"{stats.mean_d:.10g}", f"{stats.var_d:.10g}",
                         f"{stats.d_s:.10g}", stats.sample_count])
