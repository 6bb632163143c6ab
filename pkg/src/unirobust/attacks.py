"""Targeted word-substitution attacks against a frozen classifier.

Three recipe families perturb one word position at a time: character
typos (insert/delete/swap/substitute), nearest neighbors in the model's
own word-embedding table, and a user-supplied synonym table. The search
is black-box and greedy: rank positions by how much deleting the word
drops the correct-class logit (one query per position), then walk the
ranking trying each position's candidates, keeping the substitution that
lowers the correct-class logit the most while passing the semantic
filter. It stops on misclassification, query-budget exhaustion, hitting
the perturbed-word cap, or running out of candidates.

Typo and embedding-neighbor candidates must keep the victim model's own
mean-pooled final-block representation within a cosine-similarity
threshold of the original sentence; synonym-table substitutions are
trusted as meaning-preserving and skip the filter.

Samples the clean model already misclassifies are skipped at zero query
cost and never count as survivors.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

import numpy as np

from .data import UNK_ID, SPECIALS, Tokenizer
from .model import TransformerClassifier

RECIPE_KINDS = ("typo", "embed_synonym", "thesaurus_synonym")
TYPO_OPS = ("insert", "delete", "swap", "substitute")

_LETTERS = string.ascii_lowercase


class PositionError(ValueError):
    """A perturbation position or word does not admit the requested edit."""


@dataclass(frozen=True)
class AttackRecipe:
    kind: str
    query_budget: int | None = None  # None = cap at positions x candidates
    similarity_threshold: float = 0.8
    max_perturb_fraction: float = 0.4
    neighbor_count: int = 8

    def __post_init__(self):
        if self.kind not in RECIPE_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if self.query_budget is not None and self.query_budget < 1:
            raise ValueError("query_budget must be positive or None")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must lie in [-1, 1]")
        if not 0.0 < self.max_perturb_fraction <= 1.0:
            raise ValueError("max_perturb_fraction must lie in (0, 1]")
        if self.neighbor_count < 0:
            raise ValueError("neighbor_count must be non-negative")

    @property
    def filtered(self) -> bool:
        # the synonym table is trusted; no extra meaning safeguard
        return self.kind in ("typo", "embed_synonym")


@dataclass
class AttackOutcome:
    original_text: str
    final_text: str
    original_label: int
    final_prediction: int
    success: bool
    queries_used: int
    skipped: bool
    edited_positions: list[int] = field(default_factory=list)


@dataclass
class SynonymTable:
    entries: dict[str, list[str]]

    def __post_init__(self):
        for word, syns in self.entries.items():
            if word in syns:
                raise ValueError(f"synonym table maps {word!r} to itself")

    def lookup(self, word: str) -> list[str]:
        return list(self.entries.get(word, []))

    @classmethod
    def from_file(cls, path) -> "SynonymTable":
        entries: dict[str, list[str]] = {}
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, _, rest = line.partition("\t")
                entries[word] = [s for s in rest.split(",") if s]
        return cls(entries)


# ---------------------------------------------------------------------------
# perturbation primitives
# ---------------------------------------------------------------------------

def _word_at(text: str, position: int) -> tuple[list[str], str]:
    words = text.split()
    if not 0 <= position < len(words):
        raise PositionError(f"position {position} outside {len(words)} words")
    if not words[position]:
        raise PositionError("cannot perturb an empty word")
    return words, words[position]


def perturb_typo(text: str, position: int, op: str, rng) -> str:
    """One character-level edit on the word at the given position."""
    if op not in TYPO_OPS:
        raise ValueError(f"unknown typo op {op!r}")
    words, word = _word_at(text, position)
    chars = list(word)
    if op in ("delete", "swap") and len(chars) < 2:
        raise PositionError(f"{op} needs a word of length >= 2, got {word!r}")
    if op == "insert":
        at = int(rng.integers(len(chars) + 1))
        chars.insert(at, _LETTERS[rng.integers(len(_LETTERS))])
    elif op == "delete":
        del chars[int(rng.integers(len(chars)))]
    elif op == "swap":
        at = int(rng.integers(len(chars) - 1))
        chars[at], chars[at + 1] = chars[at + 1], chars[at]
    else:  # substitute, guaranteed to differ from the original character
        at = int(rng.integers(len(chars)))
        pool = [c for c in _LETTERS if c != chars[at]]
        chars[at] = pool[int(rng.integers(len(pool)))]
    words[position] = "".join(chars)
    return " ".join(words)


class EmbeddingNeighbors:
    """k-nearest in-vocabulary words by cosine over an embedding table."""

    def __init__(self, tokenizer: Tokenizer, table: np.ndarray):
        self.tokenizer = tokenizer
        self.table = np.asarray(table, dtype=np.float64)
        norms = np.linalg.norm(self.table, axis=1)
        self._unit = self.table / np.where(norms == 0.0, 1.0, norms)[:, None]

    @classmethod
    def from_model(cls, tokenizer: Tokenizer,
                   model: TransformerClassifier) -> "EmbeddingNeighbors":
        return cls(tokenizer, model.params["embed.word"].data)

    def neighbors(self, word: str, k: int) -> list[str]:
        word_id = self.tokenizer.word_to_id.get(word, UNK_ID)
        if k <= 0 or word_id == UNK_ID:
            return []
        sims = self._unit @ self._unit[word_id]
        sims[word_id] = -np.inf
        for special in range(len(SPECIALS)):
            sims[special] = -np.inf
        order = np.argsort(-sims, kind="stable")
        return [self.tokenizer.id_to_word[i] for i in order[:k]]


def perturb_embed_synonym(text: str, position: int,
                          embeddings: EmbeddingNeighbors, k: int) -> list[str]:
    """Candidate texts replacing the word with its k embedding neighbors."""
    words, word = _word_at(text, position)
    out = []
    for syn in embeddings.neighbors(word, k):
        cand = list(words)
        cand[position] = syn
        out.append(" ".join(cand))
    return out


def perturb_thesaurus(text: str, position: int,
                      table: SynonymTable) -> list[str]:
    words, word = _word_at(text, position)
    out = []
    for syn in table.lookup(word):
        cand = list(words)
        cand[position] = syn
        out.append(" ".join(cand))
    return out


# ---------------------------------------------------------------------------
# model queries and the semantic filter
# ---------------------------------------------------------------------------

def _sentence_state(model: TransformerClassifier, tokenizer: Tokenizer,
                    text: str) -> tuple[np.ndarray, np.ndarray]:
    """(logits, mean-pooled final-block vector) in one forward pass."""
    trace = model.forward(tokenizer.encode(text), capture_trace=True)
    return trace.logits.data, trace.block_outputs[-1].data


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) * np.linalg.norm(b)
    if denom == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / denom, -1.0, 1.0))


def semantic_filter(original_text: str, candidate_text: str,
                    model: TransformerClassifier, tokenizer: Tokenizer,
                    threshold: float) -> bool:
    """Accept the candidate iff the victim's own sentence representations
    stay within the cosine threshold."""
    if candidate_text == original_text:
        return True
    _, ref = _sentence_state(model, tokenizer, original_text)
    _, cand = _sentence_state(model, tokenizer, candidate_text)
    return cosine_similarity(ref, cand) >= threshold


# ---------------------------------------------------------------------------
# the greedy targeted attack
# ---------------------------------------------------------------------------

def _candidates(recipe: AttackRecipe, text: str, position: int, rng,
                neighbors: EmbeddingNeighbors | None,
                synonyms: SynonymTable | None) -> list[str]:
    words, word = _word_at(text, position)
    if recipe.kind == "typo":
        out = []
        for op in TYPO_OPS:
            if op in ("delete", "swap") and len(word) < 2:
                continue
            out.append(perturb_typo(text, position, op, rng))
        return out
    if recipe.kind == "embed_synonym":
        if neighbors is None:
            raise ValueError("embed_synonym recipe needs embedding neighbors")
        return perturb_embed_synonym(text, position, neighbors,
                                     recipe.neighbor_count)
    if synonyms is None:
        raise ValueError("thesaurus_synonym recipe needs a synonym table")
    return perturb_thesaurus(text, position, synonyms)


def _max_candidates_per_position(recipe: AttackRecipe,
                                 synonyms: SynonymTable | None) -> int:
    if recipe.kind == "typo":
        return len(TYPO_OPS)
    if recipe.kind == "embed_synonym":
        return max(recipe.neighbor_count, 1)
    longest = max((len(v) for v in synonyms.entries.values()), default=1)
    return max(longest, 1)


def targeted_attack(model: TransformerClassifier, tokenizer: Tokenizer,
                    sample: tuple[str, int], recipe: AttackRecipe, rng,
                    neighbors: EmbeddingNeighbors | None = None,
                    synonyms: SynonymTable | None = None) -> AttackOutcome:
    text, label = sample
    words = text.split()
    n_words = len(words)

    logits, ref_vec = _sentence_state(model, tokenizer, text)
    if int(np.argmax(logits)) != label:
        return AttackOutcome(text, text, label, int(np.argmax(logits)),
                             success=False, queries_used=0, skipped=True)

    if recipe.query_budget is not None:
        budget = recipe.query_budget
    else:
        # "unlimited": a cap the greedy search itself can exhaust
        per_pos = _max_candidates_per_position(recipe, synonyms)
        budget = n_words * (per_pos + 1)
    queries = 0

    def fail(current_text, current_pred, edited):
        return AttackOutcome(text, current_text, label, current_pred,
                             success=False, queries_used=queries,
                             skipped=False, edited_positions=edited)

    # importance pass: logit drop when each word is deleted
    drops = []
    for pos in range(n_words):
        if queries >= budget:
            return fail(text, label, [])
        reduced = words[:pos] + words[pos + 1:]
        probe = " ".join(reduced) if reduced else words[pos]
        probe_logits, _ = _sentence_state(model, tokenizer, probe)
        queries += 1
        drops.append(logits[label] - probe_logits[label])
    order = sorted(range(n_words), key=lambda p: (-drops[p], p))

    max_edits = int(np.floor(recipe.max_perturb_fraction * n_words))
    current = list(words)
    current_correct_logit = logits[label]
    edited: list[int] = []

    for pos in order:
        if len(edited) >= max_edits:
            break
        cands = _candidates(recipe, " ".join(current), pos, rng,
                            neighbors, synonyms)
        best = None
        for cand_text in cands:
            if queries >= budget:
                return fail(" ".join(current), label, edited)
            cand_logits, cand_vec = _sentence_state(model, tokenizer, cand_text)
            queries += 1
            if recipe.filtered and (cosine_similarity(ref_vec, cand_vec)
                                    < recipe.similarity_threshold):
                continue
            if best is None or cand_logits[label] < best[1][label]:
                best = (cand_text, cand_logits)
        if best is None or best[1][label] >= current_correct_logit:
            continue  # nothing at this position lowers the correct logit
        current = best[0].split()
        current_correct_logit = best[1][label]
        edited.append(pos)
        prediction = int(np.argmax(best[1]))
        if prediction != label:
            return AttackOutcome(text, " ".join(current), label, prediction,
                                 success=True, queries_used=queries,
                                 skipped=False, edited_positions=edited)
    return fail(" ".join(current), label, edited)


def evaluate_robustness(model: TransformerClassifier, tokenizer: Tokenizer,
                        test_samples: list[tuple[str, int]],
                        recipe: AttackRecipe, seed: int = 0,
                        synonyms: SynonymTable | None = None
                        ) -> tuple[float, float, list[AttackOutcome]]:
    """Clean accuracy, survivor accuracy, and per-sample outcomes.

    A sample survives only if it is classified correctly before the attack
    and the attack fails; skipped (pre-misclassified) samples therefore
    count against the post-attack score.
    """
    if not test_samples:
        raise ValueError("need at least one test sample")
    neighbors = None
    if recipe.kind == "embed_synonym":
        neighbors = EmbeddingNeighbors.from_model(tokenizer, model)
    outcomes = []
    for index, sample in enumerate(test_samples):
        rng = np.random.default_rng([seed, 41, index])
        outcomes.append(targeted_attack(model, tokenizer, sample, recipe, rng,
                                        neighbors=neighbors, synonyms=synonyms))
    n = len(test_samples)
    pre_correct = sum(1 for o in outcomes if not o.skipped)
    survivors = sum(1 for o in outcomes if not o.skipped and not o.success)
    return pre_correct / n, survivors / n, outcomes


def write_outcomes(outcomes: list[AttackOutcome], recipe: AttackRecipe,
                   path) -> None:
    """Newline-delimited records: index, recipe, success, queries, edits."""
    with open(path, "w", encoding="utf-8") as fh:
        for index, o in enumerate(outcomes):
            fh.write(json.dumps({
                "sample_index": index,
                "recipe": recipe.kind,
                "success": o.success,
                "skipped": o.skipped,
                "queries_used": o.queries_used,
                "edited_positions": o.edited_positions,
                "final_prediction": o.final_prediction,
            }) + "\n")
