"""Corpus ingestion, word-level tokenization, and the bundled synthetic
dataset generator.

Corpora are newline-delimited JSON, one object per line with a "text"
field and an optional integer "label". Text is forced to lowercase on
ingestion. The tokenizer is a plain whitespace word tokenizer with four
special ids pinned at the front of the vocabulary: [PAD]=0, [MASK]=1,
[CLS]=2, [UNK]=3. Every encoded sequence starts with the [CLS] token,
which the classifier head pools.

The synthetic generator produces clause-chain sentences from a small
keyword-driven grammar (see ``synthetic_dataset``), giving a two- or
four-class corpus whose class signal lives in a handful of swappable
keywords -- exactly the surface word-substitution attacks manipulate.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

PAD_ID, MASK_ID, CLS_ID, UNK_ID = 0, 1, 2, 3
SPECIALS = ["[PAD]", "[MASK]", "[CLS]", "[UNK]"]


class CorpusError(ValueError):
    """Unreadable, malformed, or empty corpus input."""


class SchemaError(ValueError):
    """A record violates the declared corpus schema."""


@dataclass
class Corpus:
    samples: list[tuple[str, int | None]]
    schema: str  # "unlabeled" | "classification"
    label_names: list[str] | None = None

    def __len__(self) -> int:
        return len(self.samples)

    def texts(self) -> list[str]:
        return [t for t, _ in self.samples]

    def stats(self) -> dict:
        lengths = [len(t.split()) for t, _ in self.samples]
        out = {
            "samples": len(self.samples),
            "mean_words": float(np.mean(lengths)) if lengths else 0.0,
        }
        if self.schema == "classification":
            counts = Counter(label for _, label in self.samples)
            out["class_counts"] = {int(k): int(v) for k, v in sorted(counts.items())}
        return out


def ingest(path, schema: str, label_names: list[str] | None = None) -> Corpus:
    """Load an ndjson corpus, lowercasing text and validating labels."""
    if schema not in ("unlabeled", "classification"):
        raise SchemaError(f"unknown schema {schema!r}")
    samples: list[tuple[str, int | None]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                text = record["text"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}: malformed record at line {line_no}: {exc}")
            if not isinstance(text, str):
                raise CorpusError(f"{path}: non-string text at line {line_no}")
            label = record.get("label")
            if schema == "classification":
                if not isinstance(label, int):
                    raise SchemaError(f"{path}: missing/non-integer label "
                                      f"at line {line_no}")
                if label_names is not None and not 0 <= label < len(label_names):
                    raise SchemaError(f"{path}: label {label} outside declared "
                                      f"range at line {line_no}")
            else:
                label = None
            samples.append((text.lower(), label))
    if not samples:
        raise CorpusError(f"{path}: empty corpus")
    if schema == "classification" and label_names is None:
        n = max(label for _, label in samples) + 1
        label_names = [f"class{i}" for i in range(n)]
    return Corpus(samples, schema, label_names)


@dataclass
class Tokenizer:
    word_to_id: dict[str, int]
    max_seq_len: int
    id_to_word: list[str] = field(init=False)

    def __post_init__(self):
        self.id_to_word = [""] * len(self.word_to_id)
        for word, idx in self.word_to_id.items():
            self.id_to_word[idx] = word

    @property
    def vocab_size(self) -> int:
        return len(self.word_to_id)

    def encode(self, text: str) -> list[int]:
        ids = [CLS_ID]
        ids.extend(self.word_to_id.get(w, UNK_ID) for w in text.split())
        return ids

    def decode(self, ids) -> str:
        return " ".join(self.id_to_word[i] for i in ids if i != CLS_ID)

    def token_type_ids(self, ids) -> np.ndarray:
        return np.zeros(len(ids), dtype=np.intp)

    def to_dict(self) -> dict:
        return {"words": self.id_to_word, "max_seq_len": self.max_seq_len}

    @classmethod
    def from_dict(cls, payload: dict) -> "Tokenizer":
        words = payload["words"]
        return cls({w: i for i, w in enumerate(words)}, payload["max_seq_len"])


def build_vocab(corpus: Corpus, max_vocab: int, max_seq_len: int = 32) -> Tokenizer:
    """Most frequent max_vocab-4 words plus specials; ties lexicographic."""
    if len(corpus) == 0:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    counts = Counter()
    for text, _ in corpus.samples:
        counts.update(text.split())
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [w for w, _ in ranked[: max(0, max_vocab - len(SPECIALS))]]
    word_to_id = {w: i for i, w in enumerate(SPECIALS)}
    for w in kept:
        word_to_id[w] = len(word_to_id)
    return Tokenizer(word_to_id, max_seq_len)


# ---------------------------------------------------------------------------
# synthetic corpus grammar
# ---------------------------------------------------------------------------
#
# Each sentence is a chain of 2-3 clauses joined by a connective. A clause
# is "DET NOUN LINK [ADV] ADJ". Between one and three clauses carry a class
# keyword in the ADJ slot (two-class) or the NOUN slot (four-class); the
# remaining slots draw from neutral pools. Labels follow the majority
# keyword class; with two or more keywords one of them is occasionally
# drawn from a different class to create boundary samples.

_DETS = ["the", "a", "this", "that", "every", "one", "each", "some"]
_NOUNS = [
    "film", "story", "meal", "place", "room", "staff", "plot", "music",
    "cast", "coffee", "bread", "garden", "view", "service", "show", "book",
    "game", "crew", "city", "park", "house", "market", "street", "crowd",
    "device", "engine", "screen", "chair", "table", "window", "driver",
    "singer", "writer", "corner", "kitchen", "lobby", "menu", "stage",
]
_LINKS = ["was", "is", "seemed", "looked", "felt", "stayed", "remained", "sounded"]
_ADVS = ["very", "quite", "rather", "truly", "really", "fairly", "notably",
         "plainly", "mostly", "somewhat", "oddly", "clearly"]
_NEUTRAL_ADJS = [
    "long", "short", "small", "large", "early", "late", "loud", "quiet",
    "plain", "simple", "busy", "slow", "near", "far", "old", "new",
    "warm", "cold", "wide", "narrow", "round", "flat",
]
_CONNECTIVES = ["and", "but", "while", "though"]

_POSITIVE = ["good", "great", "fine", "nice", "superb", "lovely", "pleasant",
             "charming", "splendid", "delightful", "solid", "worthy"]
_NEGATIVE = ["bad", "awful", "poor", "dull", "bleak", "dismal", "shoddy",
             "dire", "grim", "lousy", "weak", "sour"]

_TOPICS = {
    0: ["team", "coach", "match", "score", "goal", "league", "player", "racket",
        "referee", "season"],
    1: ["profit", "trade", "price", "stock", "bank", "loan", "sale", "merger",
        "budget", "tax"],
    2: ["theory", "lab", "experiment", "data", "atom", "cell", "orbit",
        "sample", "fossil", "telescope"],
    3: ["storm", "rain", "border", "treaty", "summit", "council", "minister",
        "embassy", "drought", "flood"],
}

TWO_CLASS_NAMES = ["negative", "positive"]
FOUR_CLASS_NAMES = ["sport", "finance", "science", "world"]


def _clause(rng, noun, adj, with_adv: bool) -> list[str]:
    words = [_DETS[rng.integers(len(_DETS))], noun,
             _LINKS[rng.integers(len(_LINKS))]]
    if with_adv:
        words.append(_ADVS[rng.integers(len(_ADVS))])
    words.append(adj)
    return words


def _pick(rng, pool):
    return pool[rng.integers(len(pool))]


def _sentence(rng, label: int, n_classes: int) -> str:
    n_clauses = int(rng.integers(2, 4))
    n_keyword = int(min(n_clauses, rng.choice([1, 2, 3], p=[0.45, 0.35, 0.2])))
    keyword_slots = set(rng.choice(n_clauses, size=n_keyword, replace=False).tolist())
    # one off-class keyword sometimes sneaks in when the majority still holds
    off_slot = -1
    if n_keyword >= 2 and rng.random() < 0.15:
        off_slot = int(rng.choice(sorted(keyword_slots)))
        if n_keyword == 2:  # a 1-1 split would break the majority label
            off_slot = -1

    clauses = []
    for slot in range(n_clauses):
        if slot in keyword_slots:
            cls = label
            if slot == off_slot:
                others = [c for c in range(n_classes) if c != label]
                cls = int(rng.choice(others))
            if n_classes == 2:
                pool = _POSITIVE if cls == 1 else _NEGATIVE
                clause = _clause(rng, _pick(rng, _NOUNS), _pick(rng, pool),
                                 rng.random() < 0.5)
            else:
                clause = _clause(rng, _pick(rng, _TOPICS[cls]),
                                 _pick(rng, _NEUTRAL_ADJS), rng.random() < 0.5)
        else:
            clause = _clause(rng, _pick(rng, _NOUNS), _pick(rng, _NEUTRAL_ADJS),
                             rng.random() < 0.5)
        clauses.append(clause)

    words = clauses[0]
    for clause in clauses[1:]:
        words = words + [_pick(rng, _CONNECTIVES)] + clause
    return " ".join(words)


def synthetic_dataset(n_classes: int = 2, n_train: int = 2000,
                      n_test: int = 500, seed: int = 0) -> tuple[Corpus, Corpus]:
    """Deterministic labeled train/test corpora from the clause grammar."""
    if n_classes not in (2, 4):
        raise ValueError("synthetic grammar supports 2 or 4 classes")
    rng = np.random.default_rng([seed, n_classes])
    names = TWO_CLASS_NAMES if n_classes == 2 else FOUR_CLASS_NAMES

    def make(n):
        samples = []
        for i in range(n):
            label = i % n_classes  # exactly uniform labels
            samples.append((_sentence(rng, label, n_classes), label))
        return Corpus(samples, "classification", list(names))

    return make(n_train), make(n_test)


def synthetic_pretrain_corpus(n_sentences: int = 2000, seed: int = 0) -> Corpus:
    """Unlabeled sentences over the same vocabulary for masked-word training."""
    rng = np.random.default_rng([seed, 99])
    samples = []
    for i in range(n_sentences):
        n_classes = 2 if i % 2 == 0 else 4
        label = int(rng.integers(n_classes))
        samples.append((_sentence(rng, label, n_classes), None))
    return Corpus(samples, "unlabeled")


def default_synonym_table() -> dict[str, list[str]]:
    """Within-class keyword synonyms plus a few neutral pairs (~50 entries)."""
    table: dict[str, list[str]] = {}
    for pool in (_POSITIVE, _NEGATIVE):
        for word in pool:
            table[word] = [w for w in pool if w != word][:3]
    neutral_pairs = {
        "small": ["narrow"], "large": ["wide"], "quiet": ["plain"],
        "loud": ["busy"], "old": ["late"], "new": ["early"],
        "film": ["show"], "meal": ["menu"], "city": ["street"],
        "house": ["room"], "crew": ["staff"], "game": ["match"],
        "warm": ["near"], "cold": ["far"], "story": ["plot"],
        "writer": ["singer"], "garden": ["park"], "screen": ["window"],
        "slow": ["flat"], "round": ["wide"], "table": ["chair"],
        "long": ["wide"], "short": ["flat"], "simple": ["plain"],
        "view": ["corner"], "music": ["stage"],
    }
    table.update(neutral_pairs)
    return table


def write_synonym_file(path, table: dict[str, list[str]] | None = None) -> None:
    """One line per entry: word<TAB>syn1,syn2,..."""
    table = table if table is not None else default_synonym_table()
    with open(path, "w", encoding="utf-8") as fh:
        for word in sorted(table):
            fh.write(f"{word}\t{','.join(table[word])}\n")


def write_corpus(corpus: Corpus, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for text, label in corpus.samples:
            record = {"text": text}
            if label is not None:
                record["label"] = label
            fh.write(json.dumps(record) + "\n")
