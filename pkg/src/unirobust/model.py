"""Toy transformer text classifier with per-weight orthogonality flags.

The encoder follows the classic post-norm layout: word + position +
token-type embeddings with layer norm, a stack of unit blocks (multi-head
scaled dot-product attention through query/key/value/dense weights,
residual + layer norm, then expand -> GELU -> reduce feed-forward,
residual + layer norm), and a classifier head (first-position pooling,
dense + tanh, projection to class logits).

Exactly the square hidden-by-hidden weights -- query, key, value, dense
in every block -- carry the orthogonality flag; the classifier stays
unconstrained even though it is square, and the non-square weights
cannot be orthogonal at all. With L blocks that is 4L flagged matrices
against 2L+5 unflagged ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .numerics import Tensor
from .unitary import project_unitary, unitarity_residual

INIT_STD = 0.02

CHECKPOINT_FORMAT = "unirobust-checkpoint"
CHECKPOINT_VERSION = 1


class VocabularyError(ValueError):
    """A token id falls outside the embedding table."""


class SequenceLengthError(ValueError):
    """Input longer than max_seq_len; truncation is never silent."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    max_seq_len: int
    hidden: int = 32
    expand: int = 128
    layers: int = 3
    heads: int = 2
    num_classes: int = 2
    token_types: int = 2

    def __post_init__(self):
        for name in ("vocab_size", "max_seq_len", "hidden", "expand",
                     "layers", "heads", "num_classes", "token_types"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.hidden % self.heads != 0:
            raise ValueError(
                f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.expand == self.hidden:
            raise ValueError("expand must differ from hidden "
                             "(the feed-forward weights are non-square)")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in (
            "vocab_size", "max_seq_len", "hidden", "expand", "layers",
            "heads", "num_classes", "token_types")}


@dataclass
class WeightEntry:
    name: str
    layer_index: int | None
    matrix: Tensor
    unitary_flag: bool


@dataclass
class ForwardTrace:
    block_outputs: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None


class TransformerClassifier:

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.projection_calls = 0
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        c = config

        def matrix(name, rows, cols):
            self.params[name] = Tensor(
                rng.normal(0.0, INIT_STD, size=(rows, cols)), requires_grad=True)

        def vector(name, size, value=0.0):
            self.params[name] = Tensor(
                np.full(size, value, dtype=np.float64), requires_grad=True)

        matrix("embed.word", c.vocab_size, c.hidden)
        matrix("embed.position", c.max_seq_len, c.hidden)
        matrix("embed.token_type", c.token_types, c.hidden)
        vector("embed.norm_gain", c.hidden, 1.0)
        vector("embed.norm_offset", c.hidden)
        for i in range(c.layers):
            for role in ("query", "key", "value", "dense"):
                matrix(f"block{i}.{role}", c.hidden, c.hidden)
                vector(f"block{i}.{role}_bias", c.hidden)
            matrix(f"block{i}.expand", c.hidden, c.expand)
            vector(f"block{i}.expand_bias", c.expand)
            matrix(f"block{i}.reduce", c.expand, c.hidden)
            vector(f"block{i}.reduce_bias", c.hidden)
            vector(f"block{i}.attn_norm_gain", c.hidden, 1.0)
            vector(f"block{i}.attn_norm_offset", c.hidden)
            vector(f"block{i}.ffn_norm_gain", c.hidden, 1.0)
            vector(f"block{i}.ffn_norm_offset", c.hidden)
        matrix("classifier", c.hidden, c.hidden)
        vector("classifier_bias", c.hidden)
        matrix("projection", c.hidden, c.num_classes)
        vector("projection_bias", c.num_classes)

    # -- parameter bookkeeping ------------------------------------------------

    def weight_entries(self) -> list[WeightEntry]:
        """The weight-matrix census with orthogonality flags (bias and
        norm vectors are not matrices and are not listed)."""
        entries = [
            WeightEntry("word", None, self.params["embed.word"], False),
            WeightEntry("position", None, self.params["embed.position"], False),
            WeightEntry("token", None, self.params["embed.token_type"], False),
        ]
        for i in range(self.config.layers):
            for role in ("query", "key", "value", "dense"):
                entries.append(
                    WeightEntry(role, i, self.params[f"block{i}.{role}"], True))
            entries.append(
                WeightEntry("expand", i, self.params[f"block{i}.expand"], False))
            entries.append(
                WeightEntry("reduce", i, self.params[f"block{i}.reduce"], False))
        entries.append(WeightEntry("classifier", None, self.params["classifier"], False))
        entries.append(WeightEntry("projection", None, self.params["projection"], False))
        return entries

    def unitary_census(self) -> tuple[int, int]:
        entries = self.weight_entries()
        flagged = sum(1 for e in entries if e.unitary_flag)
        return flagged, len(entries) - flagged

    def apply_unitary_constraints(self) -> None:
        """Overwrite every flagged weight with its orthogonal projection."""
        self.projection_calls += 1
        for entry in self.weight_entries():
            if entry.unitary_flag:
                entry.matrix.data = project_unitary(entry.matrix.data)

    def max_unitarity_residual(self) -> float:
        return max(unitarity_residual(e.matrix.data)
                   for e in self.weight_entries() if e.unitary_flag)

    def zero_grads(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def clone(self) -> "TransformerClassifier":
        """Read-only snapshot for concurrent evaluation."""
        other = TransformerClassifier.__new__(TransformerClassifier)
        other.config = self.config
        other.projection_calls = self.projection_calls
        other.params = {}
        for name, t in self.params.items():
            copy = Tensor(t.data.copy(), requires_grad=t.requires_grad)
            other.params[name] = copy
        return other

    # -- forward pass ---------------------------------------------------------

    def embed(self, token_ids, token_type_ids) -> Tensor:
        c = self.config
        ids = np.asarray(token_ids, dtype=np.intp)
        types = np.asarray(token_type_ids, dtype=np.intp)
        if ids.size > c.max_seq_len:
            raise SequenceLengthError(
                f"sequence of {ids.size} tokens exceeds max_seq_len {c.max_seq_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= c.vocab_size):
            raise VocabularyError(f"token id out of range for vocab {c.vocab_size}")
        if types.size and (types.min() < 0 or types.max() >= c.token_types):
            raise VocabularyError(f"token type id out of range ({c.token_types})")
        x = nm.gather_rows(self.params["embed.word"], ids)
        x = x + nm.gather_rows(self.params["embed.position"], np.arange(ids.size))
        x = x + nm.gather_rows(self.params["embed.token_type"], types)
        return nm.layer_norm(x, self.params["embed.norm_gain"],
                             self.params["embed.norm_offset"])

    def unit_block(self, x: Tensor, layer_index: int) -> Tensor:
        c = self.config
        if layer_index >= c.layers:
            raise IndexError(f"layer {layer_index} out of range ({c.layers})")
        p = self.params
        pre = f"block{layer_index}."
        q = nm.add_bias(nm.matmul(x, p[pre + "query"]), p[pre + "query_bias"])
        k = nm.add_bias(nm.matmul(x, p[pre + "key"]), p[pre + "key_bias"])
        v = nm.add_bias(nm.matmul(x, p[pre + "value"]), p[pre + "value_bias"])

        head_dim = c.hidden // c.heads
        scale = 1.0 / np.sqrt(head_dim)
        contexts = []
        for h in range(c.heads):
            lo, hi = h * head_dim, (h + 1) * head_dim
            qh = nm.slice_cols(q, lo, hi)
            kh = nm.slice_cols(k, lo, hi)
            vh = nm.slice_cols(v, lo, hi)
            scores = nm.matmul(qh, nm.transpose(kh)) * scale
            contexts.append(nm.matmul(nm.softmax(scores, axis=-1), vh))
        attn = nm.add_bias(nm.matmul(nm.concat_cols(contexts), p[pre + "dense"]),
                           p[pre + "dense_bias"])
        h1 = nm.layer_norm(x + attn, p[pre + "attn_norm_gain"],
                           p[pre + "attn_norm_offset"])
        ffn = nm.gelu(nm.add_bias(nm.matmul(h1, p[pre + "expand"]),
                                  p[pre + "expand_bias"]))
        ffn = nm.add_bias(nm.matmul(ffn, p[pre + "reduce"]), p[pre + "reduce_bias"])
        return nm.layer_norm(h1 + ffn, p[pre + "ffn_norm_gain"],
                             p[pre + "ffn_norm_offset"])

    def forward(self, token_ids, token_type_ids=None,
                capture_trace: bool = False) -> ForwardTrace:
        if token_type_ids is None:
            token_type_ids = np.zeros(len(token_ids), dtype=np.intp)
        x = self.embed(token_ids, token_type_ids)
        trace = ForwardTrace()
        for i in range(self.config.layers):
            x = self.unit_block(x, i)
            if capture_trace:
                trace.block_outputs.append(nm.mean_rows(x))
        pooled = nm.gather_rows(x, [0])  # dedicated class token position
        z = nm.tanh(nm.add_bias(nm.matmul(pooled, self.params["classifier"]),
                                self.params["classifier_bias"]))
        logits = nm.add_bias(nm.matmul(z, self.params["projection"]),
                             self.params["projection_bias"])
        trace.logits = nm.reshape(logits, (self.config.num_classes,))
        return trace

    def encoder_output(self, token_ids, token_type_ids=None) -> Tensor:
        """Final-block activations without the classifier head."""
        if token_type_ids is None:
            token_type_ids = np.zeros(len(token_ids), dtype=np.intp)
        x = self.embed(token_ids, token_type_ids)
        for i in range(self.config.layers):
            x = self.unit_block(x, i)
        return x

    def masked_lm_head(self, x: Tensor) -> Tensor:
        # Vocabulary logits through the transposed word table (tied weights).
        return nm.matmul(x, nm.transpose(self.params["embed.word"]))

    def predict(self, token_ids, token_type_ids=None) -> int:
        logits = self.forward(token_ids, token_type_ids).logits
        return int(np.argmax(logits.data))


# -- checkpoint io -------------------------------------------------------------
#
# Layout: one JSON header line (format, version, model config, ordered
# parameter entries with name/layer_index/shape/unitary_flag, optional
# tokenizer), a newline, then every parameter's row-major float64
# little-endian payload concatenated in header order.

def _entry_meta(model: TransformerClassifier) -> list[dict]:
    flags = {id(e.matrix): (e.name, e.layer_index, e.unitary_flag)
             for e in model.weight_entries()}
    meta = []
    for key, tensor in model.params.items():
        name, layer_index, flag = flags.get(id(tensor), (key, None, False))
        meta.append({
            "key": key,
            "name": name,
            "layer_index": layer_index,
            "shape": list(tensor.shape),
            "unitary_flag": flag,
        })
    return meta


def save_checkpoint(model: TransformerClassifier, path, tokenizer=None) -> None:
    header = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.config.to_dict(),
        "entries": _entry_meta(model),
    }
    if tokenizer is not None:
        header["tokenizer"] = tokenizer.to_dict()
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for key in model.params:
            fh.write(model.params[key].data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Returns (model, tokenizer_dict_or_None); raises on format mismatch."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        header = json.loads(header_line.decode("utf-8"))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"not a {CHECKPOINT_FORMAT} file: {path}")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version in {path}")
        config = ModelConfig(**header["config"])
        model = TransformerClassifier(config, seed=0)
        for entry in header["entries"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            raw = fh.read(count * 8)
            if len(raw) != count * 8:
                raise ValueError(f"truncated checkpoint payload in {path}")
            data = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
            key = entry["key"]
            if key not in model.params:
                raise ValueError(f"unknown parameter {key!r} in {path}")
            if model.params[key].shape != shape:
                raise ValueError(f"shape mismatch for {key!r} in {path}")
            model.params[key].data = data
    return model, header.get("tokenizer")
