import numpy as np
import pytest

from unirobust import numerics as nm
from unirobust.losses import cross_entropy_loss
from unirobust.model import (
    ModelConfig,
    SequenceLengthError,
    TransformerClassifier,
    VocabularyError,
    load_checkpoint,
    save_checkpoint,
)
from unirobust.numerics import Tape, Tensor, backward
from unirobust.unitary import unitarity_residual

from conftest import central_difference


def tiny_config(**kw):
    base = dict(vocab_size=11, max_seq_len=8, hidden=8, expand=16,
                layers=2, heads=2, num_classes=2)
    base.update(kw)
    return ModelConfig(**base)


def reference_layer_norm(x, gain, offset, eps=1e-12):
    mu = x.mean(axis=1, keepdims=True)
    var = x.var(axis=1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * gain[None, :] + offset[None, :]


def test_config_validation():
    with pytest.raises(ValueError):
        tiny_config(hidden=9, heads=2)
    with pytest.raises(ValueError):
        tiny_config(expand=8, hidden=8)
    with pytest.raises(ValueError):
        tiny_config(layers=0)


def test_unitary_census_formulas():
    for layers in (1, 3, 12):
        model = TransformerClassifier(tiny_config(layers=layers), seed=0)
        flagged, unflagged = model.unitary_census()
        assert flagged == 4 * layers
        assert unflagged == 2 * layers + 5
    model = TransformerClassifier(tiny_config(layers=12), seed=0)
    assert model.unitary_census() == (48, 29)


def test_flagged_entries_are_square():
    model = TransformerClassifier(tiny_config(), seed=0)
    for e in model.weight_entries():
        if e.unitary_flag:
            assert e.matrix.shape[0] == e.matrix.shape[1]
            assert e.name in ("query", "key", "value", "dense")
    names = {(e.name, e.layer_index) for e in model.weight_entries()}
    assert ("classifier", None) in names and ("projection", None) in names


def test_embed_matches_reference_composition():
    model = TransformerClassifier(tiny_config(), seed=3)
    ids = [2, 5, 5]
    types = [0, 0, 1]
    out = model.embed(ids, types)
    pre = (model.params["embed.word"].data[ids]
           + model.params["embed.position"].data[[0, 1, 2]]
           + model.params["embed.token_type"].data[types])
    expected = reference_layer_norm(pre, model.params["embed.norm_gain"].data,
                                    model.params["embed.norm_offset"].data)
    assert np.allclose(out.data, expected, atol=1e-14)
    # identical tokens at different positions differ by the position rows
    diff = pre[1] - pre[2] - (model.params["embed.position"].data[1]
                              - model.params["embed.position"].data[2]
                              + model.params["embed.token_type"].data[0]
                              - model.params["embed.token_type"].data[1])
    assert np.allclose(diff, 0.0, atol=1e-15)


def test_embed_zero_tables_give_zero_rows():
    model = TransformerClassifier(tiny_config(), seed=0)
    for name in ("embed.word", "embed.position", "embed.token_type",
                 "embed.norm_offset"):
        model.params[name].data = np.zeros_like(model.params[name].data)
    out = model.embed([0], [0])
    assert np.allclose(out.data, 0.0)


def test_embed_errors():
    model = TransformerClassifier(tiny_config(), seed=0)
    with pytest.raises(VocabularyError):
        model.embed([99], [0])
    with pytest.raises(SequenceLengthError):
        model.embed(list(range(9)), [0] * 9)


def test_embedding_gradient_touches_only_used_rows():
    model = TransformerClassifier(tiny_config(), seed=1)
    ids = [4, 7]
    with Tape():
        out = model.embed(ids, [0, 0])
        backward(out.sum())
    grad = model.params["embed.word"].grad
    used = np.zeros(model.config.vocab_size, dtype=bool)
    used[ids] = True
    assert np.all(grad[~used] == 0.0)
    assert np.any(grad[used] != 0.0)

    # finite differences on one used row entry
    w0 = model.params["embed.word"].data.copy()

    def f(w):
        model.params["embed.word"].data = w
        val = float(model.embed(ids, [0, 0]).data.sum())
        model.params["embed.word"].data = w0
        return val

    fd = central_difference(f, w0)
    model.zero_grads()
    assert np.max(np.abs(grad - fd)) < 1e-6


def test_unit_block_matches_straight_line_reimplementation():
    cfg = tiny_config()
    model = TransformerClassifier(cfg, seed=5)
    rng = np.random.default_rng(8)
    x = rng.standard_normal((4, cfg.hidden))

    p = {k: t.data for k, t in model.params.items()}
    q = x @ p["block0.query"] + p["block0.query_bias"]
    k = x @ p["block0.key"] + p["block0.key_bias"]
    v = x @ p["block0.value"] + p["block0.value_bias"]
    head_dim = cfg.hidden // cfg.heads
    ctx = np.zeros_like(x)
    for h in range(cfg.heads):
        sl = slice(h * head_dim, (h + 1) * head_dim)
        scores = q[:, sl] @ k[:, sl].T / np.sqrt(head_dim)
        e = np.exp(scores - scores.max(axis=1, keepdims=True))
        attn = e / e.sum(axis=1, keepdims=True)
        ctx[:, sl] = attn @ v[:, sl]
    attn_out = ctx @ p["block0.dense"] + p["block0.dense_bias"]
    h1 = reference_layer_norm(x + attn_out, p["block0.attn_norm_gain"],
                              p["block0.attn_norm_offset"])
    inner = h1 @ p["block0.expand"] + p["block0.expand_bias"]
    from scipy.special import erf
    act = inner * 0.5 * (1.0 + erf(inner / np.sqrt(2.0)))
    ffn = act @ p["block0.reduce"] + p["block0.reduce_bias"]
    expected = reference_layer_norm(h1 + ffn, p["block0.ffn_norm_gain"],
                                    p["block0.ffn_norm_offset"])

    out = model.unit_block(Tensor(x), 0)
    assert np.max(np.abs(out.data - expected)) < 1e-10


def test_unit_block_permutation_equivariance():
    cfg = tiny_config()
    model = TransformerClassifier(cfg, seed=6)
    rng = np.random.default_rng(9)
    x = rng.standard_normal((5, cfg.hidden))
    perm = np.array([3, 0, 4, 1, 2])
    out = model.unit_block(Tensor(x), 0).data
    out_perm = model.unit_block(Tensor(x[perm]), 0).data
    assert np.allclose(out_perm, out[perm], atol=1e-12)


def test_unit_block_single_position_attention_degenerates():
    cfg = tiny_config()
    model = TransformerClassifier(cfg, seed=7)
    rng = np.random.default_rng(10)
    x = rng.standard_normal((1, cfg.hidden))
    p = {k: t.data for k, t in model.params.items()}
    # softmax over one key puts weight 1 on it: context is just the value row
    v = x @ p["block0.value"] + p["block0.value_bias"]
    attn_out = v @ p["block0.dense"] + p["block0.dense_bias"]
    h1 = reference_layer_norm(x + attn_out, p["block0.attn_norm_gain"],
                              p["block0.attn_norm_offset"])
    from scipy.special import erf
    inner = h1 @ p["block0.expand"] + p["block0.expand_bias"]
    act = inner * 0.5 * (1.0 + erf(inner / np.sqrt(2.0)))
    ffn = act @ p["block0.reduce"] + p["block0.reduce_bias"]
    expected = reference_layer_norm(h1 + ffn, p["block0.ffn_norm_gain"],
                                    p["block0.ffn_norm_offset"])
    out = model.unit_block(Tensor(x), 0)
    assert np.allclose(out.data, expected, atol=1e-12)


def test_forward_zero_network_ties_to_class_zero():
    model = TransformerClassifier(tiny_config(), seed=0)
    for name, t in model.params.items():
        if name != "projection":
            t.data = np.zeros_like(t.data)
    trace = model.forward([1, 2, 3])
    assert np.allclose(trace.logits.data, 0.0)
    assert model.predict([1, 2, 3]) == 0


@pytest.mark.parametrize("n_classes", [2, 3, 4])
def test_forward_logits_length(n_classes):
    model = TransformerClassifier(tiny_config(num_classes=n_classes), seed=0)
    trace = model.forward([1, 2])
    assert trace.logits.shape == (n_classes,)


def test_forward_trace_length_matches_layers():
    model = TransformerClassifier(tiny_config(layers=3), seed=0)
    trace = model.forward([1, 2, 3], capture_trace=True)
    assert len(trace.block_outputs) == 3
    assert all(b.shape == (model.config.hidden,) for b in trace.block_outputs)


def test_forward_deterministic():
    a = TransformerClassifier(tiny_config(), seed=12).forward([1, 2, 3]).logits.data
    b = TransformerClassifier(tiny_config(), seed=12).forward([1, 2, 3]).logits.data
    assert np.array_equal(a, b)


def test_masked_lm_head_shape_and_orthonormal_argmax():
    cfg = tiny_config(vocab_size=8, hidden=8)
    model = TransformerClassifier(cfg, seed=0)
    x = model.encoder_output([1, 2, 3])
    logits = model.masked_lm_head(x)
    assert logits.shape == (3, cfg.vocab_size)

    model.params["embed.word"].data = np.eye(8)
    k = 5
    probe = Tensor(np.eye(8)[[k]])
    scores = model.masked_lm_head(probe)
    assert int(np.argmax(scores.data[0])) == k


def test_masked_lm_gradient_accumulates_through_tied_weights():
    cfg = tiny_config(vocab_size=6, max_seq_len=4)
    model = TransformerClassifier(cfg, seed=2)
    ids = [1, 3]
    targets = [3, 1]

    def loss_value():
        x = model.encoder_output(ids)
        return cross_entropy_loss(model.masked_lm_head(x), targets)

    with Tape():
        backward(loss_value())
    grad = model.params["embed.word"].grad.copy()
    model.zero_grads()

    w0 = model.params["embed.word"].data.copy()

    def f(w):
        model.params["embed.word"].data = w
        val = loss_value().item()
        model.params["embed.word"].data = w0
        return val

    fd = central_difference(f, w0)
    assert np.max(np.abs(grad - fd)) < 1e-6
    # rows used only by the output head (not the input lookup) still get grad
    assert np.any(grad[0] != 0.0)


def test_apply_unitary_constraints_contract():
    model = TransformerClassifier(tiny_config(), seed=4)
    before_classifier = model.params["classifier"].data.tobytes()
    model.apply_unitary_constraints()
    assert model.max_unitarity_residual() < 1e-9
    assert model.params["classifier"].data.tobytes() == before_classifier

    snapshot = {(e.name, e.layer_index): e.matrix.data.copy()
                for e in model.weight_entries() if e.unitary_flag}
    model.apply_unitary_constraints()
    for e in model.weight_entries():
        if e.unitary_flag:
            delta = e.matrix.data - snapshot[(e.name, e.layer_index)]
            assert np.max(np.abs(delta)) < 1e-12
    assert model.projection_calls == 2


def test_clone_is_independent():
    model = TransformerClassifier(tiny_config(), seed=4)
    twin = model.clone()
    twin.params["classifier"].data[:] = 0.0
    assert np.any(model.params["classifier"].data != 0.0)
    assert model.forward([1, 2]).logits.data is not None


def test_checkpoint_roundtrip(tmp_path):
    model = TransformerClassifier(tiny_config(), seed=13)
    model.apply_unitary_constraints()
    path = tmp_path / "model.ckpt"
    save_checkpoint(model, path)
    loaded, tok = load_checkpoint(path)
    assert tok is None
    assert loaded.config == model.config
    for name in model.params:
        assert np.array_equal(loaded.params[name].data, model.params[name].data)
    a = model.forward([1, 2, 3]).logits.data
    b = loaded.forward([1, 2, 3]).logits.data
    assert np.array_equal(a, b)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b'{"format": "something-else"}\n')
    with pytest.raises(ValueError):
        load_checkpoint(path)
