import numpy as np
import pytest

from phonerec import autodiff as ad
from phonerec import layers
from phonerec.checkpoint import load_checkpoint, load_model, save_model
from phonerec.models import build_model, config_dict, default_config
from phonerec.models.base import pad_batch
from phonerec.models.las import LasConfig, dot_product_attention, out_index
from phonerec.models.rnn_ctc import RnnCtcConfig
from phonerec.models.transformer import TransformerConfig
from phonerec.phones import EOS_ID, SOS_ID

RNG = np.random.default_rng(1234)

TINY_LAS = dict(input_dim=8, encoder_bilstm_layers=1, encoder_hidden=6,
                decoder_embedding=10, attention_context_dim=12, mlp_hidden=9)
TINY_TRF = dict(input_dim=8, d_model=16, heads=4, encoder_layers=1, decoder_layers=1)


# ------------------------------------------------------------- rnn-ctc
def test_rnn_ctc_output_shape_halves_time():
    model = build_model("rnn-ctc", seed=0)
    out = model.forward(RNG.normal(size=(10, 40)))
    assert out.shape == (5, 34)
    out = model.forward(RNG.normal(size=(11, 40)))      # odd frame dropped
    assert out.shape == (5, 34)
    assert np.max(np.abs(np.exp(out).sum(axis=1) - 1.0)) < 1e-9


def test_rnn_ctc_rejects_short_or_misshaped_input():
    model = build_model("rnn-ctc", seed=0)
    with pytest.raises(ValueError, match="at least 2 frames"):
        model.forward(RNG.normal(size=(1, 40)))
    with pytest.raises(ValueError, match="T x 40"):
        model.forward(RNG.normal(size=(10, 39)))


def test_rnn_ctc_eval_deterministic():
    model = build_model("rnn-ctc", seed=0)
    frames = RNG.normal(size=(12, 40))
    assert np.array_equal(model.forward(frames), model.forward(frames))


# ----------------------------------------------------------- attention
def test_dot_product_attention_identical_rows():
    row = RNG.normal(size=6)
    h = np.tile(row, (4, 1))
    ctx, w = dot_product_attention(RNG.normal(size=6), h)
    assert np.allclose(ctx.value, row)
    assert np.allclose(w.value.sum(), 1.0)


def test_dot_product_attention_orthogonal_query_uniform():
    h = np.zeros((5, 4))
    h[:, 0] = 1.0
    query = np.array([0.0, 1.0, 0.0, 0.0])     # orthogonal to every row
    _, w = dot_product_attention(query, h)
    assert np.allclose(w.value, 0.2)


def test_dot_product_attention_single_row():
    h = RNG.normal(size=(1, 6))
    ctx, w = dot_product_attention(RNG.normal(size=6), h)
    assert np.allclose(ctx.value, h[0])
    assert np.allclose(w.value, [1.0])


def test_dot_product_attention_dim_mismatch():
    with pytest.raises(ad.ShapeError, match="dot_product_attention"):
        dot_product_attention(np.zeros(3), np.zeros((4, 5)))


def test_multi_head_attention_single_position():
    d, heads = 8, 2
    ws = [RNG.normal(size=(d, d)) for _ in range(4)]
    x = RNG.normal(size=(1, 1, d))
    out, attn = layers.multi_head_attention(
        ad.tensor(x), ad.tensor(x), ad.tensor(x),
        *[ad.tensor(w) for w in ws], heads=heads, scale=1.0 / np.sqrt(d))
    assert np.allclose(attn.value, 1.0)
    expected = (x[0] @ ws[2]) @ ws[3]
    assert np.allclose(out.value[0], expected)


def test_multi_head_attention_causal_first_position_and_row_sums():
    d, heads, t = 8, 4, 5
    ws = [ad.tensor(RNG.normal(size=(d, d))) for _ in range(4)]
    x = ad.tensor(RNG.normal(size=(2, t, d)))
    out, attn = layers.multi_head_attention(
        x, x, x, *ws, heads=heads, scale=1.0 / np.sqrt(d), mask=layers.causal_mask(t))
    w = attn.value
    assert np.allclose(w[:, :, 0, 0], 1.0)
    assert np.max(np.abs(w[:, :, 0, 1:])) == 0.0
    assert np.max(np.abs(w.sum(axis=-1) - 1.0)) < 1e-9
    assert np.max(np.abs(np.triu(w, k=1)[..., 1:])) == 0.0


def test_multi_head_attention_mask_shape_error():
    d = 8
    ws = [ad.tensor(RNG.normal(size=(d, d))) for _ in range(4)]
    x = ad.tensor(RNG.normal(size=(1, 4, d)))
    with pytest.raises(ad.ShapeError, match="mask"):
        layers.multi_head_attention(x, x, x, *ws, heads=2, scale=0.35,
                                    mask=layers.causal_mask(3))


# -------------------------------------------------- positional encoding
def test_positional_encoding_matches_definition():
    pe = layers.positional_encoding(4, 256)
    assert np.allclose(pe[0, 0::2], 0.0)
    assert np.allclose(pe[0, 1::2], 1.0)
    assert abs(pe[1, 0] - np.sin(1.0)) < 1e-12
    assert np.all(pe >= -1.0) and np.all(pe <= 1.0)
    # direct evaluation of the definition at an arbitrary entry
    pos, i2 = 3, 10
    assert abs(pe[pos, i2] - np.sin(pos / 10000 ** (i2 / 256))) < 1e-12
    assert abs(pe[pos, i2 + 1] - np.cos(pos / 10000 ** (i2 / 256))) < 1e-12


def test_positional_encoding_rejects_odd_dim():
    with pytest.raises(ValueError, match="even"):
        layers.positional_encoding(4, 7)


# ---------------------------------------------------------- las decoder
def test_las_decode_step_distribution_and_determinism():
    model = build_model("las", LasConfig(**TINY_LAS), seed=5)
    h = model.encode_utterance(RNG.normal(size=(9, 8)))
    state = model.init_state()
    ctx = np.zeros(model.config.encoder_hidden)
    state, ctx, probs = model.decode_step(state, SOS_ID, ctx, h.value[0])
    assert probs.shape == (35,)
    assert abs(probs.sum() - 1.0) < 1e-9
    state2 = model.init_state()
    _, _, probs2 = model.decode_step(state2, SOS_ID, np.zeros(model.config.encoder_hidden),
                                     h.value[0])
    assert np.array_equal(probs, probs2)


def test_las_decode_step_requires_state():
    model = build_model("las", LasConfig(**TINY_LAS), seed=5)
    h = model.encode_utterance(RNG.normal(size=(9, 8)))
    with pytest.raises(ValueError, match="state"):
        model.decode_step(None, SOS_ID, np.zeros(6), h.value[0])


def test_las_step_factors_product_equals_training_loss():
    model = build_model("las", LasConfig(**TINY_LAS), seed=6)
    frames = RNG.normal(size=(10, 8))
    target = (3, 17, 8)
    batch = pad_batch([(model.prepare_features(frames), target)])
    loss, stats = model.batch_loss(batch, False, None)
    h = model.encode_utterance(frames)
    state = model.init_state()
    ctx = np.zeros(model.config.encoder_hidden)
    total = 0.0
    prev = SOS_ID
    for y in list(target) + [EOS_ID]:
        state, ctx, probs = model.decode_step(state, prev, ctx, h.value[0])
        total += np.log(probs[out_index(y)])
        prev = y
    assert abs(-total / (len(target) + 1) - float(loss.value)) < 1e-9


def test_las_decoder_causality():
    model = build_model("las", LasConfig(**TINY_LAS), seed=7)
    frames = RNG.normal(size=(8, 8))
    h = model.encode_utterance(frames).value[0]
    labels_a = [4, 9, 2, 30]
    labels_b = [4, 9, 27, 11]          # diverge from step 2 onwards

    def unroll(labels):
        state, ctx, prev = model.init_state(), np.zeros(model.config.encoder_hidden), SOS_ID
        dists = []
        for y in labels:
            state, ctx, probs = model.decode_step(state, prev, ctx, h)
            dists.append(probs)
            prev = y
        return dists

    da, db = unroll(labels_a), unroll(labels_b)
    for i in range(3):                 # steps 0..2 consume the shared prefix
        assert np.array_equal(da[i], db[i])
    assert not np.array_equal(da[3], db[3])


# ---------------------------------------------------------- transformer
def test_transformer_teacher_forced_shapes():
    model = build_model("transformer-ctc", seed=8)
    frames = RNG.normal(size=(20, 80))
    labels = tuple(int(x) for x in RNG.integers(0, 33, size=5))
    logits, ctc = model.forward(frames, labels)
    assert logits.shape == (5, 36)
    assert ctc.shape == (20, 34)
    plain = build_model("transformer", seed=8)
    logits, ctc = plain.forward(frames, labels)
    assert logits.shape == (5, 36) and ctc is None


def test_transformer_requires_teacher_labels():
    model = build_model("transformer", TransformerConfig(**TINY_TRF), seed=8)
    with pytest.raises(ValueError, match="labels"):
        model.forward(RNG.normal(size=(6, 8)))


def test_transformer_decoder_causality():
    model = build_model("transformer", TransformerConfig(**TINY_TRF), seed=9)
    frames = RNG.normal(size=(7, 8))
    labels = [1, 2, 3, 4, 5]
    base, _ = model.forward(frames, labels)
    changed, _ = model.forward(frames, [1, 2, 3, 30, 5])   # j = 3
    assert np.array_equal(base[:4], changed[:4])
    assert not np.array_equal(base[4], changed[4])


def test_parameter_counts_are_stable():
    # frozen regression constants; same order as the reported 2.1M/7.6M/14.3M
    expected = {
        "rnn-ctc": 1_925_874,
        "las": 5_926_691,
        "las-ctc": 5_935_429,
        "transformer": 8_977_700,
        "transformer-ctc": 8_986_438,
    }
    for family, count in expected.items():
        assert build_model(family, seed=0).parameter_count() == count
        assert build_model(family, seed=3).parameter_count() == count


# ------------------------------------------------- end-to-end gradients
def _fd_check_family(family, config, feature_dim, n_params=5, eps=3e-5, tol=1e-3):
    rng = np.random.default_rng(hash(family) % 2 ** 31)
    model = build_model(family, config, seed=11)
    frames = rng.normal(size=(8, feature_dim))
    target = tuple(int(x) for x in rng.integers(0, 33, size=3))
    batch = pad_batch([(model.prepare_features(frames), target)])

    def loss_value():
        with ad.no_grad():
            node, _ = model.batch_loss(batch, False, None, lam=0.3, ss_rate=0.0)
        return float(node.value)

    node, _ = model.batch_loss(batch, False, None, lam=0.3, ss_rate=0.0)
    for p in model.params.values():
        p.grad = None
    ad.backpropagate(node)
    names = sorted(model.params)
    for _ in range(n_params):
        name = names[int(rng.integers(0, len(names)))]
        p = model.params[name]
        idx = int(rng.integers(0, p.value.size))
        analytic = 0.0 if p.grad is None else float(p.grad.reshape(-1)[idx])
        orig = p.value.reshape(-1)[idx]
        p.value.reshape(-1)[idx] = orig + eps
        hi = loss_value()
        p.value.reshape(-1)[idx] = orig - eps
        lo = loss_value()
        p.value.reshape(-1)[idx] = orig
        numeric = (hi - lo) / (2 * eps)
        denom = max(abs(analytic), abs(numeric), 1e-8)
        assert abs(analytic - numeric) / denom < tol, \
            f"{family} {name}[{idx}]: analytic {analytic} vs numeric {numeric}"


def test_end_to_end_gradients_rnn_ctc():
    _fd_check_family("rnn-ctc", None, 40)


def test_end_to_end_gradients_las_ctc():
    _fd_check_family("las-ctc", LasConfig(**TINY_LAS, ctc_head=True), 8)


def test_end_to_end_gradients_las_full_dims():
    _fd_check_family("las", None, 120, n_params=3)


def test_end_to_end_gradients_transformer_ctc():
    _fd_check_family("transformer-ctc", TransformerConfig(**TINY_TRF, ctc_head=True), 8)


def test_end_to_end_gradients_transformer_full_dims():
    _fd_check_family("transformer", None, 80, n_params=3)


# ------------------------------------------------------------ checkpoint
def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model("las-ctc", LasConfig(**TINY_LAS, ctc_head=True), seed=12)
    path = tmp_path / "m.ckpt"
    save_model(path, model)
    family, config, params = load_checkpoint(path)
    assert family == "las-ctc"
    assert config == config_dict(model)
    for name, value in model.state().items():
        assert np.array_equal(value, params[name])
        assert params[name].dtype == np.float64
    clone = load_model(path)
    frames = RNG.normal(size=(9, 8))
    batch = pad_batch([(model.prepare_features(frames), (1, 2))])
    a, _ = model.batch_loss(batch, False, None)
    b, _ = clone.batch_loss(batch, False, None)
    assert float(a.value) == float(b.value)


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"not a checkpoint at all")
    with pytest.raises(Exception, match="not a checkpoint"):
        load_checkpoint(path)


def test_build_model_family_contracts():
    with pytest.raises(ValueError, match="unknown model family"):
        build_model("gmm-hmm")
    with pytest.raises(ValueError, match="requires ctc_head=True"):
        build_model("las-ctc", LasConfig(**TINY_LAS, ctc_head=False))
    with pytest.raises(ValueError, match="divisible"):
        TransformerConfig(d_model=30, heads=4)
    with pytest.raises(ValueError, match="context dim"):
        LasConfig(attention_context_dim=100)
