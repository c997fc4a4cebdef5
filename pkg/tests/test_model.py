import numpy as np
import pytest

from moodtheme import autodiff as ad
from moodtheme.autodiff import Tensor
from moodtheme.model import (ConfigError, ModelConfig, build_model, make_divisible, multi_head_self_attention,
                             encoder_layer, positional_encoding, predict, predict_batch, prepare_input)
from moodtheme.spectro import NormStats, Spectrogram
from moodtheme.train import combined_loss


def small_cfg(**kw):
    base = dict(bands=16, input_frames=64, n_segments=4, segment_frames=16, embed_dim=16, n_heads=2,
                n_attn_layers=2)
    base.update(kw)
    return ModelConfig.attention_variant(3, **base)


def test_positional_encoding_values():
    pe = positional_encoding(5, 8)
    np.testing.assert_array_equal(pe[0], [0, 1, 0, 1, 0, 1, 0, 1])
    assert pe[1, 0] == pytest.approx(0.8414709848, abs=1e-10)
    np.testing.assert_allclose(positional_encoding(2, 4)[1], [np.sin(1), np.cos(1), np.sin(1e-2), np.cos(1e-2)],
                               atol=1e-15)
    with pytest.raises(ValueError):
        positional_encoding(3, 5)


def _hand_layer(x, p, heads):
    """Encoder layer written out with explicit loops, no shared code with the engine."""
    s, e = x.shape
    dh = e // heads

    def lin(v, w, b):
        return np.array([[sum(v[i, k] * w[j, k] for k in range(v.shape[1])) + b[j]
                          for j in range(w.shape[0])] for i in range(v.shape[0])])

    def lnorm(v, g, b):
        out = np.zeros_like(v)
        for i in range(v.shape[0]):
            mu = sum(v[i]) / v.shape[1]
            var = sum((t - mu) ** 2 for t in v[i]) / v.shape[1]
            out[i] = [(t - mu) / np.sqrt(var + 1e-5) * gg + bb for t, gg, bb in zip(v[i], g, b)]
        return out

    q, k, v = lin(x, p["wq"], p["bq"]), lin(x, p["wk"], p["bk"]), lin(x, p["wv"], p["bv"])
    ctx = np.zeros((s, e))
    weights = np.zeros((heads, s, s))
    for h in range(heads):
        cols = slice(h * dh, (h + 1) * dh)
        for i in range(s):
            scores = [sum(q[i, cols] * k[j, cols]) / np.sqrt(dh) for j in range(s)]
            m = max(scores)
            ex = [np.exp(sc - m) for sc in scores]
            w = [t / sum(ex) for t in ex]
            weights[h, i] = w
            ctx[i, cols] = sum(w[j] * v[j, cols] for j in range(s))
    a = lin(ctx, p["wo"], p["bo"])
    y = lnorm(x + a, p["ln1_g"], p["ln1_b"])
    f = lin(np.maximum(lin(y, p["ff1_w"], p["ff1_b"]), 0), p["ff2_w"], p["ff2_b"])
    return lnorm(y + f, p["ln2_g"], p["ln2_b"]), weights


def test_single_layer_matches_hand_computation():
    rng = np.random.default_rng(7)
    e, heads = 4, 2
    x = np.array([[0.5, -1.0, 2.0, 0.25], [1.5, 0.0, -0.5, 1.0]])
    shapes = {"wq": (e, e), "wk": (e, e), "wv": (e, e), "wo": (e, e), "bq": (e,), "bk": (e,), "bv": (e,),
              "bo": (e,), "ff1_w": (8, e), "ff1_b": (8,), "ff2_w": (e, 8), "ff2_b": (e,),
              "ln1_g": (e,), "ln1_b": (e,), "ln2_g": (e,), "ln2_b": (e,)}
    p = {k: np.round(rng.normal(size=s), 2) for k, s in shapes.items()}
    expected, expected_w = _hand_layer(x, p, heads)
    record = []
    out = encoder_layer(Tensor(x[None]), {k: Tensor(v) for k, v in p.items()}, heads, record=record).data[0]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-12)
    np.testing.assert_allclose(record[0][0], expected_w, rtol=0, atol=1e-12)


def test_identical_rows_give_uniform_attention():
    rng = np.random.default_rng(0)
    e = 8
    p = {f"w{m}": Tensor(rng.normal(size=(e, e))) for m in "qkvo"}
    p.update({f"b{m}": Tensor(rng.normal(size=e)) for m in "qkvo"})
    x = np.tile(rng.normal(size=e), (5, 1))[None]
    record = []
    multi_head_self_attention(Tensor(x), p, 2, record)
    np.testing.assert_allclose(record[0], np.full((1, 2, 5, 5), 0.2), atol=1e-15)


def random_batch(cfg, b=2, seed=0):
    return np.random.default_rng(seed).normal(size=(b, cfg.n_segments, cfg.bands, cfg.segment_frames))


def test_output_shapes_and_attention_rows():
    cfg = small_cfg()
    model = build_model(cfg, 0)
    out = model.forward(random_batch(cfg), "eval")
    assert out.cnn_logits.shape == (2, 4, 3)
    assert out.attn_logits.shape == (2, 3)
    assert len(out.attn_weights) == cfg.n_attn_layers
    for w in out.attn_weights:
        assert w.shape == (2, cfg.n_heads, 4, 4)
        assert np.all(w >= 0)
        np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-6)


def test_permutation_invariance_without_positional_encoding():
    cfg = small_cfg(use_positional_encoding=False, dtype="float64")
    model = build_model(cfg, 1)
    x = random_batch(cfg, 2, 3)
    perm = np.array([2, 0, 3, 1])
    a = model.forward(x, "eval")
    b = model.forward(x[:, perm], "eval")
    np.testing.assert_allclose(b.attn_logits.data, a.attn_logits.data, atol=1e-5)
    np.testing.assert_allclose(b.cnn_logits.data, a.cnn_logits.data[:, perm], atol=1e-12)
    np.testing.assert_allclose(b.cnn_probs_avg, a.cnn_probs_avg, atol=1e-12)


def test_positional_encoding_breaks_permutation_symmetry():
    cfg = small_cfg(dtype="float64")
    model = build_model(cfg, 1)
    x = random_batch(cfg, 1, 3)
    a = model.forward(x, "eval").attn_logits.data
    b = model.forward(x[:, ::-1], "eval").attn_logits.data
    assert not np.allclose(a, b, atol=1e-9)


def test_identical_segments_identical_rows():
    cfg = small_cfg()
    model = build_model(cfg, 2)
    seg = np.random.default_rng(0).normal(size=(cfg.bands, cfg.segment_frames))
    x = np.broadcast_to(seg, (1, cfg.n_segments) + seg.shape).copy()
    out = model.forward(x, "eval")
    rows = out.cnn_logits.data[0]
    assert np.all(rows == rows[0])
    sig = 1 / (1 + np.exp(-rows[0].astype(np.float64)))
    np.testing.assert_allclose(out.cnn_probs_avg[0], sig, rtol=1e-6)


def test_build_determinism():
    cfg = small_cfg()
    a, b, c = build_model(cfg, 5), build_model(cfg, 5), build_model(cfg, 6)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    assert any(not np.array_equal(a.params[k].data, c.params[k].data) for k in a.params)
    assert a.parameter_count() == c.parameter_count()


def test_eval_forward_bit_identical_and_train_updates_running_stats():
    cfg = small_cfg()
    model = build_model(cfg, 0)
    x = random_batch(cfg)
    a = model.forward(x, "eval").attn_logits.data
    b = model.forward(x, "eval").attn_logits.data
    assert a.tobytes() == b.tobytes()
    before = model.buffers["stem.0.bn_mean"].copy()
    model.forward(x, "train")
    assert not np.array_equal(before, model.buffers["stem.0.bn_mean"])


def test_config_errors():
    with pytest.raises(ConfigError, match="divisible"):
        ModelConfig.attention_variant(4, embed_dim=256, n_heads=3)
    with pytest.raises(ConfigError):
        ModelConfig.attention_variant(4, input_frames=4000)
    with pytest.raises(ConfigError):
        ModelConfig.attention_variant(0)
    with pytest.raises(ConfigError):
        ModelConfig.attention_variant(4, width_multiplier=0)
    with pytest.raises(ConfigError):
        ModelConfig.attention_variant(4, final_head="max")
    ModelConfig.attention_variant(4)  # full-size configuration is valid


def test_make_divisible_channels():
    assert [make_divisible(c * 0.25) for c in (32, 16, 24, 32, 64, 96, 160, 320)] == [8, 8, 8, 8, 16, 24, 40, 80]
    assert make_divisible(1280) == 1280


def test_config_items_round_trip():
    cfg = small_cfg(final_head="average", dropout=0.1)
    assert ModelConfig.from_items(cfg.to_items()) == cfg


def test_no_dead_parameters():
    cfg = small_cfg(dtype="float64")
    model = build_model(cfg, 0)
    x = random_batch(cfg, 3, 1)
    y = np.random.default_rng(0).integers(0, 2, (3, 3)).astype(float)
    loss = combined_loss(model.forward(x, "train"), y)
    ad.backward(loss)
    dead = [k for k, t in model.params.items() if t.grad is None or not np.any(t.grad != 0)]
    assert not dead


def test_model_gradients_match_finite_differences():
    cfg = small_cfg(dtype="float64", n_attn_layers=1)
    model = build_model(cfg, 0)
    x = random_batch(cfg, 2, 4)
    y = np.array([[1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
    names = ["stem.0.w", "proj.w", "attn.0.wq", "attn_head.w2"]

    def fn(ts):
        saved = {n: model.params[n] for n in names}
        for n, t in zip(names, ts):
            model.params[n] = t
        try:
            # eval-mode BN keeps the loss a fixed function of the weights
            return combined_loss(model.forward(x, "eval"), y)
        finally:
            model.params.update(saved)

    rng = np.random.default_rng(0)
    # probe a few coordinates of each tensor
    for n in names:
        full = model.params[n].data
        idx = tuple(rng.integers(0, s) for s in full.shape)
        t = Tensor(full.copy(), requires_grad=True)
        model.zero_grad()
        loss = fn([t if m == n else model.params[m] for m in names])
        ad.backward(loss)
        h = 1e-5
        plus, minus = full.copy(), full.copy()
        plus[idx] += h
        minus[idx] -= h
        fp = fn([Tensor(plus) if m == n else model.params[m] for m in names]).item()
        fm = fn([Tensor(minus) if m == n else model.params[m] for m in names]).item()
        numeric = (fp - fm) / (2 * h)
        assert t.grad[idx] == pytest.approx(numeric, rel=1e-4, abs=1e-9), n


def test_cnn_only_reduces_to_single_head():
    cfg = ModelConfig.cnn_variant(3, bands=96)
    assert (cfg.n_segments, cfg.input_frames, cfg.use_attention) == (1, 6590, False)
    model = build_model(cfg, 0)
    spec = Spectrogram(np.random.default_rng(0).normal(size=(96, 6590)).astype(np.float32))
    probs = predict(model, spec, None)
    out = model.forward(prepare_input(spec, None, cfg)[None], "eval")
    assert out.attn_logits is None
    sig = 1 / (1 + np.exp(-out.cnn_logits.data[0, 0].astype(np.float64)))
    np.testing.assert_allclose(probs, sig, rtol=1e-7)
    assert np.all((probs > 0) & (probs < 1))


def test_predict_deterministic_and_batched():
    cfg = small_cfg()
    model = build_model(cfg, 0)
    rng = np.random.default_rng(1)
    specs = [Spectrogram(rng.normal(size=(16, f))) for f in (40, 64, 100)]
    stats = NormStats(np.full(16, 0.1), np.full(16, 1.5))
    a = predict(model, specs[0], stats)
    assert a.tobytes() == predict(model, specs[0], stats).tobytes()
    assert np.all((a > 0) & (a < 1))
    batch = predict_batch(model, specs, stats)
    assert batch.shape == (3, 3)
    np.testing.assert_allclose(batch[0], a, rtol=1e-5)


def test_average_final_head():
    cfg = small_cfg(final_head="average")
    model = build_model(cfg, 0)
    out = model.forward(random_batch(cfg), "eval")
    np.testing.assert_allclose(model.final_probs(out), 0.5 * (out.attn_probs + out.cnn_probs_avg))


def test_forward_shape_error():
    model = build_model(small_cfg(), 0)
    with pytest.raises(ad.ShapeError):
        model.forward(np.zeros((1, 3, 16, 16)))
