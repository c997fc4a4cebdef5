import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moodtheme.augment import (AugmentConfig, Mask, apply_masks, augment_pipeline, draw_masks, mixup,
                               random_scale, sample_rng, spec_augment)
from moodtheme.spectro import Spectrogram, pad_or_crop


def positive_spec(bands, frames, seed=0):
    # strictly nonzero so every masked bin registers as changed
    rng = np.random.default_rng(seed)
    return Spectrogram(rng.uniform(0.5, 2.0, size=(bands, frames)))


def test_scale_identity():
    s = positive_spec(3, 17)
    np.testing.assert_array_equal(random_scale(s, 1.0).values, s.values)


def test_scale_factor_two_on_two_frames():
    s = Spectrogram(np.array([[1.0, 4.0]]))
    out = random_scale(s, 2.0).values[0]
    # sample positions linspace(0, 1, 4) = 0, 1/3, 2/3, 1
    np.testing.assert_allclose(out, [1.0, 2.0, 3.0, 4.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(factor=st.floats(0.3, 3.0), c=st.floats(-100, 100), frames=st.integers(4, 40))
def test_scale_preserves_constants(factor, c, frames):
    s = Spectrogram(np.full((2, frames), c))
    out = random_scale(s, factor).values
    assert out.shape[1] == int(np.floor(frames * factor + 0.5))
    assert np.all(out == c)


@settings(max_examples=50, deadline=None)
@given(factor=st.floats(0.5, 2.0), seed=st.integers(0, 1000))
def test_scale_preserves_bounds(factor, seed):
    s = Spectrogram(np.random.default_rng(seed).normal(size=(3, 25)))
    out = random_scale(s, factor).values
    assert out.min() >= s.values.min() and out.max() <= s.values.max()


def test_zero_width_masks_identity():
    s = positive_spec(8, 20)
    cfg = AugmentConfig(spec_freq_masks=3, spec_freq_width_max=0, spec_time_masks=3, spec_time_width_max=0)
    np.testing.assert_array_equal(spec_augment(s, cfg, np.random.default_rng(0)).values, s.values)


def test_full_frequency_mask():
    s = positive_spec(6, 10)
    out = apply_masks(s, [Mask(0, 0, 6)]).values
    assert np.all(out == 0)


def test_full_width_draw_zeroes_every_row():
    s = positive_spec(6, 10)
    cfg = AugmentConfig(spec_freq_masks=1, spec_freq_width_max=6, spec_time_masks=0, spec_time_width_max=0)
    for seed in range(200):
        rng = np.random.default_rng(seed)
        (m,) = draw_masks(6, 10, cfg, np.random.default_rng(seed))
        if m.width == 6:
            assert np.all(spec_augment(s, cfg, rng).values == 0)
            return
    pytest.fail("no full-width draw in 200 seeds")


def test_single_time_mask_changes_exact_block():
    s = positive_spec(96, 256)
    out = apply_masks(s, [Mask(1, 10, 5)]).values
    changed = out != s.values
    assert changed.sum() == 96 * 5
    assert set(np.flatnonzero(changed.any(axis=0))) == set(range(10, 15))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), nf=st.integers(0, 3), nt=st.integers(0, 3))
def test_changed_bins_equal_mask_area(seed, nf, nt):
    s = positive_spec(12, 40, seed)
    cfg = AugmentConfig(spec_freq_masks=nf, spec_freq_width_max=5, spec_time_masks=nt, spec_time_width_max=9)
    masks = draw_masks(12, 40, cfg, np.random.default_rng(seed))
    cover = np.zeros((12, 40), dtype=bool)
    for m in masks:
        if m.axis == 0:
            cover[m.start:m.start + m.width] = True
        else:
            cover[:, m.start:m.start + m.width] = True
    out = spec_augment(s, cfg, np.random.default_rng(seed)).values
    changed = out != s.values
    np.testing.assert_array_equal(changed, cover)
    assert changed.sum() <= nf * 5 * 40 + nt * 9 * 12


def test_mask_wider_than_input_rejected():
    with pytest.raises(ValueError):
        draw_masks(8, 100, AugmentConfig(spec_freq_width_max=16), np.random.default_rng(0))


def test_mixup_endpoints_and_midpoint():
    a = (Spectrogram(np.zeros((3, 4))), np.array([1.0, 0.0]))
    b = (Spectrogram(np.full((3, 4), 2.0)), np.array([0.0, 1.0]))
    x, y, _ = mixup(a, b, 0.2, lam=1.0)
    np.testing.assert_array_equal(x.values, a[0].values)
    np.testing.assert_array_equal(y, a[1])
    x, y, _ = mixup(a, b, 0.2, lam=0.0)
    np.testing.assert_array_equal(x.values, b[0].values)
    x, y, _ = mixup(a, b, 0.2, lam=0.5)
    np.testing.assert_array_equal(x.values, np.ones((3, 4)))
    np.testing.assert_array_equal(y, [0.5, 0.5])


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), alpha=st.floats(0.05, 5.0))
def test_mixup_convexity(seed, alpha):
    rng = np.random.default_rng(seed)
    xa, xb = rng.normal(size=(4, 6)) * 100, rng.normal(size=(4, 6)) * 100
    ya, yb = rng.integers(0, 2, 3).astype(float), rng.integers(0, 2, 3).astype(float)
    x, y, lam = mixup((Spectrogram(xa), ya), (Spectrogram(xb), yb), alpha, rng)
    assert 0.0 <= lam <= 1.0
    assert np.all(x.values >= np.minimum(xa, xb)) and np.all(x.values <= np.maximum(xa, xb))
    assert np.all((y >= 0) & (y <= 1))


def test_mixup_lambda_mean():
    rng = np.random.default_rng(123)
    a = (Spectrogram(np.zeros((1, 1))), np.zeros(1))
    b = (Spectrogram(np.ones((1, 1))), np.ones(1))
    lams = np.array([mixup(a, b, 0.2, rng)[2] for _ in range(100_000)])
    assert abs(lams.mean() - 0.5) < 0.01


def test_mixup_shape_mismatch():
    with pytest.raises(ValueError):
        mixup((Spectrogram(np.ones((2, 3))), np.ones(2)), (Spectrogram(np.ones((2, 4))), np.ones(2)), 0.2,
              np.random.default_rng(0))


def test_disabled_pipeline_is_identity():
    s = positive_spec(8, 64)
    y = np.array([1.0, 0.0, 1.0])
    peer = (positive_spec(8, 64, 1), np.array([0.0, 1.0, 0.0]))
    out, labels = augment_pipeline((s, y), peer, AugmentConfig.disabled(), 64, np.random.default_rng(0))
    np.testing.assert_array_equal(out.values, s.values)
    np.testing.assert_array_equal(labels, y)
    # frames != target: disabled pipeline is the deterministic eval pad/crop
    out, _ = augment_pipeline((s, y), None, AugmentConfig.disabled(), 40, np.random.default_rng(0))
    np.testing.assert_array_equal(out.values, pad_or_crop(s, 40, "eval").values)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 1000), frames=st.integers(20, 200), target=st.integers(64, 128))
def test_pipeline_shape_and_determinism(seed, frames, target):
    cfg = AugmentConfig(spec_freq_width_max=4, spec_time_width_max=16, seed=seed)
    s = positive_spec(8, frames, seed)
    peer = (positive_spec(8, frames + 7, seed + 1), np.array([0.0, 1.0]))

    def run():
        return augment_pipeline((s, np.array([1.0, 0.0])), peer, cfg, target, sample_rng(cfg.seed, 3, 5))

    (a, ya), (b, yb) = run(), run()
    assert a.values.shape == (8, target)
    assert a.values.tobytes() == b.values.tobytes()
    np.testing.assert_array_equal(ya, yb)


def test_sample_streams_depend_on_epoch_and_index():
    draws = {(e, i): sample_rng(0, e, i).integers(1 << 62) for e in range(3) for i in range(3)}
    assert len(set(draws.values())) == 9
    assert sample_rng(0, 1, 2).integers(1 << 62) == draws[(1, 2)]


def test_config_validation():
    with pytest.raises(ValueError):
        AugmentConfig(scale_range=(1.2, 0.8))
    with pytest.raises(ValueError):
        AugmentConfig(mixup_alpha=-1)
    with pytest.raises(ValueError):
        AugmentConfig(spec_time_masks=-1)
