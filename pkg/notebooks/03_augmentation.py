"""
Random scaling, SpecAugment and mixup
=====================================

Run each augmentation stage on one synthetic spectrogram and check the
properties the training loop relies on.
"""

import numpy as np

from moodtheme.augment import (AugmentConfig, augment_pipeline, draw_masks, mixup, random_scale, sample_rng,
                               spec_augment)
from moodtheme.spectro import Spectrogram
from moodtheme.synthetic import random_labels, synth_spectrogram

rng = np.random.default_rng(0)
labels = random_labels(2, 4, rng)
a = Spectrogram(synth_spectrogram(labels[0], 32, 200, rng))
b = Spectrogram(synth_spectrogram(labels[1], 32, 220, rng))

# time stretch by linear interpolation
print("scaled frames", random_scale(a, 1.3).frames, random_scale(a, 0.7).frames)

# masks: changed bins are exactly the drawn blocks
cfg = AugmentConfig(spec_freq_width_max=8, spec_time_width_max=30)
masks = draw_masks(32, 200, cfg, np.random.default_rng(1))
print("masks", masks)
masked = spec_augment(a, cfg, np.random.default_rng(1))
print("bins zeroed", int((masked.values != a.values).sum()))

# mixup weights follow Beta(alpha, alpha); labels mix with the same weight
x, y, lam = mixup((a, labels[0]), (Spectrogram(b.values[:, :200]), labels[1]), 0.2, rng)
print(f"lambda {lam:.3f}, mixed labels {np.round(y, 3)}")

# the full pipeline is a pure function of (seed, epoch, index)
full = AugmentConfig(seed=7)
one, _ = augment_pipeline((a, labels[0]), (b, labels[1]), full, 128, sample_rng(7, 3, 0))
two, _ = augment_pipeline((a, labels[0]), (b, labels[1]), full, 128, sample_rng(7, 3, 0))
print("deterministic", one.values.tobytes() == two.values.tobytes(), one.values.shape)
