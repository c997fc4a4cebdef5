"""
Forward pass through the two-head tagger
========================================

Segments go through a shared MobileNetV2 backbone, then through a small
transformer encoder; both heads produce per-tag logits.
"""

import time

import numpy as np

from moodtheme.model import ModelConfig, build_model

# full input geometry: 96 bands, 16 segments of 256 frames
cfg = ModelConfig.attention_variant(56)
model = build_model(cfg, seed=0)
n_params = model.parameter_count()
print(f"{n_params} parameters")

x = np.random.default_rng(0).normal(size=(1, cfg.n_segments, cfg.bands, cfg.segment_frames))
t0 = time.perf_counter()
out = model.forward(x, "eval")
print(f"forward {time.perf_counter() - t0:.2f}s")
print("per-segment logits", out.cnn_logits.shape, "track logits", out.attn_logits.shape)

# attention rows are distributions over segments
w = out.attn_weights[0]
print("attention", w.shape, "row sums", float(w.sum(axis=-1).min()), float(w.sum(axis=-1).max()))

# without positional encoding the encoder ignores segment order
plain = build_model(ModelConfig.attention_variant(56, use_positional_encoding=False), seed=0)
perm = np.random.default_rng(1).permutation(cfg.n_segments)
gap = np.abs(plain.forward(x, "eval").attn_logits.data - plain.forward(x[:, perm], "eval").attn_logits.data)
print(f"max change after shuffling segments {gap.max():.1e}")
