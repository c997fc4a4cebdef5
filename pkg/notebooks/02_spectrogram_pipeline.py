"""
Spectrogram files, manifests and normalisation
==============================================

Write a synthetic corpus to disk, read it back through the manifest, compute
per-band statistics on the training split and cut a track into segments.
"""

import tempfile
from pathlib import Path

import numpy as np

from moodtheme.spectro import compute_stats, load_manifest, normalize, pad_or_crop, read_npy, segment
from moodtheme.synthetic import make_dataset

root = Path(tempfile.mkdtemp())
manifest_path = make_dataset(root, n_tracks=8, n_labels=4, bands=32, frames=300, frame_jitter=40, seed=0)
print(manifest_path.read_text().splitlines()[:3])

manifest = load_manifest(manifest_path, root / "tags.txt", "train")
print("tags", manifest.tag_vocabulary, "label matrix", manifest.labels().shape)

spec = manifest.load(manifest.entries[0], bands=32)
print("first track", spec.values.shape, spec.values.dtype)

# stats come from the training split only and are applied everywhere
stats = compute_stats(manifest, bands=32)
z = normalize(spec, stats)
print("normalised band means (first 4)", np.round(z.values.mean(axis=1)[:4], 3))

# fixed-length input: centre crop or zero pad, then equal segments
fixed = pad_or_crop(z, 256, "eval")
parts = segment(fixed, 4)
print("segments", [p.values.shape for p in parts])

# the reader accepts frames-first files when the band count is given
again = read_npy(manifest.resolve(manifest.entries[0]), bands=32)
print("round trip equal", np.array_equal(again.values, spec.values))
