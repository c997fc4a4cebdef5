"""Small synthetic tagging corpora with a learnable tag -> band-pattern mapping."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .spectro import ManifestEntry, write_manifest, write_npy


def random_labels(n_tracks: int, n_labels: int, rng: np.random.Generator) -> np.ndarray:
    """Multi-hot labels where every track has a tag and every tag is both present and absent."""
    while True:
        y = (rng.random((n_tracks, n_labels)) < 0.4).astype(float)
        y[np.arange(n_tracks), rng.integers(0, n_labels, n_tracks)] = 1.0
        col = y.sum(axis=0)
        if np.all(col > 0) and np.all(col < n_tracks):
            return y


def synth_spectrogram(labels: np.ndarray, bands: int, frames: int, rng: np.random.Generator,
                      noise: float = 0.3) -> np.ndarray:
    """Log-Mel-like matrix: each active tag lights up its own band range with a
    tag-specific temporal modulation, on top of a sloped background."""
    n_labels = labels.shape[0]
    t = np.arange(frames)
    background = np.linspace(-1.0, -3.0, bands)[:, None] * np.ones((1, frames))
    out = background + noise * rng.normal(size=(bands, frames))
    width = max(1, bands // n_labels)
    for j in np.flatnonzero(labels):
        lo = j * width
        period = 4 + 3 * j
        out[lo:lo + width] += 2.0 + np.sin(2 * np.pi * t / period)[None, :]
    return out.astype(np.float32)


def make_dataset(root, n_tracks: int = 8, n_labels: int = 4, bands: int = 32, frames: int = 256,
                 seed: int = 0, frame_jitter: int = 0, noise: float = 0.3,
                 split_name: str = "train", labels: np.ndarray | None = None) -> Path:
    """Write NPY files, a manifest TSV and ``tags.txt`` under ``root``; returns the manifest path."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    tags = [f"tag{j}" for j in range(n_labels)]
    y = labels if labels is not None else random_labels(n_tracks, n_labels, rng)
    entries = []
    for i in range(n_tracks):
        f = frames + (int(rng.integers(-frame_jitter, frame_jitter + 1)) if frame_jitter else 0)
        tid = f"{split_name}_{i:03d}"
        write_npy(root / f"{tid}.npy", synth_spectrogram(y[i], bands, f, rng, noise))
        entries.append(ManifestEntry(tid, f"{tid}.npy", [tags[j] for j in np.flatnonzero(y[i])]))
    path = root / f"{split_name}.tsv"
    write_manifest(path, entries)
    (root / "tags.txt").write_text("\n".join(tags) + "\n", encoding="utf-8")
    return path
