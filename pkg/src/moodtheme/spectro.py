"""Precomputed Mel-spectrogram ingestion: NPY files, manifests, normalization,
padding/cropping and segmentation."""
from __future__ import annotations

import ast
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PAPER_BANDS = 96
STD_FLOOR = 1e-5
NPY_MAGIC = b"\x93NUMPY"


class FormatError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass
class Spectrogram:
    """Log-Mel magnitudes, bands on the first axis and frames on the second."""

    values: np.ndarray
    track_id: str = ""

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise ValueError(f"spectrogram must be a non-empty bands×frames matrix, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError(f"spectrogram {self.track_id!r} contains non-finite values")
        self.values = v

    @property
    def bands(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def replace(self, values: np.ndarray) -> "Spectrogram":
        return Spectrogram(values, self.track_id)


# --- NPY v1.0 -----------------------------------------------------------------

def write_npy(path, array: np.ndarray) -> None:
    """Write a 2-D little-endian float32/float64 C-order array as NPY v1.0."""
    a = np.ascontiguousarray(array)
    if a.dtype not in (np.float32, np.float64):
        raise FormatError(f"unsupported dtype {a.dtype}")
    a = a.astype(a.dtype.newbyteorder("<"), copy=False)
    descr = "<f4" if a.dtype.itemsize == 4 else "<f8"
    header = "{'descr': '%s', 'fortran_order': False, 'shape': %r, }" % (descr, tuple(a.shape))
    # magic(6) + version(2) + length(2) + header + '\n' padded to 64 bytes
    pad = -(10 + len(header) + 1) % 64
    header = header + " " * pad + "\n"
    with open(path, "wb") as f:
        f.write(NPY_MAGIC + b"\x01\x00" + struct.pack("<H", len(header)))
        f.write(header.encode("latin1"))
        f.write(a.tobytes(order="C"))


def _read_npy_array(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:6] != NPY_MAGIC:
        raise FormatError(f"{path}: not an NPY file (magic {raw[:6]!r})")
    if raw[6:8] != b"\x01\x00":
        raise FormatError(f"{path}: unsupported NPY version {raw[6]}.{raw[7]} (only 1.0)")
    (hlen,) = struct.unpack("<H", raw[8:10])
    try:
        header = ast.literal_eval(raw[10:10 + hlen].decode("latin1"))
        descr, fortran, shape = header["descr"], header["fortran_order"], tuple(header["shape"])
    except (ValueError, SyntaxError, KeyError, TypeError) as e:
        raise FormatError(f"{path}: malformed NPY header ({e})") from None
    if descr not in ("<f4", "<f8"):
        raise FormatError(f"{path}: unsupported dtype {descr!r} (need '<f4' or '<f8')")
    if fortran:
        raise FormatError(f"{path}: fortran_order arrays are not supported")
    if len(shape) != 2:
        raise FormatError(f"{path}: expected a 2-D array, got shape {shape}")
    dtype = np.dtype(descr)
    count = int(np.prod(shape))
    payload = raw[10 + hlen:]
    if len(payload) != count * dtype.itemsize:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header implies "
                          f"{count * dtype.itemsize}")
    return np.frombuffer(payload, dtype=dtype).reshape(shape).copy()


def read_npy(path, bands: int | None = None, track_id: str | None = None) -> Spectrogram:
    """Load a stored spectrogram and put bands on the first axis.

    Without ``bands`` the axis of extent 96 is taken as the band axis and a
    96×96 array is rejected as ambiguous. An explicit ``bands`` prefers the
    stored orientation when the first axis matches.
    """
    a = _read_npy_array(path)
    tid = track_id if track_id is not None else Path(path).stem
    if bands is None:
        if a.shape == (PAPER_BANDS, PAPER_BANDS):
            raise FormatError(f"{path}: ambiguous orientation for a {a.shape} array; pass bands")
        bands = PAPER_BANDS
    if a.shape[0] == bands:
        return Spectrogram(a, tid)
    if a.shape[1] == bands:
        return Spectrogram(np.ascontiguousarray(a.T), tid)
    raise FormatError(f"{path}: no axis of extent {bands} in shape {a.shape}")


# --- manifests ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    track_id: str
    path: str
    tags: list[str]


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    tag_vocabulary: list[str]
    split: str = "train"
    base_dir: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    @property
    def n_labels(self) -> int:
        return len(self.tag_vocabulary)

    def labels(self) -> np.ndarray:
        """n_tracks × n_labels multi-hot matrix in vocabulary order."""
        index = {t: i for i, t in enumerate(self.tag_vocabulary)}
        y = np.zeros((len(self.entries), len(index)))
        for r, e in enumerate(self.entries):
            for t in e.tags:
                y[r, index[t]] = 1.0
        return y

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p

    def load(self, entry: ManifestEntry, bands: int | None = None) -> Spectrogram:
        return read_npy(self.resolve(entry), bands=bands, track_id=entry.track_id)


def read_vocabulary(path) -> list[str]:
    tags = [ln.strip() for ln in Path(path).read_text(encoding="utf-8").splitlines()]
    tags = [t for t in tags if t and not t.startswith("#")]
    if len(set(tags)) != len(tags):
        raise ManifestError(f"{path}: duplicate tags in vocabulary")
    return tags


def load_manifest(path, vocabulary: list[str] | str | Path | None = None,
                  split: str = "train") -> DatasetManifest:
    """Parse ``track_id<TAB>relative_path<TAB>tag,tag,...`` lines."""
    if split not in ("train", "valid", "test"):
        raise ManifestError(f"unknown split {split!r}")
    if isinstance(vocabulary, (str, Path)):
        vocabulary = read_vocabulary(vocabulary)
    fixed = vocabulary is not None
    vocab: list[str] = list(vocabulary) if fixed else []
    known = set(vocab)
    entries: list[ManifestEntry] = []
    seen: set[str] = set()
    path = Path(path)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = line.split("\t")
        if len(fields) != 3:
            raise ManifestError(f"{path}: line {lineno}: expected 3 tab-separated fields, "
                                f"got {len(fields)}")
        track_id, rel, tag_field = (f.strip() for f in fields)
        if not track_id or not rel:
            raise ManifestError(f"{path}: line {lineno}: empty track id or path")
        if track_id in seen:
            raise ManifestError(f"{path}: line {lineno}: duplicate track_id {track_id!r}")
        seen.add(track_id)
        tags = [t.strip() for t in tag_field.split(",") if t.strip()]
        for t in tags:
            if t not in known:
                if fixed:
                    raise ManifestError(f"{path}: line {lineno}: tag {t!r} not in vocabulary")
                vocab.append(t)
                known.add(t)
        entries.append(ManifestEntry(track_id, rel, tags))
    if not entries:
        raise ManifestError(f"{path}: manifest is empty")
    return DatasetManifest(entries, vocab, split, path.parent)


def write_manifest(path, entries: list[ManifestEntry]) -> None:
    lines = [f"{e.track_id}\t{e.path}\t{','.join(e.tags)}" for e in entries]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# --- normalization ------------------------------------------------------------

@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    source: str = ""
    count: int = 0

    @property
    def bands(self) -> int:
        return self.mean.shape[0]

    def save(self, path) -> None:
        lines = ["# moodtheme normstats v1", f"bands={self.bands}"]
        lines += [f"{m!r}\t{s!r}" for m, s in zip(self.mean.tolist(), self.std.tolist())]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "NormStats":
        lines = [ln for ln in Path(path).read_text(encoding="utf-8").splitlines()
                 if ln and not ln.startswith("#")]
        if not lines or not lines[0].startswith("bands="):
            raise FormatError(f"{path}: missing 'bands=<n>' header")
        n = int(lines[0].split("=", 1)[1])
        rows = [ln.split("\t") for ln in lines[1:]]
        if len(rows) != n or any(len(r) != 2 for r in rows):
            raise FormatError(f"{path}: expected {n} 'mean<TAB>std' lines")
        arr = np.array([[float(a), float(b)] for a, b in rows])
        if np.any(arr[:, 1] <= 0):
            raise FormatError(f"{path}: non-positive std")
        return cls(arr[:, 0].copy(), arr[:, 1].copy(), source=str(path))


def compute_stats(manifest: DatasetManifest, bands: int | None = None) -> NormStats:
    """Per-band population mean/std over every frame of every training track.

    Tracks are folded in one at a time with the pairwise (Chan et al.) merge of
    count / mean / sum of squared deviations.
    """
    if manifest.split != "train":
        raise ValueError(f"normalization statistics come from the train split, got {manifest.split!r}")
    if not manifest.entries:
        raise ValueError("cannot compute statistics of an empty manifest")
    n = 0
    mean = m2 = None
    for entry in manifest.entries:
        v = manifest.load(entry, bands=bands).values.astype(np.float64)
        nb = v.shape[1]
        mb = v.mean(axis=1)
        m2b = ((v - mb[:, None]) ** 2).sum(axis=1)
        if mean is None:
            n, mean, m2 = nb, mb, m2b
            continue
        if mb.shape != mean.shape:
            raise ValueError(f"track {entry.track_id!r} has {mb.shape[0]} bands, expected {mean.shape[0]}")
        delta = mb - mean
        total = n + nb
        mean = mean + delta * nb / total
        m2 = m2 + m2b + delta ** 2 * n * nb / total
        n = total
    std = np.maximum(np.sqrt(m2 / n), STD_FLOOR)
    return NormStats(mean, std, source=f"{manifest.base_dir}:{len(manifest)} tracks", count=n)


def normalize(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    if spec.bands != stats.bands:
        raise ValueError(f"spectrogram has {spec.bands} bands, stats have {stats.bands}")
    return spec.replace((spec.values - stats.mean[:, None]) / stats.std[:, None])


def denormalize(spec: Spectrogram, stats: NormStats) -> Spectrogram:
    if spec.bands != stats.bands:
        raise ValueError(f"spectrogram has {spec.bands} bands, stats have {stats.bands}")
    return spec.replace(spec.values * stats.std[:, None] + stats.mean[:, None])


# --- fixed-length inputs ------------------------------------------------------

def pad_or_crop(spec: Spectrogram, target_frames: int, mode: str = "eval",
                rng: np.random.Generator | None = None) -> Spectrogram:
    """Right-pad with zeros or cut a window of ``target_frames``.

    Long inputs: centre window in eval mode, uniformly random window in train
    mode (this is the random crop).
    """
    if target_frames < 1:
        raise ValueError(f"target_frames must be >= 1, got {target_frames}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    f = spec.frames
    if f == target_frames:
        return spec
    if f < target_frames:
        out = np.zeros((spec.bands, target_frames), dtype=spec.values.dtype)
        out[:, :f] = spec.values
        return spec.replace(out)
    slack = f - target_frames
    if mode == "eval":
        start = slack // 2
    else:
        rng = rng if rng is not None else np.random.default_rng()
        start = int(rng.integers(0, slack + 1))
    return spec.replace(spec.values[:, start:start + target_frames].copy())


def segment(spec: Spectrogram, n_segments: int) -> list[Spectrogram]:
    if n_segments < 1 or spec.frames % n_segments:
        raise ValueError(f"{spec.frames} frames cannot be split into {n_segments} equal segments")
    return [spec.replace(part.copy()) for part in np.split(spec.values, n_segments, axis=1)]


def concat_segments(parts: list[Spectrogram]) -> Spectrogram:
    return Spectrogram(np.concatenate([p.values for p in parts], axis=1), parts[0].track_id)
