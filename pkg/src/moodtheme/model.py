"""Stem + MobileNetV2 backbone, optional transformer encoder over segments, two heads."""
from __future__ import annotations

from dataclasses import dataclass, field, fields
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .spectro import NormStats, Spectrogram, normalize, pad_or_crop, segment

# (expansion t, output channels c, repeats n, first stride s)
MOBILENET_V2_STAGES: tuple[tuple[int, int, int, int], ...] = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


class ConfigError(ValueError):
    pass


def make_divisible(v: float, divisor: int = 8) -> int:
    new = max(divisor, int(v + divisor / 2) // divisor * divisor)
    if new < 0.9 * v:
        new += divisor
    return new


@dataclass
class ModelConfig:
    n_labels: int
    bands: int = 96
    input_frames: int = 4096
    n_segments: int = 16
    segment_frames: int = 256
    embed_dim: int = 256
    n_heads: int = 4
    n_attn_layers: int = 2
    backbone_spec: tuple[tuple[int, int, int, int], ...] = MOBILENET_V2_STAGES
    width_multiplier: float = 0.25
    use_attention: bool = True
    dropout: float = 0.0
    use_positional_encoding: bool = True
    final_head: str = "attention"  # or "average" (mean of both heads' probabilities)
    stem_channels: int = 8
    ff_multiplier: int = 4
    dtype: str = "float32"

    def __post_init__(self):
        self.backbone_spec = tuple(tuple(int(v) for v in row) for row in self.backbone_spec)
        self.validate()

    @classmethod
    def attention_variant(cls, n_labels: int, **overrides) -> "ModelConfig":
        """96 bands, 4096 frames cut into 16×256, 256-dim embeddings, 4 heads, 2 layers."""
        return cls(n_labels=n_labels, **overrides)

    @classmethod
    def cnn_variant(cls, n_labels: int, **overrides) -> "ModelConfig":
        """Whole 6590-frame input through the backbone once."""
        base = dict(input_frames=6590, n_segments=1, segment_frames=6590, use_attention=False)
        base.update(overrides)
        return cls(n_labels=n_labels, **base)

    def validate(self):
        if self.n_labels < 1:
            raise ConfigError(f"n_labels must be >= 1, got {self.n_labels}")
        if self.width_multiplier <= 0:
            raise ConfigError(f"width_multiplier must be > 0, got {self.width_multiplier}")
        if self.n_segments * self.segment_frames != self.input_frames:
            raise ConfigError(f"n_segments × segment_frames = {self.n_segments}×{self.segment_frames} "
                              f"!= input_frames {self.input_frames}")
        if self.use_attention:
            if self.embed_dim % self.n_heads:
                raise ConfigError(f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}")
            if self.use_positional_encoding and self.embed_dim % 2:
                raise ConfigError(f"sinusoidal positional encoding needs an even embed_dim, got {self.embed_dim}")
        if self.final_head not in ("attention", "average"):
            raise ConfigError(f"final_head must be 'attention' or 'average', got {self.final_head!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")

    # flat key=value form used by checkpoints and config files
    def to_items(self) -> dict[str, str]:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "backbone_spec":
                v = ";".join(":".join(str(x) for x in row) for row in v)
            out[f.name] = str(v)
        return out

    @classmethod
    def from_items(cls, items: dict[str, str]) -> "ModelConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for k, v in items.items():
            if k not in types:
                raise ConfigError(f"unknown model config key {k!r}")
            kwargs[k] = _parse_field(k, v, types[k])
        return cls(**kwargs)


def _parse_field(name: str, raw: str, annotation) -> object:
    raw = raw.strip()
    if name == "backbone_spec":
        return tuple(tuple(int(x) for x in row.split(":")) for row in raw.split(";") if row)
    ann = str(annotation)
    try:
        if ann == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if ann == "int":
            return int(raw)
        if ann == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {ann}") from None
    return raw


@dataclass
class ModelOutput:
    cnn_logits: Tensor                 # batch × n_segments × n_labels
    attn_logits: Tensor | None         # batch × n_labels
    attn_weights: list[np.ndarray] = field(default_factory=list)  # per layer: batch×heads×S×S

    @property
    def cnn_probs_avg(self) -> np.ndarray:
        return _sigmoid(self.cnn_logits.data).mean(axis=1)

    @property
    def attn_probs(self) -> np.ndarray | None:
        return None if self.attn_logits is None else _sigmoid(self.attn_logits.data)


def _sigmoid(x):
    return np.exp(-np.logaddexp(0.0, -x))


def positional_encoding(seq_len: int, dim: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, wavelength base 10000."""
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dimension, got {dim}")
    pos = np.arange(seq_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i2 / dim)
    pe = np.empty((seq_len, dim))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle)
    return pe


def multi_head_self_attention(x: Tensor, p: dict[str, Tensor], n_heads: int,
                              record: list | None = None) -> Tensor:
    """Scaled dot-product attention over the sequence axis of ``x`` (B×S×E),
    heads concatenated and projected by ``wo``."""
    b, s, e = x.shape
    dh = e // n_heads

    def heads(t):
        return ad.transpose(ad.reshape(t, (b, s, n_heads, dh)), (0, 2, 1, 3))

    q = heads(ad.linear(x, p["wq"], p["bq"]))
    k = heads(ad.linear(x, p["wk"], p["bk"]))
    v = heads(ad.linear(x, p["wv"], p["bv"]))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    if record is not None:
        record.append(weights.data.copy())
    ctx = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, s, e))
    return ad.linear(ctx, p["wo"], p["bo"])


def encoder_layer(x: Tensor, p: dict[str, Tensor], n_heads: int, dropout: float = 0.0,
                  training: bool = False, rng=None, record: list | None = None) -> Tensor:
    """Post-norm transformer encoder layer with a ReLU feed-forward block."""
    a = multi_head_self_attention(x, p, n_heads, record)
    if dropout > 0:
        a = ad.dropout(a, dropout, training, rng)
    x = ad.layer_norm(ad.add(x, a), p["ln1_g"], p["ln1_b"])
    f = ad.linear(ad.relu(ad.linear(x, p["ff1_w"], p["ff1_b"])), p["ff2_w"], p["ff2_b"])
    if dropout > 0:
        f = ad.dropout(f, dropout, training, rng)
    return ad.layer_norm(ad.add(x, f), p["ln2_g"], p["ln2_b"])


@dataclass
class _ConvSpec:
    name: str
    cin: int
    cout: int
    k: int
    stride: int
    groups: int
    act: bool  # ReLU6 after BN


class MoodTagger:
    """Parameters, buffers and forward pass for both architecture variants.

    ``params`` maps names to trainable tensors; ``buffers`` holds batch-norm
    running statistics (numpy arrays, updated in place during training).
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor], buffers: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = params
        self.buffers = buffers
        self.convs, self.blocks, self.feature_dim = _backbone_layout(cfg)
        self._pe = positional_encoding(cfg.n_segments, cfg.embed_dim) if cfg.use_attention and \
            cfg.use_positional_encoding else None

    @property
    def dtype(self):
        return np.dtype(self.cfg.dtype)

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def parameter_count(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: t.data for k, t in self.params.items()}
        out.update({f"buffer:{k}": v for k, v in self.buffers.items()})
        return out

    def copy(self) -> "MoodTagger":
        params = {k: Tensor(t.data.copy(), requires_grad=True, name=k) for k, t in self.params.items()}
        return MoodTagger(self.cfg, params, {k: v.copy() for k, v in self.buffers.items()})

    # --- forward -------------------------------------------------------------

    def _conv_bn(self, x: Tensor, spec: _ConvSpec, training: bool) -> Tensor:
        p = self.params
        x = ad.conv2d(x, p[f"{spec.name}.w"], None, stride=spec.stride, padding=spec.k // 2,
                      groups=spec.groups)
        x = ad.batch_norm_2d(x, p[f"{spec.name}.bn_g"], p[f"{spec.name}.bn_b"],
                             self.buffers[f"{spec.name}.bn_mean"], self.buffers[f"{spec.name}.bn_var"],
                             training)
        return ad.relu6(x) if spec.act else x

    def embed(self, x: Tensor, training: bool) -> Tensor:
        """Backbone features for N×1×bands×frames input -> N×feature_dim."""
        for spec in self.convs["stem"]:
            x = self._conv_bn(x, spec, training)
        x = self._conv_bn(x, self.convs["first"], training)
        for block in self.blocks:
            h = x
            for spec in block["convs"]:
                h = self._conv_bn(h, spec, training)
            x = ad.add(x, h) if block["residual"] else h
        x = self._conv_bn(x, self.convs["last"], training)
        return ad.global_avg_pool_2d(x)

    def forward(self, batch: np.ndarray, mode: str = "eval", rng=None) -> ModelOutput:
        """``batch``: B × n_segments × bands × segment_frames (normalized, fixed length)."""
        cfg = self.cfg
        if mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
        batch = np.asarray(batch)
        expected = (cfg.n_segments, cfg.bands, cfg.segment_frames)
        if batch.ndim != 4 or batch.shape[1:] != expected:
            raise ad.ShapeError(f"forward: expected batch × {'×'.join(map(str, expected))}, got {batch.shape}")
        training = mode == "train"
        b, s = batch.shape[:2]
        x = Tensor(batch.reshape(b * s, 1, cfg.bands, cfg.segment_frames).astype(self.dtype, copy=False))
        feats = self.embed(x, training)
        p = self.params
        if cfg.dropout > 0:
            feats = ad.dropout(feats, cfg.dropout, training, rng)
        if not cfg.use_attention:
            logits = ad.linear(feats, p["cnn_head.w"], p["cnn_head.b"])
            return ModelOutput(ad.reshape(logits, (b, s, cfg.n_labels)), None)
        emb = ad.linear(feats, p["proj.w"], p["proj.b"])
        cnn_logits = ad.reshape(ad.linear(emb, p["cnn_head.w"], p["cnn_head.b"]), (b, s, cfg.n_labels))
        seq = ad.reshape(emb, (b, s, cfg.embed_dim))
        if self._pe is not None:
            seq = ad.add(seq, Tensor(self._pe.astype(self.dtype)))
        weights: list[np.ndarray] = []
        for layer in range(cfg.n_attn_layers):
            lp = {k.split(".", 2)[2]: v for k, v in p.items() if k.startswith(f"attn.{layer}.")}
            seq = encoder_layer(seq, lp, cfg.n_heads, cfg.dropout, training, rng, weights)
        pooled = ad.mean(seq, axis=1)
        hidden = ad.relu(ad.linear(pooled, p["attn_head.w1"], p["attn_head.b1"]))
        attn_logits = ad.linear(hidden, p["attn_head.w2"], p["attn_head.b2"])
        return ModelOutput(cnn_logits, attn_logits, weights)

    def final_probs(self, out: ModelOutput) -> np.ndarray:
        if not self.cfg.use_attention:
            return out.cnn_probs_avg
        if self.cfg.final_head == "average":
            return 0.5 * (out.attn_probs + out.cnn_probs_avg)
        return out.attn_probs


def _backbone_layout(cfg: ModelConfig):
    w = cfg.width_multiplier
    convs = {"stem": [_ConvSpec("stem.0", 1, cfg.stem_channels, 3, 1, 1, True),
                      _ConvSpec("stem.1", cfg.stem_channels, 3, 3, 1, 1, True)]}
    cin = make_divisible(32 * w)
    convs["first"] = _ConvSpec("features.0", 3, cin, 3, 2, 1, True)
    blocks = []
    idx = 1
    for t, c, n, s in cfg.backbone_spec:
        cout = make_divisible(c * w)
        for i in range(n):
            stride = s if i == 0 else 1
            hidden = int(round(cin * t))
            name = f"features.{idx}"
            layers = []
            if t != 1:
                layers.append(_ConvSpec(f"{name}.expand", cin, hidden, 1, 1, 1, True))
            layers.append(_ConvSpec(f"{name}.dw", hidden, hidden, 3, stride, hidden, True))
            layers.append(_ConvSpec(f"{name}.project", hidden, cout, 1, 1, 1, False))
            blocks.append({"convs": layers, "residual": stride == 1 and cin == cout})
            cin = cout
            idx += 1
    last = make_divisible(1280 * max(1.0, w))
    convs["last"] = _ConvSpec(f"features.{idx}", cin, last, 1, 1, 1, True)
    return convs, blocks, last


def build_model(cfg: ModelConfig, seed: int = 0) -> MoodTagger:
    """Deterministic init: He-uniform convs, Xavier-uniform dense, BN/LN gain 1 bias 0."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    dtype = np.dtype(cfg.dtype)
    params: dict[str, np.ndarray] = {}
    buffers: dict[str, np.ndarray] = {}
    convs, blocks, feature_dim = _backbone_layout(cfg)

    def conv(spec: _ConvSpec):
        fan_in = spec.cin // spec.groups * spec.k * spec.k
        bound = np.sqrt(6.0 / fan_in)
        params[f"{spec.name}.w"] = rng.uniform(-bound, bound, (spec.cout, spec.cin // spec.groups, spec.k, spec.k))
        params[f"{spec.name}.bn_g"] = np.ones(spec.cout)
        params[f"{spec.name}.bn_b"] = np.zeros(spec.cout)
        buffers[f"{spec.name}.bn_mean"] = np.zeros(spec.cout)
        buffers[f"{spec.name}.bn_var"] = np.ones(spec.cout)

    def dense(name_w, name_b, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        params[name_w] = rng.uniform(-bound, bound, (fan_out, fan_in))
        params[name_b] = np.zeros(fan_out)

    for spec in convs["stem"]:
        conv(spec)
    conv(convs["first"])
    for block in blocks:
        for spec in block["convs"]:
            conv(spec)
    conv(convs["last"])

    e, L = cfg.embed_dim, cfg.n_labels
    if cfg.use_attention:
        dense("proj.w", "proj.b", feature_dim, e)
        dense("cnn_head.w", "cnn_head.b", e, L)
        for layer in range(cfg.n_attn_layers):
            pre = f"attn.{layer}."
            for m in ("q", "k", "v", "o"):
                dense(pre + f"w{m}", pre + f"b{m}", e, e)
            ff = cfg.ff_multiplier * e
            dense(pre + "ff1_w", pre + "ff1_b", e, ff)
            dense(pre + "ff2_w", pre + "ff2_b", ff, e)
            for ln in ("ln1", "ln2"):
                params[pre + f"{ln}_g"] = np.ones(e)
                params[pre + f"{ln}_b"] = np.zeros(e)
        dense("attn_head.w1", "attn_head.b1", e, e)
        dense("attn_head.w2", "attn_head.b2", e, L)
    else:
        dense("cnn_head.w", "cnn_head.b", feature_dim, L)

    tensors = {k: Tensor(v.astype(dtype), requires_grad=True, name=k) for k, v in params.items()}
    # running statistics kept in the model dtype so checkpoints round-trip exactly
    bufs = {k: v.astype(dtype) for k, v in buffers.items()}
    return MoodTagger(cfg, tensors, bufs)


def prepare_input(spec: Spectrogram, stats: NormStats | None, cfg: ModelConfig) -> np.ndarray:
    """normalize -> centre crop / pad -> segment; returns n_segments × bands × segment_frames."""
    if stats is not None:
        spec = normalize(spec, stats)
    spec = pad_or_crop(spec, cfg.input_frames, "eval")
    return np.stack([s.values for s in segment(spec, cfg.n_segments)])


def predict(model: MoodTagger, spec: Spectrogram, stats: NormStats | None) -> np.ndarray:
    """Tag probabilities for one raw spectrogram (eval mode, no gradient tape)."""
    x = prepare_input(spec, stats, model.cfg)[None]
    with ad.no_grad():
        out = model.forward(x, "eval")
    return model.final_probs(out)[0]


def predict_batch(model: MoodTagger, specs: list[Spectrogram], stats: NormStats | None,
                  batch_size: int = 8) -> np.ndarray:
    rows = []
    for i in range(0, len(specs), batch_size):
        x = np.stack([prepare_input(s, stats, model.cfg) for s in specs[i:i + batch_size]])
        with ad.no_grad():
            out = model.forward(x, "eval")
        rows.append(model.final_probs(out))
    return np.concatenate(rows, axis=0)
