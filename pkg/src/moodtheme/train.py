"""Losses, optimizers, LR plateau schedule, early stopping and the two training recipes."""
from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, augment_pipeline, sample_rng
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .metrics import macro_roc_auc
from .model import ModelConfig, ModelOutput, MoodTagger, build_model, prepare_input
from .spectro import DatasetManifest, NormStats, compute_stats, normalize, segment

log = logging.getLogger(__name__)

VARIANTS = ("submission1", "submission2")


class TrainingAborted(RuntimeError):
    def __init__(self, msg, last_good: Path | None = None):
        super().__init__(msg)
        self.last_good = last_good


# --- losses -------------------------------------------------------------------

def bce_loss(logits: Tensor, targets) -> Tensor:
    """Mean logit-form binary cross-entropy over every entry."""
    targets = np.asarray(targets, dtype=logits.dtype)
    if targets.shape != logits.shape:
        raise ad.ShapeError(f"bce_loss: logits {logits.shape} vs targets {targets.shape}")
    return ad.mean(ad.bce_with_logits(logits, targets))


def bce_per_class(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-class mean BCE (length L) for n × L logits, no tape."""
    x = np.asarray(logits, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"logits {x.shape} vs targets {y.shape}")
    elem = np.maximum(x, 0) - x * y + np.log1p(np.exp(-np.abs(x)))
    return elem.reshape(-1, x.shape[-1]).mean(axis=0)


def combined_loss(out: ModelOutput, targets) -> Tensor:
    """BCE of the attention head plus the mean over segments of the per-segment BCE."""
    if out.attn_logits is None:
        raise ValueError("combined_loss needs the attention head; this output has none")
    targets = np.asarray(targets, dtype=out.attn_logits.dtype)
    b, s, L = out.cnn_logits.shape
    seg_targets = np.broadcast_to(targets[:, None, :], (b, s, L))
    # equal segment sizes, so mean over all entries == mean over segments of per-segment means
    return ad.add(bce_loss(out.attn_logits, targets), bce_loss(out.cnn_logits, seg_targets))


def training_loss(out: ModelOutput, targets) -> Tensor:
    if out.attn_logits is not None:
        return combined_loss(out, targets)
    targets = np.asarray(targets, dtype=out.cnn_logits.dtype)
    b, s, L = out.cnn_logits.shape
    return bce_loss(out.cnn_logits, np.broadcast_to(targets[:, None, :], (b, s, L)))


# --- optimizers ---------------------------------------------------------------

@dataclass
class OptimizerState:
    kind: str  # "adam_amsgrad", "adam" or "sgd_nesterov"
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    vmax: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("adam_amsgrad", "adam", "sgd_nesterov"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")


def _check_finite(grads):
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise ad.NumericError(f"non-finite gradients in {len(bad)} tensors, first: {bad[:3]}")


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: OptimizerState, lr: float) -> None:
    """One Adam / AMSGrad update, in place.

    AMSGrad keeps the running maximum of the second moment and bias-corrects
    that maximum the way torch.optim.Adam(amsgrad=True) does.
    """
    if state.kind not in ("adam", "adam_amsgrad"):
        raise ValueError(f"adam_step called with a {state.kind} state")
    _check_finite(grads)
    state.t += 1
    b1, b2, t = state.beta1, state.beta2, state.t
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, g in grads.items():
        if k not in state.m:
            state.m[k] = np.zeros_like(g)
            state.v[k] = np.zeros_like(g)
            if state.kind == "adam_amsgrad":
                state.vmax[k] = np.zeros_like(g)
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        if state.kind == "adam_amsgrad":
            np.maximum(state.vmax[k], v, out=state.vmax[k])
            second = state.vmax[k]
        else:
            second = v
        params[k] -= lr * (m / c1) / (np.sqrt(second / c2) + state.eps)


def adam_amsgrad_step(params, grads, state: OptimizerState, lr: float) -> None:
    if state.kind != "adam_amsgrad":
        raise ValueError(f"adam_amsgrad_step called with a {state.kind} state")
    adam_step(params, grads, state, lr)


def sgd_nesterov_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                      state: OptimizerState, lr: float) -> None:
    """u <- mu*u + g ; theta <- theta - lr*(g + mu*u), in place."""
    if state.kind != "sgd_nesterov":
        raise ValueError(f"sgd_nesterov_step called with a {state.kind} state")
    _check_finite(grads)
    state.t += 1
    mu = state.momentum
    for k, g in grads.items():
        u = state.velocity.setdefault(k, np.zeros_like(g))
        u *= mu
        u += g
        params[k] -= lr * (g + mu * u)


def optimizer_step(model: MoodTagger, state: OptimizerState, lr: float) -> None:
    params = {k: t.data for k, t in model.params.items() if t.grad is not None}
    grads = {k: model.params[k].grad for k in params}
    if state.kind == "sgd_nesterov":
        sgd_nesterov_step(params, grads, state, lr)
    else:
        adam_step(params, grads, state, lr)


# --- LR schedule --------------------------------------------------------------

@dataclass
class PlateauState:
    patience: int = 5
    factor: float = 0.1
    threshold: float = 1e-6
    min_lr: float = 1e-7
    best: float = float("inf")
    stale: int = 0


def reduce_lr_on_plateau(val_loss: float, lr: float, state: PlateauState) -> float:
    """Feed one validation loss; returns the learning rate for the next epoch."""
    if val_loss < state.best - state.threshold:
        state.best = val_loss
        state.stale = 0
        return lr
    state.stale += 1
    if state.stale >= state.patience:
        state.stale = 0
        # divide by the integer reciprocal so 1e-3 -> 1e-4 is exact in binary
        divisor = 1.0 / state.factor
        if abs(divisor - round(divisor)) < 1e-9:
            divisor = round(divisor)
        return max(lr / divisor, state.min_lr)
    return lr


# --- early stopping -----------------------------------------------------------

@dataclass
class EarlyStopState:
    n_labels: int
    patience: int
    mode: str = "joint_roc_auc"  # or "per_class"
    per_class_best_loss: np.ndarray = None
    per_class_best_epoch: np.ndarray = None
    per_class_stale: np.ndarray = None
    joint_best_metric: float = -np.inf
    joint_best_epoch: int = 0
    stale: int = 0

    def __post_init__(self):
        if self.mode not in ("per_class", "joint_roc_auc"):
            raise ValueError(f"unknown early-stop mode {self.mode!r}")
        if self.per_class_best_loss is None:
            self.per_class_best_loss = np.full(self.n_labels, np.inf)
            self.per_class_best_epoch = np.zeros(self.n_labels, dtype=int)
            self.per_class_stale = np.zeros(self.n_labels, dtype=int)


@dataclass
class StopDecision:
    stop: bool
    improved: bool                 # this epoch is now the best for something
    best_epochs: list[int]         # per class (per_class mode) or [best] (joint)


def update_early_stop(state: EarlyStopState, epoch: int, per_class_val_loss, macro_auc: float) -> StopDecision:
    if state.mode == "per_class":
        losses = np.asarray(per_class_val_loss, dtype=float)
        if losses.shape != (state.n_labels,):
            raise ValueError(f"expected {state.n_labels} per-class losses, got {losses.shape}")
        better = losses < state.per_class_best_loss
        state.per_class_best_loss = np.where(better, losses, state.per_class_best_loss)
        state.per_class_best_epoch = np.where(better, epoch, state.per_class_best_epoch)
        state.per_class_stale = np.where(better, 0, state.per_class_stale + 1)
        stop = bool(np.all(state.per_class_stale >= state.patience))
        return StopDecision(stop, bool(better.any()), state.per_class_best_epoch.tolist())
    improved = bool(np.isfinite(macro_auc) and macro_auc > state.joint_best_metric)
    if improved:
        state.joint_best_metric = float(macro_auc)
        state.joint_best_epoch = epoch
        state.stale = 0
    else:
        state.stale += 1
    return StopDecision(state.stale >= state.patience, improved, [state.joint_best_epoch])


# --- history ------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    macro_roc_auc: float
    lr: float
    optimizer: str
    val_loss_per_class: list[float]


@dataclass
class TrainHistory:
    tags: list[str]
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord):
        if self.records and rec.epoch <= self.records[-1].epoch:
            raise ValueError(f"epoch {rec.epoch} does not follow {self.records[-1].epoch}")
        self.records.append(rec)

    def column(self, name: str) -> list:
        return [getattr(r, name) for r in self.records]

    def class_curve(self, tag: str) -> list[float]:
        j = self.tags.index(tag)
        return [r.val_loss_per_class[j] for r in self.records]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "macro_roc_auc", "lr", "optimizer"]
                   + [f"val_loss_{t}" for t in self.tags])
        for r in self.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.macro_roc_auc),
                        repr(r.lr), r.optimizer] + [repr(v) for v in r.val_loss_per_class])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv(), encoding="utf-8")

    @classmethod
    def from_csv(cls, text: str) -> "TrainHistory":
        rows = list(csv.reader(io.StringIO(text)))
        header = rows[0]
        tags = [h[len("val_loss_"):] for h in header[6:]]
        hist = cls(tags)
        for row in rows[1:]:
            hist.append(EpochRecord(int(row[0]), float(row[1]), float(row[2]), float(row[3]),
                                    float(row[4]), row[5], [float(v) for v in row[6:]]))
        return hist

    @classmethod
    def load(cls, path) -> "TrainHistory":
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


# --- configuration ------------------------------------------------------------

@dataclass
class TrainConfig:
    variant: str = "submission2"
    lr: float = 1e-3
    max_epochs: int = 120
    switch_epoch: int = 60
    plateau_patience: int = 5
    plateau_factor: float = 0.1
    batch_size: int = 4
    seed: int = 0
    early_stop: str = "joint_roc_auc"
    early_stop_patience: int = 10
    input_frames: int = 4096
    sgd_momentum: float = 0.9
    sgd_lr: float | None = None  # None: keep the lr in force at the switch
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        self.validate()

    @classmethod
    def submission1(cls, **overrides) -> "TrainConfig":
        """AMSGrad at 1e-3, LR/10 after 5 flat validation epochs, per-class early stopping."""
        base = dict(variant="submission1", early_stop="per_class", input_frames=6590)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def submission2(cls, **overrides) -> "TrainConfig":
        """Adam for 60 epochs then SGD with Nesterov momentum to 120; stop on macro ROC-AUC."""
        base = dict(variant="submission2", early_stop="joint_roc_auc", input_frames=4096,
                    max_epochs=120, switch_epoch=60)
        base.update(overrides)
        return cls(**base)

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if not 0 < self.plateau_factor < 1:
            raise ValueError(f"plateau_factor must be in (0, 1), got {self.plateau_factor}")
        if self.variant == "submission2" and not self.switch_epoch < self.max_epochs:
            raise ValueError(f"switch_epoch {self.switch_epoch} must be < max_epochs {self.max_epochs}")
        if self.early_stop not in ("per_class", "joint_roc_auc"):
            raise ValueError(f"early_stop must be per_class or joint_roc_auc, got {self.early_stop!r}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.early_stop_patience < 1:
            raise ValueError("batch_size, max_epochs and early_stop_patience must be >= 1")

    def check_model(self, model_cfg: ModelConfig):
        if model_cfg.input_frames != self.input_frames:
            raise ValueError(f"{self.variant}: model input_frames {model_cfg.input_frames} != "
                             f"training input_frames {self.input_frames}")
        if self.variant == "submission1" and model_cfg.use_attention:
            raise ValueError("submission1 trains the CNN-only model (use_attention = false)")
        if self.variant == "submission2" and not model_cfg.use_attention:
            raise ValueError("submission2 trains the attention model (use_attention = true)")


# --- predictors ---------------------------------------------------------------

class StitchedPredictor:
    """Column c of the output comes from the model saved at class c's best epoch."""

    def __init__(self, models: dict[int, MoodTagger], class_epochs: list[int]):
        self.models = models
        self.class_epochs = list(class_epochs)
        self.cfg = next(iter(models.values())).cfg

    def predict_inputs(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros((x.shape[0], len(self.class_epochs)))
        for epoch, model in self.models.items():
            cols = [c for c, e in enumerate(self.class_epochs) if e == epoch]
            if cols:
                out[:, cols] = _eval_probs(model, x)[:, cols]
        return out


class SinglePredictor:
    def __init__(self, model: MoodTagger):
        self.model = model
        self.cfg = model.cfg

    def predict_inputs(self, x: np.ndarray) -> np.ndarray:
        return _eval_probs(self.model, x)


def _eval_outputs(model: MoodTagger, x: np.ndarray, batch_size: int = 8) -> list[ModelOutput]:
    outs = []
    with ad.no_grad():
        for i in range(0, x.shape[0], batch_size):
            outs.append(model.forward(x[i:i + batch_size], "eval"))
    return outs


def _eval_probs(model: MoodTagger, x: np.ndarray) -> np.ndarray:
    return np.concatenate([model.final_probs(o) for o in _eval_outputs(model, x)], axis=0)


def eval_losses(model: MoodTagger, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(per-class BCE of the final prediction, final probabilities) in eval mode."""
    outs = _eval_outputs(model, x)
    probs = np.concatenate([model.final_probs(o) for o in outs], axis=0)
    cfg = model.cfg
    if cfg.use_attention and cfg.final_head == "attention":
        logits = np.concatenate([o.attn_logits.data for o in outs], axis=0)
        return bce_per_class(logits, y), probs
    if not cfg.use_attention and cfg.n_segments == 1:
        logits = np.concatenate([o.cnn_logits.data[:, 0] for o in outs], axis=0)
        return bce_per_class(logits, y), probs
    p = np.clip(probs, 1e-12, 1 - 1e-12)
    return (-(y * np.log(p) + (1 - y) * np.log1p(-p))).mean(axis=0), probs


def load_predictor(out_dir) -> SinglePredictor | StitchedPredictor:
    """Rebuild the final predictor from ``best.json`` and the epoch checkpoints."""
    out_dir = Path(out_dir)
    index = json.loads((out_dir / "best.json").read_text(encoding="utf-8"))
    if index["mode"] == "joint_roc_auc":
        best = out_dir / f"ckpt_epoch_{index['best_epoch']}.bin"
        return SinglePredictor(load_checkpoint(best if best.exists() else out_dir / "ckpt_last.bin"))
    epochs = [index["best_epochs"][t] for t in index["tags"]]
    models = {e: load_checkpoint(out_dir / f"ckpt_epoch_{e}.bin") for e in sorted(set(epochs))}
    return StitchedPredictor(models, epochs)


# --- training loop ------------------------------------------------------------

@dataclass
class TrainResult:
    predictor: SinglePredictor | StitchedPredictor
    history: TrainHistory
    stats: NormStats
    best_epochs: list[int]
    stopped_epoch: int
    model: MoodTagger  # weights after the last completed epoch


def _load_split(manifest: DatasetManifest, stats: NormStats, bands: int | None):
    specs = [normalize(manifest.load(e, bands=bands), stats) for e in manifest.entries]
    return specs, manifest.labels()


def _batch_inputs(specs, cfg: ModelConfig) -> np.ndarray:
    return np.stack([prepare_input(s, None, cfg) for s in specs])


def train_loop(cfg: TrainConfig, model_cfg: ModelConfig, train: DatasetManifest,
               valid: DatasetManifest, out_dir=None, stats: NormStats | None = None) -> TrainResult:
    """Run one of the two recipes end to end.

    submission1: CNN-only model, AMSGrad, plateau LR, per-class early stopping.
    submission2: attention model, Adam up to ``switch_epoch`` then SGD with
    Nesterov momentum (fresh state, current lr), joint macro ROC-AUC stopping.
    """
    cfg.validate()
    cfg.check_model(model_cfg)
    if not train.entries or not valid.entries:
        raise ValueError("train and valid manifests must be non-empty")
    if train.tag_vocabulary != valid.tag_vocabulary:
        raise ValueError("train and valid manifests use different tag vocabularies")
    if model_cfg.n_labels != train.n_labels:
        raise ValueError(f"model has {model_cfg.n_labels} outputs, manifest has {train.n_labels} tags")
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)

    bands = model_cfg.bands
    stats = stats if stats is not None else compute_stats(train, bands=bands)
    train_specs, train_y = _load_split(train, stats, bands)
    valid_specs, valid_y = _load_split(valid, stats, bands)
    valid_x = _batch_inputs(valid_specs, model_cfg)
    tags = list(train.tag_vocabulary)

    model = build_model(model_cfg, cfg.seed)
    opt = OptimizerState("adam_amsgrad" if cfg.variant == "submission1" else "adam")
    plateau = PlateauState(cfg.plateau_patience, cfg.plateau_factor)
    stopper = EarlyStopState(len(tags), cfg.early_stop_patience, cfg.early_stop)
    history = TrainHistory(tags)
    snapshots: dict[int, MoodTagger] = {}
    lr = cfg.lr
    last_good: Path | None = None
    n = len(train_specs)
    decision = StopDecision(False, False, [])
    epoch = 0

    for epoch in range(1, cfg.max_epochs + 1):
        if cfg.variant == "submission2" and epoch == cfg.switch_epoch + 1:
            opt = OptimizerState("sgd_nesterov", momentum=cfg.sgd_momentum)
            if cfg.sgd_lr is not None:
                lr = cfg.sgd_lr
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            xs, ys = [], []
            for i in idx:
                rng = sample_rng(cfg.augment.seed, epoch, int(i))
                peer = None
                if cfg.augment.mixup_alpha > 0 and n > 1:
                    j = int(rng.integers(n - 1))
                    j = j + 1 if j >= i else j
                    peer = (train_specs[j], train_y[j])
                spec, y = augment_pipeline((train_specs[i], train_y[i]), peer, cfg.augment,
                                           model_cfg.input_frames, rng)
                xs.append(np.stack([s.values for s in segment(spec, model_cfg.n_segments)]))
                ys.append(y)
            x = np.stack(xs)
            y = np.stack(ys)
            model.zero_grad()
            out = model.forward(x, "train", rng=np.random.default_rng([cfg.seed, epoch, start, 1]))
            loss = training_loss(out, y)
            if not np.isfinite(loss.item()):
                raise TrainingAborted(f"non-finite training loss at epoch {epoch}", last_good)
            ad.backward(loss)
            try:
                optimizer_step(model, opt, lr)
            except ad.NumericError as e:
                raise TrainingAborted(f"epoch {epoch}: {e}", last_good) from e
            total += loss.item() * len(idx)
            seen += len(idx)

        per_class, probs = eval_losses(model, valid_x, valid_y)
        val_loss = float(per_class.mean())
        auc = macro_roc_auc(probs, valid_y)
        history.append(EpochRecord(epoch, total / seen, val_loss, auc, lr, opt.kind,
                                   [float(v) for v in per_class]))
        log.info("epoch %d train %.5f val %.5f auc %.4f lr %g %s", epoch, total / seen,
                 val_loss, auc, lr, opt.kind)

        decision = update_early_stop(stopper, epoch, per_class, auc)
        if decision.improved:
            snapshots[epoch] = model.copy()
            if out_dir is not None:
                last_good = out_dir / f"ckpt_epoch_{epoch}.bin"
                save_checkpoint(model, last_good)
        live = set(decision.best_epochs)
        for e in [e for e in snapshots if e not in live]:
            del snapshots[e]
        if out_dir is not None:
            history.save(out_dir / "history.csv")
            _write_index(out_dir / "best.json", stopper, tags)
        if cfg.variant == "submission1":
            lr = reduce_lr_on_plateau(val_loss, lr, plateau)
        if decision.stop:
            break

    if out_dir is not None:
        save_checkpoint(model, out_dir / "ckpt_last.bin")
    if stopper.mode == "per_class":
        predictor = StitchedPredictor(snapshots, stopper.per_class_best_epoch.tolist())
    else:
        # no finite macro ROC-AUC ever seen (degenerate validation labels): keep last weights
        predictor = SinglePredictor(snapshots.get(stopper.joint_best_epoch, model))
    return TrainResult(predictor, history, stats, list(decision.best_epochs), epoch, model)


def _write_index(path: Path, stopper: EarlyStopState, tags: list[str]) -> None:
    if stopper.mode == "per_class":
        index = {"mode": "per_class", "tags": tags,
                 "best_epochs": {t: int(e) for t, e in zip(tags, stopper.per_class_best_epoch)},
                 "best_losses": {t: float(v) for t, v in zip(tags, stopper.per_class_best_loss)}}
    else:
        index = {"mode": "joint_roc_auc", "best_epoch": int(stopper.joint_best_epoch),
                 "best_metric": float(stopper.joint_best_metric)}
    path.write_text(json.dumps(index, indent=2, sort_keys=True) + "\n", encoding="utf-8")
