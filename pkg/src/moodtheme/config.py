"""Run configuration: ``key = value`` text with [model] [train] [augment] [paths] sections.

Keys (all optional; unset keys take the variant preset):

[model]    every ModelConfig field, e.g. ``embed_dim = 256``, ``width_multiplier = 0.25``,
           ``backbone_spec = 1:16:1:1;6:24:2:2;...`` (t:c:n:s per stage)
[train]    every TrainConfig field except ``augment``, e.g. ``lr = 0.001``, ``max_epochs = 120``
[augment]  every AugmentConfig field; ``scale_range = 0.8, 1.2``
[paths]    train_manifest, valid_manifest, vocabulary, stats, out_dir
           (relative paths are resolved against the config file's directory)

Precedence: variant preset < config file < ``--override section.key=value`` < dedicated flags.
"""
from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields
from pathlib import Path

from .augment import AugmentConfig
from .model import ConfigError, ModelConfig
from .train import TrainConfig

PATH_KEYS = ("train_manifest", "valid_manifest", "vocabulary", "stats", "out_dir")
SECTIONS = ("model", "train", "augment", "paths")


def coerce(name: str, raw: str, annotation: str):
    raw = raw.strip()
    ann = str(annotation).replace(" ", "")
    try:
        if name == "backbone_spec":
            return tuple(tuple(int(x) for x in row.split(":")) for row in raw.split(";") if row)
        if name == "scale_range":
            lo, hi = (float(v) for v in raw.split(","))
            return (lo, hi)
        if ann == "bool":
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if ann == "int":
            return int(raw)
        if ann == "float":
            return float(raw)
        if ann.startswith("float|None"):
            return None if raw.lower() in ("", "none") else float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {ann}") from None
    return raw


def _field_types(cls) -> dict[str, str]:
    return {f.name: f.type for f in fields(cls)}


@dataclass
class RunConfig:
    variant: str = "submission2"
    model: dict[str, str] = field(default_factory=dict)
    train: dict[str, str] = field(default_factory=dict)
    augment: dict[str, str] = field(default_factory=dict)
    paths: dict[str, Path] = field(default_factory=dict)

    def set(self, dotted: str, value: str) -> None:
        """Apply ``section.key=value`` (or a bare key that exists in exactly one section)."""
        if "." in dotted:
            section, key = dotted.split(".", 1)
        else:
            owners = [s for s in SECTIONS if key_known(s, dotted)]
            if len(owners) != 1:
                raise ConfigError(f"override key {dotted!r} is {'ambiguous' if owners else 'unknown'}; "
                                  f"use section.key")
            section, key = owners[0], dotted
        if section not in SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not key_known(section, key):
            raise ConfigError(f"unknown key {key!r} in section [{section}]")
        if section == "paths":
            self.paths[key] = Path(value)
        else:
            getattr(self, section)[key] = value

    def build(self, n_labels: int) -> tuple[ModelConfig, TrainConfig]:
        """Typed, validated model and training configs for ``n_labels`` tags."""
        aug_types = _field_types(AugmentConfig)
        try:
            aug = AugmentConfig(**{k: coerce(k, v, aug_types[k]) for k, v in self.augment.items()})
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[augment]: {e}") from None
        train_types = _field_types(TrainConfig)
        train_kwargs = {k: coerce(k, v, train_types[k]) for k, v in self.train.items()}
        train_kwargs.pop("variant", None)
        try:
            preset = TrainConfig.submission1 if self.variant == "submission1" else TrainConfig.submission2
            tcfg = preset(augment=aug, **train_kwargs)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"[train]: {e}") from None
        model_types = _field_types(ModelConfig)
        model_kwargs = {k: coerce(k, v, model_types[k]) for k, v in self.model.items()}
        model_kwargs.pop("n_labels", None)
        # the model follows the training input length unless told otherwise
        model_kwargs.setdefault("input_frames", tcfg.input_frames)
        default_segments = 1 if self.variant == "submission1" else 16
        n_seg = model_kwargs.setdefault("n_segments", default_segments)
        model_kwargs.setdefault("segment_frames", model_kwargs["input_frames"] // max(n_seg, 1))
        try:
            if self.variant == "submission1":
                mcfg = ModelConfig.cnn_variant(n_labels, **model_kwargs)
            else:
                mcfg = ModelConfig.attention_variant(n_labels, **model_kwargs)
            tcfg.check_model(mcfg)
        except ValueError as e:
            raise ConfigError(str(e)) from None
        return mcfg, tcfg

    def to_text(self) -> str:
        cp = configparser.ConfigParser()
        cp["run"] = {"variant": self.variant}
        for s in ("model", "train", "augment"):
            cp[s] = dict(getattr(self, s))
        cp["paths"] = {k: str(v) for k, v in self.paths.items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def key_known(section: str, key: str) -> bool:
    if section == "paths":
        return key in PATH_KEYS
    cls = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentConfig}[section]
    return key in _field_types(cls) and key != "augment"


def load_run_config(path=None, variant: str | None = None) -> RunConfig:
    rc = RunConfig()
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as e:
            raise ConfigError(f"{path}: {e}") from None
        base = path.parent
        for section in cp.sections():
            if section == "run":
                for k, v in cp["run"].items():
                    if k != "variant":
                        raise ConfigError(f"{path}: unknown key {k!r} in [run]")
                    rc.variant = v.strip()
                continue
            if section not in SECTIONS:
                raise ConfigError(f"{path}: unknown section [{section}]")
            for k, v in cp[section].items():
                if not key_known(section, k):
                    raise ConfigError(f"{path}: unknown key {k!r} in [{section}]")
                if section == "paths":
                    p = Path(v.strip())
                    rc.paths[k] = p if p.is_absolute() else base / p
                else:
                    getattr(rc, section)[k] = v
        if "variant" in rc.train:
            rc.variant = rc.train.pop("variant").strip()
    if variant is not None:
        rc.variant = variant
    if rc.variant not in ("submission1", "submission2"):
        raise ConfigError(f"variant must be submission1 or submission2, got {rc.variant!r}")
    return rc
