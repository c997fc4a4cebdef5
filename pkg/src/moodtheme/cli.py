"""``moodtheme`` command line: train, predict, evaluate, gradcheck, augment-preview, stats."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .augment import AugmentConfig, _geometric, mixup, random_scale, sample_rng, spec_augment
from .checkpoint import CheckpointError
from .config import RunConfig, load_run_config
from .metrics import align_truth, evaluate, read_predictions, write_predictions, write_report_csv
from .model import ConfigError, prepare_input
from .spectro import (FormatError, ManifestError, NormStats, compute_stats, load_manifest,
                      normalize, pad_or_crop)
from .train import TrainingAborted, load_predictor, train_loop

log = logging.getLogger("moodtheme")

EXPECTED_ERRORS = (ConfigError, ManifestError, FormatError, CheckpointError, TrainingAborted,
                   ValueError, OSError)


def _common(p: argparse.ArgumentParser, config=True, seed=True, out_dir=True):
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    if config:
        p.add_argument("--config", type=Path, help="run configuration file")
        p.add_argument("--variant", choices=("submission1", "submission2"))
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="section.key=value, repeatable; wins over the config file")
    if seed:
        p.add_argument("--seed", type=int, help="seed for every random stream of the run")
    if out_dir:
        p.add_argument("--out-dir", type=Path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moodtheme", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one of the two recipes")
    _common(p)

    p = sub.add_parser("predict", help="score a manifest with a trained run")
    p.add_argument("--run-dir", type=Path, required=True, help="output directory of `train`")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--vocabulary", type=Path)
    p.add_argument("--out", type=Path, help="predictions CSV (default <out-dir>/predictions.csv)")
    _common(p, config=False, seed=False)

    p = sub.add_parser("evaluate", help="print the ten-metric table")
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--truth", type=Path, required=True, help="manifest with the true tags")
    p.add_argument("--vocabulary", type=Path)
    p.add_argument("--threshold", type=float, default=0.5)
    _common(p, config=False, seed=False)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--tolerance", type=float, default=1e-4)
    _common(p, config=False, out_dir=False)

    p = sub.add_parser("augment-preview", help="dump each augmentation stage as a CSV grid")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--track", help="track id (default: first in manifest)")
    p.add_argument("--stats", type=Path)
    p.add_argument("--epoch", type=int, default=1)
    _common(p)

    p = sub.add_parser("stats", help="compute and save per-band normalization statistics")
    p.add_argument("--manifest", type=Path, required=True, help="training manifest")
    p.add_argument("--bands", type=int)
    p.add_argument("--out", type=Path, help="default <out-dir>/stats.txt")
    _common(p, config=False, seed=False)
    return parser


def _run_config(args) -> RunConfig:
    rc = load_run_config(args.config, args.variant)
    for item in args.override:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--override expects key=value, got {item!r}")
        rc.set(key.strip(), value.strip())
    if args.seed is not None:
        rc.train["seed"] = str(args.seed)
        rc.augment["seed"] = str(args.seed)
    if getattr(args, "out_dir", None) is not None:
        rc.paths["out_dir"] = args.out_dir
    return rc


def _require(paths: dict[str, Path], keys, optional=()):
    for k in keys:
        if k not in paths:
            raise ConfigError(f"[paths] {k} is required")
    for k in list(keys) + list(optional):
        if k in paths and k != "out_dir" and not Path(paths[k]).exists():
            raise ConfigError(f"[paths] {k}: {paths[k]} does not exist")


def cmd_train(args) -> int:
    rc = _run_config(args)
    _require(rc.paths, ("train_manifest", "valid_manifest", "out_dir"), ("vocabulary", "stats"))
    vocab = rc.paths.get("vocabulary")
    train = load_manifest(rc.paths["train_manifest"], vocab, "train")
    valid = load_manifest(rc.paths["valid_manifest"], vocab or train.tag_vocabulary, "valid")
    model_cfg, train_cfg = rc.build(train.n_labels)
    out_dir = Path(rc.paths["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = NormStats.load(rc.paths["stats"]) if "stats" in rc.paths else \
        compute_stats(train, bands=model_cfg.bands)
    stats.save(out_dir / "stats.txt")
    (out_dir / "run.cfg").write_text(rc.to_text(), encoding="utf-8")
    (out_dir / "tags.txt").write_text("\n".join(train.tag_vocabulary) + "\n", encoding="utf-8")
    result = train_loop(train_cfg, model_cfg, train, valid, out_dir=out_dir, stats=stats)
    last = result.history.records[-1]
    print(f"trained {result.stopped_epoch} epochs ({train_cfg.variant}); "
          f"final train loss {last.train_loss:.6f}, val loss {last.val_loss:.6f}; "
          f"best epochs {result.best_epochs}; outputs in {out_dir}")
    return 0


def cmd_predict(args) -> int:
    run_dir = args.run_dir
    for name in ("best.json", "stats.txt", "tags.txt"):
        if not (run_dir / name).exists():
            raise ConfigError(f"{run_dir}: missing {name}; not a training output directory")
    tags = [t for t in (run_dir / "tags.txt").read_text(encoding="utf-8").split("\n") if t]
    manifest = load_manifest(args.manifest, args.vocabulary or tags, "test")
    predictor = load_predictor(run_dir)
    stats = NormStats.load(run_dir / "stats.txt")
    cfg = predictor.cfg
    specs = [manifest.load(e, bands=cfg.bands) for e in manifest.entries]
    rows = []
    for i in range(0, len(specs), 8):
        x = np.stack([prepare_input(s, stats, cfg) for s in specs[i:i + 8]])
        rows.append(predictor.predict_inputs(x))
    scores = np.concatenate(rows, axis=0)
    out = args.out or (args.out_dir or Path(".")) / "predictions.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_predictions(out, [e.track_id for e in manifest.entries], tags, scores)
    print(f"wrote {len(specs)} predictions to {out}")
    return 0


def cmd_evaluate(args) -> int:
    ids, tags, scores = read_predictions(args.pred)
    manifest = load_manifest(args.truth, args.vocabulary, "test")
    unknown = [t for t in tags if t not in manifest.tag_vocabulary]
    if unknown and args.vocabulary is None:
        # tags with no positive in the truth file are absent from an inferred vocabulary
        manifest = load_manifest(args.truth, list(manifest.tag_vocabulary) + unknown, "test")
    elif unknown:
        raise ConfigError(f"{args.pred}: tags {unknown} not in vocabulary {args.vocabulary}")
    truth = align_truth(ids, tags, manifest)
    report = evaluate(scores, truth, threshold=args.threshold, tags=tags)
    print(report.to_text())
    if args.out_dir is not None:
        args.out_dir.mkdir(parents=True, exist_ok=True)
        write_report_csv(args.out_dir / "metrics.csv", report)
    return 0


def cmd_gradcheck(args) -> int:
    reports = ad.grad_check_suite(args.tolerance, seed=args.seed or 0)
    for r in reports:
        print(r)
    failed = [r.op_kind for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} passed")
    return 1 if failed else 0


def _save_grid(path: Path, values: np.ndarray) -> None:
    np.savetxt(path, values, delimiter=",", fmt="%.9g")


def cmd_augment_preview(args) -> int:
    rc = _run_config(args)
    if "out_dir" not in rc.paths:
        raise ConfigError("augment-preview needs --out-dir (or [paths] out_dir)")
    manifest = load_manifest(args.manifest, rc.paths.get("vocabulary"), "train")
    model_cfg, train_cfg = rc.build(manifest.n_labels)
    cfg: AugmentConfig = train_cfg.augment
    entries = manifest.entries
    if args.track is None:
        index = 0
    else:
        ids = [e.track_id for e in entries]
        if args.track not in ids:
            raise ConfigError(f"track {args.track!r} not in {args.manifest}")
        index = ids.index(args.track)
    entry = entries[index]
    stats = NormStats.load(args.stats) if args.stats else None
    out_dir = Path(rc.paths["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def load(e):
        s = manifest.load(e, bands=model_cfg.bands)
        return normalize(s, stats) if stats is not None else s

    # same stream order as the training loop, so the last stage is what training sees
    rng = sample_rng(cfg.seed, args.epoch, index)
    n = len(entries)
    mixing = cfg.mixup_alpha > 0 and n > 1
    if mixing:
        j = int(rng.integers(n - 1))
        j = j + 1 if j >= index else j
    peer_rng = np.random.default_rng(rng.integers(1 << 63))
    stages = []
    spec = manifest.load(entry, bands=model_cfg.bands)
    stages.append(("input", spec))
    if stats is not None:
        spec = normalize(spec, stats)
        stages.append(("normalized", spec))
    lo, hi = cfg.scale_range
    spec = random_scale(spec, float(rng.uniform(lo, hi)))
    stages.append(("scaled", spec))
    spec = pad_or_crop(spec, model_cfg.input_frames, "train" if cfg.crop_enabled else "eval", rng)
    stages.append(("cropped", spec))
    spec = spec_augment(spec, cfg, rng)
    stages.append(("masked", spec))
    if mixing:
        peer = _geometric(load(entries[j]), cfg, model_cfg.input_frames, peer_rng)
        labels = manifest.labels()
        spec, _, lam = mixup((spec, labels[index]), (peer, labels[j]), cfg.mixup_alpha, rng)
        stages.append(("mixup", spec))
        log.info("mixup with %s, lambda %.4f", entries[j].track_id, lam)
    for name, s in stages:
        _save_grid(out_dir / f"{entry.track_id}_{name}.csv", s.values)
    print(f"wrote {len(stages)} stages for {entry.track_id} to {out_dir}")
    return 0


def cmd_stats(args) -> int:
    manifest = load_manifest(args.manifest, None, "train")
    stats = compute_stats(manifest, bands=args.bands)
    out = args.out or (args.out_dir or Path(".")) / "stats.txt"
    out.parent.mkdir(parents=True, exist_ok=True)
    stats.save(out)
    print(f"{stats.bands} bands over {stats.count} frames -> {out}")
    return 0


COMMANDS = {"train": cmd_train, "predict": cmd_predict, "evaluate": cmd_evaluate,
            "gradcheck": cmd_gradcheck, "augment-preview": cmd_augment_preview,
            "stats": cmd_stats}


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                         format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except EXPECTED_ERRORS as e:
        print(f"moodtheme {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
