"""Command-line entry point.

Run layout (all under ``run_dir``)::

    config.yaml                          resolved configuration
    preprocessed/<sample>/{volume,mask}/ canonical stacks (+ meta.json)
    preprocess_log.csv
    folds.csv                            subject_id, fold
    checkpoints/<loss>/fold_<k>.pt
    logs/train_<loss>.csv
    predictions/<loss>/<sample>/         out-of-fold masks
    metrics/<loss>.csv                   per-sample, per-pad rows
    metrics/summary_<loss>.csv           per-pad median / std
    report/summary_table.csv, report/{iou,dice,vs}.png
    markers/<command>[_<loss>].json      completion markers with the config hash

Exit codes: 0 success, 1 partial data failure, 2 configuration or missing-input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

from filelock import FileLock, Timeout

from . import cvsplit, metrics, report
from .config import ConfigError, RunConfig, check_paths, load_config
from .inference import out_of_fold_predict, prediction_dir
from .preprocess import EmptySampleError, canonical_dirs, load_canonical, preprocess_sample, save_canonical
from .trainer import NonFiniteLossError, checkpoint_path, load_checkpoint, train_all_folds
from .volio import ManifestError, VolumeIOError, load_manifest, load_mask, load_stack

log = logging.getLogger("tidemark")

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2
PREPROCESS_LOG_COLUMNS = (
    "sample_id", "status", "source_shape", "center_x", "center_y", "padding", "padded", "message",
)


class MissingArtifactError(RuntimeError):
    pass


def _records(cfg: RunConfig):
    return load_manifest(cfg.data.manifest, cfg.data.data_root)


def _mark_done(cfg: RunConfig, name: str, **extra) -> None:
    path = cfg.run_dir / "markers" / f"{name}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"command": name, "config_hash": cfg.hash(), "finished": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    path.write_text(json.dumps(payload, indent=2))


def _assignment(cfg: RunConfig, records) -> cvsplit.FoldAssignment:
    path = cfg.run_dir / "folds.csv"
    if not path.exists():
        raise MissingArtifactError(f"missing fold assignment {path}; run 'split' first")
    return cvsplit.load_assignment(path, records, cfg.split.k)


def _fingerprint(cfg: RunConfig, record) -> dict:
    def stamp(d: Path):
        files = sorted(p for p in d.iterdir() if p.is_file()) if d.is_dir() else []
        return [len(files), max((p.stat().st_mtime_ns for p in files), default=0)]

    return {
        "fraction": cfg.preprocess.fraction,
        "threshold": cfg.preprocess.threshold,
        "canonical_shape": list(cfg.preprocess.canonical_shape),
        "z_flip": _z_flip(cfg, record),
        "volume": [str(record.volume_path)] + stamp(record.volume_path),
        "mask": [str(record.mask_path)] + stamp(record.mask_path),
    }


def _z_flip(cfg: RunConfig, record) -> bool:
    return cfg.data.z_flip.get(record.sample_id, record.z_flip)


# ---------------------------------------------------------------- commands


def cmd_preprocess(cfg: RunConfig, force: bool = False) -> int:
    records = _records(cfg)
    out_root = cfg.preprocessed_dir
    rows, failed = [], []
    for record in records:
        meta_path = out_root / record.sample_id / "meta.json"
        fp = _fingerprint(cfg, record)
        if not force and meta_path.exists():
            meta = json.loads(meta_path.read_text())
            if meta.get("fingerprint") == fp:
                rows.append({**meta["log"], "status": "skipped"})
                continue
        try:
            vol = load_stack(record.volume_path, cfg.data.voxel_um)
            mask = load_mask(record.mask_path)
            res = preprocess_sample(
                vol, mask, cfg.preprocess.fraction, cfg.preprocess.threshold,
                cfg.preprocess.canonical_shape, _z_flip(cfg, record),
            )
            save_canonical(out_root, record.sample_id, res.volume, res.mask)
        except (VolumeIOError, EmptySampleError, ValueError) as exc:
            log.error("preprocess %s failed: %s", record.sample_id, exc)
            failed.append(record.sample_id)
            rows.append({"sample_id": record.sample_id, "status": "failed", "message": str(exc)})
            continue
        entry = {
            "sample_id": record.sample_id,
            "status": "done",
            "source_shape": "x".join(map(str, res.raw_shape)),
            "center_x": res.crop.center_xy[0],
            "center_y": res.crop.center_xy[1],
            "padding": json.dumps([list(p) for p in res.crop.padding]),
            "padded": int(res.crop.padded),
            "message": "",
        }
        meta_path.write_text(json.dumps({"fingerprint": fp, "log": entry}, indent=2))
        rows.append(entry)
        log.info("preprocessed %s center=%s", record.sample_id, res.crop.center_xy)
    log_path = cfg.run_dir / "preprocess_log.csv"
    with open(log_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=PREPROCESS_LOG_COLUMNS, restval="")
        writer.writeheader()
        writer.writerows(rows)
    if failed:
        log.error("%d of %d samples failed: %s", len(failed), len(records), ", ".join(failed))
        return EXIT_PARTIAL
    _mark_done(cfg, "preprocess", samples=len(records))
    return EXIT_OK


def cmd_split(cfg: RunConfig, force: bool = False) -> int:
    records = _records(cfg)
    path = cfg.run_dir / "folds.csv"
    if path.exists() and not force:
        log.info("fold assignment %s exists; use --force to redo", path)
        return EXIT_OK
    assignment = cvsplit.group_stratified_kfold(records, cfg.split.k, cfg.seed)
    cvsplit.save_assignment(assignment, path)
    for f in range(assignment.k):
        _, val = cvsplit.fold_views(assignment, f)
        log.info("fold %d: %d subjects, %d samples", f, len(assignment.subjects_in(f)), len(val))
    _mark_done(cfg, "split")
    return EXIT_OK


def _check_preprocessed(cfg: RunConfig, records) -> None:
    missing = [r.sample_id for r in records if not all(d.is_dir() for d in canonical_dirs(cfg.preprocessed_dir, r.sample_id))]
    if missing:
        raise MissingArtifactError(f"missing preprocessed data for: {', '.join(missing)}; run 'preprocess' first")


def cmd_train(cfg: RunConfig, loss_kind: str, folds=None, force: bool = False) -> int:
    records = _records(cfg)
    assignment = _assignment(cfg, records)
    _check_preprocessed(cfg, records)
    train_cfg = cfg.train_config(loss_kind)
    train_all_folds(
        records, assignment, train_cfg, cfg.preprocessed_dir, cfg.checkpoint_dir(loss_kind),
        folds=folds, force=force, log_path=cfg.run_dir / "logs" / f"train_{loss_kind}.csv",
    )
    _mark_done(cfg, f"train_{loss_kind}", folds=list(folds) if folds is not None else list(range(assignment.k)))
    return EXIT_OK


def cmd_predict(cfg: RunConfig, loss_kind: str) -> int:
    records = _records(cfg)
    assignment = _assignment(cfg, records)
    _check_preprocessed(cfg, records)
    ckpt_dir = cfg.checkpoint_dir(loss_kind)
    missing = [f for f in range(assignment.k) if not checkpoint_path(ckpt_dir, f).exists()]
    if missing:
        raise MissingArtifactError(
            f"missing checkpoints for loss {loss_kind!r}, fold(s) {missing} in {ckpt_dir}; run 'train' first"
        )
    checkpoints = {f: load_checkpoint(checkpoint_path(ckpt_dir, f)) for f in range(assignment.k)}
    out_of_fold_predict(
        checkpoints, assignment, loss_kind, cfg.preprocessed_dir,
        thresholds=cfg.eval.thresholds, shape=cfg.preprocess.canonical_shape,
        out_root=cfg.run_dir, batch_size=cfg.eval.batch_size, voxel_um=cfg.data.voxel_um,
    )
    _mark_done(cfg, f"predict_{loss_kind}", samples=len(records))
    return EXIT_OK


def cmd_evaluate(cfg: RunConfig, loss_kind: str) -> int:
    records = _records(cfg)
    _check_preprocessed(cfg, records)
    missing = [r.sample_id for r in records if not prediction_dir(cfg.run_dir, loss_kind, r.sample_id).is_dir()]
    if missing:
        raise MissingArtifactError(f"missing predictions for loss {loss_kind!r}: {', '.join(missing)}; run 'predict' first")
    rows = []
    for r in records:
        _, gt = load_canonical(cfg.preprocessed_dir, r.sample_id, cfg.data.voxel_um)
        pred = load_mask(prediction_dir(cfg.run_dir, loss_kind, r.sample_id))
        rows.extend(
            metrics.evaluate_sample(pred, gt, cfg.eval.pads_um, cfg.data.voxel_um, r.sample_id, r.subject_id, loss_kind)
        )
    metrics.write_report(rows, cfg.run_dir / "metrics" / f"{loss_kind}.csv")
    summary = report.summarize(rows)
    report.write_summary(summary, cfg.run_dir / "metrics" / f"summary_{loss_kind}.csv")
    for pad in cfg.eval.pads_um:
        n, med, std = summary[(loss_kind, float(pad), "iou")]
        log.info("%s pad %g um: median IoU %.3f ± %.3f (n=%d)", loss_kind, pad, med, std, n)
    _mark_done(cfg, f"evaluate_{loss_kind}")
    return EXIT_OK


def cmd_report(cfg: RunConfig, loss_kind: Optional[str] = None) -> int:
    metric_dir = cfg.run_dir / "metrics"
    files = sorted(p for p in metric_dir.glob("*.csv") if not p.name.startswith("summary_")) if metric_dir.is_dir() else []
    if loss_kind is not None:
        files = [p for p in files if p.stem == loss_kind]
    rows = [row for p in files for row in metrics.read_report(p)]
    if not rows:
        raise MissingArtifactError(f"no metric reports under {metric_dir}; run 'evaluate' first")
    summary = report.summarize(rows)
    out = cfg.run_dir / "report"
    report.write_summary(summary, out / "summary.csv")
    report.write_table(summary, out / "summary_table.csv", "iou")
    report.write_table(summary, out / "summary_table_dice.csv", "dice")
    report.write_table(summary, out / "summary_table_vs.csv", "vs")
    report.plot_curves(summary, out)
    report.check_monotone(summary)
    _mark_done(cfg, "report")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def _folds(text: Optional[str]):
    if text is None:
        return None
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"--folds expects comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tidemark", description="Tidemark segmentation pipeline")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in [
        ("preprocess", "trim, normalize, localize and crop every sample"),
        ("split", "write the subject-grouped stratified fold assignment"),
        ("train", "train one model per fold"),
        ("predict", "out-of-fold dual-plane prediction"),
        ("evaluate", "banded IoU/Dice/VS per sample and pad"),
        ("report", "summary table and metric-vs-pad plots"),
    ]:
        p = sub.add_parser(name, help=text)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--force", action="store_true", help="redo work even if outputs exist")
        p.add_argument("--folds", type=_folds, default=None, help="subset of folds, e.g. 0,2")
        p.add_argument("--loss", default=None, help="loss kind (defaults to loss.kind from the config)")
    synth = sub.add_parser("synth", help="write a synthetic phantom dataset and manifest")
    synth.add_argument("--out", required=True, type=Path)
    synth.add_argument("--samples", type=int, default=8)
    synth.add_argument("--subjects", type=int, default=4)
    synth.add_argument("--seed", type=int, default=0)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "synth":
        from .phantom import write_dataset

        manifest = write_dataset(args.out, args.samples, args.subjects, args.seed)
        print(manifest)
        return EXIT_OK

    cfg = load_config(args.config)
    check_paths(cfg)
    cfg.run_dir.mkdir(parents=True, exist_ok=True)
    loss_kind = args.loss or cfg.loss.kind
    if args.loss is not None:
        try:
            cfg.train_config(loss_kind)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    lock = FileLock(str(cfg.run_dir / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"run directory {cfg.run_dir} is locked by another command") from None
    try:
        cfg.dump(cfg.run_dir / "config.yaml")
        if args.command == "preprocess":
            return cmd_preprocess(cfg, args.force)
        if args.command == "split":
            return cmd_split(cfg, args.force)
        if args.command == "train":
            return cmd_train(cfg, loss_kind, args.folds, args.force)
        if args.command == "predict":
            return cmd_predict(cfg, loss_kind)
        if args.command == "evaluate":
            return cmd_evaluate(cfg, loss_kind)
        if args.command == "report":
            return cmd_report(cfg, args.loss)
        raise ConfigError(f"unknown command {args.command}")
    finally:
        lock.release()


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return run(args)
    except (ConfigError, ManifestError, MissingArtifactError, cvsplit.InsufficientSubjectsError) as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        log.error("%s", exc)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
