"""Command-line entry point: ``fleetaug <command> ...``."""

import argparse
import csv
import io
import logging
import os
import sys
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from fleetaug.augment.analysis import analyze_augmentations
from fleetaug.augment.gtbank import build_gt_database
from fleetaug.config.settings import ExperimentConfig, Policy, load_run_config, replace
from fleetaug.detection.evaluation import EvalConfig, Metric, evaluate_dataset
from fleetaug.detection.head import HeadParams
from fleetaug.features.backbone import Backbone, init_backbone
from fleetaug.protocols.ingest import read_detections_txt, read_labels_txt, read_points_bin
from fleetaug.protocols.payload import encode_gt_database
from fleetaug.scenes import gen_scenes, scene_pairs
from fleetaug.seeding import derive_seed
from fleetaug.server import (
    EpochMetrics,
    ExperimentResult,
    FleetServer,
    make_client,
    make_split,
    pretrain,
    run_all,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_DATA_ERROR = 1
EXIT_USAGE = 2

METRICS_HEADER = (
    "seed",
    "epoch",
    "policy",
    "ap_bev",
    "ap_3d",
    "loss_labeled",
    "loss_unlabeled",
    "loss_total",
    "pseudo_labels",
    "gt_samples",
)
AP_HEADER = ("seed", "policy", "epoch", "metric", "iou_threshold", "ap")
PAYLOAD_SUFFIX = ".upcy"


@contextmanager
def atomic_output(path: Path, mode: str = "w") -> Iterator[io.IOBase]:
    """Write to a temporary sibling and move it into place only on success."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        kwargs = {"newline": ""} if "b" not in mode else {}
        with os.fdopen(fd, mode, **kwargs) as handle:
            yield handle
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    with atomic_output(path) as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _fmt(value: float) -> str:
    return f"{value:.6f}"


def metrics_rows(seed: int, policy: str, timeline: Sequence[EpochMetrics]) -> List[List[str]]:
    return [
        [
            str(seed),
            str(m.epoch),
            policy,
            _fmt(m.ap_bev),
            _fmt(m.ap_3d),
            _fmt(m.labeled_loss.total),
            _fmt(m.unlabeled_loss.total),
            _fmt(m.total),
            str(m.pseudo_labels),
            str(m.gt_samples),
        ]
        for m in timeline
    ]


def ap_rows(results: Sequence[ExperimentResult], iou: float) -> List[List[str]]:
    """Long format: seed, policy, epoch, metric, iou_threshold, ap."""
    rows = []
    for result in results:
        key = [str(result.seed), result.policy.value]
        for m in result.timeline:
            rows.append([*key, str(m.epoch), Metric.BEV.value, f"{iou:g}", _fmt(m.ap_bev)])
            rows.append([*key, str(m.epoch), Metric.IOU_3D.value, f"{iou:g}", _fmt(m.ap_3d)])
    return rows


def save_checkpoint(path: Path, backbone: Backbone, head: HeadParams) -> None:
    state = {**backbone.state_dict(), **head.state_dict()}
    with atomic_output(path, "wb") as handle:
        np.savez(handle, **state)


def load_checkpoint(path: Path, frozen: bool = True) -> Tuple[Backbone, HeadParams]:
    with np.load(path) as archive:
        state: Dict[str, np.ndarray] = {key: archive[key] for key in archive.files}
    try:
        return Backbone.from_state(state, frozen=frozen), HeadParams.from_state(state)
    except KeyError as exc:
        raise ValueError(f"{path}: checkpoint is missing {exc}") from None


def _labeled_dir(directory: Path) -> List[Tuple[np.ndarray, list]]:
    """(points, boxes) for every ``<name>.bin`` with a matching ``<name>.txt``."""
    pairs = []
    for bin_path in sorted(directory.glob("*.bin")):
        label_path = bin_path.with_suffix(".txt")
        if not label_path.exists():
            raise ValueError(f"{bin_path}: no label file {label_path.name}")
        pairs.append((read_points_bin(bin_path), read_labels_txt(label_path)))
    if not pairs:
        raise ValueError(f"{directory}: no .bin point files")
    return pairs


# Commands


def cmd_gtdb_build(args: argparse.Namespace) -> int:
    db = build_gt_database(_labeled_dir(Path(args.labeled)))
    with atomic_output(Path(args.out), "wb") as handle:
        handle.write(encode_gt_database(db))
    print(f"{len(db)} GT entries written to {args.out}")
    return EXIT_OK


def cmd_augment_analyze(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config) if args.config else ExperimentConfig()
    scenes = gen_scenes(cfg.scene, derive_seed(args.seed, 0), args.scenes)
    pairs = scene_pairs(scenes)
    bb = init_backbone(cfg.backbone)
    bb.freeze()
    report = analyze_augmentations(
        pairs,
        bb,
        cfg.grid,
        build_gt_database(pairs),
        derive_seed(args.seed, 1),
        cfg.gt_per_scene,
        cfg.scene.ground_z,
    )
    policies = list(report.scalars)
    _write_csv(
        Path(args.out),
        ("policy", "mean_rmse", "scenes"),
        [[name, _fmt(report.mean(name)), str(len(report.scalars[name]))] for name in policies],
    )
    if args.heatmap:
        rows = []
        for name in policies:
            heatmap = report.heatmaps.get(name)
            if heatmap is None:
                continue
            for row, col in zip(*np.nonzero(heatmap)):
                rows.append([name, str(row), str(col), _fmt(float(heatmap[row, col]))])
        _write_csv(Path(args.heatmap), ("policy", "row", "col", "rmse"), rows)
    summary = " < ".join(f"{name} {report.mean(name):.4g}" for name in report.ordering())
    print(f"mean RMSE: {summary}")
    return EXIT_OK


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    configs = [replace(cfg, policy=Policy.parse(name)) for name in args.policy] if args.policy else [cfg]
    results = [result for variant in configs for result in run_all(variant)]
    rows = []
    for result in results:
        rows.extend(metrics_rows(result.seed, result.policy.value, result.timeline))
        logger.info(
            "seed %d %s: final AP_BEV %.4f, max gt/pseudo overlap %g",
            result.seed,
            result.policy.value,
            result.final.ap_bev,
            result.max_cross_overlap,
        )
    _write_csv(Path(args.out), METRICS_HEADER, rows)
    if args.ap_out:
        _write_csv(Path(args.ap_out), AP_HEADER, ap_rows(results, cfg.eval_iou))
    return EXIT_OK


def cmd_server_pretrain(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    backbone, head = pretrain(cfg, make_split(cfg, seed).labeled, seed)
    save_checkpoint(Path(args.out), backbone, head)
    print(f"checkpoint written to {args.out} (backbone {backbone.fingerprint()[:12]})")
    return EXIT_OK


def cmd_client(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    if not 0 <= args.shard < args.shards:
        raise ValueError(f"shard must be in [0, {args.shards}), got {args.shard}")
    backbone, head = load_checkpoint(Path(args.checkpoint))
    client = make_client(cfg, backbone, head)
    scenes = make_split(cfg, seed).unlabeled[args.shard :: args.shards]
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []
    try:
        for scene in scenes:
            path = out_dir / f"payload_{scene.scene_id}{PAYLOAD_SUFFIX}"
            with atomic_output(path, "wb") as handle:
                handle.write(client.send(scene))
            written.append(path)
    except BaseException:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    print(f"{len(written)} payloads written to {out_dir}")
    return EXIT_OK


def cmd_server_train(args: argparse.Namespace) -> int:
    cfg = load_run_config(args.config)
    seed = cfg.seeds[0] if args.seed is None else args.seed
    split = make_split(cfg, seed)
    backbone, head = load_checkpoint(Path(args.checkpoint), frozen=cfg.freeze_backbone)
    server = FleetServer(cfg, backbone, head, split.labeled, seed)
    paths = sorted(Path(args.payloads).glob(f"*{PAYLOAD_SUFFIX}"))
    for path in paths:
        server.receive(path.read_bytes())
    if cfg.policy.trains_backbone:
        for scene in split.unlabeled:
            server.attach_raw(scene)
    unlabeled = server.drain()
    if server.invalid:
        logger.warning("%d of %d payload files were rejected", len(server.invalid), len(paths))
    timeline = server.train(unlabeled, split.test)
    _write_csv(Path(args.out), METRICS_HEADER, metrics_rows(seed, cfg.policy.value, timeline))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    label_dir, det_dir = Path(args.labels), Path(args.detections)
    label_paths = sorted(label_dir.glob("*.txt"))
    if not label_paths:
        raise ValueError(f"{label_dir}: no label files")
    gts, dets = [], []
    for label_path in label_paths:
        gts.append(read_labels_txt(label_path))
        det_path = det_dir / label_path.name
        dets.append(read_detections_txt(det_path) if det_path.exists() else [])
    ap = evaluate_dataset(dets, gts, EvalConfig(args.iou, Metric.parse(args.metric)))
    print(f"AP {ap:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fleetaug",
        description="Feature-level GT sampling for semi-supervised 3D detection on fleet payloads",
    )
    parser.add_argument(
        "--log-level",
        default="WARNING",
        choices=("DEBUG", "INFO", "WARNING", "ERROR"),
        help="Logging verbosity (default: WARNING)",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    gtdb = commands.add_parser("gtdb", help="GT database files")
    gtdb_commands = gtdb.add_subparsers(dest="action", required=True)
    build = gtdb_commands.add_parser("build", help="Crop labeled boxes into a database file")
    build.add_argument("--labeled", required=True, help="Directory of <name>.bin + <name>.txt pairs")
    build.add_argument("--out", required=True, help="Database file to write")
    build.set_defaults(handler=cmd_gtdb_build)

    augment = commands.add_parser("augment", help="Augmentation analysis")
    augment_commands = augment.add_subparsers(dest="action", required=True)
    analyze = augment_commands.add_parser("analyze", help="Raw vs feature-level RMSE per policy")
    analyze.add_argument("--scenes", type=int, default=50, help="Number of synthetic scenes")
    analyze.add_argument("--seed", type=int, default=0)
    analyze.add_argument("--config", help="Run config supplying scene and grid settings")
    analyze.add_argument("--out", default="rmse_summary.csv", help="Per-policy summary CSV")
    analyze.add_argument("--heatmap", help="Per-cell RMSE CSV for the first scene")
    analyze.set_defaults(handler=cmd_augment_analyze)

    simulate = commands.add_parser("simulate", help="Full pretrain + semi-supervised run")
    simulate.add_argument("--config", required=True)
    simulate.add_argument("--out", required=True, help="Metrics CSV, one row per (seed, epoch)")
    simulate.add_argument("--ap-out", help="Long-format AP CSV")
    simulate.add_argument(
        "--policy",
        action="append",
        help="Run this policy instead of the configured one; repeat to compare policies on one config",
    )
    simulate.set_defaults(handler=cmd_simulate)

    client = commands.add_parser("client", help="Write payload files for unlabeled scenes")
    client.add_argument("--config", required=True)
    client.add_argument("--checkpoint", required=True)
    client.add_argument("--out-dir", required=True)
    client.add_argument("--seed", type=int, help="Run seed (default: first configured seed)")
    client.add_argument("--shard", type=int, default=0, help="Index of this client process")
    client.add_argument("--shards", type=int, default=1, help="Number of client processes")
    client.set_defaults(handler=cmd_client)

    server = commands.add_parser("server", help="Server stages")
    server_commands = server.add_subparsers(dest="action", required=True)
    server_pretrain = server_commands.add_parser("pretrain", help="Pretrain and write a checkpoint")
    server_pretrain.add_argument("--config", required=True)
    server_pretrain.add_argument("--out", required=True, help="Checkpoint (.npz) to write")
    server_pretrain.add_argument("--seed", type=int)
    server_pretrain.set_defaults(handler=cmd_server_pretrain)
    server_train = server_commands.add_parser("train", help="Semi-supervised phase on payload files")
    server_train.add_argument("--config", required=True)
    server_train.add_argument("--checkpoint", required=True)
    server_train.add_argument("--payloads", required=True, help="Directory of payload files")
    server_train.add_argument("--out", required=True, help="Metrics CSV")
    server_train.add_argument("--seed", type=int)
    server_train.set_defaults(handler=cmd_server_train)

    evaluate = commands.add_parser("eval", help="AP of detection files against label files")
    evaluate.add_argument("--detections", required=True, help="Directory of detection .txt files")
    evaluate.add_argument("--labels", required=True, help="Directory of label .txt files")
    evaluate.add_argument("--iou", type=float, default=0.7)
    evaluate.add_argument("--metric", default="bev", choices=("bev", "3d"))
    evaluate.set_defaults(handler=cmd_eval)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    """
    Run one command.

    Returns:
        0 on success, 1 on a data error; usage errors exit with 2
    """
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=getattr(logging, args.log_level),
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
    )
    try:
        return args.handler(args)
    except (ValueError, OSError) as exc:
        print(f"fleetaug: error: {exc}", file=sys.stderr)
        return EXIT_DATA_ERROR


if __name__ == "__main__":
    sys.exit(main())
