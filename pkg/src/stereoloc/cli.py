"""Command-line entry points: mapping runs, localization runs, trajectory
evaluation, vocabulary training, and map file inspection.

Exit codes: 0 success, 2 usage or input error, 3 data corruption,
4 runtime failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from . import evaluation as ev
from . import pipeline as pl
from . import vocabulary as vb
from .dataset import DatasetError, load_folders, load_kitti
from .features import extract_features
from .persistence import (
    BadMagic,
    ChecksumMismatch,
    IntegrityViolation,
    IoFailure,
    UnsupportedVersion,
    VocabularyMismatch,
    load_map,
)
from .tracking import DivergedOptimization

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CORRUPT = 3
EXIT_RUNTIME = 4

_USAGE_ERRORS = (
    pl.InvalidConfig,
    DatasetError,
    IoFailure,
    ev.TrajectoryFormatError,
    ev.TooFewPairs,
    ev.TrajectoryTooShort,
    FileNotFoundError,
)
_CORRUPTION_ERRORS = (
    BadMagic,
    UnsupportedVersion,
    ChecksumMismatch,
    VocabularyMismatch,
    IntegrityViolation,
    vb.VocabularyFormatError,
)
_RUNTIME_ERRORS = (DivergedOptimization, ev.DegenerateGeometry, RuntimeError)


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--settings", required=True,
                        help="key=value settings file")
    parser.add_argument("--dataset", required=True, help="dataset root")
    parser.add_argument("--layout", choices=("kitti", "folders"),
                        default="folders")
    parser.add_argument("--map", help="map file (overrides map.path)")
    parser.add_argument("--speed-factor", type=float,
                        help="override playback.speed_factor")
    parser.add_argument("--real-time", action="store_true",
                        help="force real-time playback with frame dropping")
    parser.add_argument("--out", default=".",
                        help="output directory for trajectory and stats")
    parser.add_argument("--seed", type=int, help="override seeds.ransac")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stereoloc",
        description="Stereo visual localization with persistent maps",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_slam = sub.add_parser("slam", help="build a map from a stereo sequence")
    _add_run_flags(p_slam)

    p_loc = sub.add_parser("localize",
                           help="localize against an existing map")
    _add_run_flags(p_loc)

    p_eval = sub.add_parser("eval", help="compare two trajectory files")
    p_eval.add_argument("est", help="estimated trajectory file")
    p_eval.add_argument("ref", help="reference trajectory file")
    p_eval.add_argument("--lengths", default="100,200,300,400,500,600,700,800",
                        help="comma-separated segment lengths in meters")
    p_eval.add_argument("--max-dt", type=float, default=0.02,
                        help="association tolerance in seconds")
    p_eval.add_argument("--out", help="write the JSON report here "
                                      "(default: stdout)")

    p_vocab = sub.add_parser("vocab-train",
                             help="train a vocabulary from an image folder")
    p_vocab.add_argument("--images", required=True,
                         help="directory of grayscale images")
    p_vocab.add_argument("--out", required=True, help="vocabulary file")
    p_vocab.add_argument("--branching", type=int, default=8)
    p_vocab.add_argument("--depth", type=int, default=4)
    p_vocab.add_argument("--features", type=int, default=400)
    p_vocab.add_argument("--seed", type=int, default=0)

    p_inspect = sub.add_parser("map-inspect",
                               help="print map file header and statistics")
    p_inspect.add_argument("--map", required=True, help="map file")
    return parser


def _load_dataset(args):
    if args.layout == "kitti":
        return load_kitti(args.dataset)
    config = pl.SessionConfig.from_file(args.settings)
    return load_folders(args.dataset, config.rig)


def _session_config(args, map_load: bool) -> pl.SessionConfig:
    config = pl.SessionConfig.from_file(args.settings)
    updates = {}
    if args.map:
        updates["map_path"] = args.map
    if args.speed_factor is not None:
        updates["speed_factor"] = args.speed_factor
    if args.real_time:
        updates["real_time"] = True
    updates["map_load"] = map_load
    config = dataclasses.replace(config, **updates)
    if args.seed is not None:
        config = dataclasses.replace(
            config,
            tracker=dataclasses.replace(config.tracker,
                                        ransac_seed=args.seed),
        )
    return config


def _load_vocab(config: pl.SessionConfig) -> vb.Vocabulary:
    if config.vocab_path:
        return vb.load_vocabulary(config.vocab_path)
    from importlib import resources

    ref = resources.files("stereoloc").joinpath("data/vocabulary.bin")
    with resources.as_file(ref) as path:
        return vb.load_vocabulary(path)


def _run_session(args, map_load: bool) -> int:
    config = _session_config(args, map_load)
    dataset = _load_dataset(args)
    vocab = _load_vocab(config)
    session = pl.start_session(config, vocab)
    trajectory, stats = pl.run(session, dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ev.write_trajectory(trajectory, out / "trajectory.txt")
    stats_doc = stats.as_dict()
    stats_doc["mode"] = session.mode.value
    lt, lt_t_max = ev.lost_track_stats(stats.outcomes)
    stats_doc["LT"] = lt
    stats_doc["LT_t_max"] = lt_t_max
    (out / "stats.json").write_text(json.dumps(stats_doc, indent=2,
                                               sort_keys=True),
                                    encoding="utf-8")
    return EXIT_OK


def cmd_slam(args) -> int:
    return _run_session(args, map_load=False)


def cmd_localize(args) -> int:
    if args.map and not Path(args.map).exists():
        print(f"error: map file not found: {args.map}", file=sys.stderr)
        return EXIT_USAGE
    return _run_session(args, map_load=True)


def cmd_eval(args) -> int:
    est = ev.load_trajectory(args.est)
    ref = ev.load_trajectory(args.ref)
    pairs = ev.associate(est, ref, args.max_dt)
    lengths = tuple(float(v) for v in args.lengths.split(","))
    t_rel, r_rel, details = ev.kitti_rel_errors(pairs, lengths)
    t_abs = ev.ate_rmse(pairs)
    report = ev.metrics_report(t_rel, r_rel, t_abs, 0.0, 0.0, details)
    if args.out:
        Path(args.out).write_text(report + "\n", encoding="utf-8")
    else:
        print(report)
    return EXIT_OK


def cmd_vocab_train(args) -> int:
    image_dir = Path(args.images)
    paths = sorted(p for p in image_dir.iterdir()
                   if p.suffix.lower() in (".png", ".pgm", ".jpg", ".jpeg"))
    if not paths:
        print(f"error: no images in {image_dir}", file=sys.stderr)
        return EXIT_USAGE
    descriptors = []
    for path in paths:
        img = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
        if img is None:
            print(f"error: unreadable image: {path}", file=sys.stderr)
            return EXIT_USAGE
        descriptors.append(extract_features(img, args.features).descriptors)
    vocab = vb.train(np.vstack(descriptors), k=args.branching,
                     L=args.depth, seed=args.seed)
    vb.save_vocabulary(vocab, args.out)
    print(f"{vocab.word_count} words -> {args.out}")
    return EXIT_OK


def cmd_map_inspect(args) -> int:
    wm, db = load_map(args.map)
    n_points = len(wm.mappoints)
    n_kfs = len(wm.keyframes)
    weights = [w for kf in wm.keyframes.values()
               for w in kf.covisible.values()]
    obs = [len(p.observations) for p in wm.mappoints.values()]
    print(f"map file:            {args.map}")
    print(f"keyframes:           {n_kfs}")
    print(f"map points:          {n_points}")
    print(f"covisibility edges:  {len(weights) // 2}")
    if weights:
        print(f"edge weight range:   {min(weights)}..{max(weights)}")
    if obs:
        print(f"mean observations:   {float(np.mean(obs)):.2f}")
    print("checksum:            OK")
    print("integrity:           OK")
    return EXIT_OK


_COMMANDS = {
    "slam": cmd_slam,
    "localize": cmd_localize,
    "eval": cmd_eval,
    "vocab-train": cmd_vocab_train,
    "map-inspect": cmd_map_inspect,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except _CORRUPTION_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CORRUPT
    except _USAGE_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _RUNTIME_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
