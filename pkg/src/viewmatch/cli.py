"""Command-line front end.

Subcommands: ``gen-data`` (synthetic dataset), ``train`` (pseudo-labelling
loop producing a checkpoint plus history CSV), ``estimate`` (per-image pose
CSV), ``evaluate`` (accuracy report CSV) and ``diagnose-matching`` (retrieval
error vs. azimuth offset CSV).  Angles cross this boundary in degrees and are
converted to radians internally.  Exit codes: 0 success, 1 usage error,
2 data or format error.

Heavy numeric imports happen inside the command handlers so that ``--threads``
can pin the BLAS pool size through the environment first.
"""

from __future__ import annotations

import argparse
import math
import os
import sys


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D102 - argparse hook
        raise _UsageError(message)


def _add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--image-size", type=int, default=128,
                        help="square image edge length in pixels")
    parser.add_argument("--stride", type=int, default=4,
                        help="patch edge length of the feature grid")
    parser.add_argument("--scale", type=float, default=45.0,
                        help="projection scale in pixels per object unit")
    parser.add_argument("--channels", type=int, default=16,
                        help="feature channels of the extractor")
    parser.add_argument("--dims", type=str, default="1.0,0.65,0.45",
                        help="cuboid dimensions, comma separated")
    parser.add_argument("--subdivisions", type=int, default=4,
                        help="per-face subdivisions of the pose-model mesh")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="viewmatch",
                     description="Few-shot pose estimation by synthesizing and "
                                 "matching feature-level views of a cuboid model.")
    parser.add_argument("--threads", type=int, default=0,
                        help="cap BLAS threads (0 = library default)")
    sub = parser.add_subparsers(dest="command")

    gen = sub.add_parser("gen-data", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True, help="output dataset directory")
    gen.add_argument("--labelled", type=int, default=7)
    gen.add_argument("--unlabelled", type=int, default=200)
    gen.add_argument("--test", type=int, default=100)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--background", choices=("noise", "gradient", "tiles"),
                     default="noise")
    gen.add_argument("--occlusion", type=float, default=0.0,
                     help="occluded fraction of the object box on the test split")
    gen.add_argument("--palette-jitter", type=float, default=0.1)
    gen.add_argument("--texture-seed", type=int, default=7)
    gen.add_argument("--elevation-range", type=str, default=None,
                     help="min,max elevation in degrees")
    gen.add_argument("--inplane-range", type=str, default=None,
                     help="min,max in-plane angle in degrees")
    _add_pipeline_flags(gen)
    gen.set_defaults(func=_cmd_gen_data)

    train = sub.add_parser("train", help="run the pseudo-labelling training loop")
    train.add_argument("--data", required=True, help="dataset directory")
    train.add_argument("--out", required=True, help="checkpoint output path")
    train.add_argument("--history", default=None,
                       help="history CSV path (default: <out>.history.csv)")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--outer-iters", type=int, default=12)
    train.add_argument("--delta-step", type=float, default=10.0,
                       help="azimuth offset step in degrees")
    train.add_argument("--schedule-increment", type=float, default=10.0,
                       help="offset range growth per iteration in degrees")
    train.add_argument("--tau", type=float, default=None,
                       help="matching score threshold for pseudo-labels")
    train.add_argument("--alpha", type=float, default=0.1,
                       help="moving-average rate of the vertex feature bank")
    train.add_argument("--epochs", type=int, default=8,
                       help="training epochs per outer iteration")
    train.add_argument("--pairs", type=int, default=32,
                       help="image pairs per training epoch")
    train.add_argument("--lr", type=float, default=3e-3)
    train.add_argument("--negative-weight", type=float, default=0.1)
    train.add_argument("--per-view-cap", type=int, default=3)
    train.add_argument("--step-cap", type=int, default=50)
    _add_pipeline_flags(train)
    train.set_defaults(func=_cmd_train)

    est = sub.add_parser("estimate", help="estimate poses for a dataset split")
    est.add_argument("--data", required=True)
    est.add_argument("--ckpt", required=True)
    est.add_argument("--out", required=True, help="estimates CSV path")
    est.add_argument("--split", default="test",
                     choices=("labelled", "unlabelled", "test"))
    est.set_defaults(func=_cmd_estimate)

    ev = sub.add_parser("evaluate", help="estimate and score a dataset split")
    ev.add_argument("--data", required=True)
    ev.add_argument("--ckpt", required=True)
    ev.add_argument("--report", required=True, help="report CSV path")
    ev.add_argument("--estimates", default=None,
                    help="optional per-image estimates CSV path")
    ev.add_argument("--split", default="test",
                    choices=("labelled", "unlabelled", "test"))
    ev.set_defaults(func=_cmd_evaluate)

    diag = sub.add_parser("diagnose-matching",
                          help="retrieval error of synthesized views vs. offset")
    diag.add_argument("--data", required=True)
    diag.add_argument("--ckpt", required=True)
    diag.add_argument("--out", required=True, help="diagnostic CSV path")
    diag.add_argument("--anchors", type=int, default=20)
    diag.add_argument("--offsets", type=str, default="10,20,30,40,50,60",
                      help="azimuth offsets in degrees, comma separated")
    diag.add_argument("--top-k", type=int, default=3)
    diag.set_defaults(func=_cmd_diagnose)

    return parser


def _parse_floats(text: str, count: int, flag: str) -> tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise ValueError(f"{flag} expects comma-separated numbers, got {text!r}") from None
    if len(values) != count:
        raise ValueError(f"{flag} expects {count} values, got {len(values)}")
    return values


def _pipeline_config(args):
    from .config import PipelineConfig
    from .geometry import Camera

    size = args.image_size
    camera = Camera(scale=args.scale, principal=(size / 2.0, size / 2.0),
                    image_size=(size, size), feature_stride=args.stride)
    return PipelineConfig(camera=camera,
                          mesh_dims=_parse_floats(args.dims, 3, "--dims"),
                          mesh_subdivisions=args.subdivisions,
                          channels=args.channels,
                          seed=getattr(args, "seed", 0))


def _load_dataset(data_dir: str):
    from . import dataio

    manifest_path = os.path.join(data_dir, "manifest.txt")
    if not os.path.isfile(manifest_path):
        raise FileNotFoundError(f"no manifest at {manifest_path}")
    entries = dataio.read_manifest(manifest_path)
    images = {entry.image_id: dataio.read_tensor(os.path.join(data_dir, entry.path))
              for entry in entries}
    return entries, images


def _cmd_gen_data(args) -> int:
    from .synthdata import SceneSpec, generate_dataset

    config = _pipeline_config(args)
    spec_kwargs = dict(
        object_dims=_parse_floats(args.dims, 3, "--dims"),
        texture_seed=args.texture_seed,
        palette_jitter=args.palette_jitter,
        background=args.background,
        occlusion_fraction=args.occlusion,
    )
    if args.elevation_range is not None:
        lo, hi = _parse_floats(args.elevation_range, 2, "--elevation-range")
        spec_kwargs["elevation_range"] = (math.radians(lo), math.radians(hi))
    if args.inplane_range is not None:
        lo, hi = _parse_floats(args.inplane_range, 2, "--inplane-range")
        spec_kwargs["inplane_range"] = (math.radians(lo), math.radians(hi))
    spec = SceneSpec(**spec_kwargs)
    entries = generate_dataset(spec, (args.labelled, args.unlabelled, args.test),
                               args.seed, args.out, config.camera)
    print(f"wrote {len(entries)} images and manifest.txt to {args.out}")
    return 0


def _cmd_train(args) -> int:
    from . import dataio
    from .evaluation import write_history_csv
    from .training import TrainConfig, run_em

    config = _pipeline_config(args)
    entries, images = _load_dataset(args.data)
    labelled = [(e.image_id, images[e.image_id], e.pose)
                for e in entries if e.split == "labelled"]
    pool = [(e.image_id, images[e.image_id])
            for e in entries if e.split == "unlabelled"]
    ground_truth = {e.image_id: e.pose for e in entries
                    if e.split == "unlabelled" and e.pose is not None}

    tc_kwargs = dict(
        alpha=args.alpha,
        delta_step=math.radians(args.delta_step),
        schedule_increment=math.radians(args.schedule_increment),
        outer_iterations=args.outer_iters,
        epochs_per_iteration=args.epochs,
        pairs_per_step=args.pairs,
        learning_rate=args.lr,
        negative_weight=args.negative_weight,
        per_view_cap=args.per_view_cap,
        step_cap=args.step_cap,
        channels=args.channels,
        seed=args.seed,
    )
    if args.tau is not None:
        tc_kwargs["tau"] = args.tau
    train_config = TrainConfig(**tc_kwargs)

    mesh = config.make_mesh()
    result = run_em(labelled, pool, mesh, config.camera, train_config,
                    ground_truth=ground_truth or None)
    checkpoint = dataio.Checkpoint(config=config, weights=result.weights,
                                   bank=result.bank,
                                   pseudo_labels=result.pseudo_labels)
    dataio.save_checkpoint(args.out, checkpoint)
    history_path = args.history or f"{args.out}.history.csv"
    write_history_csv(history_path, result.history)
    print(f"saved checkpoint to {args.out} "
          f"({len(result.pseudo_labels)} pseudo-labels); history in {history_path}")
    return 0


def _estimate_split(args):
    from . import dataio
    from .inference import estimate_pose
    from .raster import RasterCache

    checkpoint = dataio.load_checkpoint(args.ckpt)
    entries, images = _load_dataset(args.data)
    selected = [e for e in entries if e.split == args.split]
    if not selected:
        raise ValueError(f"dataset has no {args.split!r} entries")
    camera = checkpoint.config.camera
    mesh = checkpoint.config.make_mesh()
    cache = RasterCache(mesh, camera, camera.grid_shape)
    rows = []
    for entry in selected:
        estimate = estimate_pose(images[entry.image_id], checkpoint.weights, mesh,
                                 checkpoint.bank, camera, cache=cache)
        rows.append((entry, estimate))
    return rows


def _cmd_estimate(args) -> int:
    from .evaluation import write_estimates_csv

    rows = _estimate_split(args)
    write_estimates_csv(args.out, [(entry.image_id, est) for entry, est in rows])
    print(f"wrote {len(rows)} estimates to {args.out}")
    return 0


def _cmd_evaluate(args) -> int:
    from .evaluation import evaluate, write_estimates_csv, write_report_csv

    rows = _estimate_split(args)
    missing = [entry.image_id for entry, _ in rows if entry.pose is None]
    if missing:
        raise ValueError(
            f"split {args.split!r} lacks ground truth for {len(missing)} images")
    report = evaluate([(est, entry.pose, entry.occlusion_fraction)
                       for entry, est in rows])
    write_report_csv(args.report, report)
    if args.estimates:
        write_estimates_csv(args.estimates, [(e.image_id, est) for e, est in rows])
    overall = report.overall
    print(f"evaluated {overall.count} images: acc(pi/6)={overall.acc_loose:.3f} "
          f"acc(pi/18)={overall.acc_tight:.3f} "
          f"median={overall.median_error_deg:.2f} deg; report in {args.report}")
    return 0


def _cmd_diagnose(args) -> int:
    from . import dataio
    from .evaluation import diagnose_matching, write_diagnostic_csv

    checkpoint = dataio.load_checkpoint(args.ckpt)
    entries, images = _load_dataset(args.data)
    pool = [(e.image_id, images[e.image_id], e.pose)
            for e in entries if e.split == "test" and e.pose is not None]
    offsets = _parse_floats(args.offsets, len(args.offsets.split(",")), "--offsets")
    rows = diagnose_matching(checkpoint, pool, args.anchors, offsets,
                             top_k=args.top_k)
    write_diagnostic_csv(args.out, rows)
    print(f"wrote {len(rows)} diagnostic rows to {args.out}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        print(parser.format_usage(), file=sys.stderr, end="")
        return 1
    if args.command is None:
        print(parser.format_help(), file=sys.stderr, end="")
        return 1
    if args.threads > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)

    from .dataio import ConfigConflictError, FormatError

    try:
        return args.func(args)
    except _UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except (FormatError, ConfigConflictError, FileNotFoundError,
            NotADirectoryError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
