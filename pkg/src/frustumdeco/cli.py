"""Batch command-line front end.

Subcommands::

    synth      write a synthetic corpus in the KITTI directory layout
    recode     frustum extraction + recoding, one container per frame
    train-seg  train the segmentation network and fusion head
    decorate   append decoration channels to recoded frames
    check      gradient, oracle and invariant checks
"""

from __future__ import annotations

import argparse
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import report
from .errors import DivergedLoss, FrustumDecoError
from .frustum import DEFAULT_M, build_batch, concat_batches
from .hidden import DEFAULT_MIN_CONF, RecodedCloud, RecodeOpts, recode_frame
from .kitti_io import FRAME_DIRS, read_frame, read_recoded, write_decorated, write_recoded
from .seen_net import VARIANTS, SeenConfig, SeenModel, TrainConfig, decorate_cloud, train

log = logging.getLogger("frustumdeco")

CHECKPOINT_NAME = "model.ckpt"


class FrameSetError(Exception):
    """Frame files that cannot be matched across the input directories."""


def discover_frames(root: Path, require_labels: bool) -> list[str]:
    """Frame ids present in the input layout; any unmatched file is an error."""
    required = ["velodyne", "calib", "detections"] + (["label_2"] if require_labels else [])
    stems = {}
    for sub, ext in FRAME_DIRS.items():
        d = root / sub
        stems[sub] = {p.stem for p in d.glob(f"*{ext}")} if d.is_dir() else set()
    everything = set().union(*(stems[s] for s in required))
    problems = []
    for fid in sorted(everything):
        missing = [s for s in required if fid not in stems[s]]
        if missing:
            problems.append(f"frame {fid}: missing {', '.join(missing)}")
    if problems:
        raise FrameSetError("; ".join(problems))
    return sorted(everything)


def _run_frames(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(item) for item in items]


# ------------------------------------------------------------------ recode

def _recode_one(task):
    root, out_dir, fid, opts, n_cls, require_labels = task
    try:
        frame = read_frame(root, fid, n_cls=n_cls, require_labels=require_labels)
        cloud = recode_frame(frame, opts)
        write_recoded(Path(out_dir) / f"{fid}.bin", cloud.points)
    except FrustumDecoError as exc:
        return fid, None, f"{type(exc).__name__}: {exc}"
    frusta = len(np.unique(cloud.index_label)) if len(cloud.points) else 0
    fg = float(cloud.seg_label.mean()) if len(cloud.points) else 0.0
    return fid, (fid, len(frame.points), len(cloud.points), frusta, fg), None


def cmd_recode(args) -> int:
    root, out = Path(args.input), Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    opts = RecodeOpts(min_conf=args.min_conf, jitter=args.mode if args.jitter is None else args.jitter, seed=args.seed)
    try:
        frames = discover_frames(root, require_labels=args.mode == "train")
    except FrameSetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    tasks = [(root, out, fid, opts, args.n_cls, args.mode == "train") for fid in frames]
    rows, errors = [], []
    for fid, row, err in _run_frames(_recode_one, tasks, args.jobs):
        if err:
            errors.append(f"frame {fid}: {err}")
        else:
            rows.append(row)
            print(",".join(report.fmt(v) for v in row))
    report.write_csv(out / "summary.csv", report.SUMMARY_HEADER, rows)
    if args.plots:
        report.plot_recode_summary(rows, out / "summary.png")
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if errors else 0


# --------------------------------------------------------------- train-seg

def load_training_batch(root: Path, m: int, n_cls: int, seed: int):
    paths = sorted(Path(root).glob("*.bin"))
    rng = np.random.default_rng([seed, 2])
    batches = [build_batch(read_recoded(p), m, n_cls, rng) for p in paths]
    return concat_batches(batches)


def cmd_train_seg(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = Path(args.checkpoint) if args.checkpoint else out / CHECKPOINT_NAME
    try:
        batch = load_training_batch(Path(args.input), args.m, args.n_cls, args.seed)
    except FrustumDecoError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    d_in = batch.points.shape[2] - 3 if len(batch) else 4
    model_cfg = SeenConfig(d_in=d_in, n_cls=args.n_cls, variant=args.fusion, mask_source=args.mask_source)
    train_cfg = TrainConfig(seed=args.seed, epochs=args.epochs, lr=args.lr, batch_size=args.batch_size,
                            stop_at_accuracy=args.stop_at)
    try:
        result = train(batch, model_cfg, train_cfg)
    except DivergedLoss as exc:
        print(f"error: DivergedLoss: {exc} (last finite epoch {exc.last_finite_epoch})", file=sys.stderr)
        return 1
    result.model.save(ckpt)
    rows = [(h.epoch, h.loss, h.accuracy, h.aux_accuracy) for h in result.history]
    report.write_csv(out / "metrics.csv", report.METRICS_HEADER, rows)
    if args.plots:
        report.plot_training(rows, out / "metrics.png")
    for row in rows:
        print(",".join(report.fmt(v) for v in row))
    return 0


# ---------------------------------------------------------------- decorate

def _decorate_one(task):
    path, out_dir, model = task
    try:
        rows = read_recoded(path)
        cloud = RecodedCloud(rows, frame_id=path.stem)
        deco = decorate_cloud(cloud, model)
        write_decorated(Path(out_dir) / path.name, deco.points)
    except FrustumDecoError as exc:
        return path.stem, f"{type(exc).__name__}: {exc}"
    return path.stem, None


def cmd_decorate(args) -> int:
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        model = SeenModel.load(args.checkpoint)
    except (FrustumDecoError, KeyError) as exc:
        print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 1
    if args.fusion and args.fusion != model.config.variant:
        print(f"error: checkpoint holds variant {model.config.variant}, --fusion asked for {args.fusion}",
              file=sys.stderr)
        return 1
    if args.mask_source:
        model = SeenModel(replace(model.config, mask_source=args.mask_source), model.params)
    tasks = [(p, out, model) for p in sorted(Path(args.input).glob("*.bin"))]
    errors = []
    for fid, err in _run_frames(_decorate_one, tasks, args.jobs):
        if err:
            errors.append(f"frame {fid}: {err}")
        else:
            print(fid)
    for e in errors:
        print(f"error: {e}", file=sys.stderr)
    return 1 if errors else 0


# ------------------------------------------------------------------- check

def cmd_check(args) -> int:
    from . import autodiff
    from .checks import run_checks

    rows = []
    faults = autodiff.inject_fault(args.inject_fault) if args.inject_fault else nullcontext()
    with faults:
        for row in run_checks(seed=args.seed, n_scenes=args.scenes, draws=args.draws):
            rows.append(row)
            print(",".join(report.fmt(v) for v in row), flush=True)
    if args.output:
        out = Path(args.output)
        out.mkdir(parents=True, exist_ok=True)
        report.write_csv(out / "report.csv", report.CHECK_HEADER, rows)
        if args.plots:
            report.plot_check_report(rows, out / "report.png")
    return 0 if all(r[1] == "pass" for r in rows) else 1


# ------------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from . import synth

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    presets = {"random": synth.random_spec, "separable": synth.separable_spec, "overlapping": synth.overlapping_spec}
    if args.spec:
        template = synth.SceneSpec.read(args.spec)
        make = lambda s: replace(template, seed=s)  # noqa: E731
    else:
        make = presets[args.preset]
    for k in range(args.frames):
        scene = synth.gen_scene(make(args.seed * 100_003 + k), frame_id=f"{k:06d}")
        scene.write(out)
        print(scene.frame.frame_id)
    return 0


# -------------------------------------------------------------------- main

def _common(p, *flags):
    if "io" in flags:
        p.add_argument("--input", required=True, help="input directory")
        p.add_argument("--output", required=True, help="output directory")
    if "seed" in flags:
        p.add_argument("--seed", type=int, default=0)
    if "n_cls" in flags:
        p.add_argument("--n-cls", type=int, default=3)
    if "jobs" in flags:
        p.add_argument("--jobs", type=int, default=1, help="frame-parallel worker processes")
    if "plots" in flags:
        p.add_argument("--no-plots", dest="plots", action="store_false", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frustumdeco", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("recode", help="extract and recode frustum points")
    _common(p, "io", "seed", "n_cls", "jobs", "plots")
    p.add_argument("--mode", choices=("train", "infer"), default="infer",
                   help="train: random 0-10%% box growth, labels required; infer: fixed 5%% growth")
    p.add_argument("--jitter", choices=("train", "infer", "none"), default=None,
                   help="override the box growth policy implied by --mode")
    p.add_argument("--min-conf", type=float, default=DEFAULT_MIN_CONF)
    p.set_defaults(func=cmd_recode)

    p = sub.add_parser("train-seg", help="train segmentation network and fusion head")
    _common(p, "io", "seed", "n_cls", "plots")
    p.add_argument("--checkpoint", default=None, help=f"checkpoint path (default OUTPUT/{CHECKPOINT_NAME})")
    p.add_argument("--fusion", choices=VARIANTS, default="D")
    p.add_argument("--mask-source", choices=("pred", "gt"), default="pred")
    p.add_argument("--m", type=int, default=DEFAULT_M, help="points per resampled frustum")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--stop-at", type=float, default=None, help="stop once epoch accuracy reaches this")
    p.set_defaults(func=cmd_train_seg)

    p = sub.add_parser("decorate", help="append decoration channels to recoded frames")
    _common(p, "io", "jobs")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--fusion", choices=VARIANTS, default=None, help="assert the checkpoint's variant")
    p.add_argument("--mask-source", choices=("pred", "gt"), default=None, help="variant A mask override")
    p.set_defaults(func=cmd_decorate)

    p = sub.add_parser("check", help="run gradient, oracle and invariant checks")
    _common(p, "seed", "plots")
    p.add_argument("--output", default=None, help="directory for report.csv / report.png")
    p.add_argument("--scenes", type=int, default=10)
    p.add_argument("--draws", type=int, default=10)
    p.add_argument("--inject-fault", default=None, metavar="PRIMITIVE",
                   help="corrupt one backward rule to exercise the report (testing hook)")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="write a synthetic KITTI-layout corpus")
    _common(p, "seed")
    p.add_argument("--output", required=True)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--preset", choices=("random", "separable", "overlapping"), default="random")
    p.add_argument("--spec", default=None, help="key=value scene spec file (seed is overridden per frame)")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
