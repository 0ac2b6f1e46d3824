"""Command-line entry point: ``cseg <subcommand> ...``.

Exit codes: 0 success, 1 input error, 2 internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import statistics
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bgmodel import BM_MODES, BackgroundModel, NaiveSegmenter
from .dataset import IMAGE_SUFFIXES, load_cdnet
from .errors import CsegError, InputError
from .evaluation import ConfusionCounts, accumulate, aggregate, format_table, metrics, write_report
from .imagecore import (FG, NETWORK_HEIGHT, NETWORK_WIDTH, read_frame, read_gray8,
                        write_frame, write_mask)
from .network import Network, load_model, save_model
from .pipeline import (BgModelSource, SampleStore, SamplingPolicy, prepare_dataset, segment_frame, segment_video,
                       train, write_history)

log = logging.getLogger("cseg")

REALTIME_FPS = 10.0  # soft reference for the throughput report


def _frame_files(folder) -> list:
    folder = Path(folder)
    if (folder / "input").is_dir():
        folder = folder / "input"
    if not folder.is_dir():
        raise InputError(f"frame directory {folder} does not exist")
    files = sorted(p for p in folder.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise InputError(f"no frames in {folder}")
    return files


def _read_frames(files):
    """Yield frames, checking that every one has the size of the first."""
    shape = None
    for p in files:
        f = read_frame(p)
        if shape is None:
            shape = f.shape
        elif f.shape != shape:
            raise InputError(f"{p}: frame size {f.shape[:2]} differs from {shape[:2]}")
        yield f


def _frame_number(path: Path, fallback: int) -> int:
    digits = "".join(ch for ch in path.stem if ch.isdigit())
    return int(digits) if digits else fallback


def _require(path, what):
    if path is None:
        raise InputError(f"{what} is required")
    return Path(path)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    from .synthetic import synthetic_corpus, write_cdnet_video
    out = _require(args.out, "--out")
    seeds = tuple(args.seed * 100 + 11 + i for i in range(args.videos))
    for name, video in synthetic_corpus(seeds, n_frames=args.frames).items():
        write_cdnet_video(out, args.category, name, video)
        log.info("wrote %s/%s/%s", out, args.category, name)
    return 0


def cmd_build_bg(args):
    files = _frame_files(_require(args.root, "--root"))
    out = _require(args.out, "--out")
    out.mkdir(parents=True, exist_ok=True)
    model = None
    rows = ["frame\tfs_raw\tfs_filtered\tbm\tpadding_radius\tflux_ready"]
    for i, frame in enumerate(_read_frames(files)):
        if model is None:
            h, w = frame.shape[:2]
            model = BackgroundModel(h, w, hook=NaiveSegmenter(args.tau), bm_mode=args.bm_mode)
        bg, state = model.step(frame)
        n = _frame_number(files[i], i + 1)
        rows.append(f"{n}\t{state.fs_raw:.6f}\t{state.fs_filtered:.6f}\t{state.bm:.4f}\t"
                    f"{state.padding_radius}\t{int(state.flux_ready)}")
        if (i + 1) % args.every == 0 or i == len(files) - 1:
            write_frame(out / f"bg{n:06d}.png", bg)
    (out / "motion.tsv").write_text("\n".join(rows) + "\n")
    if args.checkpoint:
        model.save(args.checkpoint)
    log.info("processed %d frames into %s", len(files), out)
    return 0


def _policy(args):
    return SamplingPolicy(train_frames=args.train_frames, val_frames=args.val_frames, seed=args.seed)


def cmd_prepare(args):
    manifest = load_cdnet(_require(args.root, "--root"))
    out = _require(args.out, "--out")
    cache = args.cache or out / "bgcache"
    data = prepare_dataset(manifest, _policy(args), BgModelSource(cache, args.bm_mode))
    data.train.save(out / "train")
    data.val.save(out / "val")
    manifest.save(out / "manifest.yaml")
    (out / "splits.json").write_text(json.dumps(data.splits, indent=1))
    log.info("store %s: %d training and %d validation samples", out, len(data.train), len(data.val))
    return 0


def cmd_train(args):
    model_path = _require(args.model, "--model")
    if args.store:
        store_dir = Path(args.store)
        train_store = SampleStore.load(store_dir / "train")
        val_store = SampleStore.load(store_dir / "val") if (store_dir / "val").is_dir() else None
    elif args.root:
        data = prepare_dataset(load_cdnet(args.root), _policy(args), BgModelSource(args.cache, args.bm_mode))
        train_store, val_store = data.train, data.val
    else:
        raise InputError("train needs --store (a prepared sample store) or --root (a dataset)")
    result = train(train_store, val_store, epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed)
    model_path.parent.mkdir(parents=True, exist_ok=True)
    save_model(model_path, result.network, result.optimizer)
    history = Path(args.history) if args.history else model_path.with_suffix(".loss.tsv")
    write_history(history, result.history)
    log.info("model %s, history %s", model_path, history)
    return 0


def cmd_segment(args):
    files = _frame_files(_require(args.root, "--root"))
    out = _require(args.out, "--out")
    net = _load_net(_require(args.model, "--model"))
    out.mkdir(parents=True, exist_ok=True)
    kw = dict(threshold=args.threshold, median=args.median)
    if args.backgrounds:
        bgs = _frame_files(args.backgrounds)
        if len(bgs) != len(files):
            raise InputError(f"{len(bgs)} background images for {len(files)} frames")
        for i, (f, b) in enumerate(zip(files, bgs)):
            mask = segment_frame(net, read_frame(f), read_frame(b), **kw)
            write_mask(out / f"bin{_frame_number(f, i + 1):06d}.png", mask)
    else:
        model = BackgroundModel(NETWORK_HEIGHT, NETWORK_WIDTH, hook=NaiveSegmenter(args.tau), bm_mode=args.bm_mode)
        for i, mask in enumerate(segment_video(net, _read_frames(files), model, **kw)):
            write_mask(out / f"bin{_frame_number(files[i], i + 1):06d}.png", mask)
    log.info("wrote %d masks to %s", len(files), out)
    return 0


def _load_net(path) -> Network:
    if not Path(path).is_file():
        raise InputError(f"model file {path} does not exist")
    return load_model(path)


def _read_prediction(path):
    return np.where(read_gray8(path) >= 128, FG, 0).astype(np.uint8)


def cmd_evaluate(args):
    manifest = load_cdnet(_require(args.root, "--root"))
    masks = _require(args.masks, "--masks")
    per_video, videos = [], {}
    for video in manifest.videos:
        counts = ConfusionCounts()
        for i in range(len(video.groundtruth)):
            n = _frame_number(Path(video.frames[i]), i + 1)
            pred_path = masks / video.video_id / f"bin{n:06d}.png"
            if not pred_path.is_file():
                raise InputError(f"video {video.video_id}: missing mask {pred_path}")
            gt = manifest.read_labels(video, i)
            pred = _read_prediction(pred_path)
            if pred.shape != gt.shape:
                raise InputError(f"{pred_path}: mask {pred.shape} does not match ground truth {gt.shape}")
            counts = counts + accumulate(pred, gt)
        per_video.append((video.category, metrics(counts)))
        videos[video.video_id] = (video.category, counts)
    categories, overall = aggregate(per_video)
    prefix = Path(args.out) if args.out else masks / "report"
    prefix.parent.mkdir(parents=True, exist_ok=True)
    write_report(prefix, categories, overall, videos)
    sys.stdout.write(format_table(categories, overall))
    return 0


def _timed(fn, repeats):
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return times


def cmd_bench(args):
    if args.model:
        net = _load_net(args.model)
    else:
        log.warning("no --model given; timing a freshly initialised network")
        net = Network.init(args.seed)
        net.input_mean = np.full(3, 0.5, np.float32)
    rng = np.random.default_rng(args.seed)
    h, w = NETWORK_HEIGHT, NETWORK_WIDTH
    scene = rng.random((h, w, 3)).astype(np.float32)
    n = args.frames

    def frames(count):
        return [np.clip(scene + rng.normal(0, 0.02, scene.shape), 0, 1).astype(np.float32) for _ in range(count)]

    clip, clip2 = frames(n), frames(2 * n)
    background = scene.copy()

    def run_bg(seq):
        m = BackgroundModel(h, w)
        for f in seq:
            m.step(f)

    def run_net(seq):
        for f in seq:
            segment_frame(net, f, background)

    def run_full(seq):
        for _ in segment_video(net, seq, BackgroundModel(h, w)):
            pass

    report = {"frames": n, "repeats": args.repeats, "size": [h, w], "threads": args.threads}
    for name, fn in (("bgmodel", run_bg), ("network", run_net), ("pipeline", run_full)):
        times = _timed(lambda: fn(clip), args.repeats)
        best = min(times)
        report[name] = {"fps": n / best, "seconds": times,
                        "stdev_seconds": statistics.stdev(times) if len(times) > 1 else 0.0}
    t1 = min(_timed(lambda: run_full(clip), args.repeats))
    t2 = min(_timed(lambda: run_full(clip2), args.repeats))
    ratio = t2 / t1
    report["linearity"] = {"ratio_2n_over_n": ratio, "within_30pct": bool(1.4 <= ratio <= 2.6)}
    fps = report["pipeline"]["fps"]
    report["realtime_reference_fps"] = REALTIME_FPS
    report["meets_realtime_reference"] = bool(fps >= REALTIME_FPS)
    log.info("pipeline %.2f fps (soft reference %.0f fps: %s)", fps, REALTIME_FPS,
             "met" if fps >= REALTIME_FPS else "not met")
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    sys.stdout.write(text + "\n")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_bg_flags(p):
    p.add_argument("--bm-mode", choices=BM_MODES, default="monotone-decreasing",
                   help="memory-length interpretation (default: %(default)s)")
    p.add_argument("--tau", type=float, default=0.1, help="naive segmenter difference threshold")


def _add_sampling_flags(p):
    p.add_argument("--train-frames", type=int, default=150, help="training frames per video")
    p.add_argument("--val-frames", type=int, default=20, help="validation frames per video")
    p.add_argument("--cache", type=Path, help="background cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=None,
                        help="cap on BLAS/OpenMP threads (env CSEG_THREADS as fallback)")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--root", type=Path, help="input directory")
        p.add_argument("--out", type=Path, help="output path")
        p.add_argument("--seed", type=int, default=0)
        return p

    p = common(sub.add_parser("synth", help="write a synthetic CDnet-style corpus"))
    p.add_argument("--videos", type=int, default=3)
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--category", default="baseline")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("build-bg", help="run the background model over a frame directory"))
    p.add_argument("--every", type=int, default=1, help="write a background every N frames")
    p.add_argument("--checkpoint", type=Path, help="save the final model state here")
    _add_bg_flags(p)
    p.set_defaults(func=cmd_build_bg)

    p = common(sub.add_parser("prepare", help="build training/validation sample stores"))
    _add_sampling_flags(p)
    _add_bg_flags(p)
    p.set_defaults(func=cmd_prepare)

    p = common(sub.add_parser("train", help="train the network"))
    p.add_argument("--store", type=Path, help="prepared sample store directory")
    p.add_argument("--model", type=Path, help="model file to write")
    p.add_argument("--history", type=Path, help="loss history file (default: next to the model)")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch", type=int, default=150)
    p.add_argument("--lr", type=float, default=2.5e-3)
    _add_sampling_flags(p)
    _add_bg_flags(p)
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("segment", help="write bin%%06d.png masks for a frame directory"))
    p.add_argument("--model", type=Path)
    p.add_argument("--threshold", type=float, default=0.3)
    p.add_argument("--median", type=int, default=9)
    p.add_argument("--backgrounds", type=Path, help="use these background images instead of the model")
    _add_bg_flags(p)
    p.set_defaults(func=cmd_segment)

    p = common(sub.add_parser("evaluate", help="score masks against CDnet-style ground truth"))
    p.add_argument("--masks", type=Path, help="directory holding <category>/<video>/bin%%06d.png")
    p.set_defaults(func=cmd_evaluate)

    p = common(sub.add_parser("bench", help="throughput report at 240x320"))
    p.add_argument("--model", type=Path)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def _threads(args):
    if args.threads is not None:
        return args.threads
    env = os.environ.get("CSEG_THREADS")
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"CSEG_THREADS={env!r} is not an integer") from None
    return None


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.threads = _threads(args)
        if args.threads is not None and args.threads < 1:
            raise InputError("--threads must be at least 1")
        for name in ("every", "frames", "repeats", "epochs", "batch", "median"):
            if getattr(args, name, 1) < 1:
                raise InputError(f"--{name} must be at least 1")
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except InputError as exc:
        log.error("%s", exc)
        return 1
    except CsegError as exc:
        log.error("%s", exc)
        return exc.exit_code
    except Exception as exc:  # anything unexpected is an internal error
        log.exception("internal error: %s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
