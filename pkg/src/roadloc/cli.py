"""Command-line entry point: ``roadloc <command> [options]``.

Every command reads and writes one output directory (``--out``) and leaves a
``manifest-<command>.json`` there.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .config import PipelineConfig, load_config
from .egomotion import write_motion_csv
from .embedding import EmbeddingModel
from .fusion import write_fused_rows
from .io import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VALIDATION,
    MissingInput,
    load_frames,
    load_world,
    require,
    save_frames,
    save_world,
    write_manifest,
)
from .retrieval import KeyframeDB, build_index, calibrate_threshold, coarse_localize_batch, write_fixes_csv

logger = logging.getLogger("roadloc")

GENERATE_HINT = "run `roadloc generate` first"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# shared state
# ---------------------------------------------------------------------------


def _config(args) -> PipelineConfig:
    stored = Path(args.out) / "config.json"
    if args.config:
        cfg = load_config(args.config)
        if args.command != "generate" and stored.exists() and load_config(stored).sha256() != cfg.sha256():
            raise UsageError(f"--config differs from the configuration {stored} was generated with")
        return cfg
    if stored.exists():
        return load_config(stored)
    return PipelineConfig()


def _world(args):
    world = load_world(require(Path(args.out) / "world.json", GENERATE_HINT))
    if args.seed is not None and args.seed != world.seed:
        raise UsageError(f"--seed {args.seed} differs from the generated world's seed {world.seed}")
    return world


def _benchmark(args, cfg: PipelineConfig) -> ex.Benchmark:
    world = _world(args)
    frames, extra = load_frames(require(Path(args.out) / "frames.npz", GENERATE_HINT))
    split = extra["split"]
    keyframe = extra["keyframe"].astype(bool)
    return ex.Benchmark(
        world, world.seed, cfg.benchmark, frames,
        frames.take(split == SPLIT_TRAIN), frames.take(split == SPLIT_VALIDATION), frames.take(keyframe),
    )


def _model(args, triplets: str) -> tuple[EmbeddingModel, float]:
    out = Path(args.out)
    hint = f"run `roadloc train --triplets {triplets}` first"
    model = EmbeddingModel.load(require(out / f"model_{triplets}.npz", hint))
    thr = json.loads(require(out / f"threshold_{triplets}.json", hint).read_text())["threshold"]
    return model, float(thr)


def _finish(args, cfg: PipelineConfig, seed: int, outputs, extra=None) -> None:
    name = args.command
    if args.command == "eval":
        name += f"-{args.experiment}"
    elif getattr(args, "triplets", None):
        name += f"-{args.triplets}"
    path = write_manifest(args.out, name, cfg.sha256(), seed, outputs, extra)
    logger.info("wrote %s", path)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_generate(args) -> None:
    cfg = _config(args)
    seed = 1 if args.seed is None else args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    bench = ex.build_benchmark(seed, cfg.benchmark, cfg.world)
    f = bench.frames
    test = ex.in_area(f.x, f.y, cfg.benchmark.test_area)
    split = np.full(len(f), SPLIT_TRAIN, dtype=np.int8)
    split[test] = SPLIT_TEST
    split[np.isin(f.frame_id, bench.validation.frame_id)] = SPLIT_VALIDATION
    keyframe = np.isin(f.frame_id, bench.keyframes.frame_id)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    save_world(out / "world.json", bench.world, cfg.to_dict()["world"])
    save_frames(out / "frames.npz", f, split=split, keyframe=keyframe)
    logger.info("%d frames: %d train, %d validation, %d keyframes", len(f), len(bench.train), len(bench.validation), len(bench.keyframes))
    _finish(args, cfg, seed, [out / "config.json", out / "world.json", out / "frames.npz"],
            {"frames": len(f), "train": len(bench.train), "validation": len(bench.validation), "keyframes": len(bench.keyframes)})


def cmd_train(args) -> None:
    cfg = _config(args)
    bench = _benchmark(args, cfg)
    schedule = dataclasses.replace(cfg.train, seed=bench.seed)
    if args.steps is not None:
        schedule = dataclasses.replace(schedule, steps=args.steps)
    model, history = ex.train_model(bench.train, args.triplets, schedule)
    thr = calibrate_threshold(model, bench.validation)
    out = Path(args.out)
    paths = [out / f"model_{args.triplets}.npz", out / f"train_history_{args.triplets}.csv", out / f"threshold_{args.triplets}.json"]
    model.save(paths[0])
    history.write_csv(paths[1])
    paths[2].write_text(json.dumps({"format_version": 1, "threshold": thr}) + "\n")
    logger.info("threshold %.4f", thr)
    _finish(args, cfg, bench.seed, paths, {"steps": schedule.steps, "triplets": args.triplets})


def cmd_index(args) -> None:
    cfg = _config(args)
    bench = _benchmark(args, cfg)
    model, _ = _model(args, args.triplets)
    db = build_index(bench.keyframes, model)
    path = Path(args.out) / f"index_{args.triplets}.npz"
    db.save(path)
    _finish(args, cfg, bench.seed, [path], {"entries": len(db)})


def cmd_localize(args) -> None:
    cfg = _config(args)
    bench = _benchmark(args, cfg)
    model, thr = _model(args, args.triplets)
    db = KeyframeDB.load(require(Path(args.out) / f"index_{args.triplets}.npz", f"run `roadloc index --triplets {args.triplets}` first"))
    kf = bench.keyframes
    fx, fy, fh = ex.distort_fixes(kf, args.budget, bench.seed, cfg.gps.sigma_heading)
    fixes = coarse_localize_batch(db, db.descriptors, fx, fy, fh, args.budget, thr, exclude_ids=kf.frame_id)
    path = Path(args.out) / f"fixes_{args.triplets}_{args.budget:g}m.csv"
    write_fixes_csv(path, kf.frame_id, fixes)
    _finish(args, cfg, bench.seed, [path], {"queries": len(kf), "fixes": sum(f is not None for f in fixes)})


def cmd_fuse(args) -> None:
    cfg = _config(args)
    bench = _benchmark(args, cfg)
    model, thr = _model(args, "all")
    est = ex.calibrated_estimator(bench.world, bench.seed, cfg.benchmark)
    result = ex.experiment_end_to_end(bench, model, thr, cfg.gps, estimator=est)
    out = Path(args.out)
    paths = [out / "motion_calibration.json", out / "motion.csv", out / "fused.csv"]
    est.calibration.save(paths[0])
    steps, rot, trans, ranges = result.motion
    write_motion_csv(paths[1], result.rides, steps, rot, trans, ranges)
    with open(paths[2], "w", newline="") as fh:
        w = csv.writer(fh)
        for k, (rid, track) in enumerate(sorted(result.tracks.items())):
            write_fused_rows(w, track, rid, header=k == 0)
    _finish(args, cfg, bench.seed, paths)


def cmd_eval(args) -> None:
    cfg = _config(args)
    out = Path(args.out)
    if args.experiment == "sweep":
        world = _world(args)
        result = ex.experiment_noise_sweep(world, world.seed, cfg.benchmark)
        paths = [out / "sweep.csv", out / "sweep_rides.csv"]
        ex.write_sweep_csv(paths[0], paths[1], result)
        _finish(args, cfg, world.seed, paths)
        return
    bench = _benchmark(args, cfg)
    if args.experiment == "retrieval":
        reg, thr_reg = _model(args, "regular")
        full, thr_all = _model(args, "all")
        result = ex.experiment_retrieval(bench, {"regular": reg, "all": full}, {"VL-GIST": thr_reg, "VL-GIST*": thr_all}, cfg.gps)
        paths = [out / "retrieval_summary.csv", out / "retrieval_queries.csv"]
        ex.write_retrieval_csv(paths[0], paths[1], result)
    else:
        full, thr_all = _model(args, "all")
        result = ex.experiment_end_to_end(bench, full, thr_all, cfg.gps)
        paths = ex.write_e2e_csv(out, result)
    _finish(args, cfg, bench.seed, paths)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="world/benchmark seed (generate defaults to 1)")
    common.add_argument("--config", default=None, help="JSON configuration file")
    common.add_argument("--out", default="roadloc-out", help="working directory for inputs and outputs")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="roadloc", description=__doc__.splitlines()[0], parents=[common])
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("generate", parents=[common], help="synthesize the world, rides and data splits")
    t = sub.add_parser("train", parents=[common], help="train the descriptor model and calibrate its threshold")
    t.add_argument("--triplets", choices=sorted(ex.TRIPLET_SETS), default="all")
    t.add_argument("--steps", type=int, default=None, help="override the configured number of SGD steps")
    i = sub.add_parser("index", parents=[common], help="embed the keyframes into a searchable index")
    i.add_argument("--triplets", choices=sorted(ex.TRIPLET_SETS), default="all")
    lo = sub.add_parser("localize", parents=[common], help="coarse fixes for keyframe queries with distorted GPS")
    lo.add_argument("--triplets", choices=sorted(ex.TRIPLET_SETS), default="all")
    lo.add_argument("--budget", type=float, default=50.0, help="maximal GPS error in meters")
    sub.add_parser("fuse", parents=[common], help="fuse ego-motion with coarse fixes on fresh rides")
    e = sub.add_parser("eval", parents=[common], help="run an experiment")
    e.add_argument("experiment", choices=("retrieval", "sweep", "e2e"))
    return p


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "index": cmd_index,
    "localize": cmd_localize,
    "fuse": cmd_fuse,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"roadloc: error: {e}", file=sys.stderr)
        return 2
    except (MissingInput, ValueError) as e:
        print(f"roadloc: error: {e}", file=sys.stderr)
        return 1
    return 0


__all__ = ["build_parser", "main"]
