"""Command line front end: gen / train / simulate / sweep.

Exit codes: 0 success, 2 usage error, 3 missing prerequisite or unreadable
input data, 4 runtime failure.  CSV output is byte-reproducible for a given
seed: rows are fully ordered and floats use fixed formats.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .channel import snr_to_sigma2
from .data import (
    ClipFormatError,
    MotionSpec,
    generate_clip,
    parse_motion,
    read_clip,
    write_clip,
)
from .ddmfc import CompensationParams
from .metrics import ms_ssim, psnr
from .pipeline import (
    ExperimentConfig,
    MissingPrerequisiteError,
    SystemModels,
    train_stage,
    transmit_gop,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_RUNTIME = 4

CSV_COLUMNS = ("gop", "frame", "role", "psnr_db", "ms_ssim",
               "snr_db", "m", "lambda", "k", "seed")

SWEEP_PARAMS = ("snr", "m", "lambda", "gop")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise ValueError(f"bad size {text!r}; expected WxH like 128x128")
    return w, h


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semvid",
        description="semantic video transmission simulator",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic clip")
    p.add_argument("--out", required=True, help="output clip path")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--size", default="128x128", help="frame size WxH")
    p.add_argument("--motion", default="rect:2,0", help="kind:dx,dy")
    p.add_argument("--background", default="flat", choices=("flat", "gradient"))
    p.add_argument("--fps", type=float, default=25.0)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train", help="run one training stage on a clip")
    p.add_argument("--stage", required=True, choices=("1", "2", "3"))
    p.add_argument("--config", default=None, help="INI config file")
    p.add_argument("--data", required=True, help="input clip path")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--init-weights", default=None,
                   help="weights from the previous stage (required for 2/3)")
    p.add_argument("--steps", type=int, default=None,
                   help="steps for this stage (overrides config)")
    p.add_argument("--seed", type=int, default=0)

    def add_sim_flags(p):
        p.add_argument("--data", required=True, help="input clip path")
        p.add_argument("--out", required=True, help="output CSV path")
        p.add_argument("--weights", default=None)
        p.add_argument("--config", default=None)
        p.add_argument("--snr-db", type=float, default=12.0)
        p.add_argument("--gop-size", type=int, default=10)
        p.add_argument("--m", type=int, default=10, help="compensation start step")
        p.add_argument("--lambda", dest="lambda_i", type=float, default=0.7)
        p.add_argument("--k", type=float, default=0.3, help="steering scale")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--oracle", action="store_true",
                       help="exact channel-noise predictors (no training needed)")

    p = sub.add_parser("simulate", help="transmit a clip and report metrics")
    add_sim_flags(p)

    p = sub.add_parser("sweep", help="repeat simulate over one parameter grid")
    add_sim_flags(p)
    p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
    p.add_argument("--values", required=True, help="comma-separated value list")
    p.add_argument("--jobs", type=int, default=1,
                   help="worker threads (WVSC_THREADS overrides)")
    return parser


def _load_models(clip_frames: np.ndarray, config_path, weights_path):
    cfg = ExperimentConfig.from_file(config_path) if config_path else ExperimentConfig()
    _, _, h, w = clip_frames.shape
    cfg.model["height"], cfg.model["width"] = int(h), int(w)
    models = SystemModels(cfg)
    if weights_path:
        if not os.path.exists(weights_path) or not os.path.exists(weights_path + ".json"):
            raise ClipFormatError(
                f"missing weights file {weights_path} (or its .json manifest)")
        models.load(weights_path)
    return cfg, models


def _format_row(row: dict) -> str:
    return (
        f"{row['gop']},{row['frame']},{row['role']},"
        f"{row['psnr_db']:.6f},{row['ms_ssim']:.8f},"
        f"{row['snr_db']:g},{row['m']},{row['lambda']:g},{row['k']:g},{row['seed']}"
    )


def _write_csv(rows: list[dict], path: str) -> list[dict]:
    rows = sorted(rows, key=lambda r: (r["snr_db"], r["m"], r["lambda"],
                                       r["seed"], r["gop"], r["frame"]))
    with open(path, "w", newline="") as fh:
        fh.write(",".join(CSV_COLUMNS) + "\n")
        for row in rows:
            fh.write(_format_row(row) + "\n")
    return rows


def _simulate_rows(clip_frames, models, sched, snr_db, gop_size, m, lambda_i,
                   k, seed, oracle) -> list[dict]:
    """All rows for one parameter point; deterministic in its arguments."""
    sigma2 = snr_to_sigma2(snr_db)
    params = CompensationParams(lambda_i=lambda_i, k_of_t=lambda t: k, start_step=m)
    n_gops = clip_frames.shape[0] // gop_size
    if n_gops == 0:
        raise ClipFormatError(
            f"clip has {clip_frames.shape[0]} frames; need >= gop size {gop_size}")
    rows = []
    for g in range(n_gops):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), g)))
        gop = clip_frames[g * gop_size:(g + 1) * gop_size]
        bundle = transmit_gop(gop, models, params, sigma2, sched, rng, oracle=oracle)
        for i, (x, x_hat) in enumerate(zip(bundle.frames, bundle.reconstructed)):
            x = np.asarray(x, dtype=np.float64)
            rows.append({
                "gop": g, "frame": i, "role": "I" if i == 0 else "P",
                "psnr_db": psnr(x, x_hat), "ms_ssim": ms_ssim(x, x_hat),
                "snr_db": snr_db, "m": m, "lambda": lambda_i, "k": k,
                "seed": int(seed),
            })
    return rows


def cmd_gen(args) -> int:
    width, height = _parse_size(args.size)
    spec = parse_motion(args.motion)
    spec = MotionSpec(kind=spec.kind, velocity=spec.velocity,
                      background=args.background, seed=args.seed)
    clip = generate_clip(spec, width, height, args.frames, fps=args.fps)
    write_clip(clip, args.out)
    print(f"wrote {clip.frame_count} frames, {clip.payload_bytes} payload bytes, "
          f"to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    stage = int(args.stage)
    if stage > 1 and args.init_weights is None:
        raise MissingPrerequisiteError(
            f"stage {stage} requires --init-weights from stage {stage - 1}")
    clip = read_clip(args.data)
    cfg, models = _load_models(clip.frames, args.config, args.init_weights)
    cfg.train["seed"] = args.seed
    curve = train_stage(stage, clip.frames, models, cfg, steps=args.steps,
                        rng=np.random.default_rng(args.seed + stage))
    models.save(args.out_weights)
    log = {"stage": stage, "steps": len(curve), "loss_curve": curve}
    with open(args.out_weights + ".loss.json", "w") as fh:
        json.dump(log, fh, indent=1)
    print(f"stage {stage}: {len(curve)} steps, "
          f"loss {curve[0]:.6f} -> {curve[-1]:.6f}; wrote {args.out_weights}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    clip = read_clip(args.data)
    cfg, models = _load_models(clip.frames, args.config, args.weights)
    sched = cfg.schedule()
    rows = _simulate_rows(clip.frames, models, sched, args.snr_db, args.gop_size,
                          args.m, args.lambda_i, args.k, args.seed, args.oracle)
    rows = _write_csv(rows, args.out)
    mean = float(np.mean([r["psnr_db"] for r in rows]))
    print(f"wrote {len(rows)} rows to {args.out} (mean PSNR {mean:.2f} dB)")
    return EXIT_OK


def cmd_sweep(args) -> int:
    raw = [v for v in args.values.split(",") if v != ""]
    if not raw:
        raise ValueError("--values must contain at least one value")
    if args.param == "m":
        values = [int(v) for v in raw]
    elif args.param == "gop":
        values = [int(v) for v in raw]
    else:
        values = [float(v) for v in raw]

    clip = read_clip(args.data)
    cfg, models = _load_models(clip.frames, args.config, args.weights)
    sched = cfg.schedule()

    jobs = args.jobs
    env_jobs = os.environ.get("WVSC_THREADS")
    if env_jobs is not None:
        try:
            jobs = int(env_jobs)
        except ValueError:
            raise ValueError(f"WVSC_THREADS must be an integer, got {env_jobs!r}")
    if jobs < 1:
        raise ValueError(f"jobs must be >= 1, got {jobs}")

    def point(idx_value):
        idx, value = idx_value
        kw = dict(snr_db=args.snr_db, gop_size=args.gop_size, m=args.m,
                  lambda_i=args.lambda_i, k=args.k, oracle=args.oracle)
        key = {"snr": "snr_db", "m": "m", "lambda": "lambda_i",
               "gop": "gop_size"}[args.param]
        kw[key] = value
        # each sweep point owns a seed derived from the base seed and its index
        seed = int(np.random.SeedSequence((args.seed, idx)).generate_state(1)[0])
        return _simulate_rows(clip.frames, models, sched, seed=seed, **kw)

    items = list(enumerate(values))
    if jobs == 1:
        results = [point(it) for it in items]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(point, items))
    rows = [r for chunk in results for r in chunk]
    rows = _write_csv(rows, args.out)

    summary = {"param": args.param, "values": values, "rows": len(rows),
               "mean_psnr": {}, "mean_ms_ssim": {}}
    for value, chunk in zip(values, results):
        summary["mean_psnr"][f"{value:g}"] = round(
            float(np.mean([r["psnr_db"] for r in chunk])), 6)
        summary["mean_ms_ssim"][f"{value:g}"] = round(
            float(np.mean([r["ms_ssim"] for r in chunk])), 6)
    with open(args.out + ".summary.json", "w") as fh:
        json.dump(summary, fh, indent=1)
    print(f"wrote {len(rows)} rows to {args.out} and summary to "
          f"{args.out}.summary.json")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    handlers = {"gen": cmd_gen, "train": cmd_train,
                "simulate": cmd_simulate, "sweep": cmd_sweep}
    try:
        return handlers[args.command](args)
    except (MissingPrerequisiteError, ClipFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        # PipelineError and anything unexpected: report with the stage name
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
