"""Command-line harness: benchmarking, verification suites, toy training.

Exit codes are a stable contract: 0 success, 1 verification failure,
2 usage error, 3 cache capacity exceeded, 4 numeric failure.

The cache-vs-recompute benchmark measures the marginal cost of producing
frame T's backbone outputs: cache mode pushes T-1 frames into the KV caches
and times subsequent single-frame pushes; recompute mode times a full
forward over all T frames.  Memory columns come from the engine's own byte
accounting, not OS-level measurement.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time

import numpy as np

from . import attention as attn_mod
from . import backbone as bb
from .attention import CapacityError
from .engine import (EngineConfig, cache_stats, config_load, embed_frames,
                     init_engine_params, toy_train)
from .losses import LossWeights, NonFiniteLossError
from .verify import SUITES, run_suite

EXIT_OK = 0
EXIT_VERIFY_FAIL = 1
EXIT_USAGE = 2
EXIT_CAPACITY = 3
EXIT_NUMERIC = 4


def _thread_limit(flag_parallel):
    """Resolve the intra-op thread cap: 1 unless --parallel, OMNISTREAM_THREADS wins."""
    env = os.environ.get("OMNISTREAM_THREADS")
    if env is not None:
        return max(1, int(env))
    return None if flag_parallel else 1


def _limits(n):
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _median_iqr(samples):
    med = float(np.median(samples))
    q75, q25 = np.percentile(samples, [75, 25])
    return med, float(q75 - q25)


def _bench_config(args) -> EngineConfig:
    return EngineConfig(
        n_layers=args.layers, d_model=args.dim, n_heads=args.heads,
        patch=args.patch, selected_layers=(args.layers,),
        cam_enabled=True, capacity=max(args.frames) + args.reps + 1)


def _bench_cache(params, config, frames, t_ctx, reps):
    h, w = frames.shape[1], frames.shape[2]
    layout = config.layout(1, h, w)
    bcfg = config.backbone()
    caches = bb.make_caches(bcfg, layout, t_ctx + reps + 1,
                            dtype=params["patch_proj.w"].dtype)
    for t in range(t_ctx - 1):
        flat = embed_frames(frames[t][None], params, layout)
        bb.forward_streaming_step(flat, caches, params, bcfg, layout)
    times = []
    last = None
    for r in range(reps + 1):  # first rep is discarded warmup
        frame = frames[(t_ctx - 1 + r) % frames.shape[0]]
        t0 = time.perf_counter()
        flat = embed_frames(frame[None], params, layout)
        last = bb.forward_streaming_step(flat, caches, params, bcfg, layout)
        times.append(time.perf_counter() - t0)
    if not np.all(np.isfinite(last.z_cls)):
        raise FloatingPointError("non-finite streaming output")
    n_bytes = (t_ctx * layout.per_frame * 2 * config.n_layers * config.d_model
               * params["patch_proj.w"].dtype.itemsize)
    return times[1:], n_bytes, last


def _bench_recompute(params, config, frames, t_ctx, reps):
    clip = frames[:t_ctx]
    h, w = frames.shape[1], frames.shape[2]
    layout = config.layout(t_ctx, h, w)
    bcfg = config.backbone()
    times = []
    last = None
    for _ in range(reps + 1):
        t0 = time.perf_counter()
        flat = embed_frames(clip, params, layout)
        last = bb.forward_full(_Tokens(flat, layout), params, bcfg)
        times.append(time.perf_counter() - t0)
    if not np.all(np.isfinite(last.z_cls)):
        raise FloatingPointError("non-finite recompute output")
    itemsize = params["patch_proj.w"].dtype.itemsize
    n = layout.n_total
    # transient activation estimate: score matrix plus q/k/v/out buffers
    n_bytes = (n * n + 4 * n * config.d_model) * itemsize
    return times[1:], n_bytes, last


class _Tokens:
    def __init__(self, flat, layout):
        self.flat = flat
        self.layout = layout


def _verify_during_bench(params, config, frames, t_ctx, reps, stream_out):
    # Reconstruct the exact frame sequence _bench_cache pushed: the context
    # prefix plus the warmup and timed pushes, which wrap around the source
    # pool.  stream_out is the step output for the final push.
    n = frames.shape[0]
    idx = list(range(t_ctx - 1)) + [(t_ctx - 1 + r) % n for r in range(reps + 1)]
    clip = frames[idx]
    layout = config.layout(len(idx), frames.shape[1], frames.shape[2])
    flat = embed_frames(clip, params, layout)
    full = bb.forward_full(_Tokens(flat, layout), params, config.backbone())
    return float(np.abs(stream_out.z_cls[0] - full.z_cls[-1]).max())


def cmd_bench(args) -> int:
    attn_mod.set_backend(args.backend)
    frames_list = sorted(set(args.frames))
    config = _bench_config(args)
    params = init_engine_params(config, seed=args.seed, dtype=np.float32)
    h = args.grid[0] * args.patch
    w = args.grid[1] * args.patch
    rng = np.random.default_rng(args.seed)
    n_source = min(max(frames_list) + args.reps, max(frames_list) + 8)
    frames = rng.random((n_source, h, w, 3), dtype=np.float32)

    modes = ["cache", "recompute"] if args.mode == "both" else [args.mode]
    rows = []
    for mode in modes:
        for t_ctx in frames_list:
            if mode == "cache":
                times, n_bytes, last = _bench_cache(params, config, frames,
                                                    t_ctx, args.reps)
            else:
                times, n_bytes, last = _bench_recompute(params, config, frames,
                                                        t_ctx, args.reps)
            if args.verify_during_bench and mode == "cache":
                dev = _verify_during_bench(params, config, frames, t_ctx,
                                           args.reps, last)
                if dev >= 1e-5:
                    print(f"verify-during-bench failed at T={t_ctx}: "
                          f"max|delta|={dev:.3e}", file=sys.stderr)
                    return EXIT_VERIFY_FAIL
            med, iqr = _median_iqr(times)
            rows.append((mode, t_ctx, med, iqr, n_bytes))
            print(f"{mode:9s} T={t_ctx:<4d} median={med:.6f}s "
                  f"iqr={iqr:.6f}s bytes={n_bytes}")

    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["mode", "T", "median_s", "iqr_s", "bytes"])
            for row in rows:
                writer.writerow([row[0], row[1], f"{row[2]:.9f}",
                                 f"{row[3]:.9f}", row[4]])
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_suite(args.suite, seed=args.seed, trials=args.trials)
    all_pass = True
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.name}: max|delta|={r.deviation:.3e}")
        all_pass = all_pass and r.passed
    return EXIT_OK if all_pass else EXIT_VERIFY_FAIL


def cmd_train_toy(args) -> int:
    config = config_load(args.config) if args.config else None
    weights = config.loss_weights if config else LossWeights()
    history = toy_train(args.steps, seed=args.seed, config=config,
                        weights=weights, lr=args.lr)
    columns = ["step", "total", "dino", "ibot", "koleo", "gram",
               "depth", "ray", "points", "camera", "caption"]
    if args.csv:
        with open(args.csv, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(columns)
            for i in range(len(history["step"])):
                writer.writerow(
                    [history["step"][i]]
                    + [f"{history[c][i]:.9f}" for c in columns[1:]])
    first, last = history["total"][0], history["total"][-1]
    print(f"steps={args.steps} first_total={first:.6f} last_total={last:.6f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="omnistream",
        description="Streaming vision-transformer benchmark and verification harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("bench", help="cache vs recompute latency benchmark")
    p_bench.add_argument("--frames", type=lambda s: [int(x) for x in s.split(",")],
                         default=[16, 32, 64], help="comma-separated context lengths")
    p_bench.add_argument("--grid", type=int, nargs=2, default=[10, 10],
                         metavar=("H", "W"), help="patch grid size")
    p_bench.add_argument("--dim", type=int, default=128)
    p_bench.add_argument("--heads", type=int, default=4)
    p_bench.add_argument("--layers", type=int, default=4)
    p_bench.add_argument("--patch", type=int, default=16)
    p_bench.add_argument("--mode", choices=["cache", "recompute", "both"],
                         default="both")
    p_bench.add_argument("--reps", type=int, default=3)
    p_bench.add_argument("--csv", type=str, default=None)
    p_bench.add_argument("--seed", type=int, default=0)
    p_bench.add_argument("--backend", choices=["auto", "cython", "python"],
                         default="auto")
    p_bench.add_argument("--verify-during-bench", action="store_true")
    p_bench.add_argument("--parallel", action="store_true",
                         help="allow intra-op BLAS parallelism")
    p_bench.set_defaults(fn=cmd_bench)

    p_verify = sub.add_parser("verify", help="run a property suite")
    p_verify.add_argument("suite", choices=sorted(SUITES))
    p_verify.add_argument("--seed", type=int, default=0)
    p_verify.add_argument("--trials", type=int, default=None)
    p_verify.set_defaults(fn=cmd_verify)

    p_train = sub.add_parser("train-toy", help="toy interleaved multi-task training")
    p_train.add_argument("--steps", type=int, default=200)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--config", type=str, default=None,
                         help="path to a JSON config file")
    p_train.add_argument("--csv", type=str, default=None)
    p_train.add_argument("--lr", type=float, default=0.08)
    p_train.set_defaults(fn=cmd_train_toy)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    if args.command == "bench" and args.reps < 1:
        print("--reps must be at least 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        with _limits(_thread_limit(getattr(args, "parallel", False))):
            return args.fn(args)
    except CapacityError as exc:
        print(f"capacity error: {exc}", file=sys.stderr)
        return EXIT_CAPACITY
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
