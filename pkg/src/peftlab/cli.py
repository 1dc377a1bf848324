"""Command-line front door: train, grad-check, count-params, bench, generate.

Exit codes: 0 success, 1 tolerance/benchmark failure, 2 configuration or
usage error, 3 runtime error (non-finite loss, I/O). Errors print one
machine-parseable line to stderr with the prefix "error:". Commands
validate everything before touching the filesystem, and only ever write
under their --out directory.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import checkpoint, circuits, model, qsim, trainkit
from .adapters import METHODS, UnknownMethod, count_trainable
from .model import ArchSpec
from .trainkit import ConfigError, IoError, NonFiniteLoss, RunConfig

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

# Arch presets for the parameter auditor. Published totals are passed
# through as-is; this toy backbone's own formula applies everywhere else.
PRESETS = {
    "gpt-neo-125m": {
        "arch": ArchSpec(
            vocab_size=50257,
            d_model=768,
            n_layers=12,
            n_heads=12,
            ffn_mult=4,
            max_seq_len=2048,
        ),
        "total_params": 125_198_592,
    },
    "desk": {"arch": model.DEFAULT_ARCH, "total_params": None},
}


def _fail(message: str, code: int) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


def _worker_count() -> int:
    raw = os.environ.get("PEFTLAB_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_run_config(args) -> RunConfig:
    config = trainkit.config_from_file(args.config)
    if args.method is not None:
        if args.method not in METHODS:
            raise ConfigError(
                f"unknown method {args.method!r}; expected one of {', '.join(METHODS)}"
            )
        config = config.replaced(method=args.method)
    if args.seed is not None:
        config = config.replaced(seed=args.seed)
    if args.out is not None:
        config = config.replaced(out_dir=args.out)
    if config.corpus is not None and not Path(config.corpus).is_file():
        raise ConfigError(f"corpus file not found: {config.corpus}")
    return config


def cmd_train(args) -> int:
    try:
        config = _load_run_config(args)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    try:
        rows = trainkit.run_experiment(config)
    except (NonFiniteLoss, IoError) as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    final = rows[-1].loss if rows else float("nan")
    print(
        f"method={config.method} steps={len(rows)} final_loss="
        f"{final:.6f} out={config.out_dir}"
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# grad-check
# ---------------------------------------------------------------------------


def _finite_diff_jacobian(spec, values, state, step=1e-5) -> np.ndarray:
    jac = np.empty((spec.n_qubits, spec.n_params))
    for j in range(spec.n_params):
        plus = values.copy()
        plus[j] += step
        minus = values.copy()
        minus[j] -= step
        z_p = circuits.expectations_batch(spec, plus, state.amps)
        z_m = circuits.expectations_batch(spec, minus, state.amps)
        jac[:, j] = (z_p - z_m) / (2.0 * step)
    return jac


def cmd_grad_check(args) -> int:
    if not 1 <= args.qubits <= 6:
        return _fail("qubits must be in [1, 6]", EXIT_CONFIG)
    if not 1 <= args.depth <= 4:
        return _fail("depth must be in [1, 4]", EXIT_CONFIG)
    if args.trials < 1:
        return _fail("trials must be >= 1", EXIT_CONFIG)

    rng = np.random.default_rng(args.seed)
    spec = circuits.CircuitSpec(args.qubits, args.depth)
    worst = (-1.0, None)  # (deviation, (trial, theta, i, j))
    for trial in range(args.trials):
        values = rng.uniform(-math.pi, math.pi, size=spec.n_params)
        x = rng.normal(size=1 << spec.n_qubits)
        state = qsim.amplitude_embed(
            x / np.linalg.norm(x), qsim.EmbedSpec.for_dim(1 << spec.n_qubits)
        )
        j_shift = circuits.parameter_shift_jacobian(spec, values, state)
        j_fd = _finite_diff_jacobian(spec, values, state)
        dev = np.abs(j_shift - j_fd)
        i, j = np.unravel_index(np.argmax(dev), dev.shape)
        if dev[i, j] > worst[0]:
            worst = (float(dev[i, j]), (trial, float(values[j]), int(i), int(j)))
    print(f"max |J_shift - J_fd| = {worst[0]:.3e} over {args.trials} circuits")
    if worst[0] >= args.tol:
        trial, theta, i, j = worst[1]
        return _fail(
            f"parameter-shift deviation {worst[0]:.3e} >= tol {args.tol:g} "
            f"(trial {trial}, theta_j={theta:.6f}, i={i}, j={j})",
            EXIT_FAIL,
        )
    return EXIT_OK


# ---------------------------------------------------------------------------
# count-params
# ---------------------------------------------------------------------------


def _resolve_arch(spec: str) -> tuple[ArchSpec, int | None]:
    if spec in PRESETS:
        preset = PRESETS[spec]
        return preset["arch"], preset["total_params"]
    path = Path(spec)
    if not path.is_file():
        raise ConfigError(
            f"unknown arch preset or file: {spec!r} "
            f"(presets: {', '.join(sorted(PRESETS))})"
        )
    import json

    try:
        raw = json.loads(path.read_text())
        arch = ArchSpec(**raw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad arch file {spec}: {exc}") from exc
    return arch, None


def format_count(count: int, ratio: float) -> str:
    return f"{count} ({ratio * 100.0:.2f}%)"


def cmd_count_params(args) -> int:
    try:
        arch, total = _resolve_arch(args.arch)
        if args.method not in METHODS:
            raise UnknownMethod(
                f"unknown method {args.method!r}; expected one of {', '.join(METHODS)}"
            )
        count, ratio = count_trainable(
            args.method,
            arch,
            rank=args.rank,
            prefix_len=args.prefix_len,
            depth=args.depth,
            multiplicity=args.multiplicity,
            total_params=total,
        )
    except (ConfigError, UnknownMethod, ValueError) as exc:
        return _fail(str(exc), EXIT_CONFIG)
    print(format_count(count, ratio))
    return EXIT_OK


# ---------------------------------------------------------------------------
# bench
# ---------------------------------------------------------------------------


def _bench_one(config: RunConfig):
    t0 = time.perf_counter()
    rows = trainkit.run_experiment(config)
    wall = time.perf_counter() - t0
    return rows, wall


def cmd_bench(args) -> int:
    methods = [m for m in args.methods.split(",") if m]
    seeds_raw = [s for s in args.seeds.split(",") if s]
    if not methods:
        return _fail("empty methods list", EXIT_CONFIG)
    if not seeds_raw:
        return _fail("empty seeds list", EXIT_CONFIG)
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        return _fail(
            f"unknown method(s) {', '.join(unknown)}; expected from "
            f"{', '.join(METHODS)}",
            EXIT_CONFIG,
        )
    try:
        seeds = [int(s) for s in seeds_raw]
    except ValueError:
        return _fail("seeds must be integers", EXIT_CONFIG)
    try:
        base = trainkit.config_from_file(args.config)
    except ConfigError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    out_root = Path(args.out) if args.out else Path(base.out_dir)

    jobs = []
    for method in methods:
        for seed in seeds:
            run_dir = out_root / f"{method}-seed{seed}"
            jobs.append(
                (method, seed, base.replaced(method=method, seed=seed, out_dir=str(run_dir)))
            )

    results: dict[tuple[str, int], tuple[list, float] | Exception] = {}

    def run_job(job):
        method, seed, config = job
        try:
            results[(method, seed)] = _bench_one(config)
        except Exception as exc:  # continue-and-report policy
            results[(method, seed)] = exc

    workers = _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_job, jobs))
    else:
        for job in jobs:
            run_job(job)

    failures = 0
    summary_lines = ["method,final_loss_mean,final_loss_std,trainable_params,wall_clock_s"]
    print(f"{'method':<8} {'final loss (mean±std)':<26} {'params':>10} {'wall s':>8}")
    for method in methods:
        finals, walls, params = [], [], None
        for seed in seeds:
            res = results[(method, seed)]
            if isinstance(res, Exception):
                failures += 1
                print(f"error: run {method} seed {seed} failed: {res}", file=sys.stderr)
                continue
            rows, wall = res
            if rows:
                finals.append(rows[-1].loss)
                params = rows[-1].trainable_params
            walls.append(wall)
        if finals:
            mean = float(np.mean(finals))
            std = float(np.std(finals))
            wall = float(np.mean(walls))
            summary_lines.append(f"{method},{mean!r},{std!r},{params},{wall:.3f}")
            print(f"{method:<8} {mean:>10.6f} ± {std:<12.6f} {params:>10} {wall:>8.2f}")
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "summary.csv").write_text("\n".join(summary_lines) + "\n")
    return EXIT_FAIL if failures else EXIT_OK


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    path = Path(args.checkpoint)
    if not path.is_file():
        return _fail(f"checkpoint not found: {path}", EXIT_CONFIG)
    if not args.prompt:
        return _fail("prompt must be non-empty", EXIT_CONFIG)
    try:
        backbone, adapters, _ = trainkit.restore_from_checkpoint(path)
    except checkpoint.CheckpointError as exc:
        return _fail(str(exc), EXIT_CONFIG)
    prompt = list(args.prompt.encode("utf-8"))
    if max(prompt) >= backbone.arch.vocab_size:
        return _fail("prompt contains bytes outside the model vocabulary", EXIT_CONFIG)
    try:
        tokens = model.generate(backbone, adapters, prompt, args.max_new_tokens)
    except model.SequenceTooLong as exc:
        return _fail(str(exc), EXIT_RUNTIME)
    print(bytes(tokens).decode("utf-8", errors="replace"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peftlab",
        description="Parameter-efficient fine-tuning laboratory with a quantum adapter.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run one training experiment")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--method", default=None, help=f"override method ({'|'.join(METHODS)})")
    p.add_argument("--seed", type=int, default=None, help="override seed")
    p.add_argument("--out", default=None, help="override output directory")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("grad-check", help="verify parameter-shift gradients")
    p.add_argument("--qubits", type=int, default=3)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--trials", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_grad_check)

    p = sub.add_parser("count-params", help="audit trainable-parameter counts")
    p.add_argument("--arch", default="gpt-neo-125m", help="preset name or arch JSON path")
    p.add_argument("--method", required=True)
    p.add_argument("--rank", type=int, default=8)
    p.add_argument("--prefix-len", dest="prefix_len", type=int, default=60)
    p.add_argument("--depth", type=int, default=2)
    p.add_argument("--multiplicity", type=int, default=1)
    p.set_defaults(fn=cmd_count_params)

    p = sub.add_parser("bench", help="cross-product of methods and seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--methods", default=",".join(METHODS))
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", default=None, help="output root (default: config out_dir)")
    p.set_defaults(fn=cmd_bench)

    p = sub.add_parser("generate", help="greedy decoding from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--max-new-tokens", dest="max_new_tokens", type=int, default=32)
    p.set_defaults(fn=cmd_generate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
