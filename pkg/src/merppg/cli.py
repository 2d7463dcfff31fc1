"""Command-line surface: synth / train / infer / eval / bench.

All commands are plain-file in, plain-file out, and deterministic given an
explicit --seed. Exit codes: 0 success, 2 usage error, 3 file-format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import signal as sig
from .data import (
    BVPSignal,
    FormatError,
    FrameTensor,
    SynthConfig,
    read_signal,
    read_tensor,
    synth_clip,
    write_signal,
    write_tensor,
)
from .model import (
    ModelConfig,
    flow_init,
    forward_chunk,
    forward_flow_step,
    init_model,
    load_checkpoint,
    param_count,
    save_checkpoint,
)
from .train import (
    AdamState,
    NonFiniteError,
    train_loop,
    write_train_log,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FORMAT = 3
EXIT_NUMERIC = 4


def _default_threads() -> int:
    return int(os.environ.get("ME_RPPG_THREADS", "1"))


def parse_model_config(path: str | Path) -> ModelConfig:
    """Flat key=value model config; '#' starts a comment."""
    kv: dict[str, str] = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()

    def ints(s: str) -> tuple[int, ...]:
        return tuple(int(x) for x in s.split(",") if x)

    converters = {
        "input_resolution": ints,
        "encoder_channels": ints,
        "n_blocks": int,
        "feature_dim": int,
        "state_dim": int,
        "n_heads": int,
        "tn_alpha": float,
        "tn_eps": float,
        "selective": lambda s: s.lower() in ("1", "true", "yes"),
        "seed": int,
    }
    fields = {}
    for key, value in kv.items():
        if key not in converters:
            raise ValueError(f"{path}: unknown config key {key!r}")
        fields[key] = converters[key](value)
    cfg = ModelConfig(**fields)
    cfg.validate()
    return cfg


def load_dataset_dir(root: str | Path) -> list[tuple[FrameTensor, BVPSignal]]:
    root = Path(root)
    if not root.is_dir():
        raise ValueError(f"data directory {root} does not exist")
    clips = []
    for tensor_path in sorted(root.glob("*.metr")):
        sig_path = tensor_path.with_suffix(".csv")
        if not sig_path.exists():
            raise FormatError(f"{tensor_path} has no paired signal {sig_path}")
        bvp = read_signal(sig_path)
        clips.append((read_tensor(tensor_path, fps=bvp.fps), bvp))
    if not clips:
        raise ValueError(f"no .metr clips found under {root}")
    return clips


# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    lo, hi = (float(x) for x in args.hr_range.split(","))
    if not (30.0 <= lo <= hi <= 180.0):
        raise ValueError(f"--hr-range {args.hr_range} outside [30, 180]")
    h, w = (int(x) for x in args.res.split("x"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    manifest = []
    for i in range(args.clips):
        cfg = SynthConfig(
            hr_bpm=float(rng.uniform(lo, hi)),
            duration_s=args.duration,
            fps=args.fps,
            resolution=(h, w),
            pulse_amplitude=args.amplitude,
            noise_sigma=args.noise,
            trend_slope=args.trend,
            harmonic_ratio=args.harmonic,
            jitter_px=args.jitter,
            seed=int(rng.integers(0, 2**31)),
        )
        frames, bvp = synth_clip(cfg)
        stem = f"clip_{i:04d}"
        write_tensor(out / f"{stem}.metr", frames)
        write_signal(out / f"{stem}.csv", bvp)
        fields = " ".join(
            f"{k}={v[0]}x{v[1]}" if k == "resolution" else f"{k}={v:.9g}"
            if isinstance(v, float)
            else f"{k}={v}"
            for k, v in asdict(cfg).items()
        )
        manifest.append(f"{stem} {fields}")
    (out / "manifest.txt").write_text("\n".join(manifest) + "\n")
    print(f"wrote {args.clips} clips to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    dataset = load_dataset_dir(args.data)
    if args.resume:
        params, extra, meta = load_checkpoint(args.resume)
        cfg = params.cfg
        params = params.astype(np.float64)
        opt = AdamState.for_params(params, lr=args.lr)
        for name in params.tensors:
            if f"adam.m.{name}" in extra:
                opt.m[name] = extra[f"adam.m.{name}"].astype(np.float64)
                opt.v[name] = extra[f"adam.v.{name}"].astype(np.float64)
        opt.step = int(meta.get("train_step", "0"))
    else:
        cfg = parse_model_config(args.config) if args.config else ModelConfig(seed=args.seed)
        params = init_model(cfg).astype(np.float64)
        opt = AdamState.for_params(params, lr=args.lr)

    def report(entry):
        print(
            f"epoch {entry.epoch:3d} step {entry.step:5d} "
            f"loss {entry.loss:.5f} |g| {entry.grad_norm:.3f} "
            f"{entry.wall_ms:.0f} ms"
        )

    params, log = train_loop(
        cfg,
        dataset,
        epochs=args.epochs,
        chunk_len=args.chunk_len,
        batch_size=args.batch_size,
        lr=args.lr,
        seed=args.seed,
        params=params,
        opt=opt,
        log_cb=report if args.verbose else None,
    )
    extra = {}
    for name in params.tensors:
        extra[f"adam.m.{name}"] = opt.m[name]
        extra[f"adam.v.{name}"] = opt.v[name]
    save_checkpoint(
        args.out,
        params,
        extra=extra,
        meta={"train_step": str(opt.step)},
    )
    log_path = args.log or (str(args.out) + ".log.csv")
    write_train_log(log_path, log)
    print(f"checkpoint: {args.out} ({param_count(params)} params), log: {log_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    params, _, _ = load_checkpoint(args.ckpt)
    sig_path = Path(args.video).with_suffix(".csv")
    fps = args.fps
    if fps is None:
        fps = read_signal(sig_path).fps if sig_path.exists() else 30.0
    frames = read_tensor(args.video, fps=fps)
    if args.mode == "chunk":
        bvp = forward_chunk(params, frames)
    else:
        state = flow_init(params)
        values = np.empty(frames.n_frames)
        for t in range(frames.n_frames):
            state, values[t] = forward_flow_step(params, state, frames.values[t])
        bvp = BVPSignal(samples=values, fps=fps)
    if not np.isfinite(bvp.samples).all():
        raise NonFiniteError("inference produced non-finite output")
    write_signal(args.out, bvp)
    est = sig.estimate_hr(bvp)
    print(
        f"mode={args.mode} frames={frames.n_frames} hr_bpm={est.bpm:.1f} "
        f"peak_power_ratio={est.peak_power_ratio:.3f}"
    )
    return EXIT_OK


def _predict_clip(params, frames: FrameTensor, mode: str) -> np.ndarray:
    if mode == "chunk":
        return forward_chunk(params, frames).samples
    state = flow_init(params)
    out = np.empty(frames.n_frames)
    for t in range(frames.n_frames):
        state, out[t] = forward_flow_step(params, state, frames.values[t])
    return out


def cmd_eval(args) -> int:
    params, _, _ = load_checkpoint(args.ckpt)
    dataset = load_dataset_dir(args.data)
    lens = tuple(int(x) for x in args.test_chunk_lens.split(","))
    modes = ["chunk", "flow"] if args.mode == "both" else [args.mode]
    threads = args.threads or _default_threads()

    rows: dict[str, sig.MetricReport] = {}
    for mode in modes:
        if threads > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                preds = list(
                    pool.map(lambda c: _predict_clip(params, c[0], mode), dataset)
                )
        else:
            preds = [_predict_clip(params, frames, mode) for frames, _ in dataset]
        for chunk_len in lens:
            pred_hr, true_hr = [], []
            for (frames, bvp), pred in zip(dataset, preds):
                fps = frames.fps
                for s in range(0, frames.n_frames - chunk_len + 1, chunk_len):
                    seg_pred = pred[s : s + chunk_len]
                    seg_true = bvp.samples[s : s + chunk_len]
                    pred_hr.append(
                        sig.estimate_hr(BVPSignal(samples=seg_pred, fps=fps)).bpm
                    )
                    true_hr.append(
                        sig.estimate_hr(BVPSignal(samples=seg_true, fps=fps)).bpm
                    )
            if not pred_hr:
                raise ValueError(f"test chunk length {chunk_len} exceeds every clip")
            rows[f"{mode}_{chunk_len}"] = sig.metrics(pred_hr, true_hr)

    table = sig.metrics_table(rows)
    print(table, end="")
    if args.report:
        Path(args.report).write_text(sig.metrics_csv(rows))
        Path(str(args.report) + ".txt").write_text(table)
        print(f"report: {args.report}")
    return EXIT_OK


def cmd_bench(args) -> int:
    params, _, _ = load_checkpoint(args.ckpt)
    if args.mode == "flow":
        rep = bench_mod.bench_flow(params, stream_len=args.frames)
        rows = bench_mod.efficiency_rows(params, rep)
        print(bench_mod.efficiency_table(rows), end="")
        print(
            f"p99 {rep.p99_ms:.3f} ms, latency slope {rep.slope_ns_per_frame:.2f} "
            f"+- {rep.slope_se_ns:.2f} ns/frame, state {rep.state_bytes} B, "
            f"step alloc {rep.step_alloc_bytes} B"
        )
        if args.out:
            Path(args.out).write_text(bench_mod.efficiency_csv(rows))
    else:
        curve = bench_mod.bench_chunk_memory(params)
        print("chunk-length vs allocated bytes:")
        for t, b in zip(curve.lens, curve.alloc_bytes):
            print(f"  T={t:5d}  {b / 1e6:10.2f} MB")
        print(
            f"affine fit: {curve.slope / 1e3:.1f} KB/frame + "
            f"{curve.intercept / 1e6:.2f} MB, R^2 = {curve.r_squared:.5f}"
        )
        if args.out:
            lines = ["t,alloc_bytes"] + [
                f"{t},{b}" for t, b in zip(curve.lens, curve.alloc_bytes)
            ]
            Path(args.out).write_text("\n".join(lines) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="merppg",
        description="Streaming pulse extraction: synth, train, infer, eval, bench.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic clip dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--clips", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hr-range", default="45,150")
    p.add_argument("--fps", type=float, default=30.0)
    p.add_argument("--duration", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--jitter", type=int, default=0)
    p.add_argument("--trend", type=float, default=0.0)
    p.add_argument("--amplitude", type=float, default=0.05)
    p.add_argument("--harmonic", type=float, default=0.3)
    p.add_argument("--res", default="32x32", help="frame resolution WxH")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a synthetic dataset directory")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="model config file (key=value lines)")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--chunk-len", type=int, default=150)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--log", help="training log CSV (default <out>.log.csv)")
    p.add_argument("--verbose", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="run one clip through the model")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--video", required=True, help="tensor container file")
    p.add_argument("--mode", choices=("chunk", "flow"), default="chunk")
    p.add_argument("--out", required=True, help="output pulse CSV")
    p.add_argument("--fps", type=float, default=None)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="metric grid over test chunk lengths")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--test-chunk-lens", default="160,320")
    p.add_argument("--mode", choices=("chunk", "flow", "both"), default="chunk")
    p.add_argument("--report", help="output CSV path")
    p.add_argument("--threads", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="latency / memory benchmarks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--mode", choices=("flow", "chunk"), default="flow")
    p.add_argument("--frames", type=int, default=2000)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FormatError as exc:
        print(f"format error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
