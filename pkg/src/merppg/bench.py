"""Empirical checks of the efficiency story: latency, memory scaling, FLOPs.

Memory is measured through the package's allocation accounting (every model
buffer passes through one tracked allocator), not OS RSS: allocation volume
is deterministic across platforms, while resident-set numbers depend on the
allocator and GC timing. Latency benchmarks disable the cyclic GC and pin
work to the calling thread.
"""

from __future__ import annotations

import gc
import time
from dataclasses import dataclass

import numpy as np

from . import alloc
from .model import (
    ModelConfig,
    ModelParams,
    ModelState,
    flow_init,
    forward_chunk,
    forward_flow_step,
    param_count,
    param_nbytes,
    state_bytes,
)

_WARMUP_FRAMES = 100


@dataclass(frozen=True)
class LatencyReport:
    n_frames: int
    median_ms: float
    p99_ms: float
    mean_ms: float
    slope_ns_per_frame: float
    slope_se_ns: float
    state_bytes: int
    step_alloc_bytes: int

    @property
    def drift_fraction(self) -> float:
        """Predicted latency change across the whole stream, vs the median."""
        total_drift_ms = abs(self.slope_ns_per_frame) * self.n_frames / 1e6
        return total_drift_ms / self.median_ms


@dataclass(frozen=True)
class MemoryCurve:
    lens: tuple[int, ...]
    alloc_bytes: tuple[int, ...]
    slope: float
    intercept: float
    r_squared: float


def _ols_slope(x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """Least-squares slope and its standard error."""
    x = x - x.mean()
    sxx = float((x * x).sum())
    slope = float((x * y).sum() / sxx)
    resid = y - y.mean() - slope * x
    dof = max(len(x) - 2, 1)
    se = float(np.sqrt((resid * resid).sum() / dof / sxx))
    return slope, se


def bench_flow(
    params: ModelParams,
    stream_len: int = 2000,
    seed: int = 0,
    state: ModelState | None = None,
) -> LatencyReport:
    """Per-frame wall time over a synthetic stream, after 100 warm-up frames."""
    cfg = params.cfg
    rng = np.random.default_rng(seed)
    dtype = params.tensors["head.w"].dtype
    pool = rng.uniform(0.0, 1.0, size=(16,) + cfg.input_resolution + (3,)).astype(dtype)
    if state is None:
        state = flow_init(params)
    for i in range(_WARMUP_FRAMES):
        state, _ = forward_flow_step(params, state, pool[i % 16])

    with alloc.metered() as meter:
        state, _ = forward_flow_step(params, state, pool[0])
    step_alloc = meter.total_bytes

    times_ns = np.empty(stream_len)
    gc_was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(stream_len):
            t0 = time.perf_counter_ns()
            state, _ = forward_flow_step(params, state, pool[i % 16])
            times_ns[i] = time.perf_counter_ns() - t0
    finally:
        if gc_was_enabled:
            gc.enable()

    slope, se = _ols_slope(np.arange(stream_len, dtype=np.float64), times_ns)
    return LatencyReport(
        n_frames=stream_len,
        median_ms=float(np.median(times_ns)) / 1e6,
        p99_ms=float(np.percentile(times_ns, 99)) / 1e6,
        mean_ms=float(times_ns.mean()) / 1e6,
        slope_ns_per_frame=slope,
        slope_se_ns=se,
        state_bytes=state_bytes(state),
        step_alloc_bytes=step_alloc,
    )


def chunk_alloc_bytes(params: ModelParams, t_len: int, seed: int = 0) -> int:
    """Bytes allocated by one chunk forward of t_len frames."""
    rng = np.random.default_rng(seed)
    frames = rng.uniform(
        0.0, 1.0, size=(t_len,) + params.cfg.input_resolution + (3,)
    ).astype(np.float32)
    with alloc.metered() as meter:
        forward_chunk(params, frames)
    return meter.total_bytes


def flow_alloc_bytes(params: ModelParams, n_steps: int, seed: int = 0) -> int:
    """Bytes allocated by n_steps flow steps (state excluded, as it is reused)."""
    rng = np.random.default_rng(seed)
    frame = rng.uniform(0.0, 1.0, size=params.cfg.input_resolution + (3,)).astype(
        np.float32
    )
    state = flow_init(params)
    state, _ = forward_flow_step(params, state, frame)
    with alloc.metered() as meter:
        for _ in range(n_steps):
            state, _ = forward_flow_step(params, state, frame)
    return meter.total_bytes


def bench_chunk_memory(
    params: ModelParams, lens: tuple[int, ...] = (160, 320, 640, 1280, 1800)
) -> MemoryCurve:
    """Fit allocation volume of chunk forwards against segment length."""
    measured = tuple(chunk_alloc_bytes(params, t) for t in lens)
    x = np.asarray(lens, dtype=np.float64)
    y = np.asarray(measured, dtype=np.float64)
    slope, _ = _ols_slope(x, y)
    intercept = float(y.mean() - slope * x.mean())
    pred = intercept + slope * x
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return MemoryCurve(
        lens=tuple(lens),
        alloc_bytes=measured,
        slope=slope,
        intercept=intercept,
        r_squared=r2,
    )


def flops_estimate(cfg: ModelConfig) -> int:
    """Analytic per-frame floating-point operations (multiply-adds x 2).

    Counts the conv encoder (per output position: 9*C_in MACs per channel),
    the feature projection, and per block the mixing projections, the
    selective parameter maps, the state update/readout (3*N*D), and the
    output head. Elementwise activations are counted once per value.
    """
    h, w = cfg.input_resolution
    total_macs = 0
    c_in = 3
    for c_out in cfg.encoder_channels:
        total_macs += h * w * 9 * c_in * c_out
        total_macs += h * w * c_out  # activation + pooling passes
        h, w = h // 2, w // 2
        c_in = c_out
    d, n, heads = cfg.feature_dim, cfg.state_dim, cfg.n_heads
    total_macs += c_in * d
    per_block = d * d  # input mix
    if cfg.selective:
        per_block += d * heads + 2 * d * n
    per_block += 4 * heads * n       # discretization
    per_block += 3 * n * d           # state drive, decay, readout
    per_block += d * d               # output mix
    total_macs += cfg.n_blocks * per_block
    total_macs += d  # head
    return int(2 * total_macs)


def efficiency_rows(params: ModelParams, flow: LatencyReport) -> dict[str, float]:
    return {
        "params_k": param_count(params) / 1e3,
        "weights_mb": param_nbytes(params) / 1e6,
        "state_kb": flow.state_bytes / 1e3,
        "step_alloc_mb": flow.step_alloc_bytes / 1e6,
        "latency_ms": flow.median_ms,
        "p99_ms": flow.p99_ms,
        "gflops": flops_estimate(params.cfg) / 1e9,
    }


def efficiency_csv(rows: dict[str, float]) -> str:
    keys = list(rows)
    return ",".join(keys) + "\n" + ",".join(f"{rows[k]:.6g}" for k in keys) + "\n"


def efficiency_table(rows: dict[str, float]) -> str:
    return (
        f"{'Params (K)':>12} {'Weights (MB)':>13} {'State (KB)':>11} "
        f"{'Latency (ms)':>13} {'FLOPs (G)':>10}\n"
        f"{rows['params_k']:>12.1f} {rows['weights_mb']:>13.2f} "
        f"{rows['state_kb']:>11.2f} {rows['latency_ms']:>13.3f} "
        f"{rows['gflops']:>10.4f}\n"
    )
