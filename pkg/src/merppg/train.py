"""Toy-scale supervised training: MSE loss, Adam, synthetic curriculum.

Gradients come from the in-repo reverse-mode tape (see autodiff); their
correctness is pinned by central finite differences in the test suite.
Training runs in float64 for gradient fidelity; checkpoints store float32.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .data import (
    HR_MAX_BPM,
    HR_MIN_BPM,
    BVPSignal,
    FrameTensor,
    SynthConfig,
    standardize,
    synth_clip,
    time_scale,
)
from .model import ModelConfig, ModelParams, forward_graph, init_model


class NonFiniteError(RuntimeError):
    """Raised when a training step produces a non-finite loss or gradient."""


@dataclass
class Batch:
    clips: np.ndarray    # (B, T, H, W, C)
    targets: np.ndarray  # (B, T)

    def __post_init__(self):
        if self.clips.ndim != 5 or self.targets.ndim != 2:
            raise ValueError("expected clips (B,T,H,W,C) and targets (B,T)")
        if self.clips.shape[:2] != self.targets.shape:
            raise ValueError("clips and targets disagree on (B, T)")
        if self.clips.shape[0] < 1:
            raise ValueError("batch must contain at least one clip")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_opt: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ModelParams, lr: float = 1e-3) -> "AdamState":
        return cls(
            lr=lr,
            m={k: np.zeros_like(t, dtype=np.float64) for k, t in params.tensors.items()},
            v={k: np.zeros_like(t, dtype=np.float64) for k, t in params.tensors.items()},
        )


def mse_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean over every element of the squared prediction error."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError("pred and target shapes differ")
    d = pred - target
    return float(np.mean(d * d))


def backward(params: ModelParams, batch: Batch) -> tuple[float, dict[str, np.ndarray]]:
    """MSE loss and its gradient for every parameter tensor.

    Deterministic for fixed inputs; aborts with diagnostics on non-finite
    values anywhere in the gradient.
    """
    out, pv = forward_graph(params, batch.clips.astype(np.float64))
    diff = out - ad.Var(batch.targets.astype(np.float64))
    loss = (diff * diff).mean()
    loss_val = float(loss.data)
    if not np.isfinite(loss_val):
        raise NonFiniteError(f"loss is {loss_val}")
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for name, var in pv.items():
        g = var.grad if var.grad is not None else np.zeros_like(var.data)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient in {name}")
        grads[name] = g
    return loss_val, grads


def adam_step(
    opt: AdamState, params: ModelParams, grads: dict[str, np.ndarray]
) -> tuple[AdamState, ModelParams]:
    """Standard bias-corrected Adam update (applied in place)."""
    opt.step += 1
    b1, b2 = opt.beta1, opt.beta2
    bc1 = 1.0 - b1**opt.step
    bc2 = 1.0 - b2**opt.step
    for name, g in grads.items():
        m = opt.m[name]
        v = opt.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / bc1) / (np.sqrt(v / bc2) + opt.eps_opt)
        params.tensors[name] -= opt.lr * update
    return opt, params


def grad_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))


# ---------------------------------------------------------------------------
# synthetic curriculum
# ---------------------------------------------------------------------------


def synth_dataset(
    n_clips: int,
    seed: int = 0,
    hr_range: tuple[float, float] = (45.0, 150.0),
    fps: float = 30.0,
    duration_s: float = 10.0,
    resolution: tuple[int, int] = (8, 8),
    noise_sigma: float = 0.0,
    jitter_px: int = 0,
    trend_slope: float = 0.0,
    augment_frac: float = 0.3,
    augment_factor_range: tuple[float, float] = (0.6, 1.8),
) -> list[tuple[FrameTensor, BVPSignal]]:
    """Base synthetic clips plus a time-scaled fraction covering 30-180 BPM.

    How per-clip scale factors are drawn is a free choice; they are sampled
    uniformly from `augment_factor_range`, clamped so the scaled heart rate
    stays inside [30, 180] BPM.
    """
    rng = np.random.default_rng(seed)
    clips: list[tuple[FrameTensor, BVPSignal]] = []
    hrs: list[float] = []
    for i in range(n_clips):
        hr = float(rng.uniform(*hr_range))
        cfg = SynthConfig(
            hr_bpm=hr,
            duration_s=duration_s,
            fps=fps,
            resolution=resolution,
            noise_sigma=noise_sigma,
            jitter_px=jitter_px,
            trend_slope=trend_slope,
            seed=int(rng.integers(0, 2**31)),
        )
        clips.append(synth_clip(cfg))
        hrs.append(hr)
    n_aug = int(round(augment_frac * n_clips))
    for _ in range(n_aug):
        idx = int(rng.integers(0, n_clips))
        lo = max(augment_factor_range[0], HR_MIN_BPM / hrs[idx])
        hi = min(augment_factor_range[1], HR_MAX_BPM / hrs[idx])
        factor = float(rng.uniform(lo, hi))
        clips.append(time_scale(clips[idx], factor))
    return clips


def slice_chunks(
    dataset: list[tuple[FrameTensor, BVPSignal]], chunk_len: int
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Standardize each clip's target, then cut non-overlapping chunks."""
    if not dataset:
        raise ValueError("empty dataset")
    min_len = min(frames.n_frames for frames, _ in dataset)
    if chunk_len > min_len:
        raise ValueError(f"chunk_len {chunk_len} exceeds shortest clip ({min_len})")
    if chunk_len < 2:
        raise ValueError("chunk_len must be >= 2")
    chunks = []
    for frames, bvp in dataset:
        target = standardize(bvp.samples)
        for s in range(0, frames.n_frames - chunk_len + 1, chunk_len):
            chunks.append(
                (frames.values[s : s + chunk_len], target[s : s + chunk_len])
            )
    return chunks


@dataclass
class TrainLogEntry:
    epoch: int
    step: int
    loss: float
    grad_norm: float
    wall_ms: float


def train_loop(
    cfg: ModelConfig,
    dataset: list[tuple[FrameTensor, BVPSignal]],
    epochs: int = 20,
    chunk_len: int = 150,
    batch_size: int = 32,
    lr: float = 1e-3,
    seed: int = 0,
    params: ModelParams | None = None,
    opt: AdamState | None = None,
    log_cb=None,
) -> tuple[ModelParams, list[TrainLogEntry]]:
    """Chunked, shuffled MSE training; deterministic for a fixed seed.

    Resuming is supported by passing back the params/opt of a previous run.
    """
    chunks = slice_chunks(dataset, chunk_len)
    if params is None:
        params = init_model(cfg)
    params = params.astype(np.float64)
    if opt is None:
        opt = AdamState.for_params(params, lr=lr)
    rng = np.random.default_rng(seed)
    log: list[TrainLogEntry] = []
    for epoch in range(epochs):
        order = rng.permutation(len(chunks))
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            clips = np.stack([chunks[i][0] for i in idx]).astype(np.float64)
            targets = np.stack([chunks[i][1] for i in idx])
            batch = Batch(clips=clips, targets=targets)
            t0 = time.perf_counter()
            loss, grads = backward(params, batch)
            opt, params = adam_step(opt, params, grads)
            entry = TrainLogEntry(
                epoch=epoch,
                step=opt.step,
                loss=loss,
                grad_norm=grad_norm(grads),
                wall_ms=(time.perf_counter() - t0) * 1e3,
            )
            log.append(entry)
            if log_cb is not None:
                log_cb(entry)
    return params, log


def write_train_log(path, log: list[TrainLogEntry]) -> None:
    lines = ["epoch,step,loss,grad_norm,wall_ms"]
    lines.extend(
        f"{e.epoch},{e.step},{e.loss:.9g},{e.grad_norm:.9g},{e.wall_ms:.3f}"
        for e in log
    )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# finite-difference oracle
# ---------------------------------------------------------------------------


def finite_difference_check(
    params: ModelParams,
    batch: Batch,
    fd_step: float = 1e-5,
    names: list[str] | None = None,
) -> dict[str, float]:
    """Max relative error of analytic vs central-difference gradients.

    Exhaustive over every scalar parameter; intended for tiny configs.
    """
    params = params.astype(np.float64)
    _, grads = backward(params, batch)

    def loss_at() -> float:
        with ad.no_grad():
            out, _ = forward_graph(params, batch.clips.astype(np.float64))
        return mse_loss(out.data, batch.targets)

    report: dict[str, float] = {}
    for name in names if names is not None else sorted(params.tensors):
        tensor = params.tensors[name]
        worst = 0.0
        flat = tensor.reshape(-1)
        gflat = grads[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + fd_step
            up = loss_at()
            flat[j] = orig - fd_step
            down = loss_at()
            flat[j] = orig
            numeric = (up - down) / (2.0 * fd_step)
            denom = max(abs(numeric), abs(gflat[j]), 1e-10)
            worst = max(worst, abs(numeric - gflat[j]) / denom)
        report[name] = worst
    return report
