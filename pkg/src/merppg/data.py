"""Frame/signal containers, synthetic pulsatile clips, and file formats.

The synthetic generator stands in for real facial video: each clip is a
spatially smooth texture whose colour oscillates with a pulse waveform
(fundamental plus one harmonic), optionally corrupted by global drift,
Gaussian pixel noise, and per-frame integer jitter. The pulse is injected
mostly into the green channel, mimicking hemoglobin absorption ordering.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

HR_MIN_BPM = 30.0
HR_MAX_BPM = 180.0

# Fraction of the pulse injected per colour channel (R, G, B).
PULSE_CHANNEL_WEIGHTS = np.array([0.2, 0.7, 0.1])

MAGIC = b"METR"
CONTAINER_VERSION = 1
DTYPE_F32 = 0
_MAX_RANK = 8


class FormatError(Exception):
    """Raised when an on-disk artifact does not match its declared format."""


@dataclass(frozen=True)
class FrameTensor:
    """A (T, H, W, C) stack of video frames with values in [0, 1]."""

    values: np.ndarray
    fps: float

    def __post_init__(self):
        v = self.values
        if v.ndim != 4:
            raise ValueError(f"frames must be (T, H, W, C), got shape {v.shape}")
        if v.shape[0] < 1:
            raise ValueError("frame tensor needs at least one frame")
        if not np.isfinite(v).all():
            raise ValueError("frame tensor contains non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.values.shape

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class BVPSignal:
    """Per-frame scalar blood-volume-pulse series."""

    samples: np.ndarray
    fps: float

    def __post_init__(self):
        s = self.samples
        if s.ndim != 1 or s.shape[0] < 1:
            raise ValueError("signal must be a non-empty 1-D array")
        if not np.isfinite(s).all():
            raise ValueError("signal contains non-finite values")
        if self.fps <= 0:
            raise ValueError("fps must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]


@dataclass(frozen=True)
class SynthConfig:
    """Generator settings for one synthetic clip."""

    hr_bpm: float = 72.0
    duration_s: float = 10.0
    fps: float = 30.0
    resolution: tuple[int, int] = (32, 32)
    pulse_amplitude: float = 0.05
    noise_sigma: float = 0.0
    trend_slope: float = 0.0
    harmonic_ratio: float = 0.3
    jitter_px: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not (HR_MIN_BPM <= self.hr_bpm <= HR_MAX_BPM):
            raise ValueError(
                f"hr_bpm={self.hr_bpm} outside [{HR_MIN_BPM}, {HR_MAX_BPM}]"
            )
        if self.fps <= 2.0 * self.hr_bpm / 60.0:
            raise ValueError(
                f"fps={self.fps} violates Nyquist for hr_bpm={self.hr_bpm}"
            )
        if self.duration_s <= 0:
            raise ValueError("duration_s must be positive")
        h, w = self.resolution
        if h < 1 or w < 1:
            raise ValueError("resolution must be at least 1x1")
        if self.pulse_amplitude < 0 or self.noise_sigma < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.jitter_px < 0:
            raise ValueError("jitter_px must be non-negative")


def standardize(x: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance copy of a 1-D series."""
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd == 0.0:
        return x - x.mean()
    return (x - x.mean()) / sd


def pulse_waveform(cfg: SynthConfig) -> np.ndarray:
    """Ground-truth pulse: fundamental plus one harmonic at pi/4 phase."""
    n = int(round(cfg.duration_s * cfg.fps))
    t = np.arange(1, n + 1) / cfg.fps
    f = cfg.hr_bpm / 60.0
    return np.sin(2.0 * np.pi * f * t) + cfg.harmonic_ratio * np.sin(
        4.0 * np.pi * f * t + np.pi / 4.0
    )


def _smooth_base(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Spatially smooth skin-like base pattern in [0.35, 0.65], (H, W, 3)."""
    gh, gw = max(2, h // 4), max(2, w // 4)
    coarse = rng.uniform(0.35, 0.65, size=(gh, gw, 3))
    ys = np.linspace(0, gh - 1, h)
    xs = np.linspace(0, gw - 1, w)
    y0 = np.minimum(ys.astype(int), gh - 2)
    x0 = np.minimum(xs.astype(int), gw - 2)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    c00 = coarse[y0][:, x0]
    c01 = coarse[y0][:, x0 + 1]
    c10 = coarse[y0 + 1][:, x0]
    c11 = coarse[y0 + 1][:, x0 + 1]
    top = c00 * (1 - fx) + c01 * fx
    bot = c10 * (1 - fx) + c11 * fx
    return top * (1 - fy) + bot * fy


def synth_clip(cfg: SynthConfig) -> tuple[FrameTensor, BVPSignal]:
    """Generate one synthetic clip and its ground-truth pulse.

    Deterministic for a fixed seed. Rejects configs whose composition would
    push more than 1% of pixel values outside [0, 1].
    """
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    h, w = cfg.resolution
    n = int(round(cfg.duration_s * cfg.fps))
    if n < 2:
        raise ValueError("clip must span at least 2 frames")

    pulse = pulse_waveform(cfg)
    base = _smooth_base(rng, h, w)

    if cfg.jitter_px > 0:
        shifts = rng.integers(-cfg.jitter_px, cfg.jitter_px + 1, size=(n, 2))
    else:
        shifts = np.zeros((n, 2), dtype=int)

    frames = np.empty((n, h, w, 3), dtype=np.float64)
    t_idx = np.arange(1, n + 1)
    for t in range(n):
        pattern = base
        dy, dx = shifts[t]
        if dy or dx:
            pattern = np.roll(np.roll(base, dy, axis=0), dx, axis=1)
        frames[t] = pattern + cfg.pulse_amplitude * pulse[t] * PULSE_CHANNEL_WEIGHTS
    frames += cfg.trend_slope * t_idx[:, None, None, None]
    if cfg.noise_sigma > 0:
        frames += rng.normal(0.0, cfg.noise_sigma, size=frames.shape)

    clipped_frac = np.mean((frames < 0.0) | (frames > 1.0))
    if clipped_frac > 0.01:
        raise ValueError(
            f"config clips {clipped_frac:.1%} of pixels (>1%); reduce "
            "amplitude, trend, or noise"
        )
    frames = np.clip(frames, 0.0, 1.0).astype(np.float32)

    bvp = BVPSignal(samples=standardize(pulse), fps=cfg.fps)
    return FrameTensor(values=frames, fps=cfg.fps), bvp


def _dominant_bpm(samples: np.ndarray, fps: float) -> float:
    """Dominant in-band frequency of a pulse series, in BPM.

    Local zero-padded periodogram peak; only used for augmentation-range
    validation, so a plain rfft is enough.
    """
    n = len(samples)
    nfft = max(4096, 4 * n)
    spec = np.abs(np.fft.rfft(samples - samples.mean(), n=nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fps)
    band = (freqs >= 0.3) & (freqs <= 4.0)
    if not band.any() or spec[band].max() == 0.0:
        raise ValueError("signal has no in-band spectral content")
    return 60.0 * freqs[band][np.argmax(spec[band])]


def time_scale(
    clip: tuple[FrameTensor, BVPSignal], factor: float
) -> tuple[FrameTensor, BVPSignal]:
    """Resample a clip in time, multiplying its effective heart rate.

    Frames and pulse are linearly interpolated onto round(T/factor) samples;
    fps is unchanged, so the pulse plays back `factor` times faster.
    """
    frames, bvp = clip
    if not (0.2 <= factor <= 5.0):
        raise ValueError(f"factor={factor} outside [0.2, 5]")
    scaled_bpm = _dominant_bpm(bvp.samples, bvp.fps) * factor
    if not (HR_MIN_BPM <= scaled_bpm <= HR_MAX_BPM):
        raise ValueError(
            f"scaled HR {scaled_bpm:.1f} BPM outside [{HR_MIN_BPM}, {HR_MAX_BPM}]"
        )

    t = frames.n_frames
    t_out = int(round(t / factor))
    if t_out < 2:
        raise ValueError("scaled clip would be shorter than 2 frames")
    src = np.linspace(0.0, t - 1, t_out)
    i0 = np.minimum(src.astype(int), t - 2)
    frac = src - i0

    fv = frames.values.astype(np.float64)
    wts = frac[:, None, None, None]
    new_frames = (1.0 - wts) * fv[i0] + wts * fv[i0 + 1]
    new_bvp = (1.0 - frac) * bvp.samples[i0] + frac * bvp.samples[i0 + 1]

    return (
        FrameTensor(values=new_frames.astype(np.float32), fps=frames.fps),
        BVPSignal(samples=standardize(new_bvp), fps=bvp.fps),
    )


def scaled_config(cfg: SynthConfig, factor: float) -> SynthConfig:
    """Provenance record for a time-scaled clip (duration and HR updated)."""
    return replace(cfg, hr_bpm=cfg.hr_bpm * factor, duration_s=cfg.duration_s / factor)


# ---------------------------------------------------------------------------
# Tensor container: magic | version u32 | rank u32 | dims u64[rank]
#                   | dtype u32 (0 = float32) | row-major little-endian data
# ---------------------------------------------------------------------------


def write_array(path: str | Path, arr: np.ndarray) -> None:
    """Write a float32 array in the tensor container format."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if arr.ndim < 1 or arr.ndim > _MAX_RANK:
        raise ValueError(f"rank {arr.ndim} outside [1, {_MAX_RANK}]")
    if arr.size == 0:
        raise ValueError("refusing to write an empty tensor")
    if not np.isfinite(arr).all():
        raise ValueError("refusing to write non-finite values")
    header = MAGIC + struct.pack("<II", CONTAINER_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(arr.tobytes())


def read_array(path: str | Path) -> np.ndarray:
    """Read a float32 array written by :func:`write_array`."""
    blob = Path(path).read_bytes()
    return decode_array(blob, name=str(path))


def decode_array(blob: bytes, name: str = "<bytes>") -> np.ndarray:
    if len(blob) < 12:
        raise FormatError(f"{name}: truncated header")
    if blob[:4] != MAGIC:
        raise FormatError(f"{name}: bad magic {blob[:4]!r}")
    version, rank = struct.unpack_from("<II", blob, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"{name}: unsupported version {version}")
    if not (1 <= rank <= _MAX_RANK):
        raise FormatError(f"{name}: implausible rank {rank}")
    offset = 12
    if len(blob) < offset + 8 * rank + 4:
        raise FormatError(f"{name}: truncated dimension table")
    dims = struct.unpack_from(f"<{rank}Q", blob, offset)
    offset += 8 * rank
    (dtype_code,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    if dtype_code != DTYPE_F32:
        raise FormatError(f"{name}: unknown dtype code {dtype_code}")
    count = int(np.prod(dims, dtype=np.uint64))
    expected = offset + 4 * count
    if len(blob) != expected:
        raise FormatError(
            f"{name}: payload is {len(blob) - offset} bytes, expected {4 * count}"
        )
    arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
    arr = arr.reshape(dims).copy()
    if not np.isfinite(arr).all():
        raise FormatError(f"{name}: payload contains non-finite values")
    return arr


def encode_array(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    header = MAGIC + struct.pack("<II", CONTAINER_VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    header += struct.pack("<I", DTYPE_F32)
    return header + arr.tobytes()


def write_tensor(path: str | Path, frames: FrameTensor) -> None:
    write_array(path, frames.values)


def read_tensor(path: str | Path, fps: float = 30.0) -> FrameTensor:
    """Read a frame tensor.

    The container carries no sampling rate; callers supply fps from the
    clip's manifest or paired signal file (default 30).
    """
    arr = read_array(path)
    if arr.ndim != 4:
        raise FormatError(f"{path}: expected rank-4 frame tensor, got rank {arr.ndim}")
    return FrameTensor(values=arr, fps=fps)


# ---------------------------------------------------------------------------
# Signal CSV: `# fps=<float>` header, one decimal sample per line
# ---------------------------------------------------------------------------


def write_signal(path: str | Path, sig: BVPSignal) -> None:
    lines = [f"# fps={sig.fps:.9g}"]
    lines.extend(f"{v:.9g}" for v in sig.samples)
    Path(path).write_text("\n".join(lines) + "\n")


def read_signal(path: str | Path) -> BVPSignal:
    text = Path(path).read_text()
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("# fps="):
        raise FormatError(f"{path}: missing '# fps=' header")
    try:
        fps = float(lines[0][len("# fps=") :])
    except ValueError as exc:
        raise FormatError(f"{path}: malformed fps header") from exc
    samples = np.empty(len(lines) - 1, dtype=np.float64)
    for i, ln in enumerate(lines[1:]):
        try:
            samples[i] = float(ln)
        except ValueError as exc:
            raise FormatError(f"{path}: malformed sample on line {i + 2}") from exc
    if samples.size == 0:
        raise FormatError(f"{path}: no samples")
    if not np.isfinite(samples).all():
        raise FormatError(f"{path}: non-finite sample")
    if fps <= 0 or not math.isfinite(fps):
        raise FormatError(f"{path}: non-positive fps")
    return BVPSignal(samples=samples, fps=fps)
