"""Pulse postprocessing: HR estimation, error metrics, green-channel baseline.

Heart rate comes from a Welch-averaged periodogram (8 s Hann windows, 50%
overlap) zero-padded to a 0.5 BPM grid, with the spectral argmax restricted
to the 0.5-3.0 Hz pulse band. When the peak sits at twice another in-band
peak of comparable power, the lower frequency wins: pulse harmonics are
strong and octave errors are the common failure mode.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import welch

from .data import BVPSignal, FrameTensor
from .tn import tn_chunk

DEFAULT_BAND_HZ = (0.5, 3.0)
_GRID_BPM = 0.5
_WINDOW_S = 8.0
_HARMONIC_DB = 3.0


@dataclass(frozen=True)
class HREstimate:
    bpm: float
    peak_power_ratio: float
    in_band: bool = True


@dataclass(frozen=True)
class MetricReport:
    mae: float
    rmse: float
    pearson_r: float | None
    n: int


def estimate_hr(
    bvp: BVPSignal, band: tuple[float, float] = DEFAULT_BAND_HZ
) -> HREstimate:
    """Spectral-peak heart rate of a pulse series, in BPM.

    Signals shorter than one window fall back to a single segment. A signal
    whose strongest component lies outside the band is still reported at the
    in-band argmax but flagged with in_band=False and a low power ratio.
    """
    x = np.asarray(bvp.samples, dtype=np.float64)
    if np.all(x == x[0]):
        raise ValueError("constant signal has no spectral peak")
    fps = bvp.fps
    nper = min(len(x), int(round(_WINDOW_S * fps)))
    nfft = max(nper, int(round(60.0 * fps / _GRID_BPM)))
    freqs, power = welch(
        x - x.mean(),
        fs=fps,
        window="hann",
        nperseg=nper,
        noverlap=nper // 2,
        nfft=nfft,
        detrend="constant",
    )
    in_band = (freqs >= band[0]) & (freqs <= band[1])
    if not in_band.any():
        raise ValueError(f"band {band} not resolvable at fps={fps}")
    band_freqs = freqs[in_band]
    band_power = power[in_band]
    total = band_power.sum()
    if total <= 0.0:
        raise ValueError("no in-band power")

    peak_idx = int(np.argmax(band_power))
    peak_f = band_freqs[peak_idx]
    peak_p = band_power[peak_idx]

    # prefer the fundamental when the peak looks like a first harmonic
    sub_f = peak_f / 2.0
    if sub_f >= band[0]:
        near = np.abs(band_freqs - sub_f) <= 2.0 * (_GRID_BPM / 60.0)
        if near.any():
            sub_p = band_power[near].max()
            if sub_p >= peak_p * 10.0 ** (-_HARMONIC_DB / 10.0):
                sub_idx = np.flatnonzero(near)[int(np.argmax(band_power[near]))]
                peak_idx, peak_f, peak_p = sub_idx, band_freqs[sub_idx], sub_p

    whole_peak = freqs[int(np.argmax(power))]
    return HREstimate(
        bpm=60.0 * peak_f,
        peak_power_ratio=float(peak_p / total),
        in_band=bool(band[0] <= whole_peak <= band[1]),
    )


def green_baseline(frames: FrameTensor) -> BVPSignal:
    """Classical baseline: spatial mean of the green channel, normalized."""
    series = frames.values[..., 1].mean(axis=(1, 2)).astype(np.float64)
    return BVPSignal(samples=tn_chunk(series), fps=frames.fps)


def metrics(pred_bpm, true_bpm) -> MetricReport:
    """MAE / RMSE / Pearson r between paired HR estimates.

    Pearson r is reported as None when either side is constant (undefined).
    """
    pred = np.asarray(pred_bpm, dtype=np.float64)
    true = np.asarray(true_bpm, dtype=np.float64)
    if pred.shape != true.shape or pred.ndim != 1:
        raise ValueError("pred and true must be equal-length 1-D sequences")
    if pred.size < 1:
        raise ValueError("need at least one pair")
    diff = pred - true
    mae = float(np.mean(np.abs(diff)))
    rmse = float(np.sqrt(np.mean(diff * diff)))
    r: float | None = None
    if pred.size >= 2 and pred.std() > 0 and true.std() > 0:
        r = float(np.corrcoef(pred, true)[0, 1])
    return MetricReport(mae=mae, rmse=rmse, pearson_r=r, n=int(pred.size))


def metrics_csv(rows: dict[str, MetricReport]) -> str:
    lines = ["name,mae,rmse,pearson_r,n"]
    for name, rep in rows.items():
        r = "" if rep.pearson_r is None else f"{rep.pearson_r:.6g}"
        lines.append(f"{name},{rep.mae:.6g},{rep.rmse:.6g},{r},{rep.n}")
    return "\n".join(lines) + "\n"


def metrics_table(rows: dict[str, MetricReport]) -> str:
    """Human-readable table in the usual MAE / RMSE / R column layout."""
    out = [f"{'name':<16} {'MAE':>8} {'RMSE':>8} {'R':>8} {'n':>5}"]
    for name, rep in rows.items():
        r = "   --" if rep.pearson_r is None else f"{rep.pearson_r:8.3f}"
        out.append(f"{name:<16} {rep.mae:8.3f} {rep.rmse:8.3f} {r:>8} {rep.n:>5}")
    return "\n".join(out) + "\n"
