import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from merppg.data import (
    BVPSignal,
    FormatError,
    FrameTensor,
    SynthConfig,
    read_array,
    read_signal,
    read_tensor,
    standardize,
    synth_clip,
    time_scale,
    write_array,
    write_signal,
    write_tensor,
)
from merppg.tn import tn_chunk


def periodogram_peak_hz(x, fps):
    nfft = 16 * len(x)
    spec = np.abs(np.fft.rfft(x - x.mean(), n=nfft)) ** 2
    freqs = np.fft.rfftfreq(nfft, d=1.0 / fps)
    return freqs[np.argmax(spec)]


class TestSynthClip:
    def test_dominant_frequency_is_pulse_rate(self):
        frames, bvp = synth_clip(SynthConfig(hr_bpm=72, duration_s=10, fps=30, seed=0))
        assert len(bvp) == 300
        assert periodogram_peak_hz(bvp.samples, 30.0) == pytest.approx(1.2, abs=0.02)

    def test_clean_clip_green_mean_matches_bvp(self):
        # detrending couples weakly with a finite sinusoid, so both sides go
        # through the same normalization before comparing
        cfg = SynthConfig(
            hr_bpm=72,
            duration_s=10,
            fps=30,
            noise_sigma=0.0,
            jitter_px=0,
            trend_slope=0.0,
            harmonic_ratio=0.0,
            seed=3,
        )
        frames, bvp = synth_clip(cfg)
        green = frames.values[..., 1].mean(axis=(1, 2)).astype(np.float64)
        r = np.corrcoef(tn_chunk(green), tn_chunk(bvp.samples))[0, 1]
        assert r >= 1.0 - 1e-6

    def test_deterministic_for_fixed_seed(self):
        cfg = SynthConfig(seed=42, noise_sigma=0.01, jitter_px=1)
        f1, b1 = synth_clip(cfg)
        f2, b2 = synth_clip(cfg)
        assert np.array_equal(f1.values, f2.values)
        assert np.array_equal(b1.samples, b2.samples)

    def test_seed_changes_noise_not_pulse_frequency(self):
        ref = None
        for seed in (0, 1):
            cfg = SynthConfig(hr_bpm=96, noise_sigma=0.02, seed=seed)
            frames, bvp = synth_clip(cfg)
            peak = periodogram_peak_hz(bvp.samples, cfg.fps)
            assert peak == pytest.approx(1.6, abs=0.02)
            if ref is not None:
                assert not np.array_equal(frames.values, ref)
            ref = frames.values

    def test_rejects_nyquist_violation(self):
        with pytest.raises(ValueError, match="Nyquist"):
            SynthConfig(hr_bpm=170, fps=5).validate()

    def test_rejects_hr_out_of_range(self):
        with pytest.raises(ValueError):
            SynthConfig(hr_bpm=20).validate()
        with pytest.raises(ValueError):
            SynthConfig(hr_bpm=200).validate()

    def test_rejects_heavy_clipping(self):
        cfg = SynthConfig(trend_slope=0.01, duration_s=10)  # drift far past 1.0
        with pytest.raises(ValueError, match="clips"):
            synth_clip(cfg)

    def test_values_in_unit_range(self):
        frames, _ = synth_clip(SynthConfig(noise_sigma=0.02, seed=5))
        assert frames.values.min() >= 0.0
        assert frames.values.max() <= 1.0


class TestTimeScale:
    def test_identity_factor(self):
        clip = synth_clip(SynthConfig(seed=1))
        frames, bvp = time_scale(clip, 1.0)
        assert np.allclose(frames.values, clip[0].values, atol=1e-6)
        assert np.allclose(bvp.samples, standardize(clip[1].samples), atol=1e-9)

    def test_factor_two_doubles_hr(self):
        clip = synth_clip(SynthConfig(hr_bpm=72, duration_s=10, seed=2))
        _, bvp = time_scale(clip, 2.0)
        assert periodogram_peak_hz(bvp.samples, 30.0) * 60 == pytest.approx(144, abs=1.5)

    def test_rejects_out_of_band_result(self):
        clip = synth_clip(SynthConfig(hr_bpm=60, duration_s=10, seed=2))
        with pytest.raises(ValueError, match="scaled HR"):
            time_scale(clip, 4.0)

    def test_rejects_bad_factor(self):
        clip = synth_clip(SynthConfig(seed=0))
        for factor in (0.1, 6.0):
            with pytest.raises(ValueError):
                time_scale(clip, factor)

    def test_fps_unchanged_and_length_scaled(self):
        clip = synth_clip(SynthConfig(hr_bpm=60, duration_s=10, seed=2))
        frames, bvp = time_scale(clip, 1.25)
        assert frames.fps == clip[0].fps
        assert frames.n_frames == round(300 / 1.25)
        assert len(bvp) == frames.n_frames


class TestTensorContainer:
    def test_round_trip_bit_exact(self, tmp_path):
        frames, _ = synth_clip(SynthConfig(seed=9, noise_sigma=0.01))
        path = tmp_path / "clip.metr"
        write_tensor(path, frames)
        back = read_tensor(path, fps=frames.fps)
        assert back.values.dtype == np.float32
        assert np.array_equal(back.values, frames.values)

    def test_truncated_file_rejected(self, tmp_path):
        path = tmp_path / "clip.metr"
        write_array(path, np.ones((2, 3), dtype=np.float32))
        blob = path.read_bytes()
        path.write_bytes(blob[:-4])
        with pytest.raises(FormatError, match="payload"):
            read_array(path)

    def test_trailing_garbage_rejected(self, tmp_path):
        path = tmp_path / "clip.metr"
        write_array(path, np.ones((2, 3), dtype=np.float32))
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(FormatError):
            read_array(path)

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "x.metr"
        path.write_bytes(b"NOPE" + b"\0" * 64)
        with pytest.raises(FormatError, match="magic"):
            read_array(path)

    def test_unknown_dtype_code_rejected(self, tmp_path):
        path = tmp_path / "x.metr"
        write_array(path, np.ones((2, 2), dtype=np.float32))
        blob = bytearray(path.read_bytes())
        blob[12 + 16] = 7  # dtype code after rank-2 dims
        path.write_bytes(bytes(blob))
        with pytest.raises(FormatError, match="dtype"):
            read_array(path)

    def test_empty_tensor_rejected_on_write(self, tmp_path):
        with pytest.raises(ValueError):
            write_array(tmp_path / "x.metr", np.empty((0, 3), dtype=np.float32))
        with pytest.raises(ValueError):
            FrameTensor(values=np.empty((0, 2, 2, 3), dtype=np.float32), fps=30.0)

    def test_non_finite_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            write_array(tmp_path / "x.metr", np.array([np.nan], dtype=np.float32))

    @settings(max_examples=25, deadline=None)
    @given(
        shape=st.lists(st.integers(1, 5), min_size=1, max_size=4),
        seed=st.integers(0, 2**31 - 1),
    )
    def test_round_trip_property(self, tmp_path_factory, shape, seed):
        arr = (
            np.random.default_rng(seed)
            .normal(size=tuple(shape))
            .astype(np.float32)
        )
        path = tmp_path_factory.mktemp("metr") / "arr.metr"
        write_array(path, arr)
        assert np.array_equal(read_array(path), arr)


class TestSignalCSV:
    def test_round_trip(self, tmp_path):
        sig = BVPSignal(samples=np.array([0.125, -3.5, 1e-7, 2.0 / 3.0]), fps=30.0)
        path = tmp_path / "s.csv"
        write_signal(path, sig)
        back = read_signal(path)
        assert back.fps == 30.0
        np.testing.assert_allclose(back.samples, sig.samples, rtol=1e-8)

    def test_float32_values_round_trip_exactly(self, tmp_path):
        vals = np.random.default_rng(0).normal(size=50).astype(np.float32)
        sig = BVPSignal(samples=vals.astype(np.float64), fps=29.97)
        path = tmp_path / "s.csv"
        write_signal(path, sig)
        back = read_signal(path)
        assert np.array_equal(back.samples.astype(np.float32), vals)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("0.5\n0.6\n")
        with pytest.raises(FormatError, match="fps"):
            read_signal(path)

    def test_malformed_row(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("# fps=30\n0.5\nbogus\n")
        with pytest.raises(FormatError, match="line 3"):
            read_signal(path)

    def test_nan_sample_rejected(self, tmp_path):
        path = tmp_path / "s.csv"
        path.write_text("# fps=30\n0.5\nnan\n")
        with pytest.raises(FormatError, match="non-finite"):
            read_signal(path)
        with pytest.raises(ValueError):
            BVPSignal(samples=np.array([np.nan]), fps=30.0)
