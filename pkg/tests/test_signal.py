import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from plckit.signal import (
    SAMPLE_RATE,
    AudioSignal,
    BandLayout,
    SignalError,
    Spectrogram,
    StftConfig,
    band_merge,
    band_split,
    cola_normalizer,
    frame_signal,
    hann_window,
    istft,
    post_band,
    read_wav,
    stft,
    write_wav,
)


def naive_stft(x: np.ndarray, cfg: StftConfig) -> np.ndarray:
    """O(N^2) DFT-per-windowed-frame oracle, independent of np.fft."""
    n_frames = -(-x.size // cfg.hop)
    padded = np.zeros((n_frames - 1) * cfg.hop + cfg.frame_len)
    padded[: x.size] = x
    win = hann_window(cfg.frame_len)
    n = cfg.fft_size
    k = np.arange(n // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(k, np.arange(n)) / n)
    out = np.zeros((n_frames, n // 2 + 1), dtype=np.complex128)
    for t in range(n_frames):
        frame = padded[t * cfg.hop : t * cfg.hop + cfg.frame_len] * win
        out[t] = basis @ frame
    return out


class TestFrameSignal:
    def test_single_frame_identity(self):
        x = np.arange(960, dtype=float)
        frames = frame_signal(AudioSignal(x / 960.0), 960)
        assert frames.shape == (1, 960)
        np.testing.assert_array_equal(frames[0], x / 960.0)

    def test_eq1_two_frames(self):
        x = np.linspace(-1, 1, 1920)
        frames = frame_signal(AudioSignal(x), 960)
        np.testing.assert_array_equal(frames[0], x[:960])
        np.testing.assert_array_equal(frames[1], x[960:])

    def test_final_frame_zero_padded(self):
        x = np.ones(1000) * 0.5
        frames = frame_signal(AudioSignal(x), 960)
        assert frames.shape == (2, 960)
        np.testing.assert_array_equal(frames[1][:40], x[960:])
        np.testing.assert_array_equal(frames[1][40:], np.zeros(920))

    def test_empty_signal(self):
        frames = frame_signal(AudioSignal(np.zeros(0)), 960)
        assert frames.shape == (0, 960)

    @given(length=st.integers(0, 5000), n=st.integers(1, 1200), seed=st.integers(0, 2**31))
    @settings(max_examples=60, deadline=None)
    def test_eq1_indexing_property(self, length, n, seed):
        x = np.random.default_rng(seed).uniform(-1, 1, size=length)
        frames = frame_signal(x, n)
        assert frames.shape[0] == -(-length // n)
        for k in range(1, frames.shape[0] + 1):  # 1-indexed per the formula
            for offset in (0, n - 1):
                src = n * (k - 1) + offset
                expected = x[src] if src < length else 0.0
                assert frames[k - 1, offset] == expected


class TestStft:
    def test_zero_signal(self):
        spec = stft(AudioSignal(np.zeros(4800)))
        assert spec.bins.shape == (10, 481)
        assert np.all(spec.bins == 0)

    def test_50hz_cosine_peaks_at_bin_1(self):
        t = np.arange(960) / SAMPLE_RATE
        x = np.cos(2 * np.pi * 50.0 * t)
        spec = stft(AudioSignal(x))
        frame0 = np.abs(spec.bins[0])
        # signal bin dominates all non-DC bins; Hann leakage reaches only the
        # adjacent bins (bin 0 picks up both sidelobes and ties at |.|=240)
        assert np.argmax(frame0[1:]) == 0
        assert frame0[1] == pytest.approx(240.0, rel=1e-12)
        assert frame0[3:].max() < 1e-9 * frame0[1]
        oracle = naive_stft(x, StftConfig())
        assert np.abs(spec.bins[0] - oracle[0]).max() < 1e-6 * frame0[1]

    def test_matches_naive_dft_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, size=4800)
        spec = stft(AudioSignal(x))
        oracle = naive_stft(x, StftConfig())
        rel = np.linalg.norm(spec.bins - oracle) / np.linalg.norm(oracle)
        assert rel < 1e-6

    def test_rate_mismatch_rejected(self):
        with pytest.raises(SignalError):
            stft(AudioSignal(np.zeros(100), rate=16000))

    def test_frame_count_ceil(self):
        for length in (1, 479, 480, 481, 4800, 4801):
            spec = stft(AudioSignal(np.zeros(length)))
            assert spec.n_frames == -(-length // 480)


class TestIstft:
    def test_zero_spectrogram(self):
        sig = istft(Spectrogram(np.zeros((5, 481), dtype=complex)))
        assert len(sig) == 5 * 480
        assert np.all(sig.samples == 0)

    def test_round_trip_interior(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, size=SAMPLE_RATE)  # 1 s
        recon = istft(stft(AudioSignal(x)))
        lo, hi = 960, x.size - 960
        err = np.abs(recon.samples[lo:hi] - x[lo:hi]).max()
        assert err < 1e-6

    def test_single_frame_cola_hand_check(self):
        cfg = StftConfig()
        rng = np.random.default_rng(2)
        frame_spec = rng.normal(size=481) + 1j * rng.normal(size=481)
        frame_spec[0] = frame_spec[0].real
        frame_spec[-1] = frame_spec[-1].real
        out = istft(Spectrogram(frame_spec[None, :], cfg))
        win = hann_window(960)
        time_frame = np.fft.irfft(frame_spec, n=960) * win
        norm = win[:480] ** 2 + win[480:] ** 2  # hand Hanning^2 overlap sum
        np.testing.assert_allclose(out.samples, time_frame[:480] / norm, rtol=0, atol=1e-12)
        np.testing.assert_allclose(cola_normalizer(cfg), norm, atol=0)

    def test_inconsistent_config_rejected(self):
        with pytest.raises(SignalError):
            istft(Spectrogram(np.zeros((3, 200), dtype=complex)))


class TestBands:
    def test_split_sizes(self):
        spec = Spectrogram(np.arange(2 * 481).reshape(2, 481).astype(complex))
        wide, high = band_split(spec)
        assert wide.n_bins == 321 and high.n_bins == 160

    def test_merge_inverse_bit_exact(self):
        rng = np.random.default_rng(3)
        spec = Spectrogram(rng.normal(size=(7, 481)) + 1j * rng.normal(size=(7, 481)))
        wide, high = band_split(spec)
        merged = band_merge(wide, high)
        assert np.array_equal(merged.bins, spec.bins)

    def test_post_band_slice(self):
        spec = Spectrogram(np.arange(481, dtype=complex)[None, :])
        wide, _ = band_split(spec)
        post = post_band(wide)
        assert post.n_bins == 161
        assert post.bins[0, -1] == 160  # 8 kHz bin inclusive

    def test_wrong_bin_count_rejected(self):
        with pytest.raises(SignalError):
            band_split(Spectrogram(np.zeros((1, 480), dtype=complex)))

    @given(seed=st.integers(0, 2**31), frames=st.integers(1, 6))
    @settings(max_examples=20, deadline=None)
    def test_split_merge_bijection(self, seed, frames):
        rng = np.random.default_rng(seed)
        bins = rng.normal(size=(frames, 481)) + 1j * rng.normal(size=(frames, 481))
        wide, high = band_split(Spectrogram(bins))
        assert np.array_equal(band_merge(wide, high).bins, bins)


class TestWavIO:
    def test_float32_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        x = rng.uniform(-0.9, 0.9, size=4800).astype(np.float32).astype(np.float64)
        path = tmp_path / "x.wav"
        write_wav(path, AudioSignal(x))
        back = read_wav(path)
        assert back.rate == SAMPLE_RATE
        np.testing.assert_array_equal(back.samples, x)

    def test_int16_accepted(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "i16.wav"
        wavfile.write(path, SAMPLE_RATE, (np.ones(100) * 1000).astype(np.int16))
        sig = read_wav(path)
        assert abs(sig.samples[0] - 1000 / 32768) < 1e-12

    def test_wrong_rate_rejected(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "bad.wav"
        wavfile.write(path, 16000, np.zeros(100, dtype=np.float32))
        with pytest.raises(SignalError, match="no resampling"):
            read_wav(path)

    def test_stereo_rejected(self, tmp_path):
        from scipy.io import wavfile

        path = tmp_path / "st.wav"
        wavfile.write(path, SAMPLE_RATE, np.zeros((100, 2), dtype=np.float32))
        with pytest.raises(SignalError, match="mono"):
            read_wav(path)


class TestValidation:
    def test_nonfinite_samples_rejected(self):
        with pytest.raises(SignalError):
            AudioSignal(np.array([0.0, np.nan]))

    def test_bad_stft_config(self):
        with pytest.raises(SignalError):
            StftConfig(frame_len=960, hop=100, fft_size=960)
        with pytest.raises(SignalError):
            StftConfig(frame_len=960, hop=480, fft_size=512)
