"""Framing, windowed analysis/synthesis and band-splitting of full-band audio.

Everything here is a pure function over numpy arrays in float64; the neural
model keeps its own float32 mirror of the transform (see `plckit.model`).
Frame/packet geometry at the canonical 48 kHz rate: 20 ms packets and analysis
frames (960 samples), 10 ms hop (480 samples), 960-point FFT, 481 bins spaced
50 Hz apart.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.io import wavfile

SAMPLE_RATE = 48000
PACKET_SAMPLES = 960  # 20 ms at 48 kHz


class SignalError(ValueError):
    """Raised on malformed audio input or inconsistent configuration."""


@dataclass(frozen=True)
class StftConfig:
    """Analysis/synthesis geometry (50%-overlap periodic Hanning)."""

    frame_len: int = 960
    hop: int = 480
    fft_size: int = 960

    def __post_init__(self):
        if self.frame_len <= 0 or self.hop <= 0:
            raise SignalError("frame_len and hop must be positive")
        if self.hop * 2 != self.frame_len:
            raise SignalError("hop must be frame_len/2 (50% overlap)")
        if self.fft_size != self.frame_len:
            raise SignalError("fft_size must equal frame_len in samples")

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1

    @property
    def bin_hz(self) -> float:
        return SAMPLE_RATE / self.fft_size


@dataclass
class AudioSignal:
    """Mono sample sequence at a declared rate."""

    samples: np.ndarray
    rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise SignalError("AudioSignal must be mono (1-D)")
        if self.rate <= 0:
            raise SignalError("rate must be positive")
        if self.samples.size and not np.all(np.isfinite(self.samples)):
            raise SignalError("samples must be finite")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.rate

    def packet_count(self, n: int = PACKET_SAMPLES) -> int:
        return -(-self.samples.size // n)


@dataclass(frozen=True)
class BandLayout:
    """Bin partition: wide band [0, wide_end], high band (wide_end, n_bins),
    post-processing band [0, post_end] (a subset of wide)."""

    wide_end: int = 320   # inclusive; 16 kHz at 50 Hz/bin
    post_end: int = 160   # inclusive; 8 kHz
    n_bins: int = 481

    def __post_init__(self):
        if not 0 <= self.post_end <= self.wide_end < self.n_bins:
            raise SignalError("band layout must satisfy post <= wide < n_bins")

    @property
    def wide_bins(self) -> int:
        return self.wide_end + 1

    @property
    def high_bins(self) -> int:
        return self.n_bins - self.wide_bins

    @property
    def post_bins(self) -> int:
        return self.post_end + 1


@dataclass
class Spectrogram:
    """Complex time-frequency grid, indexed (frame t, bin f)."""

    bins: np.ndarray  # complex, shape (T, F)
    config: StftConfig = field(default_factory=StftConfig)

    def __post_init__(self):
        self.bins = np.asarray(self.bins, dtype=np.complex128)
        if self.bins.ndim != 2:
            raise SignalError("Spectrogram bins must be 2-D (frames, bins)")

    @property
    def n_frames(self) -> int:
        return self.bins.shape[0]

    @property
    def n_bins(self) -> int:
        return self.bins.shape[1]


def hann_window(n: int) -> np.ndarray:
    """Periodic Hanning window of length n."""
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * np.arange(n) / n))


def cola_normalizer(cfg: StftConfig) -> np.ndarray:
    """Per-phase normalizer for 50%-overlap analysis+synthesis windowing.

    Interior sample at phase ``proto = n mod hop`` receives contributions
    w(proto + hop)^2 + w(proto)^2 from the two frames covering it; dividing the
    overlap-add sum by this makes istft(stft(x)) exact away from the edges.
    """
    w = hann_window(cfg.frame_len)
    return w[: cfg.hop] ** 2 + w[cfg.hop :] ** 2


def frame_signal(x: AudioSignal | np.ndarray, n: int) -> np.ndarray:
    """Split into consecutive non-overlapping frames of n samples.

    Frame k (1-indexed) holds samples x[n*(k-1) .. n*k-1]; the final partial
    frame is zero-padded. An empty signal yields an empty (0, n) array.
    """
    samples = x.samples if isinstance(x, AudioSignal) else np.asarray(x, dtype=np.float64)
    if n <= 0:
        raise SignalError("frame size must be positive")
    k = -(-samples.size // n)
    padded = np.zeros(k * n, dtype=samples.dtype)
    padded[: samples.size] = samples
    return padded.reshape(k, n)


def stft(x: AudioSignal, cfg: StftConfig | None = None) -> Spectrogram:
    """Windowed analysis transform.

    Frame t covers samples [t*hop, t*hop + frame_len); the signal tail is
    zero-padded so the frame count is ceil(L / hop).
    """
    cfg = cfg or StftConfig()
    if x.rate != SAMPLE_RATE:
        raise SignalError(f"expected {SAMPLE_RATE} Hz input, got {x.rate}")
    n_frames = -(-len(x) // cfg.hop)
    if n_frames == 0:
        return Spectrogram(np.zeros((0, cfg.n_bins), dtype=np.complex128), cfg)
    padded = np.zeros((n_frames - 1) * cfg.hop + cfg.frame_len, dtype=np.float64)
    padded[: len(x)] = x.samples
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(n_frames)[:, None]
    frames = padded[idx] * hann_window(cfg.frame_len)[None, :]
    return Spectrogram(np.fft.rfft(frames, n=cfg.fft_size, axis=1), cfg)


def istft(spec: Spectrogram) -> AudioSignal:
    """Overlap-add synthesis with Hanning synthesis windowing and COLA
    normalization.

    Returns n_frames * hop samples; the first hop is an edge region (single
    frame coverage) and is not part of the reconstruction contract.
    """
    cfg = spec.config
    if spec.n_bins != cfg.n_bins:
        raise SignalError(
            f"spectrogram has {spec.n_bins} bins, config expects {cfg.n_bins}"
        )
    t = spec.n_frames
    if t == 0:
        return AudioSignal(np.zeros(0), SAMPLE_RATE)
    win = hann_window(cfg.frame_len)
    frames = np.fft.irfft(spec.bins, n=cfg.fft_size, axis=1) * win[None, :]
    out = np.zeros((t - 1) * cfg.hop + cfg.frame_len, dtype=np.float64)
    for i in range(t):
        out[i * cfg.hop : i * cfg.hop + cfg.frame_len] += frames[i]
    norm = np.tile(cola_normalizer(cfg), t)
    return AudioSignal(out[: t * cfg.hop] / norm, SAMPLE_RATE)


def band_split(spec: Spectrogram, layout: BandLayout | None = None):
    """Partition bins into (wide, high) slices. Inverse of band_merge."""
    layout = layout or BandLayout()
    if spec.n_bins != layout.n_bins:
        raise SignalError(
            f"spectrogram has {spec.n_bins} bins, layout expects {layout.n_bins}"
        )
    wide = Spectrogram(spec.bins[:, : layout.wide_bins].copy(), spec.config)
    high = Spectrogram(spec.bins[:, layout.wide_bins :].copy(), spec.config)
    return wide, high


def band_merge(wide: Spectrogram, high: Spectrogram) -> Spectrogram:
    if wide.n_frames != high.n_frames:
        raise SignalError("band frame counts differ")
    return Spectrogram(np.concatenate([wide.bins, high.bins], axis=1), wide.config)


def post_band(wide: Spectrogram, layout: BandLayout | None = None) -> Spectrogram:
    """The 0-8 kHz slice of the wide band (bins 0..post_end)."""
    layout = layout or BandLayout()
    return Spectrogram(wide.bins[:, : layout.post_bins].copy(), wide.config)


def read_wav(path) -> AudioSignal:
    """Load a mono 48 kHz WAV (16-bit PCM or 32-bit float); no resampling."""
    try:
        rate, data = wavfile.read(path)
    except Exception as exc:
        raise SignalError(f"cannot read WAV {path}: {exc}") from exc
    if rate != SAMPLE_RATE:
        raise SignalError(f"{path}: rate {rate} != {SAMPLE_RATE} (no resampling)")
    if data.ndim != 1:
        raise SignalError(f"{path}: expected mono, got {data.ndim} channels")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise SignalError(f"{path}: unsupported sample format {data.dtype}")
    return AudioSignal(samples, rate)


def write_wav(path, signal: AudioSignal) -> None:
    """Write 32-bit float mono WAV at the signal's rate."""
    wavfile.write(path, signal.rate, signal.samples.astype(np.float32))
