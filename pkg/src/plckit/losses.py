"""Training objectives: compressed phase-aware spectral loss, waveform MAE,
least-squares adversarial terms, pitch loss with autocorrelation ground truth,
the causal->non-causal distillation penalty, and the small multi-frequency /
multi-period / metric discriminators used as training scaffolding.

Spectral losses accept (B, T, F) complex tensors or (B, 2, T, F) real/imag
channel packs. Sums in the published per-sample/per-frame objectives are
implemented as means so the loss weights stay meaningful across clip lengths.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .signal import SAMPLE_RATE, AudioSignal, StftConfig, hann_window

MAG_EPS = 1e-12


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.1           # f0 term weight
    lambda_kd: float = 1.0       # distillation weight
    plcpa_compression: float = 0.3

    def __post_init__(self):
        if self.alpha < 0 or self.lambda_kd < 0 or self.plcpa_compression < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class F0Track:
    """Per-frame pitch in Hz; 0 marks unvoiced frames."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        voiced = self.values[self.values > 0]
        if voiced.size and (voiced.min() < 50.0 or voiced.max() > 500.0):
            raise ValueError("voiced f0 must lie in [50, 500] Hz")


def _as_complex(spec: torch.Tensor) -> torch.Tensor:
    if spec.is_complex():
        return spec
    if spec.ndim >= 2 and spec.shape[1] == 2:
        return torch.complex(spec[:, 0], spec[:, 1])
    raise ValueError("expected complex tensor or (B, 2, T, F) channel pack")


def _compressed(spec_c: torch.Tensor, compression: float):
    """(|S|^c, |S|^(c-1)) with exact zeros and finite gradients at |S| = 0
    (the unselected where-branch is computed on safe inputs)."""
    magsq = spec_c.real ** 2 + spec_c.imag ** 2
    positive = magsq > 0
    safe = torch.where(positive, magsq, torch.ones_like(magsq))
    comp = torch.where(positive, safe ** (compression / 2),
                       torch.zeros_like(magsq))
    scale = torch.where(positive, comp / safe.sqrt(), torch.zeros_like(magsq))
    return comp, scale


def plcpa_loss(est, ref, compression: float = 0.3) -> torch.Tensor:
    """Power-law compressed phase-aware loss: mean squared error between
    compressed magnitudes plus mean squared distance between compressed
    complex spectra (magnitude^c with original phase)."""
    est_c, ref_c = _as_complex(est), _as_complex(ref)
    if est_c.shape != ref_c.shape:
        raise ValueError(f"shape mismatch {tuple(est_c.shape)} vs {tuple(ref_c.shape)}")
    comp_est, scale_est = _compressed(est_c, compression)
    comp_ref, scale_ref = _compressed(ref_c, compression)
    l_mag = (comp_est - comp_ref).square().mean()
    d_re = scale_est * est_c.real - scale_ref * ref_c.real
    d_im = scale_est * est_c.imag - scale_ref * ref_c.imag
    l_pha = (d_re.square() + d_im.square()).mean()
    return l_mag + l_pha


def mae_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute sample error."""
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch {tuple(est.shape)} vs {tuple(ref.shape)}")
    return (est - ref).abs().mean()


def lsgan_losses(d_real: torch.Tensor, d_fake: torch.Tensor):
    """Least-squares GAN objectives:
    L_D = mean[(1 - D(s))^2] + mean[D(G(x))^2], L_G = mean[(1 - D(G(x)))^2].

    Means run over every score (batch entries and sub-discriminators alike),
    so real/fake batches may differ in size."""
    l_d = (1.0 - d_real).square().mean() + d_fake.square().mean()
    l_g = (1.0 - d_fake).square().mean()
    return l_d, l_g


def f0_loss(est: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean absolute f0 error over frames voiced in the reference
    (unvoiced frames carry 0 and are masked out; an all-unvoiced reference
    contributes 0)."""
    if est.shape != ref.shape:
        raise ValueError(f"length mismatch {tuple(est.shape)} vs {tuple(ref.shape)}")
    mask = ref > 0
    if not mask.any():
        return torch.zeros((), dtype=est.dtype, device=est.device)
    return (est[mask] - ref[mask]).abs().mean()


def kd_loss(causal_feat: torch.Tensor, noncausal_feat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the causal encoder output and a
    gradient-detached copy of the non-causal (teacher) output."""
    if causal_feat.shape != noncausal_feat.shape:
        raise ValueError("feature shape mismatch")
    return (causal_feat - noncausal_feat.detach()).square().mean()


def stage1_total(plcpa, mae, f0, l_g, kd, weights: LossWeights,
                 include_kd: bool = True):
    """First-stage objective: PLCPA + MAE + alpha * f0 + L_G
    (+ lambda_kd * kd when the distillation term is summed in)."""
    total = plcpa + mae + weights.alpha * f0 + l_g
    if include_kd:
        total = total + weights.lambda_kd * kd
    return total


# -- ground-truth pitch ----------------------------------------------------

F0_MIN, F0_MAX = 50.0, 500.0
VOICING_THRESHOLD = 0.5


def extract_f0(clean: AudioSignal, cfg: StftConfig | None = None,
               window: int = 960) -> F0Track:
    """Per-STFT-frame normalized-autocorrelation pitch in [50, 500] Hz.

    Each frame t compares the `window` samples starting at t*hop against lagged
    copies (lags spanning 500 Hz down to 50 Hz); the first lag reaching 90% of
    the peak normalized correlation wins (suppresses octave errors), refined by
    parabolic interpolation. Frames whose peak correlation is below 0.5 are
    unvoiced (0). Offline ground-truth computation; not part of the causal path.
    """
    cfg = cfg or StftConfig()
    x = clean.samples
    n_frames = -(-x.size // cfg.hop)
    lag_min = int(SAMPLE_RATE / F0_MAX)   # 96
    lag_max = int(SAMPLE_RATE / F0_MIN)   # 960
    need = (n_frames - 1) * cfg.hop + window + lag_max + 1
    padded = np.zeros(need)
    padded[: x.size] = x
    sq = np.concatenate([[0.0], np.cumsum(padded ** 2)])
    values = np.zeros(n_frames)
    fft_len = 1
    while fft_len < window + lag_max + 1:
        fft_len *= 2
    for t in range(n_frames):
        start = t * cfg.hop
        seg = padded[start : start + window + lag_max]
        base = padded[start : start + window]
        e0 = sq[start + window] - sq[start]
        if e0 <= 1e-10:
            continue
        spec = np.fft.rfft(seg, fft_len)
        base_spec = np.fft.rfft(base, fft_len)
        corr = np.fft.irfft(np.conj(base_spec) * spec, fft_len)[: lag_max + 1]
        lags = np.arange(lag_min, lag_max + 1)
        e_lag = sq[start + lags + window] - sq[start + lags]
        denom = np.sqrt(e0 * np.maximum(e_lag, 1e-20))
        r = corr[lag_min:] / denom
        peak = r.max()
        if peak < VOICING_THRESHOLD:
            continue
        first = int(np.argmax(r >= 0.9 * peak))
        # parabolic refinement around the local maximum
        while 0 < first < r.size - 1 and r[first + 1] > r[first]:
            first += 1
        lag = float(lags[first])
        if 0 < first < r.size - 1:
            a, b, c = r[first - 1], r[first], r[first + 1]
            denom2 = a - 2 * b + c
            if abs(denom2) > 1e-12:
                lag += 0.5 * (a - c) / denom2
        f0 = SAMPLE_RATE / lag
        if F0_MIN <= f0 <= F0_MAX:
            values[t] = f0
    return F0Track(values)


# -- discriminators (training scaffolding, deliberately small) --------------


class _SpecDiscriminator(nn.Module):
    """Conv stack over one compressed-magnitude STFT resolution."""

    def __init__(self, fft_size: int):
        super().__init__()
        self.fft_size = fft_size
        self.hop = fft_size // 4
        self.register_buffer(
            "win", torch.as_tensor(hann_window(fft_size), dtype=torch.float32),
            persistent=False)
        self.convs = nn.ModuleList([
            nn.Conv2d(1, 8, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(8, 16, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(16, 16, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(16, 1, (3, 3), padding=1),
        ])

    def forward(self, wave):
        if wave.shape[1] < self.fft_size:  # clips shorter than one window
            wave = F.pad(wave, (0, self.fft_size - wave.shape[1]))
        spec = torch.stft(wave, self.fft_size, hop_length=self.hop,
                          window=self.win.to(wave.dtype), center=False,
                          return_complex=True)
        h = (spec.abs() + 1e-6).pow(0.3).unsqueeze(1)
        for conv in self.convs[:-1]:
            h = F.leaky_relu(conv(h), 0.2)
        return self.convs[-1](h).mean(dim=(1, 2, 3))


class _PeriodDiscriminator(nn.Module):
    """Conv stack over the waveform folded at one period."""

    def __init__(self, period: int):
        super().__init__()
        self.period = period
        self.convs = nn.ModuleList([
            nn.Conv2d(1, 8, (5, 1), stride=(3, 1), padding=(2, 0)),
            nn.Conv2d(8, 16, (5, 1), stride=(3, 1), padding=(2, 0)),
            nn.Conv2d(16, 16, (5, 1), stride=(3, 1), padding=(2, 0)),
            nn.Conv2d(16, 1, (3, 1), padding=(1, 0)),
        ])

    def forward(self, wave):
        b, length = wave.shape
        pad = (-length) % self.period
        h = F.pad(wave, (0, pad)).reshape(b, 1, -1, self.period)
        for conv in self.convs[:-1]:
            h = F.leaky_relu(conv(h), 0.2)
        return self.convs[-1](h).mean(dim=(1, 2, 3))


class DiscriminatorEnsemble(nn.Module):
    """Multi-frequency (STFT sizes 512/1024/2048) plus multi-period
    (2/3/5/7/11) discriminators; forward returns one score per
    sub-discriminator per example, shape (B, 8)."""

    RESOLUTIONS = (512, 1024, 2048)
    PERIODS = (2, 3, 5, 7, 11)

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.mfd = nn.ModuleList(_SpecDiscriminator(n) for n in self.RESOLUTIONS)
        self.mpd = nn.ModuleList(_PeriodDiscriminator(p) for p in self.PERIODS)

    def forward(self, wave):
        scores = [d(wave) for d in self.mfd] + [d(wave) for d in self.mpd]
        return torch.stack(scores, dim=1)


# -- MetricGAN surrogate -----------------------------------------------------


def si_sdr_metric(est: np.ndarray, ref: np.ndarray) -> float:
    """Normalized quality target m in [0, 1]: SI-SDR clamped to [-10, 30] dB
    and affinely mapped (est == ref saturates at 1)."""
    from .metrics import si_sdr

    value = si_sdr(est, ref)
    return float(np.clip((value + 10.0) / 40.0, 0.0, 1.0))


class MetricDiscriminator(nn.Module):
    """Regresses the normalized quality of (estimate, reference) compressed
    magnitude spectrogram pairs; output in [0, 1] via sigmoid."""

    def __init__(self, seed: int = 0):
        super().__init__()
        torch.manual_seed(seed)
        self.convs = nn.ModuleList([
            nn.Conv2d(2, 8, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(8, 16, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(16, 16, (3, 3), stride=(2, 2), padding=1),
            nn.Conv2d(16, 1, (3, 3), padding=1),
        ])

    def forward(self, est_spec, ref_spec):
        est_c, ref_c = _as_complex(est_spec), _as_complex(ref_spec)
        h = torch.stack([(est_c.abs() + 1e-6).pow(0.3),
                         (ref_c.abs() + 1e-6).pow(0.3)], dim=1)
        for conv in self.convs[:-1]:
            h = F.leaky_relu(conv(h), 0.2)
        return torch.sigmoid(self.convs[-1](h).mean(dim=(1, 2, 3)))


def metricgan_losses(d_est: torch.Tensor, d_ref: torch.Tensor,
                     m: torch.Tensor):
    """L_Dm = MSE(D(est, ref), m) + MSE(D(ref, ref), 1);
    L_Gm = MSE(D(est, ref), 1)."""
    l_dm = (d_est - m).square().mean() + (d_ref - 1.0).square().mean()
    l_gm = (d_est - 1.0).square().mean()
    return l_dm, l_gm
