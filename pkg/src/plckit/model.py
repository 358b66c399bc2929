"""Band-split dual-path packet-loss-concealment generator.

Signal path (per 48 kHz clip): STFT -> band split (wide 0-16 kHz / high
16-24 kHz) -> wide-band encoder of 4 [gated separable conv -> dilated conv
stack] stages -> frequency/time GRU bottleneck -> mirrored decoder with
sub-pixel frequency upsampling -> high-band gain module -> band merge ->
(stage 2: 0-8 kHz refinement module) -> iSTFT.

The encoder's time-axis depthwise kernels exist in causal / non-causal pairs
(`weight_causal` / `weight_noncausal`); every other parameter is shared
between paths. Training runs both paths through the shared trunk in one pass
(`forward_dual`) so the causal path can be distilled toward the look-ahead
path; inference executes exactly one path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .numerics import (
    DualPathDepthwiseConv2d,
    PaddingMode,
    channels_to_complex,
    complex_to_channels,
    time_padding,
)
from .signal import BandLayout, StftConfig, hann_window

STFT = StftConfig()
BANDS = BandLayout()
#: Network-internal spectrum scale (2 / sum(window)): a unit-amplitude sine
#: lands near 1.0 at its bin, keeping activations O(1). Losses, metrics and
#: file I/O always see physical (unscaled) spectra.
SPEC_SCALE = 2.0 / 480.0


@dataclass(frozen=True)
class GeneratorConfig:
    """Architecture widths. Defaults are the full-size configuration; widths
    not fixed by the published description (high-band conv geometry, the
    refinement module) are reconstruction choices sized to land the audit at
    the published parameter/FLOP figures."""

    channels: int = 80
    enc_layers: int = 4
    kernel: tuple = (2, 3)
    stride: tuple = (1, 2)
    tfdcm_depths: tuple = (4, 4, 3, 2)
    tfdcm_kernel: tuple = (3, 3)
    bottleneck_hidden: int = 128
    highband_conv_channels: int = 128
    highband_gru_hidden: int = 128
    highband_freq_kernel: int = 12
    highband_freq_stride: int = 12
    pp_lift: int = 3
    pp_gru_hidden: int = 28
    pp_conv_channels: int = 8
    pp_conv_kernel: tuple = (2, 3)
    kd_tap: str = "final"  # "final" | "per_stage"
    seed: int = 0

    def __post_init__(self):
        if len(self.tfdcm_depths) != self.enc_layers:
            raise ValueError("tfdcm_depths length must equal enc_layers")
        if self.kd_tap not in ("final", "per_stage"):
            raise ValueError("kd_tap must be 'final' or 'per_stage'")

    @classmethod
    def toy(cls, **overrides) -> "GeneratorConfig":
        """Desk-test preset: same depths/dilations/band geometry at a fraction
        of the width (~1/25 of the full compute)."""
        base = dict(
            channels=16, bottleneck_hidden=48,
            highband_conv_channels=32, highband_gru_hidden=32,
            pp_lift=2, pp_gru_hidden=12, pp_conv_channels=4,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for key in ("kernel", "stride", "tfdcm_depths", "tfdcm_kernel",
                     "pp_conv_kernel"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        kwargs = dict(d)
        for key in ("kernel", "stride", "tfdcm_depths", "tfdcm_kernel",
                     "pp_conv_kernel"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)

    def encoder_freq_dims(self) -> list[int]:
        """Frequency widths entering each encoder stage, plus the final one
        (full config: 321 -> 161 -> 81 -> 41 -> 21)."""
        dims = [BANDS.wide_bins]
        for _ in range(self.enc_layers):
            f = dims[-1]
            pad = (self.kernel[1] - 1) // 2
            dims.append((f + 2 * pad - self.kernel[1]) // self.stride[1] + 1)
        return dims


def torch_stft(wave: torch.Tensor, cfg: StftConfig = STFT) -> torch.Tensor:
    """(B, L) -> (B, T, bins) complex; frame t covers [t*hop, t*hop+frame_len),
    tail zero-padded so T = ceil(L / hop). Mirrors plckit.signal.stft."""
    b, length = wave.shape
    n_frames = -(-length // cfg.hop)
    pad = (n_frames - 1) * cfg.hop + cfg.frame_len - length
    padded = F.pad(wave, (0, pad))
    frames = padded.unfold(1, cfg.frame_len, cfg.hop)
    win = torch.as_tensor(hann_window(cfg.frame_len), dtype=wave.dtype,
                          device=wave.device)
    return torch.fft.rfft(frames * win, n=cfg.fft_size, dim=-1)


def torch_istft(spec: torch.Tensor, cfg: StftConfig = STFT) -> torch.Tensor:
    """(B, T, bins) complex -> (B, T*hop); overlap-add with synthesis
    windowing and COLA normalization. Mirrors plckit.signal.istft."""
    b, t, _ = spec.shape
    real_dtype = torch.float64 if spec.dtype == torch.complex128 else torch.float32
    win = torch.as_tensor(hann_window(cfg.frame_len), dtype=real_dtype,
                          device=spec.device)
    frames = torch.fft.irfft(spec, n=cfg.fft_size, dim=-1) * win
    # fold expects (B, kernel_elems, windows) over a (1, out_len) plane
    out_len = (t - 1) * cfg.hop + cfg.frame_len
    ola = F.fold(frames.transpose(1, 2), output_size=(1, out_len),
                 kernel_size=(1, cfg.frame_len), stride=(1, cfg.hop))
    ola = ola.reshape(b, out_len)[:, : t * cfg.hop]
    norm = (win[: cfg.hop] ** 2 + win[cfg.hop :] ** 2).repeat(t)
    return ola / norm


class CausalDepthwiseConv2d(nn.Module):
    """Single-path depthwise conv, past-only time padding, symmetric freq pad."""

    def __init__(self, channels, kernel=(2, 3), stride=(1, 1), dilation=(1, 1)):
        super().__init__()
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.dilation = tuple(dilation)
        self.freq_pad = (kernel[1] - 1) * dilation[1] // 2
        self.channels = channels
        ref = nn.Conv2d(channels, channels, kernel, groups=channels, bias=False)
        self.weight = nn.Parameter(ref.weight.detach().clone())

    def forward(self, x):
        past, _ = time_padding(self.kernel[0], self.dilation[0], PaddingMode.CAUSAL)
        x = F.pad(x, (self.freq_pad, self.freq_pad, past, 0))
        return F.conv2d(x, self.weight, stride=self.stride,
                        dilation=self.dilation, groups=self.channels)


class GatedConvBlock(nn.Module):
    """Separable conv to 2*C_out channels split into value/gate halves:
    out = value * sigmoid(gate). Dual-path variants pair the depthwise time
    kernel; the pointwise expansion is always shared."""

    def __init__(self, c_in, c_out, kernel=(2, 3), stride=(1, 2), dual=True):
        super().__init__()
        self.dual = dual
        if dual:
            self.dw = DualPathDepthwiseConv2d(c_in, kernel, stride=stride)
        else:
            self.dw = CausalDepthwiseConv2d(c_in, kernel, stride=stride)
        self.pw = nn.Conv2d(c_in, 2 * c_out, 1)

    def forward(self, x, path: PaddingMode = PaddingMode.CAUSAL):
        h = self.dw(x, path) if self.dual else self.dw(x)
        value, gate = self.pw(h).chunk(2, dim=1)
        return value * torch.sigmoid(gate)


class TFDCMBlock(nn.Module):
    """One dilated unit of the time-frequency dilated conv module:
    pointwise -> BN -> PReLU -> dual-path dilated depthwise -> BN -> PReLU ->
    pointwise, with a residual connection."""

    def __init__(self, channels, kernel=(3, 3), dilation=1):
        super().__init__()
        self.pw_in = nn.Conv2d(channels, channels, 1)
        self.bn_in = nn.BatchNorm2d(channels)
        self.act_in = nn.PReLU(channels)
        self.dw = DualPathDepthwiseConv2d(channels, kernel,
                                          dilation=(dilation, dilation))
        self.bn_mid = nn.BatchNorm2d(channels)
        self.act_mid = nn.PReLU(channels)
        self.pw_out = nn.Conv2d(channels, channels, 1)

    def forward(self, x, path):
        h = self.act_in(self.bn_in(self.pw_in(x)))
        h = self.act_mid(self.bn_mid(self.dw(h, path)))
        return x + self.pw_out(h)


class TFDCM(nn.Module):
    """Stack of depth n dilated blocks, dilation 2^i on both axes."""

    def __init__(self, channels, depth, kernel=(3, 3)):
        super().__init__()
        self.blocks = nn.ModuleList(
            TFDCMBlock(channels, kernel, dilation=2 ** i) for i in range(depth)
        )

    def forward(self, x, path):
        for block in self.blocks:
            x = block(x, path)
        return x


class Encoder(nn.Module):
    """Four stages of [gated conv (freq stride 2) -> TFDCM]; returns the
    final feature map plus per-stage skip outputs."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.channels
        ins = [2] + [c] * (cfg.enc_layers - 1)
        self.gated = nn.ModuleList(
            GatedConvBlock(ins[i], c, cfg.kernel, cfg.stride, dual=True)
            for i in range(cfg.enc_layers)
        )
        self.tfdcm = nn.ModuleList(
            TFDCM(c, cfg.tfdcm_depths[i], cfg.tfdcm_kernel)
            for i in range(cfg.enc_layers)
        )

    def forward(self, x, path):
        skips = []
        for gated, tfdcm in zip(self.gated, self.tfdcm):
            x = tfdcm(gated(x, path), path)
            skips.append(x)
        return x, skips


class FTGRUBottleneck(nn.Module):
    """One GRU pass along frequency (per frame), projection, residual; then one
    unidirectional GRU pass along time (per bin), projection, residual."""

    def __init__(self, channels, hidden):
        super().__init__()
        self.f_gru = nn.GRU(channels, hidden, batch_first=True)
        self.f_proj = nn.Linear(hidden, channels)
        self.t_gru = nn.GRU(channels, hidden, batch_first=True)
        self.t_proj = nn.Linear(hidden, channels)

    def forward(self, x):
        b, c, t, f = x.shape
        h = x.permute(0, 2, 3, 1).reshape(b * t, f, c)
        h = self.f_proj(self.f_gru(h)[0])
        x = x + h.reshape(b, t, f, c).permute(0, 3, 1, 2)
        h = x.permute(0, 3, 2, 1).reshape(b * f, t, c)
        h = self.t_proj(self.t_gru(h)[0])
        return x + h.reshape(b, f, t, c).permute(0, 3, 2, 1)


class DecoderStage(nn.Module):
    """Skip concatenation -> gated conv -> sub-pixel frequency upsampling
    (x2, cropped to the mirrored encoder width)."""

    def __init__(self, channels, c_out, kernel=(2, 3)):
        super().__init__()
        self.gated = GatedConvBlock(2 * channels, channels, kernel,
                                    stride=(1, 1), dual=False)
        self.subpixel = nn.Conv2d(channels, 2 * c_out, 1)
        self.c_out = c_out

    def forward(self, x, skip, target_f):
        if skip.shape != x.shape:
            raise ValueError(f"skip shape {tuple(skip.shape)} != {tuple(x.shape)}")
        h = self.gated(torch.cat([x, skip], dim=1))
        h = self.subpixel(h)
        b, _, t, f = h.shape
        h = h.reshape(b, self.c_out, 2, t, f).permute(0, 1, 3, 4, 2)
        return h.reshape(b, self.c_out, t, 2 * f)[..., :target_f]


class Decoder(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.channels
        outs = [c] * (cfg.enc_layers - 1) + [2]
        self.stages = nn.ModuleList(
            DecoderStage(c, outs[i], cfg.kernel) for i in range(cfg.enc_layers)
        )
        # frequency widths to restore, deepest first (full: 41, 81, 161, 321)
        self.targets = list(reversed(cfg.encoder_freq_dims()[:-1]))

    def forward(self, x, skips):
        for stage, skip, target in zip(self.stages, reversed(skips), self.targets):
            x = stage(x, skip, target)
        return x


class F0Head(nn.Module):
    """Frequency-pooled linear map to one nonnegative Hz value per frame."""

    def __init__(self, channels):
        super().__init__()
        self.proj = nn.Linear(channels, 1)

    def forward(self, x):
        pooled = x.mean(dim=3).transpose(1, 2)  # (B, T, C)
        return F.softplus(self.proj(pooled)).squeeze(-1)


class HighBand(nn.Module):
    """Gain-mask bandwidth extension: conv features of the wide-band magnitude
    -> time GRU -> per-bin gains in [0, 2], applied to a mirrored copy of the
    top wide-band complex estimate (magnitude mirror with replicated phase).

    The lossy high band is accepted for interface completeness; this
    reconstruction derives the high band from the wide estimate alone.
    """

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        self.kernel = (2, cfg.highband_freq_kernel)
        self.stride = (1, cfg.highband_freq_stride)
        self.conv = nn.Conv2d(1, cfg.highband_conv_channels, self.kernel,
                              stride=self.stride)
        self.act = nn.PReLU(cfg.highband_conv_channels)
        f_tilde = (BANDS.wide_bins - self.kernel[1]) // self.stride[1] + 1
        self.gru = nn.GRU(cfg.highband_conv_channels * f_tilde,
                          cfg.highband_gru_hidden, batch_first=True)
        self.gains = nn.Linear(cfg.highband_gru_hidden, BANDS.high_bins)
        mirror = torch.arange(BANDS.wide_end - 1,
                              BANDS.wide_end - 1 - BANDS.high_bins, -1)
        self.register_buffer("mirror_idx", mirror, persistent=False)

    def forward(self, wide_est, high_lossy=None):
        mag = torch.sqrt(wide_est[:, :1] ** 2 + wide_est[:, 1:2] ** 2 + 1e-12)
        h = F.pad(mag, (0, 0, 1, 0))  # causal: one past frame for kernel 2
        h = self.act(self.conv(h))
        b, c, t, f = h.shape
        h = self.gru(h.permute(0, 2, 1, 3).reshape(b, t, c * f))[0]
        g = 2.0 * torch.sigmoid(self.gains(h))  # (B, T, high_bins)
        return g.unsqueeze(1) * wide_est[..., self.mirror_idx]


class PostProc(nn.Module):
    """0-8 kHz refinement: Linear+Tanh -> per-bin time GRU -> Conv2d ->
    BatchNorm -> Linear+Tanh, emitting a Tanh-bounded complex ratio mask that
    multiplies the input band. Bins above the band pass through untouched
    (handled by the caller)."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        bins = BANDS.post_bins
        self.bins = bins
        self.lift = cfg.pp_lift
        self.lin_in = nn.Linear(2 * bins, cfg.pp_lift * bins)
        self.gru = nn.GRU(cfg.pp_lift, cfg.pp_gru_hidden, batch_first=True)
        self.conv = nn.Conv2d(cfg.pp_gru_hidden, cfg.pp_conv_channels,
                              cfg.pp_conv_kernel)
        self.conv_kernel = tuple(cfg.pp_conv_kernel)
        self.bn = nn.BatchNorm2d(cfg.pp_conv_channels)
        self.lin_out = nn.Linear(cfg.pp_conv_channels * bins, 2 * bins)

    def forward(self, x):
        b, _, t, f = x.shape
        h = torch.tanh(self.lin_in(x.permute(0, 2, 1, 3).reshape(b, t, 2 * f)))
        h = h.reshape(b, t, self.lift, f).permute(0, 3, 1, 2).reshape(b * f, t, self.lift)
        h = self.gru(h)[0].reshape(b, f, t, -1).permute(0, 3, 2, 1)  # (B,H,T,F)
        kt, kf = self.conv_kernel
        h = F.pad(h, ((kf - 1) // 2, kf // 2, kt - 1, 0))  # causal time pad
        h = self.bn(self.conv(h))
        h = torch.tanh(self.lin_out(h.permute(0, 2, 1, 3).reshape(b, t, -1)))
        mask = h.reshape(b, t, 2, f).permute(0, 2, 1, 3)
        re = mask[:, 0] * x[:, 0] - mask[:, 1] * x[:, 1]
        im = mask[:, 0] * x[:, 1] + mask[:, 1] * x[:, 0]
        return torch.stack([re, im], dim=1)


class Generator(nn.Module):
    """Full concealment model; see module docstring for the signal path."""

    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        torch.manual_seed(cfg.seed)  # deterministic construction
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.bottleneck = FTGRUBottleneck(cfg.channels, cfg.bottleneck_hidden)
        self.decoder = Decoder(cfg)
        self.f0_head = F0Head(cfg.channels)
        self.highband = HighBand(cfg)
        self.postproc = PostProc(cfg)

    def trunk(self, enc_out, skips, stage):
        """Shared (path-independent) tail: bottleneck through band merge and
        optional refinement. Returns (full_spec_channels, f0)."""
        bott = self.bottleneck(enc_out)
        wide_est = self.decoder(bott, skips)
        f0 = self.f0_head(bott)
        high_est = self.highband(wide_est)
        full = torch.cat([wide_est, high_est], dim=-1)
        if stage >= 2:
            post = self.postproc(full[..., : BANDS.post_bins])
            full = torch.cat([post, full[..., BANDS.post_bins :]], dim=-1)
        return full, f0

    def analyze(self, wave):
        """Wave -> (scaled input channels, raw complex spec)."""
        spec = torch_stft(wave)
        return complex_to_channels(spec) * SPEC_SCALE, spec

    def synthesize(self, full):
        """Scaled output channels -> (complex spec, wave)."""
        spec_est = channels_to_complex(full) / SPEC_SCALE
        return spec_est, torch_istft(spec_est)

    def forward(self, wave, path=PaddingMode.CAUSAL, stage=1):
        """Single-path forward. Returns dict with wave/spec/f0/enc_out."""
        x, _ = self.analyze(wave)
        wide = x[..., : BANDS.wide_bins]
        enc_out, skips = self.encoder(wide, PaddingMode(path))
        full, f0 = self.trunk(enc_out, skips, stage)
        spec_est, wave_est = self.synthesize(full)
        return {"wave": wave_est, "spec": spec_est, "f0": f0,
                "enc_out": enc_out, "skips": skips}

    def forward_dual(self, wave, stage=1):
        """Both encoder paths through the shared trunk in one step (doubled
        effective batch). Returns per-path outputs plus the distillation
        feature pair (causal student, non-causal teacher)."""
        x, _ = self.analyze(wave)
        wide = x[..., : BANDS.wide_bins]
        enc_c, skips_c = self.encoder(wide, PaddingMode.CAUSAL)
        enc_n, skips_n = self.encoder(wide, PaddingMode.NONCAUSAL)
        enc = torch.cat([enc_c, enc_n], dim=0)
        skips = [torch.cat([a, b], dim=0) for a, b in zip(skips_c, skips_n)]
        full, f0 = self.trunk(enc, skips, stage)
        spec_est, wave_est = self.synthesize(full)
        b = wave.shape[0]
        if self.cfg.kd_tap == "per_stage":
            kd_pairs = list(zip(skips_c, skips_n))
        else:
            kd_pairs = [(enc_c, enc_n)]
        return {
            "causal": {"wave": wave_est[:b], "spec": spec_est[:b], "f0": f0[:b]},
            "noncausal": {"wave": wave_est[b:], "spec": spec_est[b:], "f0": f0[b:]},
            "kd_pairs": kd_pairs,
        }

    def parameter_scopes(self) -> dict[str, int]:
        """Trainable parameter totals per named submodule."""
        scopes = {}
        for name, module in self.named_children():
            scopes[name] = sum(p.numel() for p in module.parameters())
        return scopes

    def dual_path_parameters(self) -> dict[str, int]:
        """Names and sizes of the non-causal depthwise kernels (the only
        parameters excluded from causal inference)."""
        return {n: p.numel() for n, p in self.named_parameters()
                if n.endswith("weight_noncausal")}
