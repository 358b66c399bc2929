"""Frame-iterative causal inference engine.

Batch concealment and `--streaming` concealment both drive the same per-frame
step functions below, so they are bit-identical by construction: the only
difference is whether samples arrive all at once or incrementally. Each
time-axis operation carries explicit state (conv history frames, GRU hidden
vectors, the overlap-add tail), sized exactly to the layer's causal receptive
field; zero-initialized state reproduces the batch forward's zero padding.

The engine mirrors the vectorized training forward of `plckit.model` at
float32 tolerance (they share the same parameters but batch their GEMMs
differently); see tests/test_streaming.py for the cross-check.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .model import BANDS, SPEC_SCALE, STFT, Generator
from .numerics import PaddingMode
from .signal import cola_normalizer, hann_window


class _ConvHistory:
    """Past input frames for a causal time-axis conv (kernel kt, dilation dt):
    keeps (kt-1)*dt frames; window() returns them joined with the new frame
    and advances by one."""

    def __init__(self, b, channels, kernel_t, dilation_t, freq, dtype):
        self.depth = (kernel_t - 1) * dilation_t
        self.buf = torch.zeros(b, channels, self.depth, freq, dtype=dtype)

    def window(self, x):
        joined = torch.cat([self.buf, x], dim=2)
        self.buf = joined[:, :, 1:, :]
        return joined


class StreamingGenerator:
    """Stateful causal-path inference for a trained Generator.

    feed(samples) accepts arbitrary-length sample blocks and returns whatever
    output samples become final; flush() zero-pads the tail to the frame count
    ceil(L / hop) that the batch transform uses and returns the remainder.
    process(wave) runs feed+flush in one call. Estimated spectrogram frames
    and f0 values are accumulated on the instance for inspection.
    """

    def __init__(self, gen: Generator, stage: int = 1, batch: int = 1,
                 dtype=torch.float32):
        if stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        self.gen = gen.eval()
        self.cfg = gen.cfg
        self.stage = stage
        self.b = batch
        self.dtype = dtype
        self.window = torch.as_tensor(hann_window(STFT.frame_len), dtype=dtype)
        self.ola_norm = torch.as_tensor(cola_normalizer(STFT), dtype=dtype)
        self.in_buf = torch.zeros(batch, 0, dtype=dtype)
        self.fed = 0
        self.frames_done = 0
        self.spec_frames: list[torch.Tensor] = []
        self.f0_frames: list[torch.Tensor] = []
        self._init_states()

    def _init_states(self):
        cfg, b, dtype = self.cfg, self.b, self.dtype
        freqs = cfg.encoder_freq_dims()
        kt = cfg.kernel[0]
        self.enc_gated_hist = []
        self.enc_tfdcm_hist = []
        c = cfg.channels
        for i in range(cfg.enc_layers):
            c_in = 2 if i == 0 else c
            self.enc_gated_hist.append(
                _ConvHistory(b, c_in, kt, 1, freqs[i], dtype))
            stage_hists = [
                _ConvHistory(b, c, cfg.tfdcm_kernel[0], 2 ** j, freqs[i + 1], dtype)
                for j in range(cfg.tfdcm_depths[i])
            ]
            self.enc_tfdcm_hist.append(stage_hists)
        self.t_gru_h = torch.zeros(1, b * freqs[-1], cfg.bottleneck_hidden,
                                   dtype=dtype)
        dec_freqs = list(reversed(freqs[1:]))  # widths entering each stage
        self.dec_gated_hist = [
            _ConvHistory(b, 2 * c, kt, 1, f, dtype) for f in dec_freqs
        ]
        self.hb_hist = _ConvHistory(b, 1, 2, 1, BANDS.wide_bins, dtype)
        self.hb_gru_h = torch.zeros(1, b, cfg.highband_gru_hidden, dtype=dtype)
        self.ola_tail = torch.zeros(b, STFT.hop, dtype=dtype)
        if self.stage >= 2:
            self.pp_gru_h = torch.zeros(1, b * BANDS.post_bins,
                                        cfg.pp_gru_hidden, dtype=dtype)
            self.pp_conv_hist = _ConvHistory(
                b, cfg.pp_gru_hidden, cfg.pp_conv_kernel[0], 1,
                BANDS.post_bins, dtype)

    # -- per-frame steps ---------------------------------------------------

    def _gated_step(self, block, hist, x):
        win = hist.window(x)
        weight = block.dw.weight_causal if block.dual else block.dw.weight
        win = F.pad(win, (block.dw.freq_pad, block.dw.freq_pad))
        h = F.conv2d(win, weight, stride=block.dw.stride,
                     dilation=block.dw.dilation, groups=block.dw.channels)
        value, gate = block.pw(h).chunk(2, dim=1)
        return value * torch.sigmoid(gate)

    def _tfdcm_step(self, tfdcm, hists, x):
        for block, hist in zip(tfdcm.blocks, hists):
            h = block.act_in(block.bn_in(block.pw_in(x)))
            win = hist.window(h)
            win = F.pad(win, (block.dw.freq_pad, block.dw.freq_pad))
            h = F.conv2d(win, block.dw.weight_causal,
                         dilation=block.dw.dilation, groups=block.dw.channels)
            h = block.act_mid(block.bn_mid(h))
            x = x + block.pw_out(h)
        return x

    def _bottleneck_step(self, x):
        bott = self.gen.bottleneck
        b, c, _, f = x.shape
        h = x.permute(0, 2, 3, 1).reshape(b, f, c)
        h = bott.f_proj(bott.f_gru(h)[0])
        x = x + h.reshape(b, 1, f, c).permute(0, 3, 1, 2)
        h = x.permute(0, 3, 2, 1).reshape(b * f, 1, c)
        out, self.t_gru_h = bott.t_gru(h, self.t_gru_h)
        h = bott.t_proj(out)
        return x + h.reshape(b, f, 1, c).permute(0, 3, 2, 1)

    def _decoder_step(self, x, skips):
        dec = self.gen.decoder
        for stage, hist, skip, target in zip(dec.stages, self.dec_gated_hist,
                                             reversed(skips), dec.targets):
            h = self._gated_step(stage.gated, hist, torch.cat([x, skip], dim=1))
            h = stage.subpixel(h)
            b, _, t, f = h.shape
            h = h.reshape(b, stage.c_out, 2, t, f).permute(0, 1, 3, 4, 2)
            x = h.reshape(b, stage.c_out, t, 2 * f)[..., :target]
        return x

    def _highband_step(self, wide_est):
        hb = self.gen.highband
        mag = torch.sqrt(wide_est[:, :1] ** 2 + wide_est[:, 1:2] ** 2 + 1e-12)
        win = self.hb_hist.window(mag)
        h = hb.act(hb.conv(win))
        b, c, _, f = h.shape
        out, self.hb_gru_h = hb.gru(h.permute(0, 2, 1, 3).reshape(b, 1, c * f),
                                    self.hb_gru_h)
        g = 2.0 * torch.sigmoid(hb.gains(out))
        return g.unsqueeze(1) * wide_est[..., hb.mirror_idx]

    def _postproc_step(self, x):
        pp = self.gen.postproc
        b, _, _, f = x.shape
        h = torch.tanh(pp.lin_in(x.permute(0, 2, 1, 3).reshape(b, 1, 2 * f)))
        h = h.reshape(b, 1, pp.lift, f).permute(0, 3, 1, 2).reshape(b * f, 1, pp.lift)
        out, self.pp_gru_h = pp.gru(h, self.pp_gru_h)
        h = out.reshape(b, f, 1, -1).permute(0, 3, 2, 1)
        kf = pp.conv_kernel[1]
        win = self.pp_conv_hist.window(h)
        win = F.pad(win, ((kf - 1) // 2, kf // 2))
        h = pp.bn(pp.conv(win))
        h = torch.tanh(pp.lin_out(h.permute(0, 2, 1, 3).reshape(b, 1, -1)))
        mask = h.reshape(b, 1, 2, f).permute(0, 2, 1, 3)
        re = mask[:, 0] * x[:, 0] - mask[:, 1] * x[:, 1]
        im = mask[:, 0] * x[:, 1] + mask[:, 1] * x[:, 0]
        return torch.stack([re, im], dim=1)

    def _frame_step(self, frame):
        """One 960-sample analysis frame -> 480 finalized output samples."""
        spec = torch.fft.rfft(frame * self.window, n=STFT.fft_size, dim=-1)
        x = torch.stack([spec.real, spec.imag], dim=1).unsqueeze(2) * SPEC_SCALE
        wide = x[..., : BANDS.wide_bins]
        skips = []
        h = wide
        for i in range(self.cfg.enc_layers):
            h = self._gated_step(self.gen.encoder.gated[i],
                                 self.enc_gated_hist[i], h)
            h = self._tfdcm_step(self.gen.encoder.tfdcm[i],
                                 self.enc_tfdcm_hist[i], h)
            skips.append(h)
        bott = self._bottleneck_step(h)
        pooled = bott.mean(dim=3).transpose(1, 2)
        f0 = F.softplus(self.gen.f0_head.proj(pooled)).squeeze(-1)
        wide_est = self._decoder_step(bott, skips)
        high_est = self._highband_step(wide_est)
        full = torch.cat([wide_est, high_est], dim=-1)
        if self.stage >= 2:
            post = self._postproc_step(full[..., : BANDS.post_bins])
            full = torch.cat([post, full[..., BANDS.post_bins :]], dim=-1)
        spec_est = torch.complex(full[:, 0, 0], full[:, 1, 0]) / SPEC_SCALE
        self.spec_frames.append(spec_est)
        self.f0_frames.append(f0[:, 0])
        frame_time = torch.fft.irfft(spec_est, n=STFT.fft_size, dim=-1) * self.window
        emit = (self.ola_tail + frame_time[:, : STFT.hop]) / self.ola_norm
        self.ola_tail = frame_time[:, STFT.hop :]
        return emit

    # -- public API --------------------------------------------------------

    @torch.no_grad()
    def feed(self, samples) -> torch.Tensor:
        """Accept (B, n) or (n,) samples; return output finalized so far."""
        samples = torch.as_tensor(samples, dtype=self.dtype)
        if samples.ndim == 1:
            samples = samples.unsqueeze(0)
        if samples.shape[0] != self.b:
            raise ValueError(f"expected batch {self.b}, got {samples.shape[0]}")
        self.in_buf = torch.cat([self.in_buf, samples], dim=1)
        self.fed += samples.shape[1]
        outs = []
        while self.in_buf.shape[1] >= STFT.frame_len:
            outs.append(self._frame_step(self.in_buf[:, : STFT.frame_len]))
            self.in_buf = self.in_buf[:, STFT.hop :]
            self.frames_done += 1
        return (torch.cat(outs, dim=1) if outs
                else torch.zeros(self.b, 0, dtype=self.dtype))

    @torch.no_grad()
    def flush(self) -> torch.Tensor:
        """Zero-pad the tail and emit the remaining frames so the total frame
        count matches the batch transform (ceil(fed / hop))."""
        target = -(-self.fed // STFT.hop)
        outs = []
        while self.frames_done < target:
            frame = F.pad(self.in_buf[:, : STFT.frame_len],
                          (0, max(0, STFT.frame_len - self.in_buf.shape[1])))
            outs.append(self._frame_step(frame))
            self.in_buf = self.in_buf[:, min(STFT.hop, self.in_buf.shape[1]) :]
            self.frames_done += 1
        return (torch.cat(outs, dim=1) if outs
                else torch.zeros(self.b, 0, dtype=self.dtype))

    @property
    def spec(self) -> torch.Tensor:
        """Estimated spectrogram so far, (B, frames, bins) complex."""
        if not self.spec_frames:
            return torch.zeros(self.b, 0, STFT.n_bins, dtype=torch.complex64)
        return torch.stack(self.spec_frames, dim=1)

    @property
    def f0(self) -> torch.Tensor:
        if not self.f0_frames:
            return torch.zeros(self.b, 0, dtype=self.dtype)
        return torch.stack(self.f0_frames, dim=1)


@torch.no_grad()
def conceal_batch(gen: Generator, wave, stage: int = 1,
                  path=PaddingMode.CAUSAL) -> dict:
    """Reference inference for a whole clip.

    The causal path runs the frame-iterative engine (so batch output ==
    streaming output bit-exactly); the non-causal path requires the whole
    clip and uses the vectorized forward.
    """
    wave = torch.as_tensor(wave, dtype=torch.float32)
    squeeze = wave.ndim == 1
    if squeeze:
        wave = wave.unsqueeze(0)
    path = PaddingMode(path)
    if path == PaddingMode.CAUSAL:
        eng = StreamingGenerator(gen, stage=stage, batch=wave.shape[0])
        first = eng.feed(wave)
        rest = eng.flush()
        out = {"wave": torch.cat([first, rest], dim=1), "spec": eng.spec,
               "f0": eng.f0}
    else:
        res = gen.eval().forward(wave, path, stage=stage)
        out = {"wave": res["wave"], "spec": res["spec"], "f0": res["f0"]}
    if squeeze:
        out = {k: v[0] for k, v in out.items()}
    return out
