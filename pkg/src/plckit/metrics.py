"""Desk-scale evaluation metrics and architecture audits.

SI-SDR and log-spectral distance stand in for the challenge's proprietary
perceptual metrics. The audit compares the actual parameter tensors and an
analytic multiply-add count against the published figures (2.01M / 2.62M
parameters, 3.30G / 3.41G FLOPs, +0.61M / +0.11G for the refinement module);
the published convention is unstated, so both 1xMAC and 2xMAC numbers are
reported (1xMAC reproduces the published table).
"""

from __future__ import annotations

import numpy as np

from .channel import PacketTrace
from .model import BANDS, Generator, GeneratorConfig
from .signal import PACKET_SAMPLES, AudioSignal, StftConfig, stft

FRAMES_PER_SECOND = 100  # 10 ms hop
SI_SDR_CAP = 100.0

#: Published reference points (millions of parameters, giga-MACs per second).
PUBLISHED = {
    "stage1_params_m": 2.01,
    "stage12_params_m": 2.62,
    "postproc_params_m": 0.61,
    "stage1_gmacs": 3.30,
    "stage12_gmacs": 3.41,
    "postproc_gmacs": 0.11,
}


class MetricsError(ValueError):
    pass


def si_sdr(est, ref) -> float:
    """Scale-invariant signal-to-distortion ratio in dB, capped to +-100."""
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.size != ref.size:
        raise MetricsError(f"length mismatch {est.size} vs {ref.size}")
    ref_energy = float(ref @ ref)
    if ref_energy == 0.0:
        raise MetricsError("zero reference")
    alpha = float(est @ ref) / ref_energy
    target = alpha * ref
    noise = est - target
    num = float(target @ target)
    den = float(noise @ noise)
    if num == 0.0:
        return -SI_SDR_CAP
    if den <= num * 1e-10:
        return SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CAP, SI_SDR_CAP))


def lsd(est: AudioSignal, ref: AudioSignal, cfg: StftConfig | None = None) -> float:
    """Log-spectral distance in dB: RMS over frames of the per-frame RMS
    difference of dB log-magnitudes, with a 1e-8 magnitude floor."""
    if len(est) != len(ref):
        raise MetricsError("length mismatch")
    cfg = cfg or StftConfig()
    mag_e = np.maximum(np.abs(stft(est, cfg).bins), 1e-8)
    mag_r = np.maximum(np.abs(stft(ref, cfg).bins), 1e-8)
    diff = 20.0 * (np.log10(mag_e) - np.log10(mag_r))
    per_frame = np.sqrt(np.mean(diff ** 2, axis=1))
    return float(np.sqrt(np.mean(per_frame ** 2)))


def lost_region_mask(trace: PacketTrace, total_samples: int,
                     n: int = PACKET_SAMPLES, margin: int = 480) -> np.ndarray:
    """Boolean sample mask of lost packets expanded by `margin` samples per
    side (the STFT overlap actually affected by each loss)."""
    mask = np.zeros(total_samples, dtype=bool)
    for j in np.nonzero(trace.flags)[0]:
        lo = max(0, j * n - margin)
        hi = min(total_samples, (j + 1) * n + margin)
        mask[lo:hi] = True
    return mask


def lost_region_si_sdr(est, ref, trace: PacketTrace,
                       n: int = PACKET_SAMPLES, margin: int = 480) -> float:
    """SI-SDR restricted to the (expanded) lost regions."""
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    mask = lost_region_mask(trace, min(est.size, ref.size), n, margin)
    if not mask.any():
        raise MetricsError("trace has no lost packets")
    return si_sdr(est[mask], ref[mask])


# -- architecture audit ------------------------------------------------------


def count_params(gen: Generator, scope: str = "all",
                 inference: bool = False) -> int:
    """Exact trainable parameter totals.

    scope: a named submodule ("encoder", "bottleneck", "decoder", "f0_head",
    "highband", "postproc"), "stage1" (everything but postproc), or "all".
    inference=True excludes the unused non-causal depthwise kernels.
    """
    scopes = gen.parameter_scopes()
    if scope == "all":
        total = sum(scopes.values())
    elif scope == "stage1":
        total = sum(v for k, v in scopes.items() if k != "postproc")
    elif scope in scopes:
        total = scopes[scope]
    else:
        raise MetricsError(f"unknown scope {scope!r}")
    if inference and scope in ("all", "stage1", "encoder"):
        total -= sum(gen.dual_path_parameters().values())
    return total


def _gru_macs(inp: int, hidden: int) -> int:
    return 3 * (inp * hidden + hidden * hidden)


def count_flops(cfg: GeneratorConfig) -> dict:
    """Analytic multiply-adds per second of audio, per module, for causal
    inference (one encoder path). Returns per-module MACs/s plus "total",
    "stage1" and a 2xMAC convention alongside.
    """
    freqs = cfg.encoder_freq_dims()
    c = cfg.channels
    k_elems = cfg.kernel[0] * cfg.kernel[1]
    per_frame: dict[str, float] = {}

    enc = 0
    ins = [2] + [c] * (cfg.enc_layers - 1)
    for i in range(cfg.enc_layers):
        f_out = freqs[i + 1]
        enc += ins[i] * k_elems * f_out          # depthwise (strided)
        enc += ins[i] * 2 * c * f_out            # pointwise to value/gate
    tk = cfg.tfdcm_kernel[0] * cfg.tfdcm_kernel[1]
    for i in range(cfg.enc_layers):
        f = freqs[i + 1]
        enc += cfg.tfdcm_depths[i] * f * (c * c + c * tk + c * c)
    per_frame["encoder"] = enc

    fq = freqs[-1]
    h = cfg.bottleneck_hidden
    per_frame["bottleneck"] = 2 * fq * (_gru_macs(c, h) + h * c)

    dec = 0
    outs = [c] * (cfg.enc_layers - 1) + [2]
    for i, f in enumerate(reversed(freqs[1:])):
        dec += 2 * c * k_elems * f               # depthwise on concat input
        dec += 2 * c * 2 * c * f                 # pointwise to value/gate
        dec += c * 2 * outs[i] * f               # sub-pixel conv
    per_frame["decoder"] = dec

    per_frame["f0_head"] = c

    f_tilde = (BANDS.wide_bins - cfg.highband_freq_kernel) // cfg.highband_freq_stride + 1
    hb = cfg.highband_conv_channels * 2 * cfg.highband_freq_kernel * f_tilde
    hb += _gru_macs(cfg.highband_conv_channels * f_tilde, cfg.highband_gru_hidden)
    hb += cfg.highband_gru_hidden * BANDS.high_bins
    per_frame["highband"] = hb

    bins = BANDS.post_bins
    pp = 2 * bins * cfg.pp_lift * bins
    pp += bins * _gru_macs(cfg.pp_lift, cfg.pp_gru_hidden)
    pp += (cfg.pp_gru_hidden * cfg.pp_conv_channels
           * cfg.pp_conv_kernel[0] * cfg.pp_conv_kernel[1] * bins)
    pp += cfg.pp_conv_channels * bins * 2 * bins
    per_frame["postproc"] = pp

    macs = {k: v * FRAMES_PER_SECOND for k, v in per_frame.items()}
    macs["stage1"] = sum(v for k, v in macs.items() if k != "postproc")
    macs["total"] = macs["stage1"] + macs["postproc"]
    return {"macs_per_second": macs,
            "flops_2xmac_per_second": {k: 2 * v for k, v in macs.items()}}


def audit_report(cfg: GeneratorConfig, gen: Generator | None = None) -> dict:
    """Per-module parameters and FLOPs plus comparison against the published
    figures and notes naming the reconstructed (under-specified) blocks."""
    gen = gen or Generator(cfg)
    flops = count_flops(cfg)
    macs = flops["macs_per_second"]
    scopes = gen.parameter_scopes()
    dual_extra = sum(gen.dual_path_parameters().values())
    modules = {}
    for name, params in scopes.items():
        modules[name] = {
            "params_train": params,
            "params_inference": (params - dual_extra if name == "encoder" else params),
            "macs_per_second": macs[name],
        }
    stage1_inf = count_params(gen, "stage1", inference=True)
    total_inf = count_params(gen, "all", inference=True)
    summary = {
        "stage1_params_train": count_params(gen, "stage1"),
        "stage1_params_inference": stage1_inf,
        "stage12_params_train": count_params(gen, "all"),
        "stage12_params_inference": total_inf,
        "postproc_params": scopes["postproc"],
        "dual_path_extra_params": dual_extra,
        "stage1_gmacs": macs["stage1"] / 1e9,
        "stage12_gmacs": macs["total"] / 1e9,
        "postproc_gmacs": macs["postproc"] / 1e9,
        "stage1_gflops_2xmac": 2 * macs["stage1"] / 1e9,
        "stage12_gflops_2xmac": 2 * macs["total"] / 1e9,
    }
    vs_published = {
        "stage1_params": (stage1_inf / 1e6, PUBLISHED["stage1_params_m"]),
        "stage12_params": (total_inf / 1e6, PUBLISHED["stage12_params_m"]),
        "postproc_params": (scopes["postproc"] / 1e6, PUBLISHED["postproc_params_m"]),
        "stage1_gmacs": (summary["stage1_gmacs"], PUBLISHED["stage1_gmacs"]),
        "stage12_gmacs": (summary["stage12_gmacs"], PUBLISHED["stage12_gmacs"]),
        "postproc_gmacs": (summary["postproc_gmacs"], PUBLISHED["postproc_gmacs"]),
    }
    notes = [
        "exact reproduction of the published counts is impossible: gated-block,"
        " dilated-stack, high-band and refinement internals live in cited prior"
        " work and are reconstructions here",
        "residual parameter mass sits in the reconstructed high-band module"
        " (flattened conv->GRU input; hidden width 128 is published, input"
        " width is not)",
        "refinement-module widths chosen to land the published +0.61M/+0.11G",
        "FLOPs counted as multiply-adds (1xMAC matches the published table);"
        " 2xMAC figures reported alongside",
    ]
    return {"modules": modules, "summary": summary,
            "vs_published": vs_published, "notes": notes}
