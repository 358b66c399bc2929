"""Differentiable building blocks and the finite-difference gradient checker.

Forward/backward is delegated to torch autograd; every block below is shaped
so that the time axis can be padded causally (past only) or non-causally
(look-ahead). `grad_check` is the independent oracle: central differences over
every (or a seeded subset of) parameter and input coordinates, evaluated in
float64 so the stated tolerances measure gradient correctness rather than
float32 truncation.

Tensor layout everywhere: (batch, channel, time, frequency).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn.functional as F
from torch import nn


class PaddingMode(str, Enum):
    CAUSAL = "causal"
    NONCAUSAL = "noncausal"


def time_padding(kernel_t: int, dilation_t: int, mode: PaddingMode) -> tuple[int, int]:
    """(past, future) frame padding for a time-axis kernel.

    Causal pads only the past. Non-causal splits the span symmetrically; for
    even kernels the extra frame goes to the future (kernel 2 -> exactly one
    frame of look-ahead per layer).
    """
    span = (kernel_t - 1) * dilation_t
    if mode == PaddingMode.CAUSAL:
        return span, 0
    past = span // 2
    return past, span - past


class DepthwiseSeparableConv2d(nn.Module):
    """Depthwise (one filter per channel) followed by 1x1 pointwise conv.

    Time stride must be 1 (the model never subsamples time); frequency padding
    is symmetric `freq_pad` on both sides, frequency length follows
    floor((F + 2*pad_f - K_f) / S_f) + 1.
    """

    def __init__(self, c_in, c_out, kernel=(2, 3), stride=(1, 2),
                 dilation=(1, 1), padding: PaddingMode = PaddingMode.CAUSAL,
                 freq_pad=None, bias=True):
        super().__init__()
        if stride[0] != 1:
            raise ValueError("time stride must be 1")
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.dilation = tuple(dilation)
        self.padding = PaddingMode(padding)
        self.freq_pad = ((kernel[1] - 1) * dilation[1] // 2
                         if freq_pad is None else freq_pad)
        self.depthwise = nn.Conv2d(c_in, c_in, kernel, stride=stride,
                                   dilation=dilation, groups=c_in, bias=False)
        self.pointwise = nn.Conv2d(c_in, c_out, 1, bias=bias)

    def forward(self, x):
        past, future = time_padding(self.kernel[0], self.dilation[0], self.padding)
        x = F.pad(x, (self.freq_pad, self.freq_pad, past, future))
        return self.pointwise(self.depthwise(x))


class DualPathDepthwiseConv2d(nn.Module):
    """Two unshared depthwise time-axis kernels, one causal, one look-ahead.

    Exactly one path is evaluated per call; the caller owns everything that is
    shared between paths (pointwise convs, norms, activations).
    """

    def __init__(self, channels, kernel=(2, 3), stride=(1, 1), dilation=(1, 1),
                 freq_pad=None):
        super().__init__()
        if stride[0] != 1:
            raise ValueError("time stride must be 1")
        self.kernel = tuple(kernel)
        self.stride = tuple(stride)
        self.dilation = tuple(dilation)
        self.freq_pad = ((kernel[1] - 1) * dilation[1] // 2
                         if freq_pad is None else freq_pad)
        ref = nn.Conv2d(channels, channels, kernel, groups=channels, bias=False)
        self.weight_causal = nn.Parameter(ref.weight.detach().clone())
        ref2 = nn.Conv2d(channels, channels, kernel, groups=channels, bias=False)
        self.weight_noncausal = nn.Parameter(ref2.weight.detach().clone())
        self.channels = channels

    def forward(self, x, path: PaddingMode):
        path = PaddingMode(path)
        weight = (self.weight_causal if path == PaddingMode.CAUSAL
                  else self.weight_noncausal)
        past, future = time_padding(self.kernel[0], self.dilation[0], path)
        x = F.pad(x, (self.freq_pad, self.freq_pad, past, future))
        return F.conv2d(x, weight, stride=self.stride, dilation=self.dilation,
                        groups=self.channels)


def gru_cell_step(gru: nn.GRU, x: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """One manual step of a single-layer nn.GRU (used by the streaming engine).

    x: (batch, input), h: (batch, hidden) -> new hidden (batch, hidden).
    Matches torch's gate layout [r; z; n] and its reset-gate placement.
    """
    w_ih, w_hh = gru.weight_ih_l0, gru.weight_hh_l0
    b_ih = gru.bias_ih_l0 if gru.bias else torch.zeros(w_ih.shape[0], dtype=x.dtype)
    b_hh = gru.bias_hh_l0 if gru.bias else torch.zeros(w_hh.shape[0], dtype=x.dtype)
    gi = x @ w_ih.T + b_ih
    gh = h @ w_hh.T + b_hh
    hidden = gru.hidden_size
    i_r, i_z, i_n = gi[:, :hidden], gi[:, hidden:2 * hidden], gi[:, 2 * hidden:]
    h_r, h_z, h_n = gh[:, :hidden], gh[:, hidden:2 * hidden], gh[:, 2 * hidden:]
    r = torch.sigmoid(i_r + h_r)
    z = torch.sigmoid(i_z + h_z)
    n = torch.tanh(i_n + r * h_n)
    return (1.0 - z) * n + z * h


def complex_to_channels(spec: torch.Tensor) -> torch.Tensor:
    """(B, T, F) complex -> (B, 2, T, F) real/imag channels."""
    return torch.stack([spec.real, spec.imag], dim=1)


def channels_to_complex(x: torch.Tensor) -> torch.Tensor:
    """(B, 2, T, F) -> (B, T, F) complex."""
    return torch.complex(x[:, 0], x[:, 1])


@dataclass
class GradCheckResult:
    name: str
    max_rel_err: float
    worst_coord: str
    n_checked: int

    @property
    def ok(self) -> bool:
        return math.isfinite(self.max_rel_err)

    def passed(self, tol: float) -> bool:
        return self.ok and self.max_rel_err < tol


class GradCheckError(RuntimeError):
    """Raised when a gradient is non-finite; names the offending coordinate."""


def grad_check(fn, tensors: dict[str, torch.Tensor], eps: float = 1e-4,
               max_coords: int = 10_000, seed: int = 0,
               name: str = "op") -> GradCheckResult:
    """Compare autograd gradients of the scalar fn() against central
    differences on every coordinate of `tensors` (a seeded random subset when
    the total exceeds max_coords).

    Relative error per coordinate is |a - d| / max(|a|, |d|, 1e-3); the floor
    keeps near-zero gradient pairs from dominating the report.
    """
    for t in tensors.values():
        t.requires_grad_(True)
        if t.grad is not None:
            t.grad = None
    loss = fn()
    loss.backward()
    grads = {}
    for key, t in tensors.items():
        g = torch.zeros_like(t) if t.grad is None else t.grad.detach().clone()
        if not torch.isfinite(g).all():
            bad = torch.nonzero(~torch.isfinite(g))[0].tolist()
            raise GradCheckError(f"{name}: non-finite gradient at {key}{bad}")
        grads[key] = g

    coords = [(key, i) for key, t in tensors.items() for i in range(t.numel())]
    if len(coords) > max_coords:
        g = torch.Generator().manual_seed(seed)
        idx = torch.randperm(len(coords), generator=g)[:max_coords]
        coords = [coords[i] for i in idx.tolist()]

    max_err, worst = 0.0, "none"
    with torch.no_grad():
        for key, i in coords:
            flat = tensors[key].view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn().item()
            flat[i] = orig - eps
            lo = fn().item()
            flat[i] = orig
            fd = (hi - lo) / (2 * eps)
            a = grads[key].view(-1)[i].item()
            if not (math.isfinite(fd) and math.isfinite(a)):
                raise GradCheckError(f"{name}: non-finite value at {key}[{i}]")
            err = abs(a - fd) / max(abs(a), abs(fd), 1e-3)
            if err > max_err:
                max_err, worst = err, f"{key}[{i}]"
    return GradCheckResult(name, max_err, worst, len(coords))


def named_parameter_tensors(module: nn.Module) -> dict[str, torch.Tensor]:
    return {n: p for n, p in module.named_parameters()}


def primitive_suite(seed: int) -> list[tuple[str, float, "GradCheckResult"]]:
    """Gradient-check every primitive at its module tolerance.

    Returns (name, tolerance, result) triples; used by the CLI `gradcheck`
    subcommand and the acceptance suite.
    """
    torch.manual_seed(seed)
    results = []

    def run(name, tol, fn, tensors):
        results.append((name, tol, grad_check(fn, tensors, seed=seed, name=name)))

    def with_inputs(module, *args):
        tensors = dict(named_parameter_tensors(module))
        for i, a in enumerate(args):
            tensors[f"input{i}"] = a
        return tensors

    lin = nn.Linear(9, 5).double()
    x = torch.randn(7, 9, dtype=torch.float64)
    run("pointwise_linear", 1e-6, lambda: lin(x).square().sum(), with_inputs(lin, x))

    x4 = torch.randn(2, 4, 6, 9, dtype=torch.float64)
    for mode in (PaddingMode.CAUSAL, PaddingMode.NONCAUSAL):
        conv = DepthwiseSeparableConv2d(4, 6, (2, 3), (1, 2), padding=mode).double()
        run(f"dwsep_conv_{mode.value}", 1e-4,
            lambda conv=conv: conv(x4).square().sum(), with_inputs(conv, x4))

    dual = DualPathDepthwiseConv2d(4, (3, 3), dilation=(2, 2)).double()
    xd = torch.randn(2, 4, 8, 9, dtype=torch.float64)
    run("dual_path_conv", 1e-4,
        lambda: (dual(xd, PaddingMode.CAUSAL).square().sum()
                 + dual(xd, PaddingMode.NONCAUSAL).square().sum()),
        with_inputs(dual, xd))

    gru = nn.GRU(7, 6, batch_first=True).double()
    seq = torch.randn(3, 5, 7, dtype=torch.float64)
    run("gru", 1e-4, lambda: gru(seq)[0].square().sum(), with_inputs(gru, seq))

    for tag, training in (("train", True), ("eval", False)):
        bn = nn.BatchNorm2d(4).double()
        bn.train(training)
        xb = torch.randn(3, 4, 5, 6, dtype=torch.float64)
        run(f"batchnorm_{tag}", 1e-4,
            lambda bn=bn, xb=xb: bn(xb).square().sum(), with_inputs(bn, xb))

    for act_name, act in (("tanh", torch.tanh), ("sigmoid", torch.sigmoid)):
        xa = torch.randn(40, dtype=torch.float64)
        run(act_name, 1e-4,
            lambda act=act, xa=xa: act(xa).square().sum(), {"input0": xa})

    prelu = nn.PReLU(4).double()
    xp = torch.randn(2, 4, 5, 6, dtype=torch.float64)
    run("prelu", 1e-4, lambda: prelu(xp).square().sum(), with_inputs(prelu, xp))

    a = torch.randn(30, dtype=torch.float64)
    b = torch.randn(30, dtype=torch.float64)
    run("gating_product", 1e-4,
        lambda: (a * torch.sigmoid(b)).square().sum(), {"a": a, "b": b})

    re = torch.randn(2, 5, 9, dtype=torch.float64)
    im = torch.randn(2, 5, 9, dtype=torch.float64)
    run("complex_packing", 1e-4,
        lambda: complex_to_channels(torch.complex(re, im)).square().sum(),
        {"re": re, "im": im})
    return results
