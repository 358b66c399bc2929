"""Gilbert-Elliott packet-loss simulation and trace bookkeeping.

The channel is a two-state first-order Markov chain over 20 ms packets:
received -> lost with probability p, lost -> received with probability q, so
the stationary loss rate is p / (p + q). Traces are sampled exactly from this
law by composing alternating geometric run lengths (identical in distribution
to stepping the chain, but vectorized), starting from the stationary state.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .signal import PACKET_SAMPLES, AudioSignal

#: Frame-index origin used by the published flag-mapping formula. With Eq.-style
#: 1-indexed packets k and STFT frames t, a lost packet marks t in {2k, 2k+1};
#: origin 0 is the variant aligned with the physical 50%-overlap coverage
#: (0-indexed packet j zeroes samples that STFT frames 2j and 2j+1 read).
PAPER_INDEX_ORIGIN = 1


class ChannelError(ValueError):
    """Raised on invalid channel parameters or trace/signal mismatch."""


@dataclass(frozen=True)
class GEParams:
    """Loss-onset probability p and recovery probability q."""

    p: float
    q: float

    def __post_init__(self):
        if not (0.0 <= self.p <= 1.0 and 0.0 <= self.q <= 1.0):
            raise ChannelError(f"p, q must be in [0, 1], got ({self.p}, {self.q})")


@dataclass
class PacketTrace:
    """Per-packet loss flags (1 = lost) plus the generating parameters."""

    flags: np.ndarray
    params: GEParams | None = None  # None marks an externally supplied trace
    seed: int | None = None

    def __post_init__(self):
        self.flags = np.asarray(self.flags, dtype=np.uint8)
        if self.flags.ndim != 1:
            raise ChannelError("trace flags must be 1-D")
        if self.flags.size and not np.all((self.flags == 0) | (self.flags == 1)):
            raise ChannelError("trace flags must be 0/1")

    def __len__(self) -> int:
        return self.flags.size

    @property
    def loss_rate(self) -> float:
        return float(self.flags.mean()) if self.flags.size else 0.0


def expected_loss_rate(params: GEParams) -> float:
    """Stationary loss rate r = p / (p + q)."""
    if params.p + params.q == 0.0:
        raise ChannelError("loss rate undefined for p = q = 0")
    return params.p / (params.p + params.q)


def sample_trace(params: GEParams, num_packets: int, seed: int) -> PacketTrace:
    """Draw a loss trace of num_packets flags, deterministic given seed.

    The first flag follows the stationary distribution; subsequent flags follow
    the chain transitions. Implemented by concatenating alternating geometric
    run lengths (received runs ~ Geom(p), loss bursts ~ Geom(q)), which is the
    exact law of the chain.
    """
    if num_packets < 1:
        raise ChannelError("num_packets must be >= 1")
    p, q = params.p, params.q
    rng = np.random.default_rng(seed)
    r = expected_loss_rate(params)  # raises for p = q = 0
    state = 1 if rng.random() < r else 0

    flags = np.empty(num_packets, dtype=np.uint8)
    pos = 0
    while pos < num_packets:
        exit_prob = q if state else p
        if exit_prob == 0.0:  # absorbing state
            flags[pos:] = state
            break
        remaining = num_packets - pos
        # Enough runs to cover `remaining` with ample slack; resample if short.
        mean_pair = 1.0 / max(p, 1e-12) + 1.0 / max(q, 1e-12)
        n_runs = max(16, int(2.0 * remaining / mean_pair * 2) + 16)
        probs = np.where(np.arange(n_runs) % 2 == 0, exit_prob,
                         p if state else q)
        lengths = rng.geometric(probs)
        states = np.where(np.arange(n_runs) % 2 == 0, state, 1 - state)
        chunk = np.repeat(states.astype(np.uint8), lengths)
        take = min(chunk.size, remaining)
        flags[pos : pos + take] = chunk[:take]
        pos += take
        if pos < num_packets:
            # All drawn runs were consumed as complete runs, so the chain has
            # just exited the last one; continue from the opposite state.
            state = 1 - int(chunk[-1])
    return PacketTrace(flags, params, seed)


def sample_training_params(rng: np.random.Generator) -> GEParams:
    """Rejection-sample p, q ~ Uniform[0.1, 0.9] until p/(p+q) <= 0.5."""
    while True:
        p, q = rng.uniform(0.1, 0.9, size=2)
        if p / (p + q) <= 0.5:
            return GEParams(float(p), float(q))


def apply_loss(x: AudioSignal, trace: PacketTrace, n: int = PACKET_SAMPLES) -> AudioSignal:
    """Zero every n-sample packet whose flag is 1; others are bit-identical."""
    expected = -(-len(x) // n)
    if len(trace) != expected:
        raise ChannelError(
            f"trace has {len(trace)} flags but signal has {expected} packets"
        )
    out = x.samples.copy()
    for j in np.nonzero(trace.flags)[0]:
        out[j * n : (j + 1) * n] = 0.0
    return AudioSignal(out, x.rate)


def trace_to_stft_flags(trace: PacketTrace, index_origin: int = PAPER_INDEX_ORIGIN) -> np.ndarray:
    """Map per-packet flags to per-STFT-frame flags under 50% overlap.

    With packets of N samples and hop N/2 there are 2 STFT frames per packet.
    ``index_origin=1`` reproduces the published formula literally (packet k and
    frame t share a 1-based origin: lost k marks t in {2k, 2k+1}, i.e. 0-based
    output positions 2j+1 and 2j+2 for 0-based packet j). ``index_origin=0``
    marks positions {2j, 2j+1}, the frames whose windows actually read the
    zeroed samples first. Frames past the signal's 2-per-packet budget are
    clipped. All unmarked frames stay 0.
    """
    if index_origin not in (0, 1):
        raise ChannelError("index_origin must be 0 or 1")
    n_frames = 2 * len(trace)
    flags = np.zeros(n_frames, dtype=np.uint8)
    lost = np.nonzero(trace.flags)[0]
    for j in lost:
        for t in (2 * j + index_origin, 2 * j + index_origin + 1):
            if t < n_frames:
                flags[t] = 1
    return flags


def trace_union(a: PacketTrace, b: PacketTrace) -> PacketTrace:
    """Element-wise OR of two traces of equal length."""
    if len(a) != len(b):
        raise ChannelError("trace lengths differ")
    return PacketTrace(a.flags | b.flags, None, None)


def burst_lengths(trace: PacketTrace, drop_truncated: bool = True) -> np.ndarray:
    """Lengths of consecutive-loss runs; the final run is dropped when it is
    truncated by the end of the trace (its length is censored, not geometric)."""
    f = trace.flags
    if f.size == 0:
        return np.zeros(0, dtype=np.int64)
    padded = np.concatenate([[0], f, [0]])
    diff = np.diff(padded.astype(np.int8))
    starts = np.nonzero(diff == 1)[0]
    ends = np.nonzero(diff == -1)[0]
    lengths = ends - starts
    if drop_truncated and lengths.size and f[-1] == 1:
        lengths = lengths[:-1]
    return lengths


def save_trace(path, trace: PacketTrace, n: int = PACKET_SAMPLES) -> None:
    """One '0'/'1' line per packet under a `#ge p=<p> q=<q> seed=<s> N=<n>` header."""
    if trace.params is None:
        header = f"#ge p=external q=external seed={trace.seed} N={n}\n"
    else:
        header = (
            f"#ge p={trace.params.p:.12g} q={trace.params.q:.12g} "
            f"seed={trace.seed} N={n}\n"
        )
    with open(path, "w") as fh:
        fh.write(header)
        fh.writelines(f"{int(flag)}\n" for flag in trace.flags)


def load_trace(path) -> tuple[PacketTrace, int]:
    """Inverse of save_trace; returns (trace, packet samples N)."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("#ge "):
            raise ChannelError(f"{path}: missing #ge trace header")
        fields = dict(kv.split("=", 1) for kv in header[4:].split())
        try:
            n = int(fields["N"])
        except (KeyError, ValueError) as exc:
            raise ChannelError(f"{path}: bad trace header: {header}") from exc
        if fields.get("p", "external") == "external":
            params = None
        else:
            params = GEParams(float(fields["p"]), float(fields["q"]))
        seed = None if fields.get("seed") in (None, "None") else int(fields["seed"])
        flags = []
        for line_no, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            if line not in ("0", "1"):
                raise ChannelError(f"{path}:{line_no}: expected 0 or 1, got {line!r}")
            flags.append(int(line))
    if not flags:
        raise ChannelError(f"{path}: empty trace")
    return PacketTrace(np.array(flags, dtype=np.uint8), params, seed), n
