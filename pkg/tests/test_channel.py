import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from plckit.channel import (
    ChannelError,
    GEParams,
    PacketTrace,
    apply_loss,
    burst_lengths,
    expected_loss_rate,
    load_trace,
    sample_trace,
    sample_training_params,
    save_trace,
    trace_to_stft_flags,
    trace_union,
)
from plckit.signal import AudioSignal


def geometric_ks_pvalue(bursts: np.ndarray, q: float, seed: int) -> float:
    """Exact KS test of bursts ~ Geometric(q) via the randomized probability
    integral transform (a plain KS test is invalid for discrete data)."""
    geom = stats.geom(q)
    v = np.random.default_rng(seed).uniform(size=bursts.size)
    u = geom.cdf(bursts - 1) + v * geom.pmf(bursts)
    return stats.kstest(u, "uniform").pvalue


class TestExpectedLossRate:
    def test_table_rows(self):
        assert expected_loss_rate(GEParams(0.1, 0.9)) == pytest.approx(0.10)
        assert expected_loss_rate(GEParams(0.1, 0.5)) == pytest.approx(0.1667, abs=5e-5)
        assert expected_loss_rate(GEParams(0.5, 0.9)) == pytest.approx(0.357, abs=2e-3)

    def test_zero_onset(self):
        assert expected_loss_rate(GEParams(0.0, 0.5)) == 0.0

    def test_undefined_rate(self):
        with pytest.raises(ChannelError):
            expected_loss_rate(GEParams(0.0, 0.0))


class TestSampleTrace:
    def test_absorbing_received(self):
        trace = sample_trace(GEParams(0.0, 1.0), 500, seed=0)
        assert np.all(trace.flags == 0)

    def test_absorbing_lost(self):
        trace = sample_trace(GEParams(1.0, 0.0), 500, seed=0)
        assert trace.flags[0] == 1  # stationary start is lost
        assert np.all(trace.flags == 1)

    def test_alternating(self):
        trace = sample_trace(GEParams(1.0, 1.0), 64, seed=3)
        assert np.all(np.abs(np.diff(trace.flags.astype(int))) == 1)

    def test_monte_carlo_rate(self):
        trace = sample_trace(GEParams(0.1, 0.9), 10**6, seed=7)
        assert abs(trace.loss_rate - 0.10) < 0.01

    def test_same_seed_bit_identical(self):
        a = sample_trace(GEParams(0.3, 0.6), 4000, seed=42)
        b = sample_trace(GEParams(0.3, 0.6), 4000, seed=42)
        assert np.array_equal(a.flags, b.flags)
        c = sample_trace(GEParams(0.3, 0.6), 4000, seed=43)
        assert not np.array_equal(a.flags, c.flags)

    def test_rate_within_3_sigma_grid(self):
        # spot-check a few (p, q) grid points at 10^5 packets
        n = 10**5
        for p, q in [(0.1, 0.1), (0.5, 0.5), (0.9, 0.9), (0.2, 0.7), (0.8, 0.3)]:
            trace = sample_trace(GEParams(p, q), n, seed=int(p * 100 + q * 10))
            r = p / (p + q)
            # binomial bound is conservative (positively correlated draws);
            # use the Markov-chain asymptotic variance instead
            rho = 1.0 - p - q
            var = r * (1 - r) * (1 + rho) / (1 - rho) / n
            assert abs(trace.loss_rate - r) < 5 * np.sqrt(var) + 1e-4

    def test_burst_lengths_geometric(self):
        trace = sample_trace(GEParams(0.2, 0.4), 10**6, seed=11)
        bursts = burst_lengths(trace)
        assert abs(bursts.mean() - 1 / 0.4) < 0.05
        assert geometric_ks_pvalue(bursts, 0.4, seed=0) > 0.01

    def test_invalid_args(self):
        with pytest.raises(ChannelError):
            sample_trace(GEParams(0.5, 0.5), 0, seed=0)
        with pytest.raises(ChannelError):
            GEParams(1.5, 0.5)


class TestSampleTrainingParams:
    def test_constraints_hold(self):
        rng = np.random.default_rng(0)
        draws = [sample_training_params(rng) for _ in range(2000)]
        for d in draws:
            assert 0.1 <= d.p <= 0.9 and 0.1 <= d.q <= 0.9
            assert d.p / (d.p + d.q) <= 0.5

    def test_acceptance_examples(self):
        # (0.5, 0.9) is inside the acceptance region, rate 0.357
        assert 0.5 / (0.5 + 0.9) <= 0.5
        # (0.9, 0.1) violates the cap (Eq. rate 0.9) and must never be drawn
        assert 0.9 / (0.9 + 0.1) > 0.5
        rng = np.random.default_rng(1)
        for _ in range(500):
            d = sample_training_params(rng)
            assert not (d.p > 0.85 and d.q < 0.15)


class TestApplyLoss:
    def test_all_zero_trace_identity(self):
        x = AudioSignal(np.random.default_rng(0).uniform(-1, 1, 2880))
        out = apply_loss(x, PacketTrace(np.zeros(3, dtype=np.uint8)))
        assert np.array_equal(out.samples, x.samples)

    def test_all_one_trace_zeros(self):
        x = AudioSignal(np.ones(2880) * 0.3)
        out = apply_loss(x, PacketTrace(np.ones(3, dtype=np.uint8)))
        assert np.all(out.samples == 0)

    def test_middle_packet_zeroed(self):
        x = AudioSignal(np.ones(12))
        out = apply_loss(x, PacketTrace(np.array([0, 1, 0])), n=4)
        np.testing.assert_array_equal(
            out.samples, [1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1]
        )

    def test_length_mismatch(self):
        with pytest.raises(ChannelError):
            apply_loss(AudioSignal(np.ones(10)), PacketTrace(np.array([1])), n=4)

    @given(seed=st.integers(0, 2**31), packets=st.integers(1, 12))
    @settings(max_examples=40, deadline=None)
    def test_idempotent_and_union_commute(self, seed, packets):
        rng = np.random.default_rng(seed)
        x = AudioSignal(rng.uniform(-1, 1, packets * 4))
        ta = PacketTrace(rng.integers(0, 2, packets).astype(np.uint8))
        tb = PacketTrace(rng.integers(0, 2, packets).astype(np.uint8))
        once = apply_loss(x, ta, n=4)
        twice = apply_loss(once, ta, n=4)
        assert np.array_equal(once.samples, twice.samples)
        seq = apply_loss(apply_loss(x, ta, n=4), tb, n=4)
        union = apply_loss(x, trace_union(ta, tb), n=4)
        assert np.array_equal(seq.samples, union.samples)


class TestStftFlagMapping:
    def test_paper_indexing_single_packet(self):
        # k=1 lost: the published formula marks 1-based frames 2 and 3
        flags = trace_to_stft_flags(PacketTrace(np.array([1, 0])), index_origin=1)
        np.testing.assert_array_equal(flags, [0, 1, 1, 0])

    def test_physical_indexing_single_packet(self):
        flags = trace_to_stft_flags(PacketTrace(np.array([1, 0])), index_origin=0)
        np.testing.assert_array_equal(flags, [1, 1, 0, 0])

    def test_all_zero(self):
        flags = trace_to_stft_flags(PacketTrace(np.zeros(5, dtype=np.uint8)))
        assert flags.shape == (10,)
        assert np.all(flags == 0)

    def test_adjacent_losses_merge(self):
        flags = trace_to_stft_flags(PacketTrace(np.array([1, 1, 0])), index_origin=0)
        np.testing.assert_array_equal(flags, [1, 1, 1, 1, 0, 0])

    @given(seed=st.integers(0, 2**31), packets=st.integers(1, 40),
           origin=st.sampled_from([0, 1]))
    @settings(max_examples=60, deadline=None)
    def test_mapping_property(self, seed, packets, origin):
        rng = np.random.default_rng(seed)
        trace = PacketTrace(rng.integers(0, 2, packets).astype(np.uint8))
        flags = trace_to_stft_flags(trace, index_origin=origin)
        assert flags.shape == (2 * packets,)
        expected = np.zeros(2 * packets, dtype=np.uint8)
        for j in np.nonzero(trace.flags)[0]:
            for t in (2 * j + origin, 2 * j + origin + 1):
                if t < 2 * packets:
                    expected[t] = 1
        np.testing.assert_array_equal(flags, expected)


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        trace = sample_trace(GEParams(0.25, 0.5), 100, seed=9)
        path = tmp_path / "trace.txt"
        save_trace(path, trace, n=960)
        back, n = load_trace(path)
        assert n == 960
        assert np.array_equal(back.flags, trace.flags)
        assert back.params == trace.params
        assert back.seed == 9
        header = path.read_text().splitlines()[0]
        assert header.startswith("#ge p=0.25 q=0.5 seed=9 N=960")

    def test_external_trace(self, tmp_path):
        trace = PacketTrace(np.array([0, 1, 1], dtype=np.uint8))
        path = tmp_path / "ext.txt"
        save_trace(path, trace)
        back, _ = load_trace(path)
        assert back.params is None
        assert np.array_equal(back.flags, trace.flags)

    def test_corrupt_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("nonsense\n0\n1\n")
        with pytest.raises(ChannelError):
            load_trace(path)
        path.write_text("#ge p=0.1 q=0.9 seed=0 N=960\n0\n2\n")
        with pytest.raises(ChannelError):
            load_trace(path)
