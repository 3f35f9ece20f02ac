import math

import numpy as np
import pytest

from apdqkd.detector import DetectorOperatingPoint
from apdqkd.link import ChannelConfig, ProtocolConfig, expected_session_counts, gain_total, system_efficiency
from apdqkd.pulse_sim import (
    GateHistogram,
    NoSignalError,
    SimConfig,
    estimate_characterization,
    expected_histogram,
    kernel_amplitude,
    kernel_decay,
    kernel_length,
    simulate_characterization_run,
    simulate_qkd_session,
)

ROOM = DetectorOperatingPoint(20.0, 5.9e-5, 0.028)


def four_sigma(p, n):
    return 4.0 * math.sqrt(p * (1.0 - p) / n)


def test_kernel_mass_equals_afterpulse_probability():
    decay = kernel_decay(ROOM, 5e-8)
    amp = kernel_amplitude(0.028, decay)
    lags = np.arange(1, 20000)
    assert np.sum(amp * decay**lags) == pytest.approx(0.028, rel=1e-9)
    k = kernel_length(ROOM, 5e-8)
    assert 1 - decay**k >= 1 - 1e-6 > 1 - decay ** (k - 1)


@pytest.mark.parametrize(
    "kwargs",
    [dict(n_gates=0), dict(n_gates=10, afterpulse_model="nope"), dict(n_gates=10, workers=0),
     dict(n_gates=10, seed=-1), dict(n_gates=10, kernel_gates=0)],
)
def test_sim_config_validation(kwargs):
    with pytest.raises(ValueError):
        SimConfig(**kwargs)


def test_no_trigger_sources_no_counts():
    op = DetectorOperatingPoint(20.0, 0.0, 0.0, efficiency=0.0)
    hist = simulate_characterization_run(SimConfig(n_gates=10**6, seed=1), op)
    assert hist.counts_by_phase.sum() == 0
    assert hist.dark_run_counts == 0


def test_dark_only_counts_binomial():
    op = DetectorOperatingPoint(20.0, 1e-3, 0.0, efficiency=0.0)
    hist = simulate_characterization_run(SimConfig(n_gates=10**6, seed=5), op)
    assert abs(hist.dark_run_counts - 1000) <= 126
    assert abs(hist.counts_by_phase.sum() - 1000) <= 126


def test_histogram_shape_against_expectation():
    sim = SimConfig(n_gates=2 * 10**7, seed=9)
    op = DetectorOperatingPoint(20.0, 5.9e-5, 0.028)
    hist = simulate_characterization_run(sim, op)
    gates = hist.gates_per_phase()
    p_lit = 1 - math.exp(-0.025) * (1 - 5.9e-5)
    assert p_lit == pytest.approx(0.0248, abs=1e-4)
    # afterpulses add at most P_a times the photon clicks spread over the period
    obs = hist.counts_by_phase[0] / gates[0]
    assert abs(obs - p_lit) < four_sigma(p_lit, gates[0]) + 0.028 * p_lit / 64
    dark_bins = hist.counts_by_phase[1:].sum() / gates[1:].sum()
    tail = 0.028 * p_lit / 63
    assert abs(dark_bins - (5.9e-5 + tail)) < four_sigma(5.9e-5 + tail, gates[1:].sum())


def test_estimator_inverts_noiseless_histogram():
    sim = SimConfig(n_gates=64 * 10**12)
    op = DetectorOperatingPoint(20.0, 5.9e-5, 0.0)
    counts, dark = expected_histogram(sim, op)
    hist = GateHistogram(np.rint(counts).astype(np.int64), sim.n_gates, int(round(dark)))
    est = estimate_characterization(hist, sim.mu_per_pulse)
    assert est.eta_hat == pytest.approx(0.25, rel=1e-6)
    assert est.p_a_hat == pytest.approx(0.0, abs=1e-9)
    assert est.p_d_hat == pytest.approx(5.9e-5, rel=1e-9)


def test_estimator_rejects_dark_histogram():
    hist = GateHistogram(np.full(64, 10), 64_000, 1000)
    with pytest.raises(NoSignalError):
        estimate_characterization(hist, 0.1)


def test_histogram_csv():
    hist = GateHistogram(np.array([5, 1, 0]), 30, 2)
    assert hist.to_csv() == "phase_index,counts\n0,5\n1,1\n2,0\n"
    with pytest.raises(ValueError):
        GateHistogram(np.array([50, 1]), 30, 0)


def test_cooled_recovery():
    op = DetectorOperatingPoint(-30.0, 3.1e-6, 0.039, efficiency=0.25)
    est = estimate_characterization(
        simulate_characterization_run(SimConfig(n_gates=10**8, seed=42), op), 0.1
    )
    assert est.p_d_hat == pytest.approx(3.1e-6, rel=0.05)
    assert est.eta_hat == pytest.approx(0.25, rel=0.03)
    assert est.p_a_hat == pytest.approx(0.039, rel=0.15)


def test_noiseless_session_has_no_errors():
    p = ProtocolConfig(intrinsic_error_e_d=0.0)
    op = DetectorOperatingPoint(20.0, 0.0, 0.0)
    stats = simulate_qkd_session(p, ChannelConfig(10.0), op, SimConfig(n_gates=2 * 10**6, seed=3))
    assert stats.detections.sum() > 0
    assert stats.errors.sum() == 0


def test_sifted_fraction():
    n = 10**7
    stats = simulate_qkd_session(ProtocolConfig(), ChannelConfig(50.0), ROOM, SimConfig(n_gates=n, seed=4))
    frac = stats.sent_pulses.sum() / n
    assert abs(frac - 0.8828125) < four_sigma(0.8828125, n)


def test_session_independent_of_workers():
    p, ch = ProtocolConfig(), ChannelConfig(50.0)
    one = simulate_qkd_session(p, ch, ROOM, SimConfig(n_gates=3 * 10**6, seed=8, block_size=1 << 20))
    three = simulate_qkd_session(
        p, ch, ROOM, SimConfig(n_gates=3 * 10**6, seed=8, block_size=1 << 20, workers=3)
    )
    np.testing.assert_array_equal(one.detections, three.detections)
    np.testing.assert_array_equal(one.errors, three.errors)
    other = simulate_qkd_session(p, ch, ROOM, SimConfig(n_gates=3 * 10**6, seed=9, block_size=1 << 20))
    assert not np.array_equal(one.detections, other.detections)


def test_kernel_model_signal_gain_and_total_inflation():
    p, ch = ProtocolConfig(), ChannelConfig(50.0)
    n = 3 * 10**7
    stats = simulate_qkd_session(p, ch, ROOM, SimConfig(n_gates=n, seed=12))
    analytic = expected_session_counts(p, ch, ROOM)
    q = analytic.gain(0, 0)
    assert abs(stats.gain(0, 0) - q) < four_sigma(q, stats.sent_pulses[0, 0]) + ROOM.afterpulse_prob * 1e-4
    # total click rate over all pulses carries the (1 + P_a) inflation
    eta = system_efficiency(ch, ROOM)
    q_det_mean = sum(w * gain_total(mu, eta, ROOM)[0] for mu, w in zip(p.intensities, p.send_probs))
    ratio = stats.detections.sum() / stats.sent_pulses.sum() / q_det_mean
    assert ratio == pytest.approx(1 + ROOM.afterpulse_prob, abs=0.01)


def test_attached_model_matches_analytic_small():
    p, ch = ProtocolConfig(), ChannelConfig(50.0)
    stats = simulate_qkd_session(p, ch, ROOM, SimConfig(n_gates=2 * 10**7, seed=2, afterpulse_model="attached"))
    analytic = expected_session_counts(p, ch, ROOM)
    for k in range(3):
        q = analytic.gain(k, 0)
        assert abs(stats.gain(k, 0) - q) < four_sigma(q, stats.sent_pulses[k, 0])
