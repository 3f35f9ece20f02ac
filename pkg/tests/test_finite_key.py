import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from apdqkd.detector import DEFAULT_TEMPERATURE_MODEL, DetectorOperatingPoint
from apdqkd.finite_key import (
    ESTIMATION_USES,
    DecoyBounds,
    EpsilonBudget,
    asymptotic_rate,
    bernstein_delta,
    binary_entropy,
    decoy_bounds,
    hoeffding_delta,
    secure_key_length,
    secure_key_rate,
)
from apdqkd.link import (
    ChannelConfig,
    ProtocolConfig,
    SessionStatistics,
    effective_yield,
    expected_session_counts,
    single_photon_error,
    system_efficiency,
)

ROOM = DEFAULT_TEMPERATURE_MODEL.operating_point(20.0)


def test_binary_entropy_values():
    assert binary_entropy(0.0) == 0.0
    assert binary_entropy(1.0) == 0.0
    assert binary_entropy(0.5) == 1.0
    assert binary_entropy(0.11) == pytest.approx(0.499915958164528, abs=1e-12)
    with pytest.raises(ValueError):
        binary_entropy(1.1)


def test_hoeffding_values():
    assert hoeffding_delta(1e18, 1e-10) < 1e-8
    assert hoeffding_delta(1e10, 1e-10) == pytest.approx(3.393e-5, rel=1e-3)
    assert hoeffding_delta(1e10, 1e-10) == pytest.approx(math.sqrt(math.log(1e10) / 2e10), rel=1e-12)


@pytest.mark.parametrize("delta", ["hoeffding", "bernstein"])
def test_interval_coverage(delta):
    rng = np.random.default_rng(11)
    n, p, eps = 10_000, 0.3, 0.05
    hits = 0
    for _ in range(1000):
        p_hat = rng.binomial(n, p) / n
        width = hoeffding_delta(n, eps / 2) if delta == "hoeffding" else bernstein_delta(n, p_hat, eps / 2)
        hits += abs(p_hat - p) <= width
    assert hits >= 900


def test_bernstein_tighter_for_rare_events():
    assert bernstein_delta(1e10, 1e-4, 1e-11) < 0.1 * hoeffding_delta(1e10, 1e-11)
    assert bernstein_delta(1, 0.5, 0.1) == 1.0


def test_budget_split():
    b = EpsilonBudget()
    assert b.epsilon_cor == pytest.approx(2.5e-11)
    assert b.epsilon_pa == pytest.approx(2.5e-11)
    total = b.epsilon_cor + b.epsilon_pa + ESTIMATION_USES * b.epsilon_est_each
    assert total == pytest.approx(1e-10, rel=1e-12)
    with pytest.raises(ValueError):
        EpsilonBudget(1e-10, epsilon_cor=1e-10)


def _noiseless_afterpulse_free(e_d=0.01, intensities=None):
    p = ProtocolConfig(intrinsic_error_e_d=e_d)
    if intensities:
        p = replace(p, intensities=intensities)
    op = DetectorOperatingPoint(20.0, 5.9e-5, 0.0)
    return p, op, expected_session_counts(p, ChannelConfig(50.0), op)


def test_decoy_bounds_exact_inputs():
    p, op, stats = _noiseless_afterpulse_free()
    b = decoy_bounds(stats, p, deviation="none")
    eta = system_efficiency(ChannelConfig(50.0), op)
    assert effective_yield(0, eta, op) == pytest.approx(1.180e-4, rel=1e-3)
    assert effective_yield(1, eta, op) == pytest.approx(0.02455, rel=1e-3)
    assert single_photon_error(eta, op, 0.01) == pytest.approx(0.0124, rel=1e-2)
    assert b.y0_lower == pytest.approx(1.173e-4, rel=1e-3)
    assert b.y1_lower == pytest.approx(0.02432, rel=1e-3)
    assert b.e1_upper == pytest.approx(0.0133, rel=1e-2)
    assert b.y0_lower <= effective_yield(0, eta, op)
    assert b.y1_lower <= effective_yield(1, eta, op)
    assert b.e1_upper >= single_photon_error(eta, op, 0.01)


def test_vacuum_intensity_measures_y0_directly():
    p, op, stats = _noiseless_afterpulse_free(intensities=(0.42, 0.042, 0.0))
    b = decoy_bounds(stats, p, deviation="none")
    assert b.y0_lower == pytest.approx(stats.gain(2, 0), rel=1e-12)


def test_corner_strategies_agree():
    p = ProtocolConfig()
    stats = expected_session_counts(p, ChannelConfig(50.0), ROOM)
    a = decoy_bounds(stats, p, corners="exhaustive")
    b = decoy_bounds(stats, p, corners="sign")
    assert b.y1_lower == pytest.approx(a.y1_lower, rel=1e-9)
    assert b.e1_upper == pytest.approx(a.e1_upper, rel=1e-9)
    assert set(a.corner_audit["e1_candidates"]) == {"decoy", "signal"}


@settings(max_examples=40, deadline=None)
@given(length=st.floats(0.0, 90.0), temp=st.floats(-30.0, 20.0), e_d=st.floats(0.0, 0.05))
def test_bounds_sound_on_exact_model(length, temp, e_d):
    p = ProtocolConfig(intrinsic_error_e_d=e_d)
    op = DEFAULT_TEMPERATURE_MODEL.operating_point(temp)
    ch = ChannelConfig(length)
    b = decoy_bounds(expected_session_counts(p, ch, op), p)
    eta = system_efficiency(ch, op)
    assert b.y0_lower <= effective_yield(0, eta, op) * (1 + 1e-9)
    assert b.y1_lower <= effective_yield(1, eta, op) * (1 + 1e-9)
    assert b.e1_upper >= single_photon_error(eta, op, e_d) * (1 - 1e-9)


def test_no_detections_gives_zero():
    zeros = np.zeros((3, 2))
    stats = SessionStatistics(np.full((3, 2), 1e6), zeros, zeros)
    res = secure_key_length(stats, DecoyBounds(0.0, 0.0, 1.0), ProtocolConfig())
    assert res.secure_length_bits == 0
    assert res.reason == "no_detections"


def test_noiseless_limit():
    p = ProtocolConfig()
    sent = np.full((3, 2), 1e10)
    det = sent * 0.01
    stats = SessionStatistics(sent, det, np.zeros((3, 2)))
    bounds = DecoyBounds(1e-6, 0.02, 0.0)
    res = secure_key_length(stats, bounds, p)
    overhead = math.log2(2 / 2.5e-11) + 2 * math.log2(1 / 2.5e-11)
    expected = 1e10 * math.exp(-0.42) * (1e-6 + 0.42 * 0.02) - overhead
    assert res.ec_leak_bits == 0.0
    assert res.secure_length_bits == math.floor(expected)


def test_reason_codes():
    p = ProtocolConfig()
    stats = expected_session_counts(p, ChannelConfig(50.0), ROOM)
    assert secure_key_length(stats, DecoyBounds(1e-4, 0.0, 1.0), p).reason == "y1_nonpositive"
    assert secure_key_length(stats, DecoyBounds(1e-4, 0.02, 0.5), p).reason == "phase_error_too_high"
    far = secure_key_rate(p, ChannelConfig(140.0), ROOM)
    assert far.secure_length_bits == 0 and far.reason is not None


def test_calibrated_fifty_km_rate():
    res = secure_key_rate(ProtocolConfig(), ChannelConfig(50.0), ROOM)
    assert res.secure_rate_bps == pytest.approx(1.26e6, rel=0.02)
    assert res.secure_length_bits == pytest.approx(1.51e9, rel=0.02)


def test_asymptotic_examples():
    lossless = ChannelConfig(0.0, extra_loss_db=0.0)
    ideal = DetectorOperatingPoint(20.0, 0.0, 0.0, efficiency=1.0)
    r = asymptotic_rate(ProtocolConfig(intrinsic_error_e_d=0.0), lossless, ideal)
    assert r == pytest.approx(1e9 * 0.9883 * (15 / 16) ** 2 * 0.42 * math.exp(-0.42), rel=1e-12)
    assert r == pytest.approx(2.397e8, rel=1e-3)
    dark = DetectorOperatingPoint(20.0, 0.0, 0.0, efficiency=0.0)
    assert asymptotic_rate(ProtocolConfig(), lossless, dark) == 0.0


@pytest.mark.parametrize("session_s", [60.0, 300.0, 1200.0, 3600.0, 36000.0])
def test_finite_below_asymptotic(session_s):
    p = ProtocolConfig(session_s=session_s)
    finite = secure_key_rate(p, ChannelConfig(50.0), ROOM).secure_rate_bps
    assert finite <= asymptotic_rate(p, ChannelConfig(50.0), ROOM)


def test_deviation_methods_are_ordered():
    p = ProtocolConfig()
    rates = {m: secure_key_rate(p, ChannelConfig(50.0), ROOM, deviation=m).secure_rate_bps
             for m in ("none", "bernstein", "hoeffding")}
    assert rates["none"] >= rates["bernstein"] >= rates["hoeffding"]
