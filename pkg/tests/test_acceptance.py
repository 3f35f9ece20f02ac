"""Acceptance suite. Each test prints one PASS/FAIL line at the stated tolerance."""
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from apdqkd.detector import DEFAULT_TEMPERATURE_MODEL, DetectorOperatingPoint
from apdqkd.experiments import (
    COOLED_RATE_50KM_BPS,
    PAPER_RATES_BPS,
    calibrate_intrinsic_error,
    find_crossover,
    find_cutoff,
    sweep_distance,
    sweep_temperature,
)
from apdqkd.finite_key import (
    asymptotic_rate,
    binary_entropy,
    decoy_bounds,
    hoeffding_delta,
    secure_key_rate,
)
from apdqkd.link import (
    CALIBRATED_E_D,
    ChannelConfig,
    ProtocolConfig,
    effective_yield,
    expected_session_counts,
    single_photon_error,
    system_efficiency,
    transmittance,
)
from apdqkd.pulse_sim import (
    SimConfig,
    estimate_characterization,
    simulate_characterization_run,
    simulate_qkd_session,
)

ROOM = DEFAULT_TEMPERATURE_MODEL.operating_point(20.0)
COLD = DEFAULT_TEMPERATURE_MODEL.operating_point(-30.0)
FIFTY = ChannelConfig(50.0)
MC_GATES = 10**8


def rate(length_km, op=ROOM, protocol=None):
    return secure_key_rate(protocol or ProtocolConfig(), ChannelConfig(length_km), op).secure_rate_bps


def test_criterion_01_calibration(report):
    t0 = time.perf_counter()
    e_d = calibrate_intrinsic_error()
    elapsed = time.perf_counter() - t0
    s = rate(50.0, protocol=ProtocolConfig(intrinsic_error_e_d=e_d))
    rel = s / PAPER_RATES_BPS[50] - 1
    ok = abs(rel) <= 0.02 and elapsed < 10.0 and abs(e_d - CALIBRATED_E_D) < 1e-5
    report("1", ok, f"e_d={e_d:.6f} (frozen default {CALIBRATED_E_D}), rate={s:.4g} bit/s "
                    f"({rel:+.2%} vs 1.26e6, tol 2%), runtime {elapsed:.2f} s (< 10 s)")


def test_criterion_02_cooled_prediction(report):
    s = rate(50.0, COLD)
    report("2", 1.14e6 <= s <= 1.54e6,
           f"-30 C rate at 50 km = {s:.4g} bit/s, band [1.14e6, 1.54e6] around {COOLED_RATE_50KM_BPS:.3g}")


def test_criterion_03_temperature_flatness(report):
    rates = sweep_temperature(-30.0, 20.0, 1.0).rates
    variation = (rates.max() - rates.min()) / rates.max()
    report("3", variation <= 0.15, f"max relative variation over -30..20 C = {variation:.2%} (<= 15%)")


def test_criterion_04_crossover(report):
    length = find_crossover()
    report("4", 25.0 <= length <= 45.0, f"cross-over at {length:.2f} km, required [25, 45] km")


def test_criterion_05_cutoff(report):
    hot = find_cutoff(temp_c=20.0)
    cold = find_cutoff(temp_c=-30.0)
    ok = 85.0 <= hot.distance_km <= 105.0 and not hot.beyond_bracket and cold.distance_km > hot.distance_km
    report("5", ok, f"20 C cut-off {hot} in [85, 105] km; -30 C cut-off {cold} (must exceed)")


def test_criterion_06_distance_scaling(report):
    sweep = sweep_distance(40.0, 65.0, 1.0, temp_c=20.0)
    slope = np.polyfit(sweep.variables, np.log10(sweep.rates), 1)[0]
    r40, r65 = rate(40.0), rate(65.0)
    d40 = r40 / PAPER_RATES_BPS[40] - 1
    d65 = r65 / PAPER_RATES_BPS[65] - 1
    slope_ok = abs(slope + 0.020) <= 0.004
    ends_ok = abs(d40) <= 0.35 and abs(d65) <= 0.35
    report("6", slope_ok and ends_ok,
           f"slope {slope:.4f}/km (need -0.020 +/- 0.004: {'ok' if slope_ok else 'out'}); "
           f"40 km {r40:.4g} ({d40:+.1%}), 65 km {r65:.4g} ({d65:+.1%}) (need +/-35%: "
           f"{'ok' if ends_ok else 'out'})")


def _four_sigma_cells(stats, analytic):
    worst = 0.0
    for k in range(3):
        for b in range(2):
            n = stats.sent_pulses[k, b]
            q = analytic.gain(k, b)
            z_q = abs(stats.gain(k, b) - q) / math.sqrt(q * (1 - q) / n)
            det = stats.detections[k, b]
            e = analytic.error_rate(k, b)
            z_e = abs(stats.error_rate(k, b) - e) / math.sqrt(e * (1 - e) / det) if det else 0.0
            worst = max(worst, z_q, z_e)
    return worst


def test_criterion_07_oracle_equivalence(report):
    p = ProtocolConfig(session_s=MC_GATES / 1e9)
    sim = SimConfig(n_gates=MC_GATES, seed=20240501, afterpulse_model="attached")
    simulate_qkd_session(p, FIFTY, ROOM, SimConfig(n_gates=1000, afterpulse_model="attached"))  # compile
    t0 = time.perf_counter()
    stats = simulate_qkd_session(p, FIFTY, ROOM, sim)
    elapsed = time.perf_counter() - t0
    threaded = simulate_qkd_session(p, FIFTY, ROOM, replace(sim, workers=4))
    same = np.array_equal(stats.detections, threaded.detections) and np.array_equal(stats.errors, threaded.errors)
    worst = _four_sigma_cells(stats, expected_session_counts(p, FIFTY, ROOM))
    report("7", worst <= 4.0 and elapsed < 60.0 and same,
           f"max |z| over Q and E in all 6 intensity/basis cells = {worst:.2f} (<= 4), "
           f"runtime {elapsed:.1f} s (< 60 s), 1 vs 4 workers identical: {same}")


def test_criterion_08_characterization_recovery(report):
    op = DetectorOperatingPoint(20.0, 5.9e-5, 0.028, efficiency=0.25)
    sim = SimConfig(n_gates=MC_GATES, seed=42, mu_per_pulse=0.1)
    est = estimate_characterization(simulate_characterization_run(sim, op), sim.mu_per_pulse)
    d_pd = est.p_d_hat / 5.9e-5 - 1
    d_eta = est.eta_hat / 0.25 - 1
    d_pa = est.p_a_hat / 0.028 - 1
    ok = abs(d_pd) <= 0.05 and abs(d_eta) <= 0.03 and abs(d_pa) <= 0.15
    report("8", ok, f"P_d {d_pd:+.2%} (5%), eta {d_eta:+.2%} (3%), P_a {d_pa:+.2%} (15%)")


def test_criterion_09_bound_soundness(report):
    p = ProtocolConfig(session_s=MC_GATES / 1e9)
    eta = system_efficiency(FIFTY, ROOM)
    y0 = effective_yield(0, eta, ROOM)
    y1 = effective_yield(1, eta, ROOM)
    e1 = single_photon_error(eta, ROOM, p.intrinsic_error_e_d)
    sound = 0
    for seed in range(100):
        sim = SimConfig(n_gates=MC_GATES, seed=seed, afterpulse_model="attached")
        b = decoy_bounds(simulate_qkd_session(p, FIFTY, ROOM, sim), p)
        sound += b.y0_lower <= y0 and b.y1_lower <= y1 and b.e1_upper >= e1
    report("9", sound >= 99, f"{sound}/100 seeded sessions satisfy Y0L <= Y0, Y1L <= Y1, e1U >= e1 (need >= 99)")


def test_criterion_10_finite_key_sanity(report):
    sessions = [60.0, 300.0, 600.0, 1200.0, 2400.0, 3600.0, 7200.0]
    monotone = True
    below = True
    for length in (0.0, 25.0, 50.0, 75.0, 85.0, 100.0):
        for op in (ROOM, COLD):
            bits = [secure_key_rate(ProtocolConfig(session_s=s), ChannelConfig(length), op).secure_length_bits
                    for s in sessions]
            monotone &= all(b2 >= b1 for b1, b2 in zip(bits, bits[1:]))
            for s in sessions:
                proto = ProtocolConfig(session_s=s)
                below &= rate(length, op, proto) <= asymptotic_rate(proto, ChannelConfig(length), op)
    ratio = rate(50.0) / asymptotic_rate(ProtocolConfig(), FIFTY, ROOM)
    near = find_cutoff(temp_c=20.0).distance_km
    s20 = rate(near)
    s60 = rate(near, protocol=ProtocolConfig(session_s=3600.0))
    parts = {
        "monotone in session": monotone,
        "finite <= asymptotic": below,
        f"finite/asymptotic at 50 km = {ratio:.3f} (need >= 0.90)": ratio >= 0.90,
        f"60 min {s60:.3g} > 20 min {s20:.3g} bit/s at {near:.1f} km": s60 > s20,
    }
    detail = "; ".join(f"{k}: {'ok' if v else 'out'}" for k, v in parts.items())
    report("10", all(parts.values()), detail)


def test_criterion_11_identities(report):
    xs = np.linspace(0.0, 1.0, 1001)
    checks = [
        binary_entropy(0.0) == 0.0,
        abs(binary_entropy(0.5) - 1.0) <= 1e-12,
        max(abs(binary_entropy(x) - binary_entropy(1.0 - x)) for x in xs) <= 1e-12,
        max(abs(hoeffding_delta(4 * n, 1e-10) - hoeffding_delta(n, 1e-10) / 2) for n in (1, 10, 1e6, 1e12)) <= 1e-12,
        abs(transmittance(ChannelConfig(0.0, extra_loss_db=0.0)) - 1.0) <= 1e-12,
    ]
    report("11", all(checks), f"{sum(checks)}/5 identities exact to 1e-12")
