"""Temperature and distance studies built on the analytic finite-key pipeline."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.optimize import bisect

from .detector import (
    COOLED_TEMP_C,
    DEFAULT_EFFICIENCY,
    DEFAULT_TEMPERATURE_MODEL,
    ROOM_TEMP_C,
    DetectorOperatingPoint,
    TemperatureModel,
)
from .finite_key import (
    DEFAULT_DEVIATION,
    DecoyBounds,
    EpsilonBudget,
    SecureKeyResult,
    decoy_bounds,
    secure_key_length,
)
from .link import (
    ChannelConfig,
    ProtocolConfig,
    SessionStatistics,
    expected_session_counts,
)
from .pulse_sim import SimConfig, simulate_qkd_session

__all__ = [
    "PAPER_RATES_BPS",
    "SWEEP_CSV_COLUMNS",
    "SweepRow",
    "SweepResult",
    "OperatingPointTable",
    "CrossoverNotFound",
    "BracketError",
    "CutoffResult",
    "evaluate_point",
    "sweep_temperature",
    "sweep_distance",
    "relative_change",
    "find_crossover",
    "find_cutoff",
    "optimize_operating_point",
    "calibrate_intrinsic_error",
    "fig4_protocol",
    "FIG4_LONG_DISTANCE_TABLE",
]

# measured room-temperature secure rates by fiber length [km]; reference only
PAPER_RATES_BPS = {40: 1.79e6, 50: 1.26e6, 65: 507e3, 80: 240e3, 90: 74.8e3, 100: 1.2e3}
COOLED_RATE_50KM_BPS = 1.34e6

SWEEP_CSV_COLUMNS = ("variable", "pd", "pa", "q_signal", "qber_signal", "secure_rate_bps", "reason")


class CrossoverNotFound(RuntimeError):
    def __init__(self, message: str, diagnostic: str):
        super().__init__(message)
        self.diagnostic = diagnostic


class BracketError(ValueError):
    """Search bracket does not contain the feature being located."""


@dataclass(frozen=True)
class SweepRow:
    variable: float
    pd: float
    pa: float
    q_signal: float
    qber_signal: float
    secure_rate_bps: float
    reason: str | None = None


@dataclass(frozen=True)
class SweepResult:
    variable_name: str
    rows: tuple[SweepRow, ...]

    def __post_init__(self) -> None:
        xs = [r.variable for r in self.rows]
        if any(b <= a for a, b in zip(xs, xs[1:])):
            raise ValueError("sweep variable must be strictly increasing")

    @property
    def variables(self) -> np.ndarray:
        return np.array([r.variable for r in self.rows])

    @property
    def rates(self) -> np.ndarray:
        return np.array([r.secure_rate_bps for r in self.rows])

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(SWEEP_CSV_COLUMNS)
        for r in self.rows:
            writer.writerow([
                repr(r.variable), repr(r.pd), repr(r.pa), repr(r.q_signal),
                repr(r.qber_signal), repr(r.secure_rate_bps), r.reason or "",
            ])
        return buf.getvalue()


@dataclass(frozen=True)
class OperatingPointTable:
    entries: tuple[DetectorOperatingPoint, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "entries", tuple(self.entries))
        if not self.entries:
            raise ValueError("operating point table must not be empty")


@dataclass(frozen=True)
class CutoffResult:
    distance_km: float
    beyond_bracket: bool = False

    def __str__(self) -> str:
        return f">{self.distance_km:g} km" if self.beyond_bracket else f"{self.distance_km:.1f} km"


def evaluate_point(
    protocol: ProtocolConfig,
    channel: ChannelConfig,
    op: DetectorOperatingPoint,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
    sim: SimConfig | None = None,
) -> tuple[SessionStatistics, SecureKeyResult]:
    """Statistics and finite-key result at one point.

    Expected counts are used unless ``sim`` is given, in which case a Monte Carlo
    session of ``sim.n_gates`` gates stands in and the session length shrinks to match.
    """
    if sim is not None:
        protocol = replace(protocol, session_s=sim.n_gates / protocol.clock_hz)
        stats = simulate_qkd_session(protocol, channel, op, sim)
    else:
        stats = expected_session_counts(protocol, channel, op)
    if stats.detections[0, 0] <= 0 or np.any(stats.sent_pulses[:, 0] <= 0):
        bounds = DecoyBounds(0.0, 0.0, 1.0)
    else:
        bounds = decoy_bounds(stats, protocol, budget, deviation=deviation)
    return stats, secure_key_length(stats, bounds, protocol, budget)


def _row(variable, op, stats, result) -> SweepRow:
    return SweepRow(
        variable=float(variable),
        pd=op.dark_count_prob,
        pa=op.afterpulse_prob,
        q_signal=stats.gain(0, 0),
        qber_signal=stats.error_rate(0, 0),
        secure_rate_bps=result.secure_rate_bps,
        reason=result.reason,
    )


def _grid(start: float, stop: float, step: float) -> np.ndarray:
    if step <= 0:
        raise ValueError("step must be positive")
    if stop < start:
        raise ValueError("range end must not precede its start")
    n = int(math.floor((stop - start) / step + 1e-9))
    return start + step * np.arange(n + 1)


def sweep_temperature(
    t_start: float = COOLED_TEMP_C,
    t_stop: float = ROOM_TEMP_C,
    step: float = 5.0,
    channel: ChannelConfig | None = None,
    protocol: ProtocolConfig | None = None,
    model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL,
    efficiency: float = DEFAULT_EFFICIENCY,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
    sim: SimConfig | None = None,
) -> SweepResult:
    channel = channel or ChannelConfig(50.0)
    protocol = protocol or ProtocolConfig()
    rows = []
    for t in _grid(t_start, t_stop, step):
        op = model.operating_point(float(t), efficiency=efficiency)
        stats, result = evaluate_point(protocol, channel, op, budget, deviation, sim)
        rows.append(_row(t, op, stats, result))
    return SweepResult("temperature_c", tuple(rows))


def sweep_distance(
    l_start: float,
    l_stop: float,
    step: float,
    temp_c: float = ROOM_TEMP_C,
    protocol: ProtocolConfig | None = None,
    model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL,
    efficiency: float = DEFAULT_EFFICIENCY,
    channel: ChannelConfig | None = None,
    op: DetectorOperatingPoint | None = None,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
    sim: SimConfig | None = None,
) -> SweepResult:
    """Rate against fiber length. ``channel`` supplies attenuation and extra loss."""
    if l_start < 0:
        raise ValueError("distances must be non-negative")
    protocol = protocol or ProtocolConfig()
    template = channel or ChannelConfig(0.0)
    op = op or model.operating_point(temp_c, efficiency=efficiency)
    rows = []
    for length in _grid(l_start, l_stop, step):
        ch = replace(template, length_km=float(length))
        stats, result = evaluate_point(protocol, ch, op, budget, deviation, sim)
        rows.append(_row(length, op, stats, result))
    return SweepResult("length_km", tuple(rows))


def relative_change(hot: SweepResult, cold: SweepResult) -> list[tuple[float, float | None]]:
    """``(S_hot - S_cold) / S_hot`` per row; ``None`` where ``S_hot`` is zero."""
    if len(hot.rows) != len(cold.rows) or not np.allclose(hot.variables, cold.variables, rtol=0, atol=1e-9):
        raise ValueError("sweeps are not on the same grid")
    out = []
    for h, c in zip(hot.rows, cold.rows):
        value = None if h.secure_rate_bps == 0 else (h.secure_rate_bps - c.secure_rate_bps) / h.secure_rate_bps
        out.append((h.variable, value))
    return out


def _rate_fn(protocol, op, template, budget, deviation):
    def rate(length_km: float) -> float:
        ch = replace(template, length_km=float(length_km))
        return evaluate_point(protocol, ch, op, budget, deviation)[1].secure_rate_bps
    return rate


def find_crossover(
    protocol: ProtocolConfig | None = None,
    model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL,
    t_hot: float = ROOM_TEMP_C,
    t_cold: float = COOLED_TEMP_C,
    bracket: tuple[float, float] = (5.0, 120.0),
    tol: float = 0.1,
    efficiency: float = DEFAULT_EFFICIENCY,
    hot_op: DetectorOperatingPoint | None = None,
    cold_op: DetectorOperatingPoint | None = None,
    channel: ChannelConfig | None = None,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
    scan_step: float = 1.0,
) -> float:
    """Fiber length where the hot and cold detector rates cross.

    A coarse scan locates the first sign change of ``S_hot - S_cold`` (points where
    both rates are zero are skipped); bisection then narrows it to ``tol``.

    Raises
    ------
    CrossoverNotFound
        No sign change in the bracket. ``diagnostic`` is one of ``"identical"``,
        ``"hot_always_higher"`` or ``"cold_always_higher"``.
    """
    protocol = protocol or ProtocolConfig()
    template = channel or ChannelConfig(0.0)
    hot_op = hot_op or model.operating_point(t_hot, efficiency=efficiency)
    cold_op = cold_op or model.operating_point(t_cold, efficiency=efficiency)
    s_hot = _rate_fn(protocol, hot_op, template, budget, deviation)
    s_cold = _rate_fn(protocol, cold_op, template, budget, deviation)

    def diff(length):
        return s_hot(length) - s_cold(length)

    grid = _grid(bracket[0], bracket[1], scan_step)
    prev = None
    signs = []
    for length in grid:
        h, c = s_hot(length), s_cold(length)
        if h == 0.0 and c == 0.0:
            continue
        d = h - c
        signs.append(d)
        if prev is not None and (prev[1] > 0) != (d > 0) and prev[1] != 0 and d != 0:
            return float(bisect(diff, prev[0], length, xtol=tol))
        if d != 0:
            prev = (length, d)
    if all(d == 0 for d in signs):
        raise CrossoverNotFound("hot and cold rates coincide over the bracket", "identical")
    if all(d >= 0 for d in signs):
        raise CrossoverNotFound("hot detector rate is never below cold", "hot_always_higher")
    raise CrossoverNotFound("cold detector rate is never below hot", "cold_always_higher")


def find_cutoff(
    protocol: ProtocolConfig | None = None,
    model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL,
    temp_c: float = ROOM_TEMP_C,
    bracket: tuple[float, float] = (10.0, 150.0),
    tol: float = 0.1,
    efficiency: float = DEFAULT_EFFICIENCY,
    op: DetectorOperatingPoint | None = None,
    channel: ChannelConfig | None = None,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
) -> CutoffResult:
    """Largest fiber length with a positive secure rate, to within ``tol``."""
    protocol = protocol or ProtocolConfig()
    template = channel or ChannelConfig(0.0)
    op = op or model.operating_point(temp_c, efficiency=efficiency)
    rate = _rate_fn(protocol, op, template, budget, deviation)
    lo, hi = bracket
    if rate(lo) <= 0.0:
        raise BracketError(f"secure rate is already zero at {lo} km")
    if rate(hi) > 0.0:
        return CutoffResult(float(hi), beyond_bracket=True)
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if rate(mid) > 0.0:
            lo = mid
        else:
            hi = mid
    return CutoffResult(float(lo))


def optimize_operating_point(
    table: OperatingPointTable | Sequence[DetectorOperatingPoint],
    channel: ChannelConfig,
    protocol: ProtocolConfig | None = None,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
) -> tuple[DetectorOperatingPoint, float]:
    """Exhaustive argmax of the secure rate; ties go to the higher efficiency."""
    if not isinstance(table, OperatingPointTable):
        table = OperatingPointTable(tuple(table))
    protocol = protocol or ProtocolConfig()
    scored = [
        (evaluate_point(protocol, channel, op, budget, deviation)[1].secure_rate_bps, op.efficiency, i)
        for i, op in enumerate(table.entries)
    ]
    rate, _, idx = max(scored, key=lambda s: (s[0], s[1], -s[2]))
    return table.entries[idx], rate


def calibrate_intrinsic_error(
    target_bps: float = PAPER_RATES_BPS[50],
    distance_km: float = 50.0,
    temp_c: float = ROOM_TEMP_C,
    protocol: ProtocolConfig | None = None,
    model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL,
    efficiency: float = DEFAULT_EFFICIENCY,
    bracket: tuple[float, float] = (0.0, 0.2),
    xtol: float = 1e-7,
    deviation: str = DEFAULT_DEVIATION,
) -> float:
    """Bisect the misalignment error ``e_d`` so the finite-key rate hits ``target_bps``.

    Everything else stays at the supplied (default) settings. The rate falls
    monotonically in ``e_d``, so one sign change exists when the target is reachable.
    """
    protocol = protocol or ProtocolConfig()
    channel = ChannelConfig(distance_km)
    op = model.operating_point(temp_c, efficiency=efficiency)

    def excess(e_d):
        p = replace(protocol, intrinsic_error_e_d=e_d)
        return evaluate_point(p, channel, op, deviation=deviation)[1].secure_rate_bps - target_bps

    lo, hi = bracket
    if excess(lo) < 0 or excess(hi) > 0:
        raise BracketError(f"target {target_bps} bit/s not reachable for e_d in {bracket}")
    return float(bisect(excess, lo, hi, xtol=xtol))


# illustrative long-haul settings (lower bias trades efficiency for fewer dark counts);
# the settings behind the measured 80-100 km points were not published
FIG4_LONG_DISTANCE_TABLE = OperatingPointTable((
    DetectorOperatingPoint(ROOM_TEMP_C, 5.9e-5, 0.0282, efficiency=0.25),
    DetectorOperatingPoint(ROOM_TEMP_C, 3.0e-5, 0.0282, efficiency=0.20),
    DetectorOperatingPoint(ROOM_TEMP_C, 1.2e-5, 0.0282, efficiency=0.15),
    DetectorOperatingPoint(ROOM_TEMP_C, 4.0e-6, 0.0282, efficiency=0.10),
))
FIG4_LONG_SESSION_KM = 100.0


def fig4_protocol(length_km: float, protocol: ProtocolConfig | None = None) -> ProtocolConfig:
    """Session length used by the distance reproduction: 60 min from 100 km on."""
    protocol = protocol or ProtocolConfig()
    if length_km >= FIG4_LONG_SESSION_KM:
        return replace(protocol, session_s=3600.0)
    return protocol
