"""Finite-key decoy-state bounds and secure key length for efficient BB84.

Gains of the three intensities are worst-cased inside confidence intervals by
enumerating every interval corner, then fed through the vacuum+weak analytic
decoy bounds. Key is extracted from the Z basis; X-basis errors bound the
single-photon phase error.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .detector import DetectorOperatingPoint
from .link import (
    E0,
    ChannelConfig,
    ProtocolConfig,
    SessionStatistics,
    effective_yield,
    expected_session_counts,
    gain_total,
    qber,
    single_photon_error,
    system_efficiency,
)

__all__ = [
    "ESTIMATION_USES",
    "DEVIATION_METHODS",
    "DEFAULT_DEVIATION",
    "EpsilonBudget",
    "DecoyBounds",
    "SecureKeyResult",
    "binary_entropy",
    "hoeffding_delta",
    "bernstein_delta",
    "decoy_bounds",
    "secure_key_length",
    "secure_key_rate",
    "asymptotic_rate",
]

# 3 gains x 2 sides + 2 error-rate upper bounds
ESTIMATION_USES = 8
DEVIATION_METHODS = ("bernstein", "hoeffding", "none")
DEFAULT_DEVIATION = "bernstein"

SIGNAL, DECOY, VACUUM = 0, 1, 2
Z, X = 0, 1


def binary_entropy(x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"binary entropy needs x in [0, 1], got {x}")
    if x == 0.0 or x == 1.0:
        return 0.0
    return -x * math.log2(x) - (1.0 - x) * math.log2(1.0 - x)


def hoeffding_delta(n_trials: float, eps: float) -> float:
    """Half-width of the Hoeffding interval, ``sqrt(ln(1/eps) / (2 n))``.

    Each side of ``observed +/- delta`` fails with probability at most ``eps``.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be >= 1")
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    return math.sqrt(math.log(1.0 / eps) / (2.0 * n_trials))


def bernstein_delta(n_trials: float, p_hat: float, eps: float) -> float:
    """Empirical-Bernstein half-width (Maurer and Pontil 2009, Thm. 4).

    Uses the sample variance of the Bernoulli tallies, so rare events get an
    interval that scales with ``sqrt(p / n)`` instead of ``sqrt(1 / n)``.
    One side fails with probability at most ``eps``.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must be in (0, 1)")
    if n_trials < 2:
        return 1.0
    p_hat = min(max(p_hat, 0.0), 1.0)
    log_term = math.log(2.0 / eps)
    var = p_hat * (1.0 - p_hat) * n_trials / (n_trials - 1.0)
    return math.sqrt(2.0 * var * log_term / n_trials) + 7.0 * log_term / (3.0 * (n_trials - 1.0))


def _deviation(method: str) -> Callable[[float, float, float], float]:
    if method == "bernstein":
        return bernstein_delta
    if method == "hoeffding":
        return lambda n, p, eps: hoeffding_delta(n, eps) if n >= 1 else 1.0
    if method == "none":
        return lambda n, p, eps: 0.0
    raise ValueError(f"unknown deviation method {method!r}; choose from {DEVIATION_METHODS}")


@dataclass(frozen=True)
class EpsilonBudget:
    epsilon_total: float = 1e-10
    epsilon_cor: float | None = None
    epsilon_pa: float | None = None
    epsilon_est_each: float | None = None

    def __post_init__(self) -> None:
        eps = self.epsilon_total
        if not 0.0 < eps < 1.0:
            raise ValueError("epsilon_total must be in (0, 1)")
        if self.epsilon_cor is None:
            object.__setattr__(self, "epsilon_cor", eps / 4)
        if self.epsilon_pa is None:
            object.__setattr__(self, "epsilon_pa", eps / 4)
        if self.epsilon_est_each is None:
            object.__setattr__(self, "epsilon_est_each", eps / 2 / ESTIMATION_USES)
        shares = (self.epsilon_cor, self.epsilon_pa, self.epsilon_est_each)
        if min(shares) <= 0.0:
            raise ValueError("all epsilon shares must be positive")
        spent = self.epsilon_cor + self.epsilon_pa + ESTIMATION_USES * self.epsilon_est_each
        if spent > eps * (1 + 1e-12):
            raise ValueError(f"epsilon shares sum to {spent}, above total {eps}")

    @classmethod
    def for_protocol(cls, protocol: ProtocolConfig) -> "EpsilonBudget":
        return cls(epsilon_total=protocol.epsilon)


@dataclass(frozen=True)
class DecoyBounds:
    y0_lower: float
    y1_lower: float
    e1_upper: float
    corner_audit: dict = field(default_factory=dict)

    @property
    def aborted(self) -> bool:
        return self.y1_lower <= 0.0


@dataclass(frozen=True)
class SecureKeyResult:
    s0_lower: float
    s1_lower: float
    phase_error_upper: float
    ec_leak_bits: float
    secure_length_bits: int
    secure_rate_bps: float
    reason: str | None = None
    audit: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "s0_lower": self.s0_lower,
            "s1_lower": self.s1_lower,
            "phase_error_upper": self.phase_error_upper,
            "ec_leak_bits": self.ec_leak_bits,
            "secure_length_bits": self.secure_length_bits,
            "secure_rate_bps": self.secure_rate_bps,
            "reason": self.reason,
            "audit": self.audit,
        }


def _y0_lower(mu_d, mu_v, q_v, q_d):
    return max(0.0, (mu_d * q_v * math.exp(mu_v) - mu_v * q_d * math.exp(mu_d)) / (mu_d - mu_v))


def _y1_lower(mu_s, mu_d, q_d, q_s, y0l):
    return (mu_s / (mu_s * mu_d - mu_d**2)) * (
        q_d * math.exp(mu_d)
        - (mu_d**2 / mu_s**2) * q_s * math.exp(mu_s)
        - ((mu_s**2 - mu_d**2) / mu_s**2) * y0l
    )


def _e1_upper(err, gain, mu, y0l, y1l):
    if y1l <= 0.0:
        return 1.0
    return (err * gain * math.exp(mu) - E0 * y0l) / (y1l * mu)


def _sign_corner(func, center, widths, minimize=False):
    """Corner picked by the sign of each partial derivative at the interval centre.

    Returns the maximising corner, or the minimising one when ``minimize`` is set.
    """
    corner = []
    for i, w in enumerate(widths):
        if w == 0.0:
            corner.append(1)
            continue
        up = list(center)
        up[i] += w
        rising = func(*up) >= func(*center)
        corner.append(1 if rising != minimize else -1)
    return tuple(corner)


def decoy_bounds(
    stats: SessionStatistics,
    protocol: ProtocolConfig,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
    corners: str = "exhaustive",
) -> DecoyBounds:
    """Lower bounds on Y0, Y1 and an upper bound on e1 from Z-basis gains.

    The phase error is bounded twice, once from decoy-intensity X errors and once
    from signal-intensity X errors, and the tighter bound is kept. ``corners``
    selects ``"exhaustive"`` enumeration of every interval corner or the single
    ``"sign"`` corner from derivative signs at the interval centre.
    """
    if corners not in ("exhaustive", "sign"):
        raise ValueError("corners must be 'exhaustive' or 'sign'")
    budget = budget or EpsilonBudget.for_protocol(protocol)
    dev = _deviation(deviation)
    eps = budget.epsilon_est_each
    mu_s, mu_d, mu_v = protocol.intensities
    if np.any(stats.sent_pulses[:, Z] <= 0):
        raise ValueError("every intensity needs sent pulses in the Z basis")

    gains = [stats.gain(k, Z) for k in (SIGNAL, DECOY, VACUUM)]
    widths = [dev(stats.sent_pulses[k, Z], gains[k], eps) for k in (SIGNAL, DECOY, VACUUM)]

    def q_at(k, sign):
        return min(1.0, max(0.0, gains[k] + sign * widths[k]))

    def y0_of(sv, sd):
        return _y0_lower(mu_d, mu_v, q_at(VACUUM, sv), q_at(DECOY, sd))

    def y1_of(ss, sd, sv):
        return _y1_lower(mu_s, mu_d, q_at(DECOY, sd), q_at(SIGNAL, ss), y0_of(sv, sd))

    audit: dict = {"deviation": deviation, "corners": corners,
                   "gain_widths": {"signal": widths[0], "decoy": widths[1], "vacuum": widths[2]}}

    if corners == "exhaustive":
        y0_corners = {(sv, sd): y0_of(sv, sd) for sv in (-1, 1) for sd in (-1, 1)}
        y0_corner = min(y0_corners, key=y0_corners.get)
        y1_corners = {c: y1_of(*c) for c in itertools.product((-1, 1), repeat=3)}
        y1_corner = min(y1_corners, key=y1_corners.get)
    else:
        # continuous surrogates of the corner functions for the derivative signs
        y0_corner = _sign_corner(
            lambda v, d: _y0_lower(mu_d, mu_v, v, d), (gains[VACUUM], gains[DECOY]), (widths[VACUUM], widths[DECOY]),
            minimize=True,
        )

        def y1_cont(s, d, v):
            return _y1_lower(mu_s, mu_d, d, s, _y0_lower(mu_d, mu_v, v, d))

        y1_corner = _sign_corner(
            y1_cont, (gains[SIGNAL], gains[DECOY], gains[VACUUM]), (widths[SIGNAL], widths[DECOY], widths[VACUUM]),
            minimize=True,
        )
    y0l = y0_of(*y0_corner)
    y1l_raw = y1_of(*y1_corner)
    audit["y0_lower_corner"] = {"vacuum": y0_corner[0], "decoy": y0_corner[1]}
    audit["y1_lower_corner"] = {"signal": y1_corner[0], "decoy": y1_corner[1], "vacuum": y1_corner[2]}

    estimates = {}
    for name, k, mu in (("decoy", DECOY, mu_d), ("signal", SIGNAL, mu_s)):
        n_err = stats.detections[k, X]
        if n_err <= 0:
            estimates[name] = (1.0, None)
            continue
        e_hat = stats.error_rate(k, X)
        e_width = dev(n_err, e_hat, eps)

        def e1_of(se, ss, sd, sv, k=k, mu=mu, e_hat=e_hat, e_width=e_width):
            err = min(1.0, max(0.0, e_hat + se * e_width))
            gain = q_at(k, ss if k == SIGNAL else sd)
            return _e1_upper(err, gain, mu, y0_of(sv, sd), y1_of(ss, sd, sv))

        if corners == "exhaustive":
            vals = {c: e1_of(*c) for c in itertools.product((-1, 1), repeat=4)}
            corner = max(vals, key=vals.get)
        else:
            def e1_cont(e, s, d, v, k=k, mu=mu):
                y0 = _y0_lower(mu_d, mu_v, v, d)
                return _e1_upper(e, s if k == SIGNAL else d, mu, y0, _y1_lower(mu_s, mu_d, d, s, y0))

            corner = _sign_corner(
                e1_cont,
                (e_hat, gains[SIGNAL], gains[DECOY], gains[VACUUM]),
                (e_width, widths[SIGNAL], widths[DECOY], widths[VACUUM]),
            )
        estimates[name] = (e1_of(*corner), corner)

    chosen = min(estimates, key=lambda name: estimates[name][0])
    e1_raw, e1_corner = estimates[chosen]
    audit["e1_estimator"] = chosen
    audit["e1_candidates"] = {name: val for name, (val, _) in estimates.items()}
    if e1_corner is not None:
        audit["e1_upper_corner"] = dict(zip(("error", "signal", "decoy", "vacuum"), e1_corner))

    clamped = []
    y1l = y1l_raw
    if y1l < 0.0:
        y1l = 0.0
        clamped.append("y1_lower")
    elif y1l > 1.0:
        y1l = 1.0
        clamped.append("y1_lower")
    e1u = e1_raw
    if not 0.0 <= e1u <= 1.0:
        e1u = min(1.0, max(0.0, e1u))
        clamped.append("e1_upper")
    if y1l <= 0.0:
        e1u = 1.0
    audit["clamped"] = clamped
    audit["y1_lower_raw"] = y1l_raw
    audit["e1_upper_raw"] = e1_raw
    return DecoyBounds(y0_lower=y0l, y1_lower=y1l, e1_upper=e1u, corner_audit=audit)


def secure_key_length(
    stats: SessionStatistics,
    bounds: DecoyBounds,
    protocol: ProtocolConfig,
    budget: EpsilonBudget | None = None,
) -> SecureKeyResult:
    budget = budget or EpsilonBudget.for_protocol(protocol)
    mu_s = protocol.intensities[SIGNAL]
    sent_z = stats.sent_pulses[SIGNAL, Z]
    n_z = stats.detections[SIGNAL, Z]
    s0l = sent_z * math.exp(-mu_s) * bounds.y0_lower
    s1l = sent_z * mu_s * math.exp(-mu_s) * bounds.y1_lower
    phi = bounds.e1_upper
    e_z = stats.error_rate(SIGNAL, Z)
    leak = protocol.ec_efficiency_f * n_z * binary_entropy(min(e_z, 1.0))
    overhead = math.log2(2.0 / budget.epsilon_cor) + 2.0 * math.log2(1.0 / budget.epsilon_pa)
    audit = {
        "n_z": float(n_z),
        "qber_z": e_z,
        "y0_lower": bounds.y0_lower,
        "y1_lower": bounds.y1_lower,
        "e1_upper": phi,
        "pa_overhead_bits": overhead,
        "decoy": bounds.corner_audit,
    }

    reason = None
    raw = float("nan")
    if n_z <= 0:
        reason = "no_detections"
    elif bounds.y1_lower <= 0.0:
        reason = "y1_nonpositive"
    elif phi >= 0.5:
        reason = "phase_error_too_high"
    else:
        raw = s0l + s1l * (1.0 - binary_entropy(phi)) - leak - overhead
        if raw <= 0.0:
            reason = "negative_length"
    audit["raw_length_bits"] = raw
    length = 0 if reason else int(math.floor(raw))
    return SecureKeyResult(
        s0_lower=s0l,
        s1_lower=s1l,
        phase_error_upper=phi,
        ec_leak_bits=leak,
        secure_length_bits=length,
        secure_rate_bps=length / protocol.session_s,
        reason=reason,
        audit=audit,
    )


def secure_key_rate(
    protocol: ProtocolConfig,
    channel: ChannelConfig,
    op: DetectorOperatingPoint,
    budget: EpsilonBudget | None = None,
    deviation: str = DEFAULT_DEVIATION,
) -> SecureKeyResult:
    """Finite-key result from the expected (analytic) session counts."""
    stats = expected_session_counts(protocol, channel, op)
    if stats.detections[SIGNAL, Z] <= 0:
        return secure_key_length(stats, DecoyBounds(0.0, 0.0, 1.0), protocol, budget)
    bounds = decoy_bounds(stats, protocol, budget, deviation=deviation)
    return secure_key_length(stats, bounds, protocol, budget)


def asymptotic_rate(
    protocol: ProtocolConfig,
    channel: ChannelConfig,
    op: DetectorOperatingPoint,
    e_d: float | None = None,
) -> float:
    """Infinite-key rate in bit/s from the true model yields (no decoy slack)."""
    if e_d is None:
        e_d = protocol.intrinsic_error_e_d
    mu_s = protocol.intensities[SIGNAL]
    eta = system_efficiency(channel, op)
    q_tot = gain_total(mu_s, eta, op)[1]
    if q_tot <= 0.0:
        return 0.0
    q0 = math.exp(-mu_s) * effective_yield(0, eta, op)
    q1 = mu_s * math.exp(-mu_s) * effective_yield(1, eta, op)
    e1 = single_photon_error(eta, op, e_d)
    e_s = qber(mu_s, eta, op, e_d)
    per_pulse = q0 + q1 * (1.0 - binary_entropy(e1)) - protocol.ec_efficiency_f * q_tot * binary_entropy(e_s)
    prefactor = protocol.clock_hz * protocol.send_probs[SIGNAL] * protocol.p_z**2
    return max(0.0, prefactor * per_pulse)
