"""Channel loss, per-intensity gain and QBER, and expected session counts.

The receiver holds two APDs, so the background yield is ``Y0 = 1 - (1 - P_d)**2``.
Afterpulses inflate every count by ``(1 + P_a)`` and carry a random bit value.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .detector import DetectorOperatingPoint

__all__ = [
    "INTENSITIES",
    "BASES",
    "CALIBRATED_E_D",
    "ChannelConfig",
    "ProtocolConfig",
    "SessionStatistics",
    "transmittance",
    "system_efficiency",
    "background_yield",
    "gain_total",
    "qber",
    "effective_yield",
    "single_photon_error",
    "expected_session_counts",
]

INTENSITIES = ("signal", "decoy", "vacuum")
BASES = ("Z", "X")
E0 = 0.5

# Optical misalignment error fixed by experiments.calibrate_intrinsic_error
# (50 km, 20 degC, 20 min session, target 1.26 Mbit/s). Re-run that routine and
# update this constant whenever the key-length pipeline changes.
CALIBRATED_E_D = 0.027143


@dataclass(frozen=True)
class ChannelConfig:
    length_km: float
    attenuation_db_per_km: float = 0.2
    extra_loss_db: float = 0.1

    def __post_init__(self) -> None:
        for name in ("length_km", "attenuation_db_per_km", "extra_loss_db"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0.0):
                raise ValueError(f"{name} must be finite and >= 0, got {value}")

    @property
    def loss_db(self) -> float:
        return self.attenuation_db_per_km * self.length_km + self.extra_loss_db

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ProtocolConfig:
    """Three-intensity efficient BB84 settings.

    ``intensities`` and ``send_probs`` are ordered (signal, decoy, vacuum);
    ``basis_probs`` is (p_z, p_x).
    """

    intensities: tuple[float, float, float] = (0.42, 0.042, 0.0007)
    send_probs: tuple[float, float, float] = (0.9883, 0.0078, 0.0039)
    basis_probs: tuple[float, float] = (15 / 16, 1 / 16)
    epsilon: float = 1e-10
    session_s: float = 1200.0
    clock_hz: float = 1e9
    ec_efficiency_f: float = 1.16
    intrinsic_error_e_d: float = CALIBRATED_E_D

    def __post_init__(self) -> None:
        object.__setattr__(self, "intensities", tuple(float(v) for v in self.intensities))
        object.__setattr__(self, "send_probs", tuple(float(v) for v in self.send_probs))
        object.__setattr__(self, "basis_probs", tuple(float(v) for v in self.basis_probs))
        errors = []
        if len(self.intensities) != 3:
            errors.append("intensities must have 3 entries (signal, decoy, vacuum)")
        else:
            mu_s, mu_d, mu_v = self.intensities
            if not mu_s > mu_d > mu_v >= 0.0:
                errors.append("intensities must satisfy signal > decoy > vacuum >= 0")
        if len(self.send_probs) != 3:
            errors.append("send_probs must have 3 entries")
        elif any(p < 0 for p in self.send_probs) or abs(sum(self.send_probs) - 1.0) > 1e-6:
            errors.append("send_probs must be non-negative and sum to 1")
        if len(self.basis_probs) != 2:
            errors.append("basis_probs must have 2 entries (p_z, p_x)")
        elif any(p < 0 for p in self.basis_probs) or abs(sum(self.basis_probs) - 1.0) > 1e-12:
            errors.append("basis_probs must be non-negative and sum to 1")
        if not 0.0 < self.epsilon < 1.0:
            errors.append("epsilon must be in (0, 1)")
        if not self.session_s > 0.0:
            errors.append("session_s must be positive")
        if not self.clock_hz > 0.0:
            errors.append("clock_hz must be positive")
        if not self.ec_efficiency_f >= 1.0:
            errors.append("ec_efficiency_f must be >= 1")
        if not 0.0 <= self.intrinsic_error_e_d <= 0.5:
            errors.append("intrinsic_error_e_d must be in [0, 0.5]")
        if errors:
            raise ValueError("; ".join(errors))

    @property
    def p_z(self) -> float:
        return self.basis_probs[0]

    @property
    def p_x(self) -> float:
        return self.basis_probs[1]

    @property
    def total_pulses(self) -> float:
        return self.clock_hz * self.session_s

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("intensities", "send_probs", "basis_probs"):
            d[key] = list(d[key])
        return d


@dataclass(frozen=True)
class SessionStatistics:
    """Sifted counts indexed ``[intensity, basis]``.

    ``sent_pulses[k, b]`` counts pulses of intensity ``k`` where both parties chose
    basis ``b``. Counts may be real-valued expectations or integer Monte Carlo tallies.
    """

    sent_pulses: np.ndarray
    detections: np.ndarray
    errors: np.ndarray

    def __post_init__(self) -> None:
        for name in ("sent_pulses", "detections", "errors"):
            arr = np.array(getattr(self, name), dtype=float)
            if arr.shape != (3, 2):
                raise ValueError(f"{name} must have shape (3, 2), got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        # relative slack for accumulated float error in expectation values
        slack = 1e-9 * np.maximum(1.0, self.sent_pulses)
        if np.any(self.errors < 0) or np.any(self.errors > self.detections + slack):
            raise ValueError("need 0 <= errors <= detections")
        if np.any(self.detections > self.sent_pulses + slack):
            raise ValueError("need detections <= sent_pulses")

    def gain(self, k: int, b: int = 0) -> float:
        sent = self.sent_pulses[k, b]
        return float(self.detections[k, b] / sent) if sent > 0 else 0.0

    def error_rate(self, k: int, b: int = 0) -> float:
        det = self.detections[k, b]
        return float(self.errors[k, b] / det) if det > 0 else 0.0

    def to_dict(self) -> dict:
        out = {}
        for k, label in enumerate(INTENSITIES):
            out[label] = {}
            for b, basis in enumerate(BASES):
                out[label][basis] = {
                    "sent_pulses": float(self.sent_pulses[k, b]),
                    "detections": float(self.detections[k, b]),
                    "errors": float(self.errors[k, b]),
                    "gain": self.gain(k, b),
                    "qber": self.error_rate(k, b),
                }
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "SessionStatistics":
        arrays = {name: np.zeros((3, 2)) for name in ("sent_pulses", "detections", "errors")}
        for k, label in enumerate(INTENSITIES):
            for b, basis in enumerate(BASES):
                cell = data[label][basis]
                for name, arr in arrays.items():
                    arr[k, b] = cell[name]
        return cls(**arrays)

    def __add__(self, other: "SessionStatistics") -> "SessionStatistics":
        return SessionStatistics(
            self.sent_pulses + other.sent_pulses,
            self.detections + other.detections,
            self.errors + other.errors,
        )


def transmittance(channel: ChannelConfig) -> float:
    return 10.0 ** (-channel.loss_db / 10.0)


def system_efficiency(channel: ChannelConfig, op: DetectorOperatingPoint) -> float:
    return transmittance(channel) * op.efficiency


def background_yield(op: DetectorOperatingPoint) -> float:
    return 1.0 - (1.0 - op.dark_count_prob) ** 2


def gain_total(mu: float, eta_sys: float, op: DetectorOperatingPoint) -> tuple[float, float]:
    """Click probability per pulse without and with afterpulses: ``(Q_det, Q_tot)``."""
    if not 0.0 <= eta_sys <= 1.0:
        raise ValueError(f"eta_sys must be in [0, 1], got {eta_sys}")
    y0 = background_yield(op)
    q_det = 1.0 - (1.0 - y0) * math.exp(-eta_sys * mu)
    return q_det, q_det * (1.0 + op.afterpulse_prob)


def qber(mu: float, eta_sys: float, op: DetectorOperatingPoint, e_d: float) -> float:
    q_det, q_tot = gain_total(mu, eta_sys, op)
    if q_tot <= 0.0:
        raise ZeroDivisionError("QBER undefined: no counts expected (Q_tot = 0)")
    y0 = background_yield(op)
    err = E0 * y0 + e_d * -math.expm1(-eta_sys * mu) + E0 * op.afterpulse_prob * q_det
    # dark/photon coincidences are counted twice in the numerator; cap at random guessing
    return min(err / q_tot, E0)


def effective_yield(n: int, eta_sys: float, op: DetectorOperatingPoint) -> float:
    """Yield of an ``n``-photon pulse including afterpulse inflation."""
    y0 = background_yield(op)
    return (1.0 + op.afterpulse_prob) * (1.0 - (1.0 - y0) * (1.0 - eta_sys) ** n)


def single_photon_error(eta_sys: float, op: DetectorOperatingPoint, e_d: float) -> float:
    """Error rate of single-photon pulses under the same error decomposition as :func:`qber`."""
    y0 = background_yield(op)
    y1_det = 1.0 - (1.0 - y0) * (1.0 - eta_sys)
    if y1_det <= 0.0:
        return E0
    err = E0 * y0 + e_d * eta_sys + E0 * op.afterpulse_prob * y1_det
    return min(err / ((1.0 + op.afterpulse_prob) * y1_det), E0)


def expected_session_counts(
    protocol: ProtocolConfig, channel: ChannelConfig, op: DetectorOperatingPoint
) -> SessionStatistics:
    eta = system_efficiency(channel, op)
    sent_k = protocol.total_pulses * np.asarray(protocol.send_probs)
    basis_weight = np.asarray(protocol.basis_probs) ** 2
    sent = np.outer(sent_k, basis_weight)
    gains = np.array([gain_total(mu, eta, op)[1] for mu in protocol.intensities])
    rates = np.array(
        [qber(mu, eta, op, protocol.intrinsic_error_e_d) if g > 0 else 0.0
         for mu, g in zip(protocol.intensities, gains)]
    )
    detections = sent * gains[:, None]
    errors = detections * rates[:, None]
    return SessionStatistics(sent, detections, errors)
