"""Detector operating points and the temperature laws for dark counts and afterpulsing.

Dark counts follow ``P_d(T) = dark_ref * exp(dark_gamma * (T - T_ref))`` and the
afterpulse ratio follows a straight line ``P_a(T) = ap_intercept + ap_slope * (T - T_ref)``.
Both laws are only defined on the characterised temperature window; asking for a
value outside it raises :class:`TemperatureRangeError` instead of extrapolating.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "TemperatureRangeError",
    "InsufficientDataError",
    "DetectorOperatingPoint",
    "TemperatureModel",
    "DEFAULT_TEMPERATURE_MODEL",
    "ROOM_TEMP_C",
    "COOLED_TEMP_C",
    "dark_count_at",
    "afterpulse_at",
    "fit_temperature_model",
]

ROOM_TEMP_C = 20.0
COOLED_TEMP_C = -30.0
DEFAULT_EFFICIENCY = 0.25
DEFAULT_GATE_RATE_HZ = 1e9
DEFAULT_JITTER_S = 60e-12

# characterisation anchors (T [degC], P_d per gate, P_a)
ANCHOR_SAMPLES = (
    (COOLED_TEMP_C, 3.1e-6, 0.0389),
    (ROOM_TEMP_C, 5.9e-5, 0.0282),
)


class TemperatureRangeError(ValueError):
    """Temperature outside the window the laws were fitted on."""


class InsufficientDataError(ValueError):
    """Not enough distinct temperatures to fit the laws."""


@dataclass(frozen=True)
class DetectorOperatingPoint:
    """Noise state of the detector pair at one bias/temperature setting.

    ``dark_count_prob`` is per gate and per APD. ``afterpulse_prob`` is the
    ratio of afterpulse counts to detected photon counts. ``jitter_s`` is
    carried for bookkeeping only; none of the rate models read it.
    """

    temperature_c: float
    dark_count_prob: float
    afterpulse_prob: float
    efficiency: float = DEFAULT_EFFICIENCY
    gate_rate_hz: float = DEFAULT_GATE_RATE_HZ
    jitter_s: float = DEFAULT_JITTER_S

    def __post_init__(self) -> None:
        if not 0.0 <= self.dark_count_prob < 1.0:
            raise ValueError(f"dark_count_prob must be in [0, 1), got {self.dark_count_prob}")
        if not 0.0 <= self.afterpulse_prob < 1.0:
            raise ValueError(f"afterpulse_prob must be in [0, 1), got {self.afterpulse_prob}")
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError(f"efficiency must be in [0, 1], got {self.efficiency}")
        if not self.gate_rate_hz > 0.0:
            raise ValueError(f"gate_rate_hz must be positive, got {self.gate_rate_hz}")
        if self.jitter_s < 0.0:
            raise ValueError(f"jitter_s must be non-negative, got {self.jitter_s}")

    def with_(self, **changes) -> "DetectorOperatingPoint":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class TemperatureModel:
    dark_ref: float
    dark_gamma: float
    ap_intercept: float
    ap_slope: float
    ref_temp_c: float = ROOM_TEMP_C
    valid_range_c: tuple[float, float] = (COOLED_TEMP_C, ROOM_TEMP_C)

    def __post_init__(self) -> None:
        lo, hi = self.valid_range_c
        object.__setattr__(self, "valid_range_c", (float(lo), float(hi)))
        if not self.dark_ref > 0.0:
            raise ValueError(f"dark_ref must be positive, got {self.dark_ref}")
        if not lo <= hi:
            raise ValueError(f"valid_range_c must be ordered, got {self.valid_range_c}")
        for t in (lo, hi):
            pa = self.ap_intercept + self.ap_slope * (t - self.ref_temp_c)
            if not 0.0 <= pa < 1.0:
                raise ValueError(f"afterpulse law leaves [0, 1) at {t} degC ({pa})")
            pd = self.dark_ref * math.exp(self.dark_gamma * (t - self.ref_temp_c))
            if not pd < 1.0:
                raise ValueError(f"dark-count law reaches 1 at {t} degC")

    def _check(self, temp_c: float) -> None:
        lo, hi = self.valid_range_c
        # tolerate float noise from grid construction at the window edges
        if not (lo - 1e-9 <= temp_c <= hi + 1e-9):
            raise TemperatureRangeError(
                f"temperature {temp_c} degC outside model range [{lo}, {hi}] degC"
            )

    def dark_count_at(self, temp_c: float) -> float:
        self._check(temp_c)
        return self.dark_ref * math.exp(self.dark_gamma * (temp_c - self.ref_temp_c))

    def afterpulse_at(self, temp_c: float) -> float:
        self._check(temp_c)
        return max(0.0, self.ap_intercept + self.ap_slope * (temp_c - self.ref_temp_c))

    def operating_point(
        self,
        temp_c: float,
        efficiency: float = DEFAULT_EFFICIENCY,
        gate_rate_hz: float = DEFAULT_GATE_RATE_HZ,
        jitter_s: float = DEFAULT_JITTER_S,
    ) -> DetectorOperatingPoint:
        """Operating point at ``temp_c`` with a temperature-independent efficiency."""
        return DetectorOperatingPoint(
            temperature_c=float(temp_c),
            dark_count_prob=self.dark_count_at(temp_c),
            afterpulse_prob=self.afterpulse_at(temp_c),
            efficiency=efficiency,
            gate_rate_hz=gate_rate_hz,
            jitter_s=jitter_s,
        )

    def to_dict(self) -> dict:
        return {
            "dark_ref": self.dark_ref,
            "dark_gamma_per_k": self.dark_gamma,
            "ap_intercept": self.ap_intercept,
            "ap_slope_per_k": self.ap_slope,
            "ref_temp_c": self.ref_temp_c,
            "valid_range_c": list(self.valid_range_c),
        }


def fit_temperature_model(
    samples: Iterable[Sequence[float]],
    ref_temp_c: float = ROOM_TEMP_C,
    valid_range_c: tuple[float, float] | None = None,
) -> TemperatureModel:
    """Least-squares fit of ``ln P_d`` and ``P_a`` against temperature.

    Parameters
    ----------
    samples
        Iterable of ``(temperature_c, dark_count_prob, afterpulse_prob)``.
    ref_temp_c
        Temperature the intercepts refer to.
    valid_range_c
        Window the returned model accepts. Defaults to the span of the samples.

    Raises
    ------
    InsufficientDataError
        Fewer than two distinct temperatures.
    ValueError
        A non-positive dark count probability (its log is undefined).
    """
    data = np.asarray(list(samples), dtype=float)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError("samples must be (temperature_c, P_d, P_a) triples")
    temps, pd, pa = data.T
    if np.unique(temps).size < 2:
        raise InsufficientDataError("need at least two distinct temperatures")
    if np.any(pd <= 0.0):
        raise ValueError("dark count probabilities must be positive to take logs")

    x = temps - ref_temp_c
    dark_gamma, log_dark_ref = np.polyfit(x, np.log(pd), 1)
    ap_slope, ap_intercept = np.polyfit(x, pa, 1)
    if valid_range_c is None:
        valid_range_c = (float(temps.min()), float(temps.max()))
    return TemperatureModel(
        dark_ref=float(np.exp(log_dark_ref)),
        dark_gamma=float(dark_gamma),
        ap_intercept=float(ap_intercept),
        ap_slope=float(ap_slope),
        ref_temp_c=ref_temp_c,
        valid_range_c=valid_range_c,
    )


def _anchor_model() -> TemperatureModel:
    (t_cold, pd_cold, pa_cold), (t_room, pd_room, pa_room) = ANCHOR_SAMPLES
    span = t_room - t_cold
    # closed form keeps the room-temperature point bit-exact
    return TemperatureModel(
        dark_ref=pd_room,
        dark_gamma=math.log(pd_room / pd_cold) / span,
        ap_intercept=pa_room,
        ap_slope=(pa_room - pa_cold) / span,
        ref_temp_c=t_room,
        valid_range_c=(t_cold, t_room),
    )


DEFAULT_TEMPERATURE_MODEL = _anchor_model()


def dark_count_at(temp_c: float, model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL) -> float:
    return model.dark_count_at(temp_c)


def afterpulse_at(temp_c: float, model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL) -> float:
    return model.afterpulse_at(temp_c)
