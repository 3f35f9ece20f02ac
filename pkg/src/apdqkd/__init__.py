"""Gated InGaAs APD noise modelling and finite-key decoy BB84 rate simulation."""

__version__ = "0.1.0"

from .detector import (
    DEFAULT_TEMPERATURE_MODEL,
    DetectorOperatingPoint,
    TemperatureModel,
    afterpulse_at,
    dark_count_at,
    fit_temperature_model,
)
from .link import (
    ChannelConfig,
    ProtocolConfig,
    SessionStatistics,
    expected_session_counts,
    gain_total,
    qber,
    transmittance,
)
from .finite_key import (
    DecoyBounds,
    EpsilonBudget,
    SecureKeyResult,
    asymptotic_rate,
    binary_entropy,
    decoy_bounds,
    hoeffding_delta,
    secure_key_length,
    secure_key_rate,
)

__all__ = [
    "__version__",
    "DEFAULT_TEMPERATURE_MODEL",
    "DetectorOperatingPoint",
    "TemperatureModel",
    "afterpulse_at",
    "dark_count_at",
    "fit_temperature_model",
    "ChannelConfig",
    "ProtocolConfig",
    "SessionStatistics",
    "expected_session_counts",
    "gain_total",
    "qber",
    "transmittance",
    "DecoyBounds",
    "EpsilonBudget",
    "SecureKeyResult",
    "asymptotic_rate",
    "binary_entropy",
    "decoy_bounds",
    "hoeffding_delta",
    "secure_key_length",
    "secure_key_rate",
]
