"""JSON run configuration: defaults, strict key checking and validation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from .detector import (
    DEFAULT_EFFICIENCY,
    DEFAULT_GATE_RATE_HZ,
    DEFAULT_JITTER_S,
    DEFAULT_TEMPERATURE_MODEL,
    DetectorOperatingPoint,
    TemperatureModel,
)
from .finite_key import DEFAULT_DEVIATION, DEVIATION_METHODS
from .link import ChannelConfig, ProtocolConfig
from .pulse_sim import SimConfig

__all__ = ["ConfigError", "DetectorSettings", "RunConfig", "load_config", "config_from_dict"]


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid configuration: " + "; ".join(problems))
        self.problems = problems


@dataclass(frozen=True)
class DetectorSettings:
    efficiency: float = DEFAULT_EFFICIENCY
    gate_rate_hz: float = DEFAULT_GATE_RATE_HZ
    jitter_s: float = DEFAULT_JITTER_S

    def __post_init__(self) -> None:
        if not 0.0 <= self.efficiency <= 1.0:
            raise ValueError("efficiency must be in [0, 1]")
        if not self.gate_rate_hz > 0:
            raise ValueError("gate_rate_hz must be positive")


@dataclass(frozen=True)
class RunConfig:
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    channel: ChannelConfig = field(default_factory=lambda: ChannelConfig(50.0))
    temperature_model: TemperatureModel = DEFAULT_TEMPERATURE_MODEL
    detector: DetectorSettings = field(default_factory=DetectorSettings)
    sim: SimConfig = field(default_factory=lambda: SimConfig(n_gates=10**8, seed=42))
    deviation: str = DEFAULT_DEVIATION
    operating_points: tuple[DetectorOperatingPoint, ...] = ()
    output: dict = field(default_factory=dict)

    def operating_point(self, temp_c: float) -> DetectorOperatingPoint:
        return self.temperature_model.operating_point(
            temp_c,
            efficiency=self.detector.efficiency,
            gate_rate_hz=self.detector.gate_rate_hz,
            jitter_s=self.detector.jitter_s,
        )

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol.to_dict(),
            "channel": self.channel.to_dict(),
            "temperature_model": self.temperature_model.to_dict(),
            "detector": {
                "efficiency": self.detector.efficiency,
                "gate_rate_hz": self.detector.gate_rate_hz,
                "jitter_s": self.detector.jitter_s,
            },
            "sim": self.sim.to_dict(),
            "finite_key": {"deviation": self.deviation},
            "operating_points": [
                {
                    "temperature_c": op.temperature_c,
                    "dark_count_prob": op.dark_count_prob,
                    "afterpulse_prob": op.afterpulse_prob,
                    "efficiency": op.efficiency,
                }
                for op in self.operating_points
            ],
            "output": dict(self.output),
        }


_TEMPERATURE_KEYS = {
    "dark_ref": "dark_ref",
    "dark_gamma_per_k": "dark_gamma",
    "ap_intercept": "ap_intercept",
    "ap_slope_per_k": "ap_slope",
    "ref_temp_c": "ref_temp_c",
    "valid_range_c": "valid_range_c",
}
_OPERATING_POINT_KEYS = {"temperature_c", "dark_count_prob", "afterpulse_prob", "efficiency",
                         "gate_rate_hz", "jitter_s"}
_SECTIONS = {"protocol", "channel", "temperature_model", "detector", "sim", "finite_key",
             "operating_points", "output"}


def _section(data: dict, name: str, allowed: set[str], problems: list[str]) -> dict:
    raw = data.get(name, {})
    if not isinstance(raw, dict):
        problems.append(f"{name}: expected an object")
        return {}
    unknown = sorted(set(raw) - allowed)
    problems.extend(f"unknown key {name}.{k}" for k in unknown)
    return {k: v for k, v in raw.items() if k in allowed}


def _build(name: str, factory, kwargs: dict, problems: list[str]):
    try:
        return factory(**kwargs)
    except (TypeError, ValueError) as exc:
        problems.append(f"{name}: {exc}")
        return None


def config_from_dict(data: Any) -> RunConfig:
    """Validate a parsed JSON object and fill defaults for every absent field."""
    if not isinstance(data, dict):
        raise ConfigError(["top level must be a JSON object"])
    problems = [f"unknown key {k}" for k in sorted(set(data) - _SECTIONS)]

    names = lambda cls: {f.name for f in fields(cls)}  # noqa: E731
    proto_kw = _section(data, "protocol", names(ProtocolConfig), problems)
    for key in ("intensities", "send_probs", "basis_probs"):
        if key in proto_kw and isinstance(proto_kw[key], list):
            proto_kw[key] = tuple(proto_kw[key])
    protocol = _build("protocol", ProtocolConfig, proto_kw, problems)

    channel_kw = {"length_km": 50.0, **_section(data, "channel", names(ChannelConfig), problems)}
    channel = _build("channel", ChannelConfig, channel_kw, problems)

    temp_raw = _section(data, "temperature_model", set(_TEMPERATURE_KEYS), problems)
    base = DEFAULT_TEMPERATURE_MODEL.to_dict()
    temp_kw = {_TEMPERATURE_KEYS[k]: v for k, v in {**base, **temp_raw}.items()}
    temp_kw["valid_range_c"] = tuple(temp_kw["valid_range_c"])
    model = _build("temperature_model", TemperatureModel, temp_kw, problems)

    detector = _build("detector", DetectorSettings,
                      _section(data, "detector", names(DetectorSettings), problems), problems)

    sim_kw = {"n_gates": 10**8, "seed": 42, **_section(data, "sim", names(SimConfig), problems)}
    sim = _build("sim", SimConfig, sim_kw, problems)

    fk = _section(data, "finite_key", {"deviation"}, problems)
    deviation = fk.get("deviation", DEFAULT_DEVIATION)
    if deviation not in DEVIATION_METHODS:
        problems.append(f"finite_key.deviation must be one of {DEVIATION_METHODS}")

    ops = []
    raw_ops = data.get("operating_points", [])
    if not isinstance(raw_ops, list):
        problems.append("operating_points: expected a list")
        raw_ops = []
    for i, entry in enumerate(raw_ops):
        if not isinstance(entry, dict):
            problems.append(f"operating_points[{i}]: expected an object")
            continue
        unknown = sorted(set(entry) - _OPERATING_POINT_KEYS)
        problems.extend(f"unknown key operating_points[{i}].{k}" for k in unknown)
        kw = {"temperature_c": 20.0, **{k: v for k, v in entry.items() if k in _OPERATING_POINT_KEYS}}
        op = _build(f"operating_points[{i}]", DetectorOperatingPoint, kw, problems)
        if op is not None:
            ops.append(op)

    output = _section(data, "output", {"path", "format"}, problems)
    if "format" in output and output["format"] not in ("json", "csv"):
        problems.append("output.format must be 'json' or 'csv'")

    if problems:
        raise ConfigError(problems)
    return RunConfig(
        protocol=protocol,
        channel=channel,
        temperature_model=model,
        detector=detector,
        sim=sim,
        deviation=deviation,
        operating_points=tuple(ops),
        output=output,
    )


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror}"]) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from exc
    return config_from_dict(data)
