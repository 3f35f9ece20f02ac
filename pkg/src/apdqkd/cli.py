"""Command-line entry point. Run ``apdqkd --help`` for the subcommands."""
from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .experiments import (
    FIG4_LONG_DISTANCE_TABLE,
    BracketError,
    CrossoverNotFound,
    OperatingPointTable,
    evaluate_point,
    find_crossover,
    find_cutoff,
    optimize_operating_point,
    sweep_distance,
    sweep_temperature,
)
from .link import expected_session_counts
from .pulse_sim import (
    NoSignalError,
    estimate_characterization,
    simulate_characterization_run,
    simulate_qkd_session,
)

__all__ = ["build_parser", "main", "run"]

log = logging.getLogger("apdqkd")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_INVALID = 3


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _dump_json(payload: dict) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"


def _csv_with_header(body: str, cfg: RunConfig, command: str) -> str:
    meta = json.dumps(_jsonable(cfg.to_dict()), sort_keys=True, separators=(",", ":"))
    return f"# apdqkd {__version__} {command}\n# config: {meta}\n" + body


def _envelope(cfg: RunConfig, command: str, **content) -> dict:
    return {"tool": "apdqkd", "version": __version__, "command": command,
            "config": cfg.to_dict(), **content}


def _emit(text: str, out: str | None) -> None:
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _effective_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if getattr(args, "distance_km", None) is not None:
        cfg = replace(cfg, channel=replace(cfg.channel, length_km=args.distance_km))
    sim_kw = {}
    if getattr(args, "gates", None) is not None:
        sim_kw["n_gates"] = args.gates
    if getattr(args, "seed", None) is not None:
        sim_kw["seed"] = args.seed
    if getattr(args, "workers", None) is not None:
        sim_kw["workers"] = args.workers
    if getattr(args, "afterpulse_model", None) is not None:
        sim_kw["afterpulse_model"] = args.afterpulse_model
    if sim_kw:
        cfg = replace(cfg, sim=replace(cfg.sim, **sim_kw))
    if getattr(args, "session_s", None) is not None:
        cfg = replace(cfg, protocol=replace(cfg.protocol, session_s=args.session_s))
    if getattr(args, "deviation", None) is not None:
        cfg = replace(cfg, deviation=args.deviation)
    return cfg


def _cmd_rate(args, cfg: RunConfig) -> str:
    op = cfg.operating_point(args.temp_c)
    stats, result = evaluate_point(cfg.protocol, cfg.channel, op, deviation=cfg.deviation)
    _emit(_dump_json(_envelope(cfg, "rate", temperature_c=args.temp_c,
                               operating_point=op.to_dict(),
                               statistics=stats.to_dict(), result=result.to_dict(),
                               secure_rate_bps=result.secure_rate_bps)), args.out)
    return (f"rate at {cfg.channel.length_km:g} km, {args.temp_c:g} C: "
            f"{result.secure_rate_bps:.6g} bit/s" + (f" ({result.reason})" if result.reason else ""))


def _cmd_sweep_temp(args, cfg: RunConfig) -> str:
    res = sweep_temperature(args.t_start, args.t_stop, args.step, channel=cfg.channel,
                            protocol=cfg.protocol, model=cfg.temperature_model,
                            efficiency=cfg.detector.efficiency, deviation=cfg.deviation)
    _emit(_csv_with_header(res.to_csv(), cfg, "sweep-temp"), args.out)
    rates = res.rates
    return f"{len(rates)} temperatures, rate {rates.min():.6g}..{rates.max():.6g} bit/s"


def _cmd_sweep_distance(args, cfg: RunConfig) -> str:
    res = sweep_distance(args.l_start, args.l_stop, args.step, temp_c=args.temp_c,
                         protocol=cfg.protocol, model=cfg.temperature_model,
                         efficiency=cfg.detector.efficiency, channel=cfg.channel,
                         deviation=cfg.deviation)
    _emit(_csv_with_header(res.to_csv(), cfg, "sweep-distance"), args.out)
    positive = res.variables[res.rates > 0]
    reach = f"last positive rate at {positive.max():g} km" if positive.size else "no positive rate"
    return f"{len(res.rows)} distances, {reach}"


def _cmd_crossover(args, cfg: RunConfig) -> str:
    length = find_crossover(cfg.protocol, cfg.temperature_model, args.t_hot, args.t_cold,
                            bracket=(args.lo_km, args.hi_km), tol=args.tol_km,
                            efficiency=cfg.detector.efficiency, channel=cfg.channel,
                            deviation=cfg.deviation)
    _emit(_dump_json(_envelope(cfg, "crossover", t_hot_c=args.t_hot, t_cold_c=args.t_cold,
                               crossover_km=length)), args.out)
    return f"cross-over at {length:.2f} km"


def _cmd_cutoff(args, cfg: RunConfig) -> str:
    res = find_cutoff(cfg.protocol, cfg.temperature_model, args.temp_c,
                      bracket=(args.lo_km, args.hi_km), tol=args.tol_km,
                      efficiency=cfg.detector.efficiency, channel=cfg.channel,
                      deviation=cfg.deviation)
    _emit(_dump_json(_envelope(cfg, "cutoff", temperature_c=args.temp_c,
                               cutoff_km=res.distance_km, beyond_bracket=res.beyond_bracket)),
          args.out)
    return f"cut-off at {res} ({args.temp_c:g} C)"


def _cmd_optimize(args, cfg: RunConfig) -> str:
    table = OperatingPointTable(cfg.operating_points) if cfg.operating_points else FIG4_LONG_DISTANCE_TABLE
    best, rate = optimize_operating_point(table, cfg.channel, cfg.protocol, deviation=cfg.deviation)
    _emit(_dump_json(_envelope(cfg, "optimize", candidates=len(table.entries),
                               best=best.to_dict(),
                               secure_rate_bps=rate)), args.out)
    return (f"best of {len(table.entries)}: efficiency {best.efficiency:g}, "
            f"P_d {best.dark_count_prob:.3g}, {rate:.6g} bit/s")


def _cmd_characterize(args, cfg: RunConfig) -> str:
    op = cfg.operating_point(args.temp_c)
    hist = simulate_characterization_run(cfg.sim, op)
    est = estimate_characterization(hist, cfg.sim.mu_per_pulse)
    payload = _envelope(cfg, "characterize", temperature_c=args.temp_c,
                        truth={"dark_count_prob": op.dark_count_prob,
                               "afterpulse_prob": op.afterpulse_prob,
                               "efficiency": op.efficiency},
                        estimate=est.to_dict(), total_gates=hist.total_gates,
                        dark_run_counts=hist.dark_run_counts)
    csv_text = _csv_with_header(hist.to_csv(), cfg, "characterize")
    if args.out is None:
        payload["histogram"] = hist.counts_by_phase
        sys.stdout.write(_dump_json(payload))
    else:
        base = Path(args.out)
        base.with_suffix(".csv").write_text(csv_text)
        base.with_suffix(".json").write_text(_dump_json(payload))
    return (f"P_d {est.p_d_hat:.4g}, eta {est.eta_hat:.4g}, P_a {est.p_a_hat:.4g} "
            f"from {hist.total_gates} gates")


def _cmd_mc_session(args, cfg: RunConfig) -> str:
    op = cfg.operating_point(args.temp_c)
    protocol = replace(cfg.protocol, session_s=cfg.sim.n_gates / cfg.protocol.clock_hz)
    stats = simulate_qkd_session(protocol, cfg.channel, op, cfg.sim)
    analytic = expected_session_counts(protocol, cfg.channel, op)
    _, result = evaluate_point(cfg.protocol, cfg.channel, op, deviation=cfg.deviation, sim=cfg.sim)
    _emit(_dump_json(_envelope(cfg, "mc-session", temperature_c=args.temp_c,
                               simulated=stats.to_dict(), analytic=analytic.to_dict(),
                               result=result.to_dict())), args.out)
    return (f"{cfg.sim.n_gates} gates: Q_signal,Z {stats.gain(0, 0):.5g} "
            f"(analytic {analytic.gain(0, 0):.5g}), rate {result.secure_rate_bps:.6g} bit/s")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apdqkd", description="Decoy-state QKD key rates with gated APDs.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging on stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output file (stdout when omitted)")
        p.add_argument("--deviation", choices=("bernstein", "hoeffding", "none"),
                       help="finite-size deviation bound")
        p.set_defaults(func=func)
        return p

    p = add("rate", _cmd_rate, "finite-key rate at one point")
    p.add_argument("--distance-km", type=float)
    p.add_argument("--temp-c", type=float, default=20.0)
    p.add_argument("--session-s", type=float)

    p = add("sweep-temp", _cmd_sweep_temp, "rate against detector temperature (CSV)")
    p.add_argument("--distance-km", type=float)
    p.add_argument("--t-start", type=float, default=-30.0)
    p.add_argument("--t-stop", type=float, default=20.0)
    p.add_argument("--step", type=float, default=5.0)

    p = add("sweep-distance", _cmd_sweep_distance, "rate against fiber length (CSV)")
    p.add_argument("--temp-c", type=float, default=20.0)
    p.add_argument("--l-start", type=float, default=0.0)
    p.add_argument("--l-stop", type=float, default=120.0)
    p.add_argument("--step", type=float, default=5.0)
    p.add_argument("--session-s", type=float)

    p = add("crossover", _cmd_crossover, "length where hot and cold rates cross")
    p.add_argument("--t-hot", type=float, default=20.0)
    p.add_argument("--t-cold", type=float, default=-30.0)
    p.add_argument("--lo-km", type=float, default=5.0)
    p.add_argument("--hi-km", type=float, default=120.0)
    p.add_argument("--tol-km", type=float, default=0.1)

    p = add("cutoff", _cmd_cutoff, "largest length with a positive rate")
    p.add_argument("--temp-c", type=float, default=20.0)
    p.add_argument("--lo-km", type=float, default=10.0)
    p.add_argument("--hi-km", type=float, default=150.0)
    p.add_argument("--tol-km", type=float, default=0.1)
    p.add_argument("--session-s", type=float)

    p = add("optimize", _cmd_optimize, "best operating point from a table")
    p.add_argument("--distance-km", type=float)
    p.add_argument("--session-s", type=float)

    p = add("characterize", _cmd_characterize, "simulated detector characterisation run")
    p.add_argument("--temp-c", type=float, default=20.0)
    p.add_argument("--gates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)

    p = add("mc-session", _cmd_mc_session, "Monte Carlo QKD session against the analytic model")
    p.add_argument("--distance-km", type=float)
    p.add_argument("--temp-c", type=float, default=20.0)
    p.add_argument("--gates", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--afterpulse-model", choices=("kernel", "attached"))
    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _effective_config(args)
        summary = args.func(args, cfg)
    except ConfigError as exc:
        print(f"apdqkd: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CrossoverNotFound as exc:
        print(f"apdqkd: {exc} [{exc.diagnostic}]", file=sys.stderr)
        return EXIT_FAILURE
    except (BracketError, NoSignalError) as exc:
        print(f"apdqkd: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except ValueError as exc:
        print(f"apdqkd: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"apdqkd: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    print(summary, file=sys.stderr)
    return EXIT_OK


def main() -> None:
    sys.exit(run())
