"""Gate-level Monte Carlo of the gated APD pair and of a decoy BB84 session.

Gates are split into fixed-size blocks. Each block draws from its own RNG stream,
seeded from ``(seed, block index, stream)`` through :class:`numpy.random.SeedSequence`,
and starts with an empty afterpulse memory. Block tallies are summed in block order,
so results depend only on ``(seed, block_size, n_gates)``, never on how many worker
threads ran the blocks.

Afterpulsing uses a single-exponential detrapping kernel: an avalanche at gate ``i``
adds ``a(k) = A * exp(-k * dt / tau)`` of trigger hazard to gate ``i + k``, with ``A``
chosen so that the kernel integrates to ``P_a``.
"""
from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np
from numba import njit

from .detector import DetectorOperatingPoint
from .link import ChannelConfig, ProtocolConfig, SessionStatistics, system_efficiency

__all__ = [
    "AFTERPULSE_MODELS",
    "SimConfig",
    "GateHistogram",
    "CharacterizationEstimate",
    "NoSignalError",
    "kernel_decay",
    "kernel_amplitude",
    "kernel_length",
    "simulate_characterization_run",
    "estimate_characterization",
    "simulate_qkd_session",
    "expected_histogram",
]

AFTERPULSE_MODELS = ("kernel", "attached")
SATURATION_WINDOW_GATES = 1 << 16

_STREAM_LASER, _STREAM_DARK, _STREAM_QKD = 0, 1, 2
# gates per bulk RNG draw; part of the determinism contract, do not vary per run
_CHUNK = 1 << 18
_EXTRA = 1 << 14


class NoSignalError(ValueError):
    """Illuminated bin shows no excess over the dark level."""


@dataclass(frozen=True)
class SimConfig:
    """Monte Carlo settings.

    ``afterpulse_model="kernel"`` spreads afterpulses over later gates through the
    exponential kernel. ``"attached"`` books them on the gate of the parent
    avalanche, which is the assumption behind the analytic ``(1 + P_a)`` gain.
    ``kernel_gates`` truncates the kernel after that many gates (``None`` keeps
    the full exponential tail).
    """

    n_gates: int
    seed: int = 0
    block_size: int = 1 << 22
    illumination_period: int = 64
    mu_per_pulse: float = 0.1
    ap_time_constant_s: float = 5e-8
    saturation_cap_hz: float | None = None
    afterpulse_model: str = "kernel"
    kernel_gates: int | None = None
    workers: int = 1

    def __post_init__(self) -> None:
        errors = []
        if self.n_gates < 1:
            errors.append("n_gates must be >= 1")
        if self.block_size < 1:
            errors.append("block_size must be >= 1")
        if self.illumination_period < 1:
            errors.append("illumination_period must be >= 1")
        if self.mu_per_pulse < 0:
            errors.append("mu_per_pulse must be >= 0")
        if not self.ap_time_constant_s > 0:
            errors.append("ap_time_constant_s must be positive")
        if self.saturation_cap_hz is not None and not self.saturation_cap_hz > 0:
            errors.append("saturation_cap_hz must be positive when set")
        if self.afterpulse_model not in AFTERPULSE_MODELS:
            errors.append(f"afterpulse_model must be one of {AFTERPULSE_MODELS}")
        if self.kernel_gates is not None and self.kernel_gates < 1:
            errors.append("kernel_gates must be >= 1 when set")
        if self.workers < 1:
            errors.append("workers must be >= 1")
        if not 0 <= self.seed < 2**64:
            errors.append("seed must be a 64-bit unsigned integer")
        if errors:
            raise ValueError("; ".join(errors))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GateHistogram:
    counts_by_phase: np.ndarray
    total_gates: int
    dark_run_counts: int

    def __post_init__(self) -> None:
        counts = np.asarray(self.counts_by_phase, dtype=np.int64)
        if counts.ndim != 1 or counts.size < 1:
            raise ValueError("counts_by_phase must be a non-empty 1-D array")
        if np.any(counts < 0) or counts.sum() > self.total_gates:
            raise ValueError("histogram counts must be >= 0 and sum to <= total_gates")
        if not 0 <= self.dark_run_counts <= self.total_gates:
            raise ValueError("dark_run_counts must lie in [0, total_gates]")
        counts.setflags(write=False)
        object.__setattr__(self, "counts_by_phase", counts)

    @property
    def period(self) -> int:
        return int(self.counts_by_phase.size)

    def gates_per_phase(self) -> np.ndarray:
        full, rest = divmod(self.total_gates, self.period)
        return full + (np.arange(self.period) < rest).astype(np.int64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["phase_index", "counts"])
        for i, c in enumerate(self.counts_by_phase):
            writer.writerow([i, int(c)])
        return buf.getvalue()


@dataclass(frozen=True)
class CharacterizationEstimate:
    p_d_hat: float
    p_a_hat: float
    eta_hat: float
    p_d_err: float
    p_a_err: float
    eta_err: float

    def to_dict(self) -> dict:
        return asdict(self)


def kernel_decay(op: DetectorOperatingPoint, tau_s: float) -> float:
    return math.exp(-1.0 / (op.gate_rate_hz * tau_s))


def kernel_amplitude(afterpulse_prob: float, decay: float) -> float:
    """``A`` such that ``sum_{k>=1} A * decay**k == afterpulse_prob``."""
    return afterpulse_prob * (1.0 - decay) / decay


def kernel_length(op: DetectorOperatingPoint, tau_s: float, mass: float = 1.0 - 1e-6) -> int:
    """Smallest lag ``K`` whose cumulative kernel mass reaches ``mass`` of the total."""
    decay = kernel_decay(op, tau_s)
    return int(math.ceil(math.log(1.0 - mass) / math.log(decay)))


def _block_rng(seed: int, block: int, stream: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(block, stream))
    return np.random.Generator(np.random.PCG64(ss))


def _blocks(n_gates: int, block_size: int) -> list[tuple[int, int, int]]:
    return [
        (b, start, min(block_size, n_gates - start))
        for b, start in enumerate(range(0, n_gates, block_size))
    ]


def _run_blocks(func, blocks, workers):
    if workers == 1:
        return [func(*blk) for blk in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda blk: func(*blk), blocks))


@njit(cache=True, inline="always")
def _survival(hazard):
    # exp(-h); the cubic is accurate to ~1e-10 relative for the small hazards seen here
    if hazard < 1e-3:
        return 1.0 - hazard * (1.0 - hazard * (0.5 - hazard / 6.0))
    return math.exp(-hazard)


@njit(cache=True, nogil=True)
def _characterization_chunk(
    uniforms, start, period, p_photon, p_dark, amp, decay, kernel_gates, state, ring, counts
):
    hazard = state[0]
    trunc = kernel_gates > 0
    tail = amp * decay**kernel_gates if trunc else 0.0
    q_dark = 1.0 - p_dark
    q_light = (1.0 - p_photon) * q_dark
    total = 0
    for i in range(uniforms.size):
        g = start + i
        phase = g % period
        q = q_light if phase == 0 else q_dark
        c = 1 if uniforms[i] >= q * _survival(hazard) else 0
        if c:
            counts[phase] += 1
            total += 1
        if trunc:
            slot = g % kernel_gates
            old = ring[slot]
            ring[slot] = c
            hazard = decay * (hazard + amp * c) - tail * old
            if hazard < 0.0:
                hazard = 0.0
        else:
            hazard = decay * (hazard + amp * c)
    state[0] = hazard
    return total


def simulate_characterization_run(sim: SimConfig, op: DetectorOperatingPoint) -> GateHistogram:
    """Pulsed-laser run on one APD plus an equal-length laser-off run.

    The laser fires on gates whose index is a multiple of ``illumination_period``.
    """
    period = sim.illumination_period
    p_photon = -math.expm1(-sim.mu_per_pulse * op.efficiency)
    decay = kernel_decay(op, sim.ap_time_constant_s)
    amp = kernel_amplitude(op.afterpulse_prob, decay)
    k_gates = sim.kernel_gates or 0

    def one_run(block, start, n, stream, photon):
        rng = _block_rng(sim.seed, block, stream)
        counts = np.zeros(period, dtype=np.int64)
        state = np.zeros(1)
        ring = np.zeros(max(k_gates, 1), dtype=np.uint8)
        total = 0
        for offset in range(0, n, _CHUNK):
            u = rng.random(min(_CHUNK, n - offset))
            total += _characterization_chunk(
                u, start + offset, period, photon, op.dark_count_prob,
                amp, decay, k_gates, state, ring, counts,
            )
        return counts, total

    def run(block, start, n):
        counts, _ = one_run(block, start, n, _STREAM_LASER, p_photon)
        _, dark_total = one_run(block, start, n, _STREAM_DARK, 0.0)
        return counts, dark_total

    results = _run_blocks(run, _blocks(sim.n_gates, sim.block_size), sim.workers)
    counts = np.zeros(period, dtype=np.int64)
    dark_total = 0
    for c, d in results:
        counts += c
        dark_total += d
    return GateHistogram(counts, sim.n_gates, int(dark_total))


def expected_histogram(
    sim: SimConfig, op: DetectorOperatingPoint
) -> tuple[np.ndarray, float]:
    """Noise-free histogram for ``P_a = 0``: illuminated bin and dark-only bins."""
    period = sim.illumination_period
    full, rest = divmod(sim.n_gates, period)
    gates = full + (np.arange(period) < rest)
    p_photon = -math.expm1(-sim.mu_per_pulse * op.efficiency)
    p_dark = op.dark_count_prob
    probs = np.full(period, p_dark)
    probs[0] = 1.0 - (1.0 - p_photon) * (1.0 - p_dark)
    return gates * probs, sim.n_gates * p_dark


def estimate_characterization(hist: GateHistogram, mu: float) -> CharacterizationEstimate:
    """Recover ``P_d``, ``P_a`` and the efficiency from a gate histogram.

    The dark level comes from the laser-off run, divided by ``1 + P_a`` because that
    run also records afterpulses of its own dark counts. Excess counts in the illuminated
    bin are photon clicks; excess counts in the other bins are afterpulses, scaled
    by ``period / (period - 1)`` for the share that lands in the illuminated bin.
    """
    if hist.total_gates <= 0:
        raise ValueError("histogram has no gates")
    if not mu > 0:
        raise ValueError("mu must be positive")
    period = hist.period
    if period < 2:
        raise ValueError("need an illumination period of at least 2 gates")
    gates = hist.gates_per_phase().astype(float)
    counts = hist.counts_by_phase.astype(float)
    n = float(hist.total_gates)

    p_d = hist.dark_run_counts / n
    photon = counts[0] - p_d * gates[0]
    if photon <= 0:
        raise NoSignalError("no photon clicks above the dark level in the illuminated bin")
    rest = gates[1:].sum()
    afterpulse = counts[1:].sum() - p_d * rest
    p_a = afterpulse * period / (period - 1) / photon

    # exact inversion of 1 - c0/g0 = (1 - p_photon)(1 - p_d)
    no_click = (1.0 - counts[0] / gates[0]) / (1.0 - p_d)
    eta = -math.log(no_click) / mu

    # binomial propagation; floors keep the uncertainties strictly positive
    var_pd = max(p_d * (1.0 - p_d), 1.0 / n) / n
    var_photon = max(counts[0], 1.0) + gates[0] ** 2 * var_pd
    var_after = max(counts[1:].sum(), 1.0) + rest**2 * var_pd
    p_a_err = math.sqrt(var_after / photon**2 + afterpulse**2 * var_photon / photon**4) * period / (period - 1)
    eta_err = math.sqrt(var_photon) / gates[0] / (no_click * (1.0 - p_d)) / mu
    # the laser-off run also counts afterpulses of dark counts
    p_a = max(p_a, 0.0)
    return CharacterizationEstimate(
        p_d_hat=p_d / (1.0 + p_a),
        p_a_hat=p_a,
        eta_hat=eta,
        p_d_err=math.sqrt(var_pd) / (1.0 + p_a),
        p_a_err=p_a_err,
        eta_err=eta_err,
    )


@njit(cache=True, nogil=True)
def _qkd_chunk(
    main, pos, extra, start, cum_send, q_none, mu_eta, p_z, e_d, p_dark, p_a,
    attached, amp, decay, window, cap, state, sent, det, err,
):
    """Advance from gate ``pos`` of the chunk; stop early if ``extra`` may run out.

    ``main`` holds four uniforms per gate (intensity, two bases, click test);
    ``extra`` feeds the draws that only happen on a click. ``state`` carries
    (hazard0, hazard1, window id, clicks in window) across calls.
    """
    h0 = state[0]
    h1 = state[1]
    win_id = int(state[2])
    win_clicks = int(state[3])
    q_dark = 1.0 - p_dark
    j = 0
    n = main.shape[1]
    limit = extra.size - 6
    i = pos
    while i < n:
        if j > limit:
            break
        u = main[0, i]
        k = 0 if u < cum_send[0] else (1 if u < cum_send[1] else 2)
        ba = 0 if main[1, i] < p_z else 1
        bb = 0 if main[2, i] < p_z else 1
        matched = ba == bb
        if matched:
            sent[k, ba] += 1
        c0 = 0
        c1 = 0
        if main[3, i] >= q_none[k] * _survival(h0 + h1):
            m = mu_eta[k]
            bit = 1 if extra[j] < 0.5 else 0
            j += 1
            if matched:
                m_right = m * (1.0 - e_d)
                m_wrong = m * e_d
                m0 = m_right if bit == 0 else m_wrong
                m1 = m_wrong if bit == 0 else m_right
            else:
                m0 = 0.5 * m
                m1 = 0.5 * m
            n0 = math.exp(-m0) * _survival(h0) * q_dark
            n1 = math.exp(-m1) * _survival(h1) * q_dark
            w10 = (1.0 - n0) * n1
            w01 = n0 * (1.0 - n1)
            w11 = (1.0 - n0) * (1.0 - n1)
            v = extra[j] * (w10 + w01 + w11)
            j += 1
            if v < w10:
                c0 = 1
            elif v < w10 + w01:
                c1 = 1
            else:
                c0 = 1
                c1 = 1
            keep = True
            if cap > 0:
                wid = (start + i) // window
                if wid != win_id:
                    win_id = wid
                    win_clicks = 0
                win_clicks += 1
                keep = win_clicks <= cap
            if matched and keep:
                if c0 == 1 and c1 == 1:
                    outcome = 1 if extra[j] < 0.5 else 0
                    j += 1
                else:
                    outcome = c1
                det[k, ba] += 1
                if outcome != bit:
                    err[k, ba] += 1
                if attached:
                    if extra[j] < p_a:
                        det[k, ba] += 1
                        if extra[j + 1] < 0.5:
                            err[k, ba] += 1
                    j += 2
        if not attached:
            h0 = decay * (h0 + amp * c0)
            h1 = decay * (h1 + amp * c1)
        i += 1
    state[0] = h0
    state[1] = h1
    state[2] = win_id
    state[3] = win_clicks
    return i


def simulate_qkd_session(
    protocol: ProtocolConfig,
    channel: ChannelConfig,
    op: DetectorOperatingPoint,
    sim: SimConfig,
) -> SessionStatistics:
    """Sifted per-intensity, per-basis tallies from ``sim.n_gates`` simulated gates.

    Photons split between the two APDs by Poisson thinning: the wrong detector sees
    a fraction ``e_d`` of the light in a matched basis and half of it otherwise.
    Coincident clicks get a fair random bit. The kernel afterpulse model does not
    support truncation here; ``kernel_gates`` applies to characterisation runs.
    """
    eta = system_efficiency(channel, op)
    mu_eta = np.asarray(protocol.intensities, dtype=float) * eta
    cum_send = np.cumsum(protocol.send_probs)
    decay = kernel_decay(op, sim.ap_time_constant_s)
    amp = kernel_amplitude(op.afterpulse_prob, decay)
    attached = sim.afterpulse_model == "attached"
    if sim.saturation_cap_hz is None:
        cap = 0
    else:
        cap = max(1, int(sim.saturation_cap_hz * SATURATION_WINDOW_GATES / op.gate_rate_hz))

    q_none = np.exp(-mu_eta) * (1.0 - op.dark_count_prob) ** 2

    def run(block, start, n):
        rng = _block_rng(sim.seed, block, _STREAM_QKD)
        sent = np.zeros((3, 2), dtype=np.int64)
        det = np.zeros((3, 2), dtype=np.int64)
        err = np.zeros((3, 2), dtype=np.int64)
        state = np.array([0.0, 0.0, -1.0, 0.0])
        for offset in range(0, n, _CHUNK):
            main = rng.random((4, min(_CHUNK, n - offset)))
            pos = 0
            while pos < main.shape[1]:
                extra = rng.random(_EXTRA)
                pos = _qkd_chunk(
                    main, pos, extra, start + offset, cum_send, q_none, mu_eta,
                    protocol.p_z, protocol.intrinsic_error_e_d, op.dark_count_prob,
                    op.afterpulse_prob, attached, amp, decay, SATURATION_WINDOW_GATES,
                    cap, state, sent, det, err,
                )
        return sent, det, err

    results = _run_blocks(run, _blocks(sim.n_gates, sim.block_size), sim.workers)
    sent = np.zeros((3, 2), dtype=np.int64)
    det = np.zeros((3, 2), dtype=np.int64)
    err = np.zeros((3, 2), dtype=np.int64)
    for s, d, e in results:
        sent += s
        det += d
        err += e
    return SessionStatistics(sent, det, err)
