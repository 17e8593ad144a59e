"""Decoy-state BB84 session engine and the voltage-scan visibility procedure.

Two execution modes share one model:

* per-gate: every clock cycle is sampled (source class, bases, bits, phase
  noise, detector clicks with afterpulse memory);
* accelerated: per-gate outcome probabilities are computed in expectation
  (phase noise by Gauss-Hermite quadrature, afterpulsing as a steady-state
  hazard) and each interval's counts are drawn by binomial thinning.

Random streams are keyed by (seed, stream tag, interval index), so any
subset of intervals can be recomputed, in any order, on any worker.
"""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Literal

import numpy as np

from .config import SystemConfig
from .interferometer import interference
from .physical import (
    CLICK1,
    CLICK2,
    NONE,
    DetectorState,
    channel_clicks,
    click_probability,
    detect_block,
    draw_class_indices,
    SourceConfig,
    scrambler_unitaries,
)
from .security import ClassObservation, ObservedRates

Basis = Literal["Z", "X"]
Mode = Literal["auto", "on", "off"]

SESSION_STREAM = 1
SCAN_STREAM = 2
_GH_ORDER = 24


# --- encoding and sifting -----------------------------------------------------


@dataclass(frozen=True)
class EncodingChoice:
    basis: Basis
    bit: int

    def __post_init__(self) -> None:
        if self.basis not in ("Z", "X") or self.bit not in (0, 1):
            raise ValueError(f"invalid encoding ({self.basis!r}, {self.bit!r})")

    @property
    def phi_a(self) -> float:
        return (0.0 if self.basis == "Z" else math.pi / 2) + self.bit * math.pi


@dataclass(frozen=True)
class DecodingChoice:
    basis: Basis

    def __post_init__(self) -> None:
        if self.basis not in ("Z", "X"):
            raise ValueError(f"invalid basis {self.basis!r}")

    @property
    def phi_b(self) -> float:
        return 0.0 if self.basis == "Z" else math.pi / 2


def sift(alice: EncodingChoice, bob: DecodingChoice, outcome: int) -> tuple[int, bool] | None:
    """Sifted (bit, error) for one gate, or None when the gate is discarded.

    Equal phases interfere constructively on detector 1, which decodes as 0.
    """
    if outcome == NONE or alice.basis != bob.basis:
        return None
    if outcome not in (CLICK1, CLICK2):
        raise ValueError(f"unresolved detector outcome {outcome!r}")
    bit = 0 if outcome == CLICK1 else 1
    return bit, bit != alice.bit


# --- tallies --------------------------------------------------------------------


@dataclass
class ClassTally:
    sent: int = 0
    detections: int = 0
    sifted: int = 0
    errors: int = 0

    def __add__(self, other: ClassTally) -> ClassTally:
        return ClassTally(
            self.sent + other.sent,
            self.detections + other.detections,
            self.sifted + other.sifted,
            self.errors + other.errors,
        )

    @property
    def gain(self) -> float:
        return self.detections / self.sent if self.sent else 0.0

    @property
    def qber(self) -> float:
        return self.errors / self.sifted if self.sifted else 0.0


@dataclass
class IntervalTally:
    index: int
    start_time: float
    duration: float
    classes: dict[str, ClassTally]
    accelerated: bool = False

    def __post_init__(self) -> None:
        for label, t in self.classes.items():
            if not 0 <= t.errors <= t.sifted <= t.detections <= t.sent:
                raise ValueError(f"{label}: inconsistent tally {t}")


def merge_tallies(tallies: list[IntervalTally]) -> dict[str, ClassTally]:
    """Sum per-class counts over intervals (order-independent)."""
    total: dict[str, ClassTally] = {}
    for t in tallies:
        for label, c in t.classes.items():
            total[label] = total.get(label, ClassTally()) + c
    return total


@dataclass
class SessionResult:
    tallies: list[IntervalTally]
    accelerated: bool
    seed: int
    interval: float

    @property
    def totals(self) -> dict[str, ClassTally]:
        return merge_tallies(self.tallies)


def observed_rates(source: SourceConfig, counts: dict[str, ClassTally]) -> ObservedRates:
    """Gains and QBERs of each intensity class from summed counts."""
    return ObservedRates(
        tuple(
            ClassObservation(c.label, c.mu, counts[c.label].gain, counts[c.label].qber,
                             counts[c.label].sent, counts[c.label].sifted)
            for c in source.intensity_classes
        )
    )


# --- shared physics ---------------------------------------------------------------


@lru_cache(maxsize=None)
def _hermite_nodes(order: int) -> tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite_e.hermegauss(order)
    return x, w / w.sum()


def _gauss_hermite(sigma: float) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights for averaging over N(0, sigma^2) phase noise."""
    if sigma == 0:
        return np.zeros(1), np.ones(1)
    x, w = _hermite_nodes(_GH_ORDER)
    return sigma * x, w


def _channel_independent(cfg: SystemConfig) -> bool:
    return cfg.alice.polarization_ideal and cfg.bob.polarization_ideal


@lru_cache(maxsize=64)
def _static_fringe(alice, bob) -> tuple[float, float]:
    vis, off = interference(alice, bob, np.eye(2, dtype=complex))
    return float(vis), float(off)


def fringe(cfg: SystemConfig, times) -> tuple[np.ndarray, np.ndarray]:
    """Visibility and phase offset of the system at the given emulated times."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    if _channel_independent(cfg):
        # Output polarization cannot depend on the channel; evaluate once.
        vis, off = _static_fringe(cfg.alice, cfg.bob)
        return np.full(len(times), vis), np.full(len(times), off)
    return interference(cfg.alice, cfg.bob, scrambler_unitaries(times, cfg.channel))


def _steady_afterpulse(a: float, rate_fn, tol: float = 1e-15, max_iter: int = 200) -> float:
    """Fixed point of A = 1 - exp(-a * r(A)) for the per-gate afterpulse hazard."""
    if a == 0:
        return 0.0
    hazard = 0.0
    for _ in range(max_iter):
        new = -math.expm1(-a * rate_fn(hazard))
        if abs(new - hazard) < tol:
            return new
        hazard = new
    return hazard


@dataclass(frozen=True)
class ExpectedRates:
    """Per-gate expectations for each intensity class."""

    detections: np.ndarray
    sifted: np.ndarray
    errors: np.ndarray
    afterpulse_hazard: float


def expected_rates(cfg: SystemConfig, visibility: float, offset: float) -> ExpectedRates:
    """Expected detections, sifted detections and sifted errors per sent pulse."""
    if cfg.detector.dead_time_gates:
        raise ValueError("accelerated mode does not model detector dead time")
    det = cfg.detector
    x, w = _gauss_hermite(cfg.total_phase_noise)
    lam = cfg.source.mus[:, None] * cfg.photon_transmittance  # (classes, 1)
    c = np.cos(offset + x)[None, :]
    s = np.sin(offset + x)[None, :]
    weights = {
        "right": 0.5 * (1 + visibility * c),
        "wrong": 0.5 * (1 - visibility * c),
        "plus": 0.5 * (1 + visibility * s),
        "minus": 0.5 * (1 - visibility * s),
    }
    primary = {k: click_probability(lam * v, det) for k, v in weights.items()}
    probs = cfg.source.probabilities

    def with_ap(p, hazard):
        return 1 - (1 - p) * (1 - hazard)

    def channel_rate(hazard: float) -> float:
        q = {k: with_ap(v, hazard) @ w for k, v in primary.items()}
        # Bits are uniform, so each detector sees the average of both ports.
        per_class = 0.25 * (q["right"] + q["wrong"]) + 0.25 * (q["plus"] + q["minus"])
        return float(per_class @ probs)

    hazard = _steady_afterpulse(det.afterpulse_total, channel_rate)
    q = {k: with_ap(v, hazard) for k, v in primary.items()}
    none_match = (1 - q["right"]) * (1 - q["wrong"])
    none_mis = (1 - q["plus"]) * (1 - q["minus"])
    err = q["wrong"] * (1 - q["right"]) + 0.5 * q["right"] * q["wrong"]
    detections = 0.5 * (1 - none_match) @ w + 0.5 * (1 - none_mis) @ w
    sifted = 0.5 * (1 - none_match) @ w
    errors = 0.5 * err @ w
    return ExpectedRates(detections, sifted, errors, hazard)


# --- session engine ----------------------------------------------------------------


def _interval_rng(seed: int, tag: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag, index]))


@dataclass(frozen=True)
class _IntervalJob:
    cfg: SystemConfig
    index: int
    start_time: float
    duration: float
    seed: int
    accelerated: bool
    global_phase_offset: float = 0.0


def _n_gates(cfg: SystemConfig, duration: float) -> int:
    return int(round(duration * cfg.source.clock_rate))


def _simulate_interval_accelerated(job: _IntervalJob) -> IntervalTally:
    cfg = job.cfg
    rng = _interval_rng(job.seed, SESSION_STREAM, job.index)
    vis, off = fringe(cfg, [job.start_time + job.duration / 2])
    rates = expected_rates(cfg, float(vis[0]), float(off[0]))
    n = _n_gates(cfg, job.duration)
    sent = rng.multinomial(n, cfg.source.probabilities)
    classes = {}
    for i, label in enumerate(cfg.source.labels):
        d = int(rng.binomial(sent[i], min(1.0, rates.detections[i])))
        p_sift = rates.sifted[i] / rates.detections[i] if rates.detections[i] > 0 else 0.0
        sft = int(rng.binomial(d, min(1.0, p_sift)))
        p_err = rates.errors[i] / rates.sifted[i] if rates.sifted[i] > 0 else 0.0
        e = int(rng.binomial(sft, min(1.0, p_err)))
        classes[label] = ClassTally(int(sent[i]), d, sft, e)
    return IntervalTally(job.index, job.start_time, job.duration, classes, accelerated=True)


def _simulate_interval_gates(job: _IntervalJob) -> IntervalTally:
    cfg = job.cfg
    rng = _interval_rng(job.seed, SESSION_STREAM, job.index)
    n_total = _n_gates(cfg, job.duration)
    clock = cfg.source.clock_rate
    state = DetectorState.for_config(cfg.detector)
    mus = cfg.source.mus * cfg.photon_transmittance
    sigma = cfg.total_phase_noise
    k = len(mus)
    sent = np.zeros(k, dtype=np.int64)
    dets = np.zeros(k, dtype=np.int64)
    sifted = np.zeros(k, dtype=np.int64)
    errors = np.zeros(k, dtype=np.int64)

    g0 = 0
    while g0 < n_total:
        n = min(cfg.protocol.block_gates, n_total - g0)
        vis, off = fringe(cfg, [job.start_time + g0 / clock])
        cls = draw_class_indices(cfg.source, rng, n)
        # Phase randomisation: intensities below never depend on this phase.
        _global_phase = (rng.random(n) * 2 * np.pi + job.global_phase_offset) % (2 * np.pi)
        a_basis = rng.integers(0, 2, n, dtype=np.int8)
        a_bit = rng.integers(0, 2, n, dtype=np.int8)
        b_basis = rng.integers(0, 2, n, dtype=np.int8)
        delta = (a_basis - b_basis) * (np.pi / 2) + a_bit * np.pi + off[0]
        if sigma > 0:
            delta = delta + sigma * rng.standard_normal(n)
        w1 = 0.5 * (1 + vis[0] * np.cos(delta))
        lam = mus[cls]
        outcome = detect_block(lam * w1, lam * (1 - w1), cfg.detector, state, g0, rng)

        clicked = outcome != NONE
        kept = clicked & (a_basis == b_basis)
        wrong = kept & ((outcome == CLICK2) != (a_bit == 1))
        sent += np.bincount(cls, minlength=k)
        dets += np.bincount(cls[clicked], minlength=k)
        sifted += np.bincount(cls[kept], minlength=k)
        errors += np.bincount(cls[wrong], minlength=k)
        g0 += n

    classes = {
        label: ClassTally(int(sent[i]), int(dets[i]), int(sifted[i]), int(errors[i]))
        for i, label in enumerate(cfg.source.labels)
    }
    return IntervalTally(job.index, job.start_time, job.duration, classes, accelerated=False)


def _run_job(job: _IntervalJob) -> IntervalTally:
    return (_simulate_interval_accelerated if job.accelerated else _simulate_interval_gates)(job)


def use_accelerated(cfg: SystemConfig, duration: float, mode: Mode) -> bool:
    if mode == "on":
        return True
    if mode == "off":
        return False
    if mode != "auto":
        raise ValueError(f"accelerated mode must be auto/on/off, got {mode!r}")
    return _n_gates(cfg, duration) > cfg.protocol.accelerated_threshold


def _map_jobs(fn, jobs: list, workers: int) -> list:
    if workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs, chunksize=max(1, len(jobs) // (4 * workers))))


def run_session(
    cfg: SystemConfig,
    duration: float,
    interval: float,
    seed: int,
    *,
    mode: Mode = "auto",
    start_time: float = 0.0,
    workers: int = 1,
    global_phase_offset: float = 0.0,
) -> SessionResult:
    """Run a decoy-state BB84 session and tally each interval.

    Intervals are indexed from ``start_time / interval`` so that a run split
    into consecutive pieces reproduces the counts of the whole run.
    """
    if duration <= 0:
        raise ValueError("session duration must be positive")
    if interval <= 0 or interval > duration * (1 + 1e-12):
        raise ValueError("interval must be positive and no longer than the duration")
    accelerated = use_accelerated(cfg, duration, mode)
    first = int(round(start_time / interval))
    n_full = int(math.floor(duration / interval + 1e-9))
    spans = [interval] * n_full
    rest = duration - n_full * interval
    if rest > interval * 1e-9:
        spans.append(rest)
    jobs = [
        _IntervalJob(cfg, first + i, start_time + i * interval, span, seed, accelerated, global_phase_offset)
        for i, span in enumerate(spans)
    ]
    tallies = _map_jobs(_run_job, jobs, workers)
    tallies.sort(key=lambda t: t.index)
    return SessionResult(tallies, accelerated, seed, interval)


# --- visibility scan -----------------------------------------------------------------


@dataclass(frozen=True)
class VppMapping:
    v_pi: float = 4.5  # volts for a pi phase shift

    def __post_init__(self) -> None:
        if self.v_pi <= 0:
            raise ValueError("v_pi must be positive")

    def phase(self, volts):
        return np.pi * np.asarray(volts, dtype=float) / self.v_pi


@dataclass(frozen=True)
class ScanPoint:
    voltage: float
    counts: int


@dataclass
class ScanResult:
    index: int
    start_time: float
    voltages: np.ndarray = field(repr=False)
    counts: np.ndarray = field(repr=False)
    visibility: float

    @property
    def points(self) -> list[ScanPoint]:
        return [ScanPoint(float(v), int(c)) for v, c in zip(self.voltages, self.counts)]


def visibility_from_counts(c_max: float, c_min: float) -> float:
    """Fringe visibility (C_max - C_min) / (C_max + C_min)."""
    if c_min < 0 or c_max < c_min:
        raise ValueError("need c_max >= c_min >= 0")
    if c_max + c_min == 0:
        raise ValueError("visibility undefined for an all-zero scan")
    return (c_max - c_min) / (c_max + c_min)


def scan_voltages(cfg: SystemConfig) -> np.ndarray:
    sc = cfg.scan
    return np.round(sc.v_min + np.arange(sc.n_steps) * sc.v_step, 9)


def _scan_channel1_probability(cfg: SystemConfig, phases: np.ndarray, times: np.ndarray) -> np.ndarray:
    """Expected channel-1 click probability per gate at each scan step."""
    vis, off = fringe(cfg, times)
    x, w = _gauss_hermite(cfg.scan_phase_noise)
    w1 = 0.5 * (1 + vis[:, None] * np.cos(cfg.scan.alice_phase - phases[:, None] + off[:, None] + x[None, :]))
    lam = cfg.scan.mu * cfg.photon_transmittance
    p = click_probability(lam * w1, cfg.detector) @ w
    a = cfg.detector.afterpulse_total
    if a == 0:
        return p
    # Channel 1's own clicks drive its afterpulses; steady state within a step.
    hazard = np.zeros_like(p)
    for _ in range(100):
        new = -np.expm1(-a * (1 - (1 - p) * (1 - hazard)))
        if np.max(np.abs(new - hazard)) < 1e-15:
            hazard = new
            break
        hazard = new
    return 1 - (1 - p) * (1 - hazard)


@lru_cache(maxsize=16)
def _static_scan_probability(cfg: SystemConfig) -> np.ndarray:
    volts = scan_voltages(cfg)
    p = _scan_channel1_probability(cfg, VppMapping(cfg.scan.v_pi).phase(volts), np.zeros(len(volts)))
    p = np.clip(p, 0.0, 1.0)
    p.flags.writeable = False
    return p


def _scan_accelerated(cfg: SystemConfig, index: int, start_time: float, seed: int) -> np.ndarray:
    rng = _interval_rng(seed, SCAN_STREAM, index)
    dwell = cfg.scan.dwell_cycles
    if _channel_independent(cfg):
        p = _static_scan_probability(cfg)
    else:
        volts = scan_voltages(cfg)
        times = start_time + np.arange(len(volts)) * dwell / cfg.source.clock_rate
        p = np.clip(_scan_channel1_probability(cfg, VppMapping(cfg.scan.v_pi).phase(volts), times), 0.0, 1.0)
    return rng.binomial(dwell, p)


def _scan_gates(cfg: SystemConfig, index: int, start_time: float, seed: int) -> np.ndarray:
    rng = _interval_rng(seed, SCAN_STREAM, index)
    volts = scan_voltages(cfg)
    phases = VppMapping(cfg.scan.v_pi).phase(volts)
    dwell = cfg.scan.dwell_cycles
    clock = cfg.source.clock_rate
    det = cfg.detector
    state = DetectorState.for_config(det)
    sigma = cfg.scan_phase_noise
    lam = cfg.scan.mu * cfg.photon_transmittance
    counts = np.zeros(len(volts), dtype=np.int64)
    for k, phi_b in enumerate(phases):
        g0 = k * dwell
        vis, off = fringe(cfg, [start_time + g0 / clock])
        delta = cfg.scan.alice_phase - phi_b + off[0]
        if sigma > 0:
            delta = delta + sigma * rng.standard_normal(dwell)
        w1 = np.broadcast_to(0.5 * (1 + vis[0] * np.cos(delta)), (dwell,))
        # Only detector 1 is read out; its afterpulses depend on its own clicks.
        primary = rng.random(dwell) < click_probability(lam * w1, det)
        clicks, _ = channel_clicks(primary, g0, state.recent[0], det, rng)
        counts[k] = int(clicks.sum())
    return counts


@dataclass(frozen=True)
class _ScanJob:
    cfg: SystemConfig
    index: int
    start_time: float
    seed: int
    accelerated: bool


def _run_scan(job: _ScanJob) -> ScanResult:
    fn = _scan_accelerated if job.accelerated else _scan_gates
    counts = fn(job.cfg, job.index, job.start_time, job.seed)
    c_max, c_min = int(counts.max()), int(counts.min())
    vis = visibility_from_counts(c_max, c_min) if c_max > 0 else 0.0
    return ScanResult(job.index, job.start_time, scan_voltages(job.cfg), counts, vis)


def visibility_scan(
    cfg: SystemConfig,
    mapping: VppMapping | None = None,
    seed: int = 0,
    *,
    index: int = 0,
    accelerated: bool = True,
) -> tuple[list[ScanPoint], float]:
    """One voltage scan of Bob's PM; returns the scan points and fringe visibility."""
    if mapping is not None and mapping.v_pi != cfg.scan.v_pi:
        cfg = replace(cfg, scan=replace(cfg.scan, v_pi=mapping.v_pi))
    res = _run_scan(_ScanJob(cfg, index, index * cfg.scan.period, seed, accelerated))
    return res.points, res.visibility


def run_visibility_series(
    cfg: SystemConfig,
    n_scans: int,
    seed: int,
    *,
    accelerated: bool = True,
    workers: int = 1,
    first_index: int = 0,
) -> list[ScanResult]:
    """Repeated scans, one every ``cfg.scan.period`` seconds of emulated time."""
    if n_scans < 1:
        raise ValueError("need at least one scan")
    jobs = [
        _ScanJob(cfg, i, i * cfg.scan.period, seed, accelerated) for i in range(first_index, first_index + n_scans)
    ]
    results = _map_jobs(_run_scan, jobs, workers)
    results.sort(key=lambda r: r.index)
    return results
