"""Three-intensity decoy-state analysis and secure key rate."""
from __future__ import annotations

import itertools
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np


class VacuousBoundsError(ValueError):
    """Decoy bounds leave no positive single-photon yield."""


def binary_entropy(x):
    """Binary Shannon entropy in bits; H(0) = H(1) = 0."""
    arr = np.asarray(x, dtype=float)
    if np.any((arr < 0) | (arr > 1)) or np.any(np.isnan(arr)):
        raise ValueError("binary_entropy argument must lie in [0, 1]")
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -arr * np.log2(arr) - (1 - arr) * np.log2(1 - arr)
    h = np.where((arr == 0) | (arr == 1), 0.0, h)
    return float(h) if np.ndim(h) == 0 else h


def analytic_yields(eta_sys: float, y0: float, e_d: float, mu: float) -> tuple[float, float]:
    """Gain and QBER of a phase-randomised coherent source over a lossy channel.

    Background clicks are random (error 1/2); signal clicks err with ``e_d``.
    """
    signal = -math.expm1(-eta_sys * mu)
    q = y0 + (1 - y0) * signal  # = 1 - (1 - y0) exp(-eta mu), without cancellation
    if q == 0:
        return 0.0, 0.0
    return q, (0.5 * y0 + e_d * signal) / q


@dataclass(frozen=True)
class ClassObservation:
    label: str
    mu: float
    gain: float
    qber: float
    sent: float
    sifted: float | None = None  # number of sifted detections behind ``qber``

    def __post_init__(self) -> None:
        if not (0 <= self.gain <= 1 and 0 <= self.qber <= 1):
            raise ValueError(f"{self.label}: gain and QBER must lie in [0, 1]")


@dataclass(frozen=True)
class ObservedRates:
    classes: tuple[ClassObservation, ...]

    def __post_init__(self) -> None:
        ordered = tuple(sorted(self.classes, key=lambda c: -c.mu))
        object.__setattr__(self, "classes", ordered)

    def __getitem__(self, label: str) -> ClassObservation:
        for c in self.classes:
            if c.label == label:
                return c
        raise KeyError(label)

    @property
    def signal(self) -> ClassObservation:
        return self.classes[0]

    def to_dict(self) -> dict:
        return {c.label: asdict(c) for c in self.classes}


@dataclass(frozen=True)
class DecoyEstimates:
    y0: float
    y1_lower: float
    e1_upper: float
    q1_lower: float


@dataclass(frozen=True)
class SecurityConfig:
    ec_efficiency: float = 1.16
    epsilon_total: float = 1e-10
    sift_factor: float = 0.5
    clock_rate: float = 1e9
    signal_probability: Fraction = Fraction(29, 32)

    def __post_init__(self) -> None:
        if self.ec_efficiency < 1:
            raise ValueError("error-correction efficiency f must be >= 1")
        if not 0 < self.epsilon_total < 1:
            raise ValueError("epsilon_total must lie in (0, 1)")
        if not 0 < self.sift_factor <= 1:
            raise ValueError("sift_factor must lie in (0, 1]")


@dataclass
class KeyRateReport:
    rate: float  # bits/s
    clamped: bool
    finite_size: bool
    terms: dict
    observed: ObservedRates
    estimates: DecoyEstimates | None
    vacuous: bool = False
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "rate_bps": self.rate,
            "clamped": self.clamped,
            "vacuous_bounds": self.vacuous,
            "finite_size": self.finite_size,
            "terms": self.terms,
            "observed": self.observed.to_dict(),
            "estimates": asdict(self.estimates) if self.estimates else None,
            "notes": list(self.notes),
        }


def _clamp01(x: float) -> float:
    return min(1.0, max(0.0, x))


def decoy_bounds(obs: ObservedRates) -> DecoyEstimates:
    """Vacuum and single-photon bounds from signal mu > decoy nu1 > decoy nu2."""
    if len(obs.classes) != 3:
        raise ValueError(f"three intensity classes are required, got {len(obs.classes)}")
    s, d1, d2 = obs.classes
    mu, nu1, nu2 = s.mu, d1.mu, d2.mu
    if not mu > nu1 > nu2 >= 0:
        raise ValueError(f"intensities must satisfy mu > nu1 > nu2 >= 0, got {mu}, {nu1}, {nu2}")
    if min(s.gain, d1.gain) <= 0:
        raise VacuousBoundsError("signal and decoy1 gains must be positive")

    q_mu, q1, q2 = s.gain * math.exp(mu), d1.gain * math.exp(nu1), d2.gain * math.exp(nu2)
    y0 = _clamp01((nu1 * q2 - nu2 * q1) / (nu1 - nu2))
    y1 = (mu / (mu * nu1 - nu1**2)) * (q1 - q_mu * nu1**2 / mu**2 - (mu**2 - nu1**2) / mu**2 * y0)
    y1 = _clamp01(y1)
    if y1 <= 0:
        raise VacuousBoundsError("single-photon yield lower bound is not positive")
    e1 = _clamp01((d1.qber * q1 - 0.5 * y0) / (y1 * nu1))
    return DecoyEstimates(y0=y0, y1_lower=y1, e1_upper=e1, q1_lower=y1 * mu * math.exp(-mu))


def secure_key_rate(obs: ObservedRates, est: DecoyEstimates, cfg: SecurityConfig) -> KeyRateReport:
    """Per-second secure key from the signal class and single-photon bounds."""
    sig = obs.signal
    prefactor = cfg.clock_rate * float(cfg.signal_probability) * cfg.sift_factor
    h_e1 = binary_entropy(est.e1_upper)
    # Past 1/2 the single-photon phase error leaves nothing to distil.
    privacy = est.q1_lower * (1 - h_e1) if est.e1_upper < 0.5 else 0.0
    leak = sig.gain * cfg.ec_efficiency * binary_entropy(sig.qber)
    bracket = privacy - leak
    notes = []
    if est.e1_upper >= 0.5:
        notes.append("single-photon error bound >= 1/2")
    if bracket <= 0:
        notes.append("key-rate formula negative; clamped to zero")
    return KeyRateReport(
        rate=prefactor * max(0.0, bracket),
        clamped=bracket <= 0,
        finite_size=False,
        terms={
            "prefactor": prefactor,
            "q1_lower_times_one_minus_h_e1": privacy,
            "ec_leak": leak,
            "h_e_mu": binary_entropy(sig.qber),
            "h_e1_upper": h_e1,
            "bracket": bracket,
        },
        observed=obs,
        estimates=est,
        notes=notes,
    )


def _rate_or_zero(obs: ObservedRates, cfg: SecurityConfig) -> float:
    try:
        return secure_key_rate(obs, decoy_bounds(obs), cfg).rate
    except VacuousBoundsError:
        return 0.0


def hoeffding_halfwidth(n: float, eps: float) -> float:
    if n <= 0:
        raise ValueError("concentration bound needs at least one trial")
    return math.sqrt(math.log(2 / eps) / (2 * n))


def finite_size_adjust(
    obs: ObservedRates,
    epsilon_total: float,
    cfg: SecurityConfig | None = None,
) -> ObservedRates:
    """Shift every gain and QBER by its Hoeffding half-width, worst case first.

    The failure budget is split evenly over the six estimated frequencies;
    of the 2^6 shift patterns the one giving the lowest key rate is returned.
    """
    cfg = cfg or SecurityConfig()
    eps = epsilon_total / (2 * len(obs.classes))
    widths = []
    for c in obs.classes:
        if c.sent <= 0:
            raise ValueError(f"{c.label}: sent count must be positive for finite-size analysis")
        n_err = c.sifted if c.sifted is not None else cfg.sift_factor * c.gain * c.sent
        if n_err <= 0:
            raise ValueError(f"{c.label}: no sifted detections to bound the QBER")
        widths.append((hoeffding_halfwidth(c.sent, eps), hoeffding_halfwidth(n_err, eps)))

    worst, worst_rate = None, math.inf
    for signs in itertools.product((-1.0, 1.0), repeat=2 * len(obs.classes)):
        shifted = tuple(
            replace(
                c,
                gain=_clamp01(c.gain + signs[2 * i] * widths[i][0]),
                qber=_clamp01(c.qber + signs[2 * i + 1] * widths[i][1]),
            )
            for i, c in enumerate(obs.classes)
        )
        candidate = ObservedRates(shifted)
        rate = _rate_or_zero(candidate, cfg)
        if rate < worst_rate:
            worst, worst_rate = candidate, rate
    return worst


def analyze(obs: ObservedRates, cfg: SecurityConfig, finite_size: bool = False) -> KeyRateReport:
    """Full pipeline: optional finite-size shift, decoy bounds, key rate."""
    used = finite_size_adjust(obs, cfg.epsilon_total, cfg) if finite_size else obs
    try:
        est = decoy_bounds(used)
    except VacuousBoundsError as exc:
        return KeyRateReport(
            rate=0.0,
            clamped=True,
            finite_size=finite_size,
            terms={},
            observed=used,
            estimates=None,
            vacuous=True,
            notes=[str(exc)],
        )
    report = secure_key_rate(used, est, cfg)
    report.finite_size = finite_size
    return report
