"""FMI and FSMI interferometer models.

Each asymmetric interferometer has a short arm (a Faraday mirror) and a long
arm that carries the phase modulator. The two kinds differ only in the long
arm:

* FMI: PM followed by a Faraday mirror, traversed forward and backward.
* FSMI: a Sagnac loop closed by a PBS, with a 90 deg Faraday rotator and the
  PM inside the loop.

Both reflect any input into the orthogonal polarization with the modulation
phase added once, so the two kinds are interchangeable in the system.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from .optics import (
    IDENTITY,
    FaradayRotator,
    FiberBirefringence,
    JonesMatrix,
    Mirror,
    PhaseModulator,
    element_matrix,
    random_unitary,
)

Kind = Literal["FMI", "FSMI"]
KINDS: tuple[Kind, ...] = ("FMI", "FSMI")

SPEED_OF_LIGHT = 299_792_458.0  # m/s


@dataclass(frozen=True)
class ComponentImperfections:
    fr_angle_error: float = 0.0  # rad, on every Faraday rotator
    pbs_extinction_ratio: float = math.inf  # dB
    bs_split_imbalance: float = 0.0  # long-arm power fraction is (1 + x) / 2

    def __post_init__(self) -> None:
        if not self.pbs_extinction_ratio >= 0:
            raise ValueError("PBS extinction ratio must be >= 0 dB")
        if not -1 < self.bs_split_imbalance < 1:
            raise ValueError("bs_split_imbalance must lie in (-1, 1)")

    @property
    def ideal(self) -> bool:
        return self.fr_angle_error == 0 and math.isinf(self.pbs_extinction_ratio)


@dataclass(frozen=True)
class InterferometerModel:
    kind: Kind = "FSMI"
    long_arm_phase_offset: float = 0.0
    short_arm_phase_offset: float = 0.0
    long_arm_birefringence: JonesMatrix = IDENTITY
    short_arm_birefringence: JonesMatrix = IDENTITY
    imperfections: ComponentImperfections = field(default_factory=ComponentImperfections)
    phase_jitter: float = 0.0  # rad rms, fast phase noise on the long arm

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}, got {self.kind!r}")
        for b in (self.long_arm_birefringence, self.short_arm_birefringence):
            if not b.reciprocal:
                raise ValueError("arm birefringence must be reciprocal")
        if self.phase_jitter < 0:
            raise ValueError("phase_jitter must be >= 0")

    @property
    def polarization_ideal(self) -> bool:
        """True when the output polarization cannot depend on the channel."""
        return self.imperfections.ideal


@dataclass(frozen=True)
class ArmGeometry:
    # 0.102 m of fibre at n = 1.468 gives a ~1 ns FMI round trip -> ~500 MHz.
    pm_transit_length: float = 0.102  # m
    pm_fm_gap: float = 0.0  # m
    group_index: float = 1.468
    pulse_width: float = 0.0  # s
    modulator_rise_fall: float = 0.0  # s

    def __post_init__(self) -> None:
        for name in ("pm_transit_length", "pm_fm_gap", "pulse_width", "modulator_rise_fall"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.group_index < 1:
            raise ValueError("group_index must be >= 1")


# --- Jones models of the arms ------------------------------------------------


def _pbs_ports(extinction_db: float) -> tuple[np.ndarray, np.ndarray]:
    leak = 0.0 if math.isinf(extinction_db) else 10.0 ** (-extinction_db / 20.0)
    through = np.diag([1.0, leak]).astype(complex)
    # Reflection port carries the same pi phase as a mirror.
    reflect = -np.diag([leak, 1.0]).astype(complex)
    return through, reflect


def _chain(*mats: np.ndarray) -> np.ndarray:
    """Product of raw matrices in propagation order (first argument acts first)."""
    out = mats[0]
    for m in mats[1:]:
        out = m @ out
    return out


def _fsmi_loop(pm_phase: float, imp: ComponentImperfections) -> np.ndarray:
    fr = element_matrix(FaradayRotator(math.pi / 2 + imp.fr_angle_error)).m
    pm = element_matrix(PhaseModulator(pm_phase, "V")).m  # diagonal, so backward is the same
    through, reflect = _pbs_ports(imp.pbs_extinction_ratio)
    # CW: transmitted part is rotated by the FR, then modulated, then reflected out.
    cw = _chain(through, fr, pm, reflect)
    # CCW: reflected part is modulated first, then rotated, then transmitted out.
    ccw = _chain(reflect, pm.T, fr, through)
    return cw + ccw


def _faraday_mirror_arm(fr_angle_error: float) -> np.ndarray:
    fr = element_matrix(FaradayRotator(math.pi / 4 + fr_angle_error)).m
    return _chain(fr, element_matrix(Mirror()).m, fr)


def _fmi_long(pm_phase: float, imp: ComponentImperfections) -> np.ndarray:
    pm = element_matrix(PhaseModulator(pm_phase, "V")).m
    return _chain(pm, _faraday_mirror_arm(imp.fr_angle_error), pm.T)


def _wrap(core: np.ndarray, birefringence: JonesMatrix, phase_offset: float) -> JonesMatrix:
    b = element_matrix(FiberBirefringence(birefringence)).m
    out = _chain(b, core, b.T) * np.exp(1j * phase_offset)
    return JonesMatrix(out, reciprocal=False)


def long_arm_transfer(model: InterferometerModel, pm_phase: float) -> JonesMatrix:
    """Round-trip Jones matrix of the long arm with PM phase ``pm_phase``.

    Ideal components and identity arm birefringence give exp(i*pm_phase) * FM
    for both kinds.
    """
    core = (_fmi_long if model.kind == "FMI" else _fsmi_loop)(pm_phase, model.imperfections)
    return _wrap(core, model.long_arm_birefringence, model.long_arm_phase_offset)


def short_arm_transfer(model: InterferometerModel) -> JonesMatrix:
    core = _faraday_mirror_arm(model.imperfections.fr_angle_error)
    return _wrap(core, model.short_arm_birefringence, model.short_arm_phase_offset)


def equivalence_report(
    trials: int,
    seed: int,
    imperfections: ComponentImperfections | None = None,
    phase: float | None = None,
) -> float:
    """Largest entrywise gap between FMI and FSMI long arms over random trials.

    Each trial draws an input polarization, a PM phase (unless ``phase`` is
    fixed) and a Haar-random arm birefringence shared by both kinds. Both the
    transfer matrices and the reflected vectors are compared.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    imp = imperfections or ComponentImperfections()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        z = rng.standard_normal(4)
        vec = np.array([z[0] + 1j * z[1], z[2] + 1j * z[3]])
        vec /= np.linalg.norm(vec)
        phi = rng.uniform(0.0, 2 * math.pi) if phase is None else phase
        arm = random_unitary(rng)
        fmi = long_arm_transfer(InterferometerModel("FMI", long_arm_birefringence=arm, imperfections=imp), phi)
        fsmi = long_arm_transfer(InterferometerModel("FSMI", long_arm_birefringence=arm, imperfections=imp), phi)
        worst = max(worst, fmi.max_deviation(fsmi), float(np.max(np.abs(fmi @ vec - fsmi @ vec))))
    return worst


# --- system interference -----------------------------------------------------


def _arm_powers(model: InterferometerModel) -> tuple[float, float]:
    x = model.imperfections.bs_split_imbalance
    return (1 - x) / 2, (1 + x) / 2


def interference(
    alice: InterferometerModel,
    bob: InterferometerModel,
    channel: JonesMatrix | np.ndarray,
    input_state: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Visibility and fringe phase offset of the central time bin.

    The two interfering paths are Alice-long/Bob-short and Alice-short/Bob-long.
    ``channel`` may be a single matrix or an ``(n, 2, 2)`` stack, in which case
    arrays of length n are returned. The fringe at Bob's first output is
    ``1 + V cos(phi_a - phi_b + offset)``.
    """
    jin = np.array([1.0, 0.0], dtype=complex) if input_state is None else np.asarray(input_state, complex)
    u = channel.m if isinstance(channel, JonesMatrix) else np.asarray(channel, dtype=complex)
    single = u.ndim == 2
    u = u.reshape(-1, 2, 2)

    ps_a, pl_a = _arm_powers(alice)
    ps_b, pl_b = _arm_powers(bob)
    a_long = long_arm_transfer(alice, 0.0).m @ jin
    a_short = short_arm_transfer(alice).m @ jin
    b_long = long_arm_transfer(bob, 0.0).m
    b_short = short_arm_transfer(bob).m

    e_ls = math.sqrt(pl_a * ps_b) * np.einsum("ij,nj->ni", b_short, np.einsum("nij,j->ni", u, a_long))
    e_sl = math.sqrt(ps_a * pl_b) * np.einsum("ij,nj->ni", b_long, np.einsum("nij,j->ni", u, a_short))

    cross = np.einsum("ni,ni->n", e_sl.conj(), e_ls)
    total = np.sum(np.abs(e_ls) ** 2, axis=1) + np.sum(np.abs(e_sl) ** 2, axis=1)
    vis = np.where(total > 0, 2 * np.abs(cross) / np.where(total > 0, total, 1.0), 0.0)
    offset = np.angle(cross)
    if single:
        return vis[0], offset[0]
    return vis, offset


def system_visibility(
    alice: InterferometerModel,
    bob: InterferometerModel,
    channel_unitary: JonesMatrix,
) -> float:
    """Central-bin fringe visibility through ``channel_unitary`` (in [0, 1])."""
    if not channel_unitary.is_unitary(1e-9):
        raise ValueError("channel matrix must be unitary")
    vis, _ = interference(alice, bob, channel_unitary)
    return float(min(1.0, vis))


def jitter_factor(sigma: float) -> float:
    """Fringe contrast kept under Gaussian phase noise of rms ``sigma``."""
    return math.exp(-0.5 * sigma * sigma)


def click_weights(phi_a: float, phi_b: float, v_sys: float) -> tuple[float, float]:
    """Fractions of the central-bin light reaching Bob's two detectors."""
    if not 0.0 <= v_sys <= 1.0:
        raise ValueError(f"visibility must be in [0, 1], got {v_sys}")
    w1 = 0.5 * (1.0 + v_sys * math.cos(phi_a - phi_b))
    return w1, 1.0 - w1


# --- engineering comparisons -------------------------------------------------


def pm_pass_separation(geometry: ArmGeometry, kind: Kind) -> float:
    """Time between the two moments a pulse's light occupies the PM (s)."""
    n, c = geometry.group_index, SPEED_OF_LIGHT
    if kind == "FMI":
        return 2 * n * (geometry.pm_fm_gap + geometry.pm_transit_length) / c
    if kind == "FSMI":
        return n * geometry.pm_transit_length / c
    raise ValueError(f"unknown interferometer kind {kind!r}")


def max_clock_rate(geometry: ArmGeometry, kind: Kind) -> float:
    """Highest clock rate (Hz) for flat-top phase modulation in the long arm."""
    flat_top = pm_pass_separation(geometry, kind) + geometry.pulse_width
    period = 2 * (flat_top + geometry.modulator_rise_fall)
    if period <= 0:
        raise ValueError("geometry gives a non-positive modulation period")
    return 1.0 / period


def pm_insertion_loss(kind: Kind, il_pm_db: float) -> float:
    """PM loss (dB) seen by a pulse in the long arm: two passes for FMI, one for FSMI."""
    if il_pm_db < 0:
        raise ValueError("PM insertion loss must be >= 0 dB")
    if kind == "FMI":
        return 2.0 * il_pm_db
    if kind == "FSMI":
        return il_pm_db
    raise ValueError(f"unknown interferometer kind {kind!r}")

