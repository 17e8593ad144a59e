"""Jones-calculus core: polarization vectors, element matrices, propagation.

Conventions
-----------
* Column Jones vectors ``(h, v)``; a matrix acts as ``J_out = M @ J_in``.
* Everything lives in one fixed lab frame. Reflection does not flip
  coordinates; it contributes a pi phase (``Mirror`` is ``-I``).
* Backward matrix of a reciprocal element is the transpose of its forward
  matrix. A Faraday rotator is non-reciprocal: the same rotation applies in
  both directions, which is what makes the Faraday mirror work.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np

Direction = Literal["forward", "backward"]

UNITARY_TOL = 1e-12

H = np.array([1.0, 0.0], dtype=complex)
V = np.array([0.0, 1.0], dtype=complex)


def jones_vector(h: complex, v: complex) -> np.ndarray:
    vec = np.array([h, v], dtype=complex)
    if not np.all(np.isfinite(vec)):
        raise ValueError("Jones vector amplitudes must be finite")
    return vec


def inner(a: np.ndarray, b: np.ndarray) -> complex:
    """Hermitian inner product <a, b> = a^dagger b (co-propagating beams)."""
    return complex(np.vdot(a, b))


def reflection_overlap(reflected: np.ndarray, incident: np.ndarray) -> complex:
    """Overlap of a reflected beam with the beam that produced it.

    In the fixed lab frame the handedness of a counter-propagating wave is
    read with the transverse axes mirrored, so the physical overlap is the
    bilinear form r^T j rather than the Hermitian product.
    """
    return complex(np.dot(np.asarray(reflected), np.asarray(incident)))


@dataclass(frozen=True, eq=False)
class JonesMatrix:
    """2x2 complex transfer matrix tagged with its reciprocity."""

    m: np.ndarray
    reciprocal: bool = True

    def __post_init__(self) -> None:
        arr = np.array(self.m, dtype=complex)
        if arr.shape != (2, 2):
            raise ValueError(f"Jones matrix must be 2x2, got shape {arr.shape}")
        if not np.isfinite(arr).all():
            raise ValueError("Jones matrix entries must be finite")
        arr.flags.writeable = False
        object.__setattr__(self, "m", arr)

    def __matmul__(self, other):
        if isinstance(other, JonesMatrix):
            return JonesMatrix(self.m @ other.m, self.reciprocal and other.reciprocal)
        return self.m @ np.asarray(other, dtype=complex)

    def __mul__(self, scalar: complex) -> JonesMatrix:
        return JonesMatrix(self.m * scalar, self.reciprocal)

    __rmul__ = __mul__

    @property
    def T(self) -> JonesMatrix:
        return JonesMatrix(self.m.T, self.reciprocal)

    @property
    def H(self) -> JonesMatrix:
        return JonesMatrix(self.m.conj().T, self.reciprocal)

    def det(self) -> complex:
        a, b, c, d = self.m.ravel()
        return complex(a * d - b * c)

    def is_unitary(self, tol: float = UNITARY_TOL) -> bool:
        return bool(np.max(np.abs(self.m.conj().T @ self.m - np.eye(2))) <= tol)

    def max_deviation(self, other: JonesMatrix | np.ndarray) -> float:
        o = other.m if isinstance(other, JonesMatrix) else np.asarray(other)
        return float(np.max(np.abs(self.m - o)))

    def __repr__(self) -> str:
        tag = "reciprocal" if self.reciprocal else "non-reciprocal"
        return f"JonesMatrix({self.m.tolist()}, {tag})"


IDENTITY = JonesMatrix(np.eye(2))


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]], dtype=complex)


# --- optical elements -------------------------------------------------------


@dataclass(frozen=True)
class FiberBirefringence:
    matrix: JonesMatrix

    def __post_init__(self) -> None:
        if not self.matrix.reciprocal:
            raise ValueError("fiber birefringence must be reciprocal")


@dataclass(frozen=True)
class FaradayRotator:
    angle: float  # rad


@dataclass(frozen=True)
class PhaseModulator:
    phase: float  # rad
    axis: Literal["H", "V"] = "V"

    def __post_init__(self) -> None:
        if self.axis not in ("H", "V"):
            raise ValueError(f"modulated axis must be 'H' or 'V', got {self.axis!r}")


@dataclass(frozen=True)
class Mirror:
    pass


@dataclass(frozen=True)
class Attenuator:
    loss_db: float

    def __post_init__(self) -> None:
        if not self.loss_db >= 0:
            raise ValueError(f"attenuator loss must be >= 0 dB, got {self.loss_db}")


OpticalElement = Union[FiberBirefringence, FaradayRotator, PhaseModulator, Mirror, Attenuator]


def element_matrix(element: OpticalElement, direction: Direction = "forward") -> JonesMatrix:
    """Transfer matrix of ``element`` for light travelling in ``direction``."""
    if direction not in ("forward", "backward"):
        raise ValueError(f"direction must be 'forward' or 'backward', got {direction!r}")

    if isinstance(element, FaradayRotator):
        # Non-reciprocal: identical rotation sense for both directions.
        return JonesMatrix(rotation(element.angle), reciprocal=False)

    if isinstance(element, FiberBirefringence):
        fwd = element.matrix.m
    elif isinstance(element, PhaseModulator):
        ph = np.exp(1j * element.phase)
        fwd = np.diag([1.0, ph]) if element.axis == "V" else np.diag([ph, 1.0])
    elif isinstance(element, Mirror):
        fwd = -np.eye(2)
    elif isinstance(element, Attenuator):
        fwd = math.sqrt(10.0 ** (-element.loss_db / 10.0)) * np.eye(2)
    else:
        raise TypeError(f"unknown optical element {element!r}")

    return JonesMatrix(fwd if direction == "forward" else fwd.T, reciprocal=True)


def compose(*matrices: JonesMatrix) -> JonesMatrix:
    """Cascade matrices in propagation order: the first argument acts first."""
    out = IDENTITY
    for mat in matrices:
        out = mat @ out
    return out


def propagate(path: list[tuple[OpticalElement, Direction]]) -> JonesMatrix:
    """Net matrix of a sequence of (element, direction) traversals."""
    return compose(*(element_matrix(el, d) for el, d in path))


# --- Faraday mirror ----------------------------------------------------------

_FM = np.array([[0.0, 1.0], [-1.0, 0.0]], dtype=complex)


def faraday_mirror_matrix() -> JonesMatrix:
    """Ideal Faraday mirror [[0, 1], [-1, 0]].

    Equals FR(45 deg) -> mirror -> FR(45 deg) under the lab-frame convention.
    Being antisymmetric, it returns every input orthogonal to itself in the
    sense of :func:`reflection_overlap`.
    """
    return JonesMatrix(_FM.copy(), reciprocal=False)


def imperfect_faraday_mirror(fr_angle_error: float = 0.0) -> JonesMatrix:
    fr = FaradayRotator(math.pi / 4 + fr_angle_error)
    return propagate([(fr, "forward"), (Mirror(), "forward"), (fr, "backward")])


def faraday_roundtrip(birefringence: JonesMatrix) -> JonesMatrix:
    """Round trip through ``birefringence``, a Faraday mirror, and back.

    Returns B^T FM B, which equals det(B) * FM for any 2x2 B.
    """
    if not birefringence.reciprocal:
        raise ValueError("faraday_roundtrip requires a reciprocal birefringence matrix")
    fm = faraday_mirror_matrix()
    return JonesMatrix(birefringence.m.T @ fm.m @ birefringence.m, reciprocal=False)


# --- random unitaries --------------------------------------------------------


def random_su2(rng: np.random.Generator) -> JonesMatrix:
    """Haar-random SU(2) element drawn from a uniformly random unit quaternion."""
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    a = complex(q[0], q[1])
    b = complex(q[2], q[3])
    return JonesMatrix(np.array([[a, b], [-b.conjugate(), a.conjugate()]]))


def random_unitary(rng: np.random.Generator) -> JonesMatrix:
    """Haar-random U(2) element (random SU(2) times a uniform global phase)."""
    su2 = random_su2(rng)
    return su2 * np.exp(1j * rng.uniform(0.0, 2 * np.pi))


def su2_stack(q: np.ndarray) -> np.ndarray:
    """Vectorised quaternion -> SU(2) map for an (n, 4) array of unit quaternions."""
    a = q[:, 0] + 1j * q[:, 1]
    b = q[:, 2] + 1j * q[:, 3]
    out = np.empty((len(q), 2, 2), dtype=complex)
    out[:, 0, 0] = a
    out[:, 0, 1] = b
    out[:, 1, 0] = -b.conj()
    out[:, 1, 1] = a.conj()
    return out


def stokes(vec: np.ndarray) -> np.ndarray:
    """Normalised Stokes vector (S1, S2, S3) of a Jones vector or stack of them."""
    vec = np.asarray(vec)
    h, v = vec[..., 0], vec[..., 1]
    s0 = np.abs(h) ** 2 + np.abs(v) ** 2
    s1 = np.abs(h) ** 2 - np.abs(v) ** 2
    s2 = 2 * np.real(h * v.conj())
    s3 = -2 * np.imag(h * v.conj())
    return np.stack([s1, s2, s3], axis=-1) / s0[..., None]


__all__ = [
    "Attenuator",
    "FaradayRotator",
    "FiberBirefringence",
    "H",
    "IDENTITY",
    "JonesMatrix",
    "Mirror",
    "OpticalElement",
    "PhaseModulator",
    "V",
    "compose",
    "element_matrix",
    "faraday_mirror_matrix",
    "faraday_roundtrip",
    "imperfect_faraday_mirror",
    "inner",
    "jones_vector",
    "propagate",
    "random_su2",
    "reflection_overlap",
    "random_unitary",
    "rotation",
    "stokes",
    "su2_stack",
]
