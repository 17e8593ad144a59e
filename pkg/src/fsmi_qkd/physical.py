"""Source, fibre channel, polarization scrambler and gated detector models."""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache
from typing import Sequence

import numpy as np

from .optics import JonesMatrix, su2_stack

# --- source -----------------------------------------------------------------


@dataclass(frozen=True)
class IntensityClass:
    label: str
    mu: float  # mean photons per pulse
    probability: Fraction

    def __post_init__(self) -> None:
        object.__setattr__(self, "probability", Fraction(self.probability).limit_denominator(1 << 20))
        if self.mu < 0:
            raise ValueError(f"{self.label}: mean photon number must be >= 0")
        if not 0 <= self.probability <= 1:
            raise ValueError(f"{self.label}: probability must be in [0, 1]")


DEFAULT_CLASSES = (
    IntensityClass("signal", 0.48, Fraction(29, 32)),
    IntensityClass("decoy1", 0.07, Fraction(2, 32)),
    IntensityClass("decoy2", 0.002, Fraction(1, 32)),
)


@dataclass(frozen=True)
class SourceConfig:
    clock_rate: float = 1e9  # Hz
    intensity_classes: tuple[IntensityClass, ...] = DEFAULT_CLASSES
    phase_randomized: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "intensity_classes", tuple(self.intensity_classes))
        if self.clock_rate <= 0:
            raise ValueError("clock_rate must be positive")
        if not self.intensity_classes:
            raise ValueError("at least one intensity class is required")
        labels = [c.label for c in self.intensity_classes]
        if len(set(labels)) != len(labels):
            raise ValueError("intensity class labels must be unique")
        total = sum(c.probability for c in self.intensity_classes)
        if total != 1:
            raise ValueError(f"intensity class probabilities sum to {total}, not 1")

    @property
    def labels(self) -> list[str]:
        return [c.label for c in self.intensity_classes]

    @property
    def mus(self) -> np.ndarray:
        return np.array([c.mu for c in self.intensity_classes])

    @property
    def probabilities(self) -> np.ndarray:
        return np.array([float(c.probability) for c in self.intensity_classes])

    def by_label(self, label: str) -> IntensityClass:
        for c in self.intensity_classes:
            if c.label == label:
                return c
        raise KeyError(label)


@dataclass(frozen=True)
class PulseState:
    label: str
    mu: float
    global_phase: float
    encoding_phase: float = 0.0


def draw_class_indices(source: SourceConfig, rng: np.random.Generator, n: int) -> np.ndarray:
    cdf = np.cumsum(source.probabilities)
    cdf[-1] = 1.0
    return np.searchsorted(cdf, rng.random(n), side="right").astype(np.int8)


def draw_pulse(source: SourceConfig, rng: np.random.Generator) -> PulseState:
    idx = int(draw_class_indices(source, rng, 1)[0])
    cls = source.intensity_classes[idx]
    phase = rng.uniform(0.0, 2 * math.pi) if source.phase_randomized else 0.0
    return PulseState(cls.label, cls.mu, phase)


# --- channel ----------------------------------------------------------------


@dataclass(frozen=True)
class ChannelConfig:
    length: float = 50.0  # km
    attenuation: float = 0.2  # dB/km
    scramble_rate: float = 30.0  # Hz
    scrambler_seed: int = 0

    def __post_init__(self) -> None:
        if self.length < 0 or self.attenuation < 0 or self.scramble_rate < 0:
            raise ValueError("channel length, attenuation and scramble_rate must be >= 0")


def channel_transmittance(channel: ChannelConfig) -> float:
    return 10.0 ** (-channel.attenuation * channel.length / 10.0)


@lru_cache(maxsize=4096)
def _keyframe(seed: int, index: int) -> np.ndarray:
    q = np.random.default_rng([seed, index]).standard_normal(4)
    q /= np.linalg.norm(q)
    return su2_stack(q[None, :])[0]


def _keyframes(seed: int, indices: np.ndarray) -> np.ndarray:
    uniq, inv = np.unique(indices, return_inverse=True)
    frames = np.stack([_keyframe(seed, int(k)) for k in uniq])
    return frames[inv]


def scrambler_unitaries(times: np.ndarray | Sequence[float], channel: ChannelConfig) -> np.ndarray:
    """Scrambler matrices at each time in ``times`` as an ``(n, 2, 2)`` array.

    Haar-random SU(2) keyframes every ``1/scramble_rate`` seconds, joined by
    geodesics on SU(2); keyframe k depends only on (scrambler_seed, k).
    """
    t = np.atleast_1d(np.asarray(times, dtype=float))
    if np.any(t < 0):
        raise ValueError("scrambler time must be >= 0")
    seed = channel.scrambler_seed
    if channel.scramble_rate == 0:
        return np.broadcast_to(_keyframe(seed, 0), (len(t), 2, 2)).copy()

    pos = t * channel.scramble_rate
    k = np.floor(pos).astype(np.int64)
    s = (pos - k)[:, None, None]
    a = _keyframes(seed, k)
    b = _keyframes(seed, k + 1)
    step = np.conj(np.swapaxes(a, 1, 2)) @ b  # a^dagger b, in SU(2)
    cos_th = np.clip(np.real(step[:, 0, 0] + step[:, 1, 1]) / 2, -1.0, 1.0)
    theta = np.arccos(cos_th)[:, None, None]
    eye = np.eye(2)[None]
    sin_th = np.sin(theta)
    safe = np.where(sin_th > 1e-12, sin_th, 1.0)
    gen = (step - cos_th[:, None, None] * eye) / safe
    frac = np.where(sin_th > 1e-12, np.sin(s * theta), s)
    power = np.cos(s * theta) * eye + frac * gen
    return a @ power


def scrambler_unitary(t: float, channel: ChannelConfig) -> JonesMatrix:
    return JonesMatrix(scrambler_unitaries([t], channel)[0])


# --- detector ---------------------------------------------------------------

NONE, CLICK1, CLICK2 = 0, 1, 2


@dataclass(frozen=True)
class DetectorConfig:
    efficiency: float = 0.20  # per channel
    dark_count_per_gate: float = 2e-6  # both channels together
    afterpulse_total: float = 0.011
    afterpulse_window: int = 100  # gates
    double_click_policy: str = "random-assign"
    dead_time_gates: int = 0

    def __post_init__(self) -> None:
        for name in ("efficiency", "dark_count_per_gate", "afterpulse_total"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")
        if self.afterpulse_window < 1:
            raise ValueError("afterpulse_window must be >= 1 gate")
        if self.double_click_policy != "random-assign":
            raise ValueError(f"unsupported double-click policy {self.double_click_policy!r}")
        if self.dead_time_gates < 0:
            raise ValueError("dead_time_gates must be >= 0")

    @property
    def dark_per_channel(self) -> float:
        return self.dark_count_per_gate / 2.0


@dataclass
class DetectorState:
    """Recent click gate indices per channel, newest last."""

    window: int
    recent: tuple[deque, deque] = field(init=False)
    primary_clicks: list[int] = field(default_factory=lambda: [0, 0])
    afterpulse_clicks: list[int] = field(default_factory=lambda: [0, 0])

    def __post_init__(self) -> None:
        self.recent = (deque(maxlen=self.window), deque(maxlen=self.window))

    @classmethod
    def for_config(cls, det: DetectorConfig) -> DetectorState:
        return cls(window=det.afterpulse_window)


def click_probability(lam: np.ndarray | float, det: DetectorConfig) -> np.ndarray | float:
    """Per-channel primary click probability: photon detection OR dark count."""
    p_photon = -np.expm1(-det.efficiency * np.asarray(lam, dtype=float))
    return 1.0 - (1.0 - p_photon) * (1.0 - det.dark_per_channel)


def _afterpulse_hazard(state: DetectorState, ch: int, gate: int, det: DetectorConfig) -> float:
    w = det.afterpulse_window
    n = sum(1 for k in state.recent[ch] if gate - w <= k < gate)
    return 1.0 - (1.0 - det.afterpulse_total / w) ** n


def detect_gate(
    lambda1: float,
    lambda2: float,
    det: DetectorConfig,
    state: DetectorState,
    gate_index: int,
    rng: np.random.Generator,
) -> int:
    """Simulate one gate. Returns NONE, CLICK1 or CLICK2 (double clicks resolved)."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("mean photon numbers must be >= 0")
    clicked = [False, False]
    for ch, lam in enumerate((lambda1, lambda2)):
        recent = state.recent[ch]
        if det.dead_time_gates and recent and gate_index - recent[-1] <= det.dead_time_gates:
            rng.random(2)  # keep stream alignment independent of dead time
            continue
        primary = rng.random() < click_probability(lam, det)
        after = rng.random() < _afterpulse_hazard(state, ch, gate_index, det)
        if primary or after:
            clicked[ch] = True
            recent.append(gate_index)
            if primary:
                state.primary_clicks[ch] += 1
            else:
                state.afterpulse_clicks[ch] += 1
    if clicked[0] and clicked[1]:
        return CLICK1 if rng.random() < 0.5 else CLICK2
    if clicked[0]:
        return CLICK1
    if clicked[1]:
        return CLICK2
    return NONE


def _sample_triggers(rng: np.random.Generator, starts: np.ndarray, lengths: np.ndarray, p: float) -> np.ndarray:
    """Gates hit by independent Bernoulli(p) triggers on ranges [start, start+len)."""
    counts = rng.binomial(lengths, p)
    hit = np.nonzero(counts)[0]
    out = []
    for i in hit:
        offs = rng.choice(int(lengths[i]), size=int(counts[i]), replace=False)
        out.append(starts[i] + offs)
    return np.concatenate(out) if out else np.empty(0, dtype=np.int64)


def _channel_clicks_closure(
    primary: np.ndarray,
    g0: int,
    n: int,
    recent: deque,
    det: DetectorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """All clicks of one channel in [g0, g0+n) with afterpulse cascades.

    A gate clicks iff it has a primary click or any earlier click within the
    window triggers it; this closure is order-free without dead time.
    Returns (click mask, number of afterpulse-only clicks).
    """
    w, p = det.afterpulse_window, det.afterpulse_total / det.afterpulse_window
    end = g0 + n
    clicks = primary.copy()
    if p == 0:
        return clicks, 0

    # Triggers from clicks of earlier blocks that reach into this block.
    prev = np.array([k for k in recent if k + w >= g0], dtype=np.int64)
    starts = np.maximum(prev + 1, g0)
    lengths = np.minimum(prev + w + 1, end) - starts
    keep = lengths > 0
    hits = _sample_triggers(rng, starts[keep] - g0, lengths[keep], p)

    generation = np.nonzero(primary)[0]
    n_after = 0
    while True:
        if len(generation):
            starts = generation + 1
            lengths = np.minimum(generation + w + 1, n) - starts
            keep = lengths > 0
            hits = np.concatenate([hits, _sample_triggers(rng, starts[keep], lengths[keep], p)])
        if not len(hits):
            break
        hits = np.unique(hits)
        new = hits[~clicks[hits]]
        clicks[new] = True
        n_after += len(new)
        generation = new
        hits = np.empty(0, dtype=np.int64)
    return clicks, n_after


def _channel_clicks_sequential(
    primary: np.ndarray,
    g0: int,
    n: int,
    recent: deque,
    det: DetectorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """Gate-ordered walk, needed once dead time makes click order matter."""
    w, p = det.afterpulse_window, det.afterpulse_total / det.afterpulse_window
    end = g0 + n

    def triggers(after: int) -> list[int]:
        lo, hi = max(after + 1, g0), min(after + w + 1, end)
        if hi <= lo or p == 0:
            return []
        return (lo + _sample_triggers(rng, np.array([0]), np.array([hi - lo]), p)).tolist()

    heap = [int(g) for g in np.nonzero(primary)[0] + g0]
    for k in recent:
        heap.extend(triggers(k))
    heapq.heapify(heap)
    clicks = np.zeros(n, dtype=bool)
    last = recent[-1] if recent else None
    seen: set[int] = set()
    n_after = 0
    while heap:
        g = heapq.heappop(heap)
        if g in seen:
            continue
        seen.add(g)
        if last is not None and g - last <= det.dead_time_gates:
            continue
        clicks[g - g0] = True
        n_after += not primary[g - g0]
        last = g
        for h in triggers(g):
            if h not in seen:
                heapq.heappush(heap, h)
    return clicks, n_after


def channel_clicks(
    primary: np.ndarray,
    g0: int,
    recent: deque,
    det: DetectorConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, int]:
    """Clicks of one detector channel over a block, given its primary clicks.

    ``recent`` holds the channel's earlier click indices and is updated.
    Returns the click mask and the number of afterpulse-only clicks.
    """
    engine = _channel_clicks_sequential if det.dead_time_gates else _channel_clicks_closure
    clicks, n_after = engine(primary, g0, len(primary), recent, det, rng)
    idx = np.nonzero(clicks)[0]
    recent.extend((idx[-det.afterpulse_window:] + g0).tolist())
    return clicks, n_after


def detect_block(
    lam1: np.ndarray,
    lam2: np.ndarray,
    det: DetectorConfig,
    state: DetectorState,
    g0: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Vectorised detection of gates ``g0 .. g0+len(lam1)-1``.

    Same statistics as calling :func:`detect_gate` gate by gate: primary
    clicks are independent per gate, afterpulse triggers are Bernoulli per
    (click, later gate) pair, so they can be sampled in bulk.
    """
    n = len(lam1)
    masks = []
    for ch, lam in enumerate((lam1, lam2)):
        primary = rng.random(n) < click_probability(lam, det)
        clicks, n_after = channel_clicks(primary, g0, state.recent[ch], det, rng)
        state.afterpulse_clicks[ch] += n_after
        state.primary_clicks[ch] += int(clicks.sum()) - n_after
        masks.append(clicks)
    c1, c2 = masks
    out = np.zeros(n, dtype=np.int8)
    out[c1] = CLICK1
    out[c2 & ~c1] = CLICK2
    both = np.nonzero(c1 & c2)[0]
    if len(both):
        out[both] = np.where(rng.random(len(both)) < 0.5, CLICK1, CLICK2)
    return out
