"""Whole-system configuration and its INI representation.

Defaults reproduce the calibrated 50 km, 1 GHz system (see README,
"Calibration"). Every value can be overridden from a file or with
``section.key=value`` strings.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path

from .interferometer import ArmGeometry, ComponentImperfections, InterferometerModel, pm_insertion_loss
from .physical import ChannelConfig, DetectorConfig, IntensityClass, SourceConfig, channel_transmittance
from .security import SecurityConfig

CENTRAL_BIN_FRACTION = 0.5


@dataclass(frozen=True)
class ReceiverConfig:
    """Bob-side losses other than the detector efficiency."""

    pm_insertion_loss_db: float = 2.5
    other_loss_db: float = 1.5  # circulator, beam splitter, connectors

    def __post_init__(self) -> None:
        if self.pm_insertion_loss_db < 0 or self.other_loss_db < 0:
            raise ValueError("receiver losses must be >= 0 dB")


@dataclass(frozen=True)
class ProtocolConfig:
    encoding_phase_error: float = 0.207  # rad rms, gigahertz drive only
    block_gates: int = 1 << 18
    accelerated_threshold: float = 1e9  # gates

    def __post_init__(self) -> None:
        if self.encoding_phase_error < 0:
            raise ValueError("encoding_phase_error must be >= 0")
        if self.block_gates < 1:
            raise ValueError("block_gates must be >= 1")


@dataclass(frozen=True)
class ScanConfig:
    v_min: float = 0.0
    v_max: float = 9.0
    v_step: float = 0.01
    v_pi: float = 4.5
    dwell_cycles: int = 1 << 19
    mu: float = 1.0  # photons per pulse sent during scans
    alice_phase: float = 0.0
    period: float = 1.0  # s between scan starts

    def __post_init__(self) -> None:
        if not self.v_max > self.v_min:
            raise ValueError("v_max must exceed v_min")
        if self.v_step <= 0 or self.v_pi <= 0 or self.dwell_cycles < 1 or self.period <= 0:
            raise ValueError("scan step, v_pi, dwell and period must be positive")
        if self.mu < 0:
            raise ValueError("scan mean photon number must be >= 0")

    @property
    def n_steps(self) -> int:
        return int(math.floor((self.v_max - self.v_min) / self.v_step + 1e-9)) + 1


# Calibrated to the observed scan statistics and QBERs; see README.
ALICE_BS_IMBALANCE = 0.06
INTERFEROMETER_JITTER = 0.1  # rad rms per interferometer


@dataclass(frozen=True)
class SystemConfig:
    source: SourceConfig = field(default_factory=SourceConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    alice: InterferometerModel = field(
        default_factory=lambda: InterferometerModel(
            "FSMI",
            imperfections=ComponentImperfections(bs_split_imbalance=ALICE_BS_IMBALANCE),
            phase_jitter=INTERFEROMETER_JITTER,
        )
    )
    bob: InterferometerModel = field(
        default_factory=lambda: InterferometerModel("FSMI", phase_jitter=INTERFEROMETER_JITTER)
    )
    receiver: ReceiverConfig = field(default_factory=ReceiverConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    scan: ScanConfig = field(default_factory=ScanConfig)
    security: SecurityConfig = field(default_factory=SecurityConfig)
    geometry: ArmGeometry = field(default_factory=ArmGeometry)

    def __post_init__(self) -> None:
        sec = replace(
            self.security,
            clock_rate=self.source.clock_rate,
            signal_probability=self.source.intensity_classes[0].probability,
        )
        object.__setattr__(self, "security", sec)

    @property
    def bob_transmittance(self) -> float:
        loss = pm_insertion_loss(self.bob.kind, self.receiver.pm_insertion_loss_db) + self.receiver.other_loss_db
        return CENTRAL_BIN_FRACTION * 10.0 ** (-loss / 10.0)

    @property
    def photon_transmittance(self) -> float:
        """Channel times Bob-side transmittance, before detector efficiency."""
        return channel_transmittance(self.channel) * self.bob_transmittance

    @property
    def eta_sys(self) -> float:
        return self.photon_transmittance * self.detector.efficiency

    @property
    def total_phase_noise(self) -> float:
        """Rms phase noise on QKD pulses (interferometer jitter plus encoding error)."""
        return math.sqrt(
            self.alice.phase_jitter**2 + self.bob.phase_jitter**2 + self.protocol.encoding_phase_error**2
        )

    @property
    def scan_phase_noise(self) -> float:
        return math.hypot(self.alice.phase_jitter, self.bob.phase_jitter)


# --- INI codec ----------------------------------------------------------------

_FLAT_SECTIONS = {
    "channel": ChannelConfig,
    "detector": DetectorConfig,
    "receiver": ReceiverConfig,
    "protocol": ProtocolConfig,
    "scan": ScanConfig,
    "geometry": ArmGeometry,
}
_SECURITY_KEYS = ("ec_efficiency", "epsilon_total", "sift_factor")
_INTERFEROMETER_KEYS = ("kind", "long_arm_phase_offset", "short_arm_phase_offset", "phase_jitter")
_IMPERFECTION_KEYS = ("fr_angle_error", "pbs_extinction_ratio", "bs_split_imbalance")


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_like(template, text: str):
    text = text.strip()
    if isinstance(template, bool):
        low = text.lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"not a boolean: {text!r}")
        return low in ("true", "1", "yes")
    if isinstance(template, Fraction):
        return Fraction(text)
    if isinstance(template, int):
        return int(float(text)) if "e" in text.lower() else int(text)
    if isinstance(template, float):
        return float(text)
    return text


def _section_items(obj, keys=None) -> dict[str, str]:
    names = keys or [f.name for f in fields(obj)]
    return {k: _fmt(getattr(obj, k)) for k in names}


def to_ini(cfg: SystemConfig) -> str:
    parser = configparser.ConfigParser(interpolation=None)
    src = cfg.source
    sec = {"clock_rate": _fmt(src.clock_rate), "phase_randomized": _fmt(src.phase_randomized)}
    sec["classes"] = ", ".join(src.labels)
    for c in src.intensity_classes:
        sec[f"{c.label}_mu"] = _fmt(float(c.mu))
        sec[f"{c.label}_probability"] = str(c.probability)
    parser["source"] = sec
    for name, _ in _FLAT_SECTIONS.items():
        parser[name] = _section_items(getattr(cfg, name))
    for name in ("alice", "bob"):
        model = getattr(cfg, name)
        items = _section_items(model, _INTERFEROMETER_KEYS)
        items.update(_section_items(model.imperfections, _IMPERFECTION_KEYS))
        parser[name] = items
    parser["security"] = _section_items(cfg.security, _SECURITY_KEYS)
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def _apply_flat(obj, items: dict[str, str], section: str):
    known = {f.name for f in fields(obj)}
    updates = {}
    for key, text in items.items():
        if key not in known:
            raise KeyError(f"unknown key {section}.{key}")
        updates[key] = _parse_like(getattr(obj, key), text)
    return replace(obj, **updates) if updates else obj


def from_mapping(sections: dict[str, dict[str, str]], base: SystemConfig | None = None) -> SystemConfig:
    """Build a config from ``{section: {key: text}}`` on top of ``base``."""
    cfg = base or SystemConfig()
    parts = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section, items in sections.items():
        items = dict(items)
        if section == "source":
            src = parts["source"]
            labels = [s.strip() for s in items.pop("classes", ",".join(src.labels)).split(",") if s.strip()]
            old = {c.label: c for c in src.intensity_classes}
            classes = []
            for label in labels:
                mu = items.pop(f"{label}_mu", None)
                prob = items.pop(f"{label}_probability", None)
                if label not in old and (mu is None or prob is None):
                    raise KeyError(f"source class {label!r} needs {label}_mu and {label}_probability")
                base_cls = old.get(label)
                classes.append(
                    IntensityClass(
                        label,
                        float(mu) if mu is not None else base_cls.mu,
                        Fraction(prob) if prob is not None else base_cls.probability,
                    )
                )
            top = {k: items.pop(k) for k in list(items) if k in ("clock_rate", "phase_randomized")}
            if items:
                raise KeyError(f"unknown keys in [source]: {sorted(items)}")
            src = _apply_flat(src, top, "source")
            parts["source"] = replace(src, intensity_classes=tuple(classes))
        elif section in _FLAT_SECTIONS:
            parts[section] = _apply_flat(parts[section], items, section)
        elif section in ("alice", "bob"):
            model = parts[section]
            imp_items = {k: items.pop(k) for k in list(items) if k in _IMPERFECTION_KEYS}
            bad = set(items) - set(_INTERFEROMETER_KEYS)
            if bad:
                raise KeyError(f"unknown keys in [{section}]: {sorted(bad)}")
            imp = _apply_flat(model.imperfections, imp_items, section)
            parts[section] = replace(_apply_flat(model, items, section), imperfections=imp)
        elif section == "security":
            bad = set(items) - set(_SECURITY_KEYS)
            if bad:
                raise KeyError(f"unknown keys in [security]: {sorted(bad)}")
            parts["security"] = _apply_flat(parts["security"], items, section)
        elif section == "DEFAULT":
            continue
        else:
            raise KeyError(f"unknown config section [{section}]")
    return SystemConfig(**parts)


def parse_overrides(pairs: list[str]) -> dict[str, dict[str, str]]:
    out: dict[str, dict[str, str]] = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        section, dot, name = key.strip().partition(".")
        if not sep or not dot or not name:
            raise ValueError(f"override must look like section.key=value, got {pair!r}")
        out.setdefault(section, {})[name] = value
    return out


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> SystemConfig:
    cfg = SystemConfig()
    if path is not None:
        parser = configparser.ConfigParser(interpolation=None)
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
        cfg = from_mapping({s: dict(parser[s]) for s in parser.sections()}, cfg)
    if overrides:
        cfg = from_mapping(parse_overrides(overrides), cfg)
    return cfg


def with_overrides(cfg: SystemConfig, **sections: dict) -> SystemConfig:
    """Programmatic overrides: ``with_overrides(cfg, detector={"afterpulse_total": 0})``."""
    return from_mapping({k: {kk: _fmt(vv) for kk, vv in v.items()} for k, v in sections.items()}, cfg)


def noiseless(cfg: SystemConfig | None = None) -> SystemConfig:
    """Perfect optics, no dark counts, no afterpulses, no phase noise."""
    cfg = cfg or SystemConfig()
    ideal = ComponentImperfections()
    return dataclasses.replace(
        cfg,
        detector=replace(cfg.detector, dark_count_per_gate=0.0, afterpulse_total=0.0),
        alice=replace(cfg.alice, imperfections=ideal, phase_jitter=0.0),
        bob=replace(cfg.bob, imperfections=ideal, phase_jitter=0.0),
        protocol=replace(cfg.protocol, encoding_phase_error=0.0),
    )
