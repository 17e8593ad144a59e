"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``PASS``/``FAIL`` line; the lines are also collected
into an "acceptance criteria" section of the pytest summary.
"""
from __future__ import annotations

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from fsmi_qkd.cli import main as cli_main
from fsmi_qkd.config import SystemConfig, with_overrides
from fsmi_qkd.interferometer import (
    ArmGeometry,
    InterferometerModel,
    equivalence_report,
    max_clock_rate,
    system_visibility,
)
from fsmi_qkd.optics import JonesMatrix, faraday_mirror_matrix, faraday_roundtrip, random_unitary
from fsmi_qkd.protocol import fringe, observed_rates, run_session, run_visibility_series
from fsmi_qkd.security import ClassObservation, ObservedRates, analytic_yields, analyze, decoy_bounds

TARGET_RATE = 306e3


def report(number: int, title: str, passed: bool, detail: str, elapsed: float, budget: float) -> None:
    ok = passed and elapsed < budget
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}; {elapsed:.2f} s of {budget:g} s]"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert passed, line
    assert elapsed < budget, line


def test_1_fmi_fsmi_equivalence():
    t0 = time.perf_counter()
    dev = equivalence_report(10_000, seed=20240101)
    report(1, "FMI = FSMI long arm", dev < 1e-10, f"max deviation {dev:.2e} < 1e-10",
           time.perf_counter() - t0, 5)


def test_2_channel_disturbance_robustness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    ideal = InterferometerModel("FSMI")
    worst = max(abs(system_visibility(ideal, ideal, random_unitary(rng)) - 1.0) for _ in range(1000))
    report(2, "visibility 1 under any channel", worst < 1e-9, f"max |V - 1| {worst:.2e} over 1000 unitaries",
           time.perf_counter() - t0, 5)


def test_3_faraday_compensation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    fm = faraday_mirror_matrix().m
    worst = 0.0
    for _ in range(10_000):
        b = JonesMatrix(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
        worst = max(worst, faraday_roundtrip(b).max_deviation(b.det() * fm))
    report(3, "B^T FM B = det(B) FM", worst < 1e-12, f"max deviation {worst:.2e} over 10^4 matrices",
           time.perf_counter() - t0, 5)


def test_4_visibility_statistics():
    t0 = time.perf_counter()
    cfg = SystemConfig()
    n = int(round(86400 / cfg.scan.period))
    vis = np.array([r.visibility for r in run_visibility_series(cfg, n, seed=4)])
    mean, std = float(vis.mean()), float(vis.std())
    ok = abs(mean - 0.9935) <= 0.003 and 0.0005 <= std <= 0.003
    report(4, "24-h visibility statistics", ok, f"mean {mean:.5f} (0.9935 +- 0.003), std {std:.5f} in [0.0005, 0.003]",
           time.perf_counter() - t0, 300)


def test_5_qber_reproduction():
    t0 = time.perf_counter()
    cfg = SystemConfig()
    res = run_session(cfg, 3600.0, 10.0, seed=5)
    mean = {lab: float(np.mean([t.classes[lab].qber for t in res.tallies])) for lab in cfg.source.labels}
    bands = {"signal": (0.019, 0.025), "decoy1": (0.045, 0.065), "decoy2": (0.30, 0.45)}
    ok = all(lo <= mean[lab] <= hi for lab, (lo, hi) in bands.items())
    detail = ", ".join(f"{lab} {100 * mean[lab]:.2f}% in [{100 * lo:g}, {100 * hi:g}]%"
                       for lab, (lo, hi) in bands.items())
    report(5, "1-h QBERs", ok and res.accelerated, detail, time.perf_counter() - t0, 600)


def test_6_monte_carlo_matches_oracle():
    t0 = time.perf_counter()
    cfg = with_overrides(SystemConfig(), detector={"afterpulse_total": 0.0})
    n_gates = 10_000_000
    res = run_session(cfg, n_gates / cfg.source.clock_rate, 1e-3, seed=6, mode="off")
    totals = res.totals
    # Oracle inputs: detector background of both channels, and the intrinsic
    # error from the fringe contrast averaged over Gaussian phase noise.
    y0 = 1 - (1 - cfg.detector.dark_per_channel) ** 2
    vis, off = fringe(cfg, [0.0])
    e_d = 0.5 * (1 - vis[0] * math.cos(off[0]) * math.exp(-0.5 * cfg.total_phase_noise**2))
    worst = 0.0
    parts = []
    for c in cfg.source.intensity_classes:
        t = totals[c.label]
        q, e = analytic_yields(cfg.eta_sys, y0, e_d, c.mu)
        z_q = (t.detections - t.sent * q) / math.sqrt(t.sent * q)
        z_e = (t.errors - t.sifted * e) / math.sqrt(max(t.sifted * e, 1e-300))
        worst = max(worst, abs(z_q), abs(z_e))
        parts.append(f"{c.label} zQ {z_q:+.2f} zE {z_e:+.2f}")
    sent = sum(t.sent for t in totals.values())
    report(6, "Monte Carlo vs analytic yields", worst <= 3 and sent == n_gates and not res.accelerated,
           "; ".join(parts) + " (|z| <= 3)", time.perf_counter() - t0, 120)


def test_7_decoy_sandwich():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(100):
        eta, y0, e_d = rng.uniform(1e-4, 1), rng.uniform(0, 1e-4), rng.uniform(0, 0.05)
        obs = ObservedRates(tuple(
            ClassObservation(lab, mu, *analytic_yields(eta, y0, e_d, mu), 1e12)
            for lab, mu in (("signal", 0.48), ("decoy1", 0.07), ("decoy2", 0.002))
        ))
        est = decoy_bounds(obs)
        y1 = y0 + eta * (1 - y0)
        e1 = (0.5 * y0 + e_d * eta) / y1
        violations += (est.y1_lower > y1) + (est.e1_upper < e1)
    report(7, "decoy bounds sandwich", violations == 0, f"{violations} violations over 100 draws",
           time.perf_counter() - t0, 5)


def test_8_key_rate():
    t0 = time.perf_counter()
    cfg = SystemConfig()
    res = run_session(cfg, 7 * 86400.0, 10.0, seed=8)
    obs = observed_rates(cfg.source, res.totals)
    asym = analyze(obs, cfg.security).rate
    finite = analyze(obs, cfg.security, finite_size=True).rate
    ok = (TARGET_RATE / 2 <= asym <= 2 * TARGET_RATE) and finite < asym and (TARGET_RATE / 3 <= finite <= 3 * TARGET_RATE)
    report(8, "secure key rate", ok,
           f"asymptotic {asym / 1e3:.1f} kb/s, finite-size {finite / 1e3:.1f} kb/s (7-day counts, eps 1e-10)",
           time.perf_counter() - t0, 300)


def test_9_clock_rate():
    t0 = time.perf_counter()
    g = ArmGeometry(pm_fm_gap=0.0)
    fmi, fsmi = max_clock_rate(g, "FMI"), max_clock_rate(g, "FSMI")
    ok = abs(fmi - 5e8) <= 0.2 * 5e8 and fsmi >= 1e9
    report(9, "clock-rate analysis", ok, f"FMI {fmi / 1e6:.1f} MHz, FSMI {fsmi / 1e6:.1f} MHz",
           time.perf_counter() - t0, 1)


def test_10_determinism(tmp_path):
    t0 = time.perf_counter()
    argv = ["qkd", "--duration", "1h", "--interval", "10s", "--seed", "10"]
    dirs = []
    for name, workers in (("a", 1), ("b", 1), ("c", 2)):
        out = tmp_path / name
        assert cli_main([*argv, "--workers", str(workers), "--out", str(out)]) == 0
        dirs.append(out)
    files = ["qkd_series.csv", "qkd_smoothed.csv", "tally.csv", "keyrate.json"]
    same = all((dirs[0] / f).read_bytes() == (d / f).read_bytes() for d in dirs[1:] for f in files)
    report(10, "byte-identical qkd outputs", same, "2 runs + 2 workers, 4 files each",
           time.perf_counter() - t0, 120)


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-q", "-s"]))
