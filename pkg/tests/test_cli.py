from __future__ import annotations

import csv
import json

import pytest

from fsmi_qkd.cli import block_average, histogram, main, parse_duration


def run(tmp_path, *argv, name="out"):
    out = tmp_path / name
    code = main([*argv, "--out", str(out)])
    return code, out


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest: ")
    return lines[0].split(": ")[1], list(csv.DictReader(lines[1:]))


def test_parse_duration():
    assert parse_duration("24h") == 86400
    assert parse_duration("10m") == 600
    assert parse_duration("7d") == 7 * 86400
    assert parse_duration("3.5") == 3.5
    for bad in ("0", "-1h", "abc", "5y", "nan"):
        with pytest.raises(Exception):
            parse_duration(bad)


def test_block_average_and_histogram():
    assert block_average([1, 2, 3, 4, 5], 2).tolist() == [1.5, 3.5, 5.0]
    assert block_average(list(range(400)), 200).tolist() == [99.5, 299.5]
    rows = histogram([0.9901, 0.9902, 0.9912], 0.001)
    assert [r[2] for r in rows] == [2, 1]
    assert rows[0][0] == pytest.approx(0.990)


def test_analysis_table(tmp_path):
    code, out = run(tmp_path, "analysis", "--pm-loss", "3")
    assert code == 0
    run_id, rows = read_csv(out / "analysis.csv")
    table = {r["kind"]: r for r in rows}
    assert 4e8 <= float(table["FMI"]["max_clock_rate_hz"]) <= 6e8
    assert float(table["FSMI"]["max_clock_rate_hz"]) >= 1e9
    assert float(table["FMI"]["pm_insertion_loss_db"]) == 6.0
    assert float(table["FSMI"]["pm_insertion_loss_db"]) == 3.0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["run_id"] == run_id
    assert manifest["outputs"] == ["analysis.csv"]


def test_analysis_rejects_invalid_geometry(tmp_path):
    code, _ = run(tmp_path, "analysis", "--set", "geometry.group_index=0.5")
    assert code == 2
    code, _ = run(tmp_path, "analysis", "--kind", "FSMI", "--set", "geometry.pm_transit_length=0")
    assert code == 2


def test_equivalence_exit_codes(tmp_path):
    code, out = run(tmp_path, "equivalence", "--trials", "2000")
    assert code == 0
    report = json.loads((out / "equivalence.json").read_text())
    assert report["passed"] and report["max_deviation"] < 1e-10
    assert run(tmp_path, "equivalence", "--trials", "200", "--fr-angle-error", "0.01", name="b")[0] == 1
    code, out = run(tmp_path, "equivalence", "--trials", "200", "--fr-angle-error", "0.01", "--report-only", name="c")
    assert code == 0
    assert json.loads((out / "equivalence.json").read_text())["max_deviation"] > 0
    code, out = run(tmp_path, "equivalence", "--trials", "1", "--phase", "0", name="d")
    assert json.loads((out / "equivalence.json").read_text())["max_deviation"] < 1e-14
    assert run(tmp_path, "equivalence", "--trials", "0", name="e")[0] == 2


def test_visibility_noiseless(tmp_path):
    code, out = run(tmp_path, "visibility", "--duration", "0.01h", "--noiseless")
    assert code == 0
    _, rows = read_csv(out / "visibility.csv")
    assert len(rows) == 36
    assert all(float(r["visibility"]) == 1.0 for r in rows)
    summary = json.loads((out / "visibility_summary.json").read_text())
    assert summary["mean"] == 1.0 and summary["std"] == 0.0
    _, hist = read_csv(out / "visibility_histogram.csv")
    assert sum(int(r["count"]) for r in hist) == 36


def test_visibility_bytes_reproducible(tmp_path):
    _, a = run(tmp_path, "visibility", "--duration", "120s", "--seed", "3", name="a")
    _, b = run(tmp_path, "visibility", "--duration", "120s", "--seed", "3", "--workers", "2", name="b")
    for f in ("visibility.csv", "visibility_histogram.csv", "visibility_summary.json"):
        assert (a / f).read_bytes() == (b / f).read_bytes()
    _, c = run(tmp_path, "visibility", "--duration", "120s", "--seed", "4", name="c")
    assert (a / "visibility.csv").read_bytes() != (c / "visibility.csv").read_bytes()


def test_visibility_invalid_duration(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["visibility", "--duration", "-2h", "--out", str(tmp_path)])
    assert exc.value.code == 2


def test_qkd_outputs(tmp_path):
    code, out = run(tmp_path, "qkd", "--duration", "30m", "--interval", "10s", "--seed", "2")
    assert code == 0
    run_id, series = read_csv(out / "qkd_series.csv")
    assert len(series) == 180
    assert list(series[0]) == ["interval", "start_s", "signal_gain", "signal_qber", "decoy1_gain",
                               "decoy1_qber", "decoy2_gain", "decoy2_qber", "rate_bps"]
    _, smooth = read_csv(out / "qkd_smoothed.csv")
    assert len(smooth) == 1
    _, tally = read_csv(out / "tally.csv")
    assert [r["class"] for r in tally] == ["signal", "decoy1", "decoy2"]
    report = json.loads((out / "keyrate.json").read_text())
    assert report["manifest"] == run_id
    assert report["accelerated"] is True
    assert 0 < report["finite_size"]["rate_bps"] < report["asymptotic"]["rate_bps"]
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"qkd_series.csv", "qkd_smoothed.csv", "tally.csv", "keyrate.json"}
    assert manifest["accelerated"] is True


def test_qkd_noiseless(tmp_path):
    code, out = run(tmp_path, "qkd", "--duration", "60s", "--noiseless", "--accelerated", "on")
    assert code == 0
    _, tally = read_csv(out / "tally.csv")
    assert all(int(r["errors"]) == 0 for r in tally)
    assert json.loads((out / "keyrate.json").read_text())["asymptotic"]["rate_bps"] > 0


def test_qkd_rejects_bad_interval(tmp_path):
    assert run(tmp_path, "qkd", "--duration", "10s", "--interval", "20s")[0] == 2
    assert run(tmp_path, "qkd", "--duration", "10s", "--workers", "0", name="w")[0] == 2


def test_keyrate_from_qkd_tally(tmp_path):
    _, q = run(tmp_path, "qkd", "--duration", "1h", name="q")
    code, out = run(tmp_path, "keyrate", str(q / "tally.csv"), name="k")
    assert code == 0
    a = json.loads((q / "keyrate.json").read_text())
    b = json.loads((out / "keyrate.json").read_text())
    assert b["asymptotic"]["rate_bps"] == a["asymptotic"]["rate_bps"] > 0


def _write_tally(path, rows, header="class,mu,sent,detections,errors"):
    path.write_text(header + "\n" + "\n".join(rows) + "\n")
    return path


def test_keyrate_without_sifted_column(tmp_path):
    t = _write_tally(tmp_path / "t.csv", [
        "signal,0.48,3262500000000,6298000000,68370000",
        "decoy1,0.07,225000000000,67520000,1722000",
        "decoy2,0.002,112500000000,3308000,610200",
    ])
    code, out = run(tmp_path, "keyrate", str(t))
    assert code == 0
    rep = json.loads((out / "keyrate.json").read_text())["asymptotic"]
    assert rep["rate_bps"] > 1e5
    assert rep["observed"]["signal"]["qber"] == pytest.approx(68370000 / (0.5 * 6298000000))


def test_keyrate_high_phase_error_flagged(tmp_path):
    t = _write_tally(tmp_path / "t.csv", [
        "signal,0.48,1000000000000,2000000000,21000000",
        "decoy1,0.07,100000000000,30000000,7500000",
        "decoy2,0.002,50000000000,1500000,370000",
    ])
    code, out = run(tmp_path, "keyrate", str(t))
    assert code == 0
    rep = json.loads((out / "keyrate.json").read_text())["asymptotic"]
    assert rep["estimates"]["e1_upper"] >= 0.5
    assert rep["rate_bps"] == 0.0 and rep["clamped"]


@pytest.mark.parametrize("rows", [
    ["signal,0.48,1000,10,1", "decoy1,0.07,1000,2,0"],
    ["signal,0.48,1000,10,1", "decoy1,0.07,1000,2,0", "decoy2,0.002,abc,1,0"],
    ["signal,0.48,1000,10,1", "signal,0.07,1000,2,0", "decoy2,0.002,1000,1,0"],
    ["signal,0.48,1000,10,20", "decoy1,0.07,1000,2,0", "decoy2,0.002,1000,1,0"],
])
def test_keyrate_rejects_malformed(tmp_path, rows):
    t = _write_tally(tmp_path / "t.csv", rows)
    assert run(tmp_path, "keyrate", str(t))[0] == 2


def test_keyrate_missing_columns_and_file(tmp_path):
    t = _write_tally(tmp_path / "t.csv", ["signal,0.48,1000"], header="class,mu,sent")
    assert run(tmp_path, "keyrate", str(t))[0] == 2
    assert run(tmp_path, "keyrate", str(tmp_path / "missing.csv"))[0] == 2


def test_print_config_round_trips(tmp_path, capsys):
    assert main(["analysis", "--print-config", "--set", "channel.length=30"]) == 0
    text = capsys.readouterr().out
    path = tmp_path / "c.ini"
    path.write_text(text)
    code, _ = run(tmp_path, "analysis", "--config", str(path))
    assert code == 0
    assert "length = 30.0" in text


def test_missing_config_is_input_error(tmp_path):
    assert run(tmp_path, "analysis", "--config", str(tmp_path / "nope.ini"))[0] == 2
