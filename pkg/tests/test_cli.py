import json
from pathlib import Path

import pytest

from ibgp.cli import main
from ibgp.scenario import load_scenario
from ibgp import ConfigurationError

SCENARIOS = Path(__file__).resolve().parent.parent / "scenarios"


def write(tmp_path, data, name="s.json"):
    path = tmp_path / name
    path.write_text(json.dumps(data, indent=2))
    return path


def test_verify_reference_scenario(tmp_path):
    out = tmp_path / "out"
    assert main(["verify", "--scenario", str(SCENARIOS / "verify_reference.json"), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["worst_probability"] == "1/3"
    manifest = json.loads((out / "manifest.json").read_text())
    assert set(manifest["outputs"]) == {"report.json", "report.csv"}
    assert manifest["seed"] == 0 and manifest["tool_version"]


def test_malformed_scenario_exit_2_no_output(tmp_path, capsys):
    out = tmp_path / "out"
    assert main(["verify", "--scenario", str(SCENARIOS / "malformed.json"), "--out", str(out)]) == 2
    assert not out.exists()
    assert "line 6" in capsys.readouterr().err


def test_unknown_field_rejected(tmp_path, capsys):
    path = write(tmp_path, {"kind": "diagram", "params": {"n": 5, "colour": "red"}})
    assert main(["diagram", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "colour" in err and "line 5" in err


def test_kind_mismatch(tmp_path):
    path = write(tmp_path, {"kind": "sensor"})
    assert main(["verify", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2


def test_invalid_json_reports_line(tmp_path, capsys):
    path = tmp_path / "bad.json"
    path.write_text('{\n  "kind": "verify",\n  "params": {,}\n}\n')
    assert main(["verify", "--scenario", str(path), "--out", str(tmp_path / "o")]) == 2
    assert "line 3" in capsys.readouterr().err


def test_missing_scenario_file(tmp_path, capsys):
    assert main(["verify", "--scenario", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err


def test_budget_refusal_exit_3(tmp_path):
    out = tmp_path / "o"
    assert main(["verify", "--budget", "5", "--out", str(out)]) == 3
    assert not out.exists()


def test_violation_exit_1(tmp_path):
    inst = {"n": 2, "thresholds": [1, 1], "rewards": [1.0, 0.9], "availability": [[0, 1], [0]]}
    path = write(tmp_path, {"kind": "select", "params": {"instances": [inst]}})
    out = tmp_path / "o"
    assert main(["select", "--scenario", str(path), "--out", str(out)]) == 1
    assert json.loads((out / "summary.json").read_text())["below_one_over_k_max"] == 1


def test_outputs_are_write_once(tmp_path):
    out = tmp_path / "o"
    assert main(["diagram", "--out", str(out)]) == 0
    before = {p.name: p.read_bytes() for p in out.iterdir()}
    assert main(["diagram", "--out", str(out)]) == 2
    assert {p.name: p.read_bytes() for p in out.iterdir()} == before


def test_scenario_file_untouched(tmp_path):
    src = SCENARIOS / "simulate.json"
    text = src.read_bytes()
    main(["simulate", "--scenario", str(src), "--trials", "20", "--out", str(tmp_path / "o")])
    assert src.read_bytes() == text


def test_jobs_do_not_change_results(tmp_path):
    args = ["verify", "--scenario", str(SCENARIOS / "verify_monte_carlo.json"), "--trials", "600"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b"), "--jobs", "3"]) == 0
    for name in ("report.json", "report.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_seed_flag_overrides(tmp_path):
    base = ["simulate", "--scenario", str(SCENARIOS / "simulate.json"), "--trials", "50"]
    main(base + ["--out", str(tmp_path / "a"), "--seed", "1"])
    main(base + ["--out", str(tmp_path / "b"), "--seed", "2"])
    assert (tmp_path / "a" / "trials.csv").read_bytes() != (tmp_path / "b" / "trials.csv").read_bytes()


def test_sensor_default_consensus_std_zero(tmp_path):
    out = tmp_path / "o"
    assert main(["sensor", "--out", str(out)]) == 0
    rows = (out / "sensor.csv").read_text().splitlines()[1:]
    assert rows and all(r.split(",")[4] == "0" for r in rows)


def test_multi_target_and_sweep_small(tmp_path):
    assert main(["multi-target", "--scenario", str(SCENARIOS / "multi_target.json"), "--trials", "10", "--out", str(tmp_path / "m")]) == 0
    assert main(["sweep", "--scenario", str(SCENARIOS / "sweep_n6.json"), "--trials", "20", "--out", str(tmp_path / "s")]) == 0
    header = (tmp_path / "s" / "sweep.csv").read_text().splitlines()[0]
    assert header.startswith("attacker,lambda=0,lambda=1,lambda=2")


def test_bad_flags(tmp_path):
    assert main(["verify", "--trials", "0", "--out", str(tmp_path / "o")]) == 2
    assert main(["frobnicate"]) == 2


def test_every_bundled_scenario_validates():
    for path in SCENARIOS.glob("*.json"):
        data = json.loads(path.read_text())
        if path.name == "malformed.json":
            with pytest.raises(ConfigurationError):
                load_scenario(path.read_text(), data["kind"])
        else:
            load_scenario(path.read_text(), data["kind"])
