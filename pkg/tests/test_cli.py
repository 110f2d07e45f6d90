import json
import math
from pathlib import Path

import pytest

from delaycert.cli import main
from delaycert.sdp import parse_sdpa, problem_from_sdpa, solve

SPECS = Path(__file__).resolve().parents[1] / "specs"


def write_spec(tmp_path, name="s.json", **over):
    spec = json.loads((SPECS / "example_a.json").read_text())
    spec.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(spec, indent=2))
    return path


def run(argv, tmp_path):
    out = tmp_path / "report.json"
    code = main([*argv, "--out", str(out)])
    return code, (json.loads(out.read_text()) if out.exists() else None)


def test_analyze_certified(tmp_path):
    code, rep = run(["analyze", str(SPECS / "example_a.json")], tmp_path)
    assert code == 0
    assert rep["verdict"] == "certified-stable"
    assert rep["analysis"]["residual_max"] < 1e-7
    assert rep["oracle"]["consistent"]
    assert len(rep["input_sha256"]) == 64


def test_analyze_not_certified(tmp_path):
    spec = write_spec(tmp_path, delays=[1.6])
    code, rep = run(["analyze", str(spec)], tmp_path)
    assert code == 1 and rep["verdict"] == "not-certified"


def test_malformed_json(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"schema": "delaycert.system/1", "n": 1,,}')
    assert main(["analyze", str(bad)]) == 2
    assert "bad.json:1" in capsys.readouterr().err


def test_unknown_field_rejected(tmp_path, capsys):
    spec = write_spec(tmp_path, colour="blue")
    assert main(["analyze", str(spec)]) == 2
    assert "colour" in capsys.readouterr().err


@pytest.mark.parametrize(
    "over",
    [{"delays": [2.0, 1.0], "matrices": [[[0.0]], [[-1.0]], [[0.0]]]}, {"matrices": [[[0.0]]]}, {"n": 2}],
)
def test_inconsistent_system(tmp_path, over):
    assert main(["analyze", str(write_spec(tmp_path, **over))]) == 2


def test_missing_file(tmp_path):
    assert main(["oracle", str(tmp_path / "nope.json")]) == 2


def test_margin_example_a(tmp_path):
    code, rep = run(["margin", str(SPECS / "example_a.json")], tmp_path)
    assert code == 0
    assert rep["margin"] == pytest.approx(1.5707, abs=1e-3)
    lo, hi = rep["bracket"]
    assert hi - lo <= 1e-3 and rep["probes"]


def test_margin_without_sign_change(tmp_path):
    code, _ = run(["margin", str(SPECS / "example_a.json"), "--lo", "0.5", "--hi", "1.0"], tmp_path)
    assert code == 2


def test_oracle_at_critical_delay(tmp_path):
    spec = write_spec(tmp_path, delays=[math.pi / 2])
    code, rep = run(["oracle", str(spec)], tmp_path)
    assert code == 0
    assert abs(rep["spectrum"]["abscissa"]) < 1e-5


def test_export_round_trip(tmp_path):
    out = tmp_path / "a.dat-s"
    assert main(["export-sdpa", str(SPECS / "example_a.json"), "--degree", "1", "--out", str(out)]) == 0
    data = parse_sdpa(out)
    assert data.m > 0
    assert solve(problem_from_sdpa(data)).status == "feasible"
    assert main(["export-sdpa", str(SPECS / "example_a.json")]) == 2


def test_reports_are_deterministic(tmp_path):
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    main(["oracle", str(SPECS / "example_d.json"), "--out", str(a)])
    main(["oracle", str(SPECS / "example_d.json"), "--out", str(b)])
    strip = lambda p: {k: v for k, v in json.loads(p.read_text()).items() if k not in ("elapsed", "created")}
    assert strip(a) == strip(b)


def test_selftest_quick(capsys):
    assert main(["selftest", "--quick"]) == 0
    assert "checks passed" in capsys.readouterr().out


def test_usage_error():
    assert main(["frobnicate"]) == 2
