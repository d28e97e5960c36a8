import io
import json
import subprocess
import sys
from pathlib import Path

import pytest

from krmetric.cli import InputError, RunConfig, main, run
from krmetric.measures import measure_from_json
from krmetric.metric_core import space_from_json

FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def invoke(argv, capsys):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_dist_fixture(capsys):
    code, out, _ = invoke(["dist", FIXTURES / "dirac0.json", FIXTURES / "dirac3.json"], capsys)
    assert code == 0
    assert json.loads(out)["value"] == 3


def test_dist_csv(capsys):
    code, out, _ = invoke(["dist", FIXTURES / "dirac0.json", FIXTURES / "split02.json", "--format", "csv"], capsys)
    assert code == 0
    assert out.splitlines()[0] == "source,target,flow"


def test_heavy_atom_scenario_rows(capsys):
    code, out, _ = invoke(["scenario", "lemma-3.7", "--horizon", "10"], capsys)
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "n,H,dist_over_n" and len(lines) == 11
    for line in lines[1:]:
        n, h, r = map(float, line.split(","))
        assert h == pytest.approx(r, abs=1e-9) and h == pytest.approx(n, abs=1e-9)


def test_profile_scenario_json(capsys):
    code, out, _ = invoke(["scenario", "assertion-1.1", "--horizon", "6", "--format", "json"], capsys)
    assert code == 0
    sup = dict(json.loads(out)["sup_tail"])
    assert set(sup) == {1, 2, 3, 4, 5}


def test_invariant_bernoulli(capsys):
    code, out, _ = invoke(["invariant", FIXTURES / "bernoulli.json", "--tol", "1e-3"], capsys)
    rep = json.loads(out)
    assert code == 0 and rep["converged"] and rep["a_posteriori_bound"] <= 1e-3


def test_non_convergence_exit_code(capsys, monkeypatch):
    monkeypatch.setenv("KR_STEP_LIMIT", "2")
    code, out, err = invoke(["invariant", FIXTURES / "cantor.json", "--tol", "1e-9"], capsys)
    assert code == 2 and not json.loads(out)["converged"] and "tolerance" in err


def test_envelope_and_extend(capsys):
    code, out, _ = invoke(["envelope", FIXTURES / "square.json", "--n", "1"], capsys)
    assert code == 0 and json.loads(out)["values"] == [2.0, 3.0, 2.0, 1.0]
    code, out, _ = invoke(["extend", FIXTURES / "partial.json"], capsys)
    assert code == 0 and json.loads(out)["values"] == [0.0, 1.0, 2.0, 1.0]


def test_cover_and_witness(capsys):
    code, out, _ = invoke(["cover", FIXTURES / "family.json", "--eps", "0.5", "--delta", "0.3"], capsys)
    assert code == 0 and json.loads(out)["ok"]
    code, out, _ = invoke(["witness", "--K", "4"], capsys)
    assert code == 0 and json.loads(out)["indices"] == [1, 2, 3, 4]


def test_witness_premise_failure(capsys):
    code, _, err = invoke(["witness", "--sequence", "constant", "--horizon", "10"], capsys)
    assert code == 1 and "premise" in err


def test_malformed_json_reports_position(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"space": "line.json",\n "atoms": [[0, 1.0]')
    code, _, err = invoke(["dist", bad, FIXTURES / "dirac0.json"], capsys)
    assert code == 1 and f"{bad}:2:" in err


def test_missing_field_is_named(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"space": {"mode": "euclidean", "points": [[0.0]]}}')
    code, _, err = invoke(["dist", bad, bad], capsys)
    assert code == 1 and "'atoms'" in err


def test_domain_error_exit_code(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text('{"space": {"mode": "euclidean", "points": [[0.0]]}, "atoms": [[0, 0.5]]}')
    code, _, err = invoke(["dist", bad, bad], capsys)
    assert code == 1 and "mass 1" in err


def test_run_config_invariants():
    with pytest.raises(InputError):
        RunConfig("dist", tol=0)
    with pytest.raises(InputError):
        RunConfig("dist", cap=0)
    with pytest.raises(InputError):
        RunConfig("plot")


def test_out_file(tmp_path):
    target = tmp_path / "cert.json"
    cfg = RunConfig("dist", [str(FIXTURES / "dirac0.json"), str(FIXTURES / "dirac3.json")], out=str(target))
    assert run(cfg, stdout=io.StringIO(), stderr=io.StringIO()) == 0
    assert json.loads(target.read_text())["value"] == 3


@pytest.mark.parametrize(
    "argv",
    [
        ["scenario", "dirac-sweep", "--horizon", "40", "--seed", "7"],
        ["scenario", "bernoulli", "--tol", "1e-2"],
        ["dist", str(FIXTURES / "dirac0.json"), str(FIXTURES / "split02.json")],
    ],
)
def test_determinism_and_round_trip(argv):
    cmd = [sys.executable, "-m", "krmetric", *argv]
    first = subprocess.run(cmd, capture_output=True, check=True).stdout
    second = subprocess.run(cmd, capture_output=True, check=True).stdout
    assert first == second
    parsed = json.loads(first)
    assert json.dumps(parsed, sort_keys=True, indent=2).encode() + b"\n" == first


def test_seed_changes_sweep(capsys):
    _, a, _ = invoke(["scenario", "dirac-sweep", "--horizon", "20", "--seed", "1", "--format", "csv"], capsys)
    _, b, _ = invoke(["scenario", "dirac-sweep", "--horizon", "20", "--seed", "2", "--format", "csv"], capsys)
    assert a != b


def test_fixtures_parse():
    space = space_from_json(json.loads((FIXTURES / "line.json").read_text()))
    mu = measure_from_json(json.loads((FIXTURES / "dirac3.json").read_text()), lambda ref: space)
    assert mu.atoms == [(3, 1.0)]
