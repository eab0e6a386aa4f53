import csv
import json
import shutil
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from nhsquare import cli, io
from nhsquare.measure import AtomicMeasure, ComplexMeasure

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 3), st.integers(0, 8), st.booleans(), st.integers(0, 10_000))
def test_measure_round_trip(dim, n, cplx, seed):
    rng = np.random.default_rng(seed)
    pts = rng.normal(size=(n, dim))
    if cplx:
        m = ComplexMeasure(pts, rng.normal(size=n) + 1j * (rng.normal(size=n) + 0.1))
    else:
        m = AtomicMeasure(pts, rng.uniform(0, 1, n))
    back = io.measure_from_doc(json.loads(json.dumps(io.measure_to_doc(m))))
    assert type(back) is type(m) or n == 0
    assert np.array_equal(back.points.reshape(n, dim), pts)
    assert np.array_equal(back.weights, m.weights)


def test_values_round_trip(tmp_path):
    v = np.array([1.5, -2.0 + 0.25j, 3.0])
    io.save_values(v, tmp_path / "v.json")
    assert np.array_equal(io.load_values(tmp_path / "v.json"), v)
    with pytest.raises(ValueError):
        io.measure_from_doc({"dim": 1})


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.delenv(cli.OUT_ENV, raising=False)
    for f in CONFIGS.glob("*.json"):
        shutil.copy(f, tmp_path / f.name)
    return tmp_path


def test_eval_fixture_value(workdir):
    out = workdir / "o"
    assert cli.main(["eval", "--config", str(workdir / "eval.json"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(open(out / "eval.csv")))
    assert float(rows[0]["value"]) == pytest.approx(0.57735, abs=1e-4)
    man = json.loads((out / "manifest.json").read_text())
    assert set(man) >= {"experiment", "seed", "constants", "pass", "paper_refs"}
    assert man["experiment"] == "eval" and man["pass"] is True and man["seed"] == 1


@pytest.mark.parametrize("experiment", ["eval", "goodbad", "whitney", "cz", "weak11", "tb", "goodlambda", "rbmo", "bessel"])
def test_experiments_deterministic(workdir, experiment):
    cfg = str(workdir / f"{experiment}.json")
    before = (workdir / f"{experiment}.json").read_bytes()
    rc1 = cli.run(experiment, cfg, workdir / "a")
    rc2 = cli.run(experiment, cfg, workdir / "b")
    assert rc1 == rc2 == 0
    for f in (workdir / "a").iterdir():
        assert f.read_bytes() == (workdir / "b" / f.name).read_bytes(), f.name
    assert (workdir / f"{experiment}.json").read_bytes() == before


def test_seed_override_changes_output(workdir):
    cfg = str(workdir / "bessel.json")
    cli.run("bessel", cfg, workdir / "a", seed=5)
    cli.run("bessel", cfg, workdir / "b", seed=6)
    assert (workdir / "a" / "manifest.json").read_bytes() != (workdir / "b" / "manifest.json").read_bytes()
    assert json.loads((workdir / "a" / "manifest.json").read_text())["seed"] == 5


def test_missing_file_exit_2_line_anchored(workdir, capsys):
    doc = (workdir / "eval.json").read_text().replace("one_atom.json", "missing.json")
    (workdir / "bad.json").write_text(doc)
    assert cli.main(["eval", "--config", str(workdir / "bad.json"), "--out", str(workdir / "o")]) == 2
    err = capsys.readouterr().err
    line = next(i for i, row in enumerate(doc.splitlines(), 1) if '"mu"' in row)
    assert f"bad.json:{line}:" in err and "missing.json" in err
    assert not (workdir / "o").exists()


def test_invalid_configs_exit_2(workdir, capsys):
    (workdir / "broken.json").write_text('{\n "seed": 1,\n "mu": [1,\n}\n')
    assert cli.run("eval", workdir / "broken.json", workdir / "o") == 2
    assert "broken.json:4:" in capsys.readouterr().err
    (workdir / "seed.json").write_text('{"seed": -3, "mu": "one_atom.json"}')
    assert cli.run("eval", workdir / "seed.json", workdir / "o") == 2
    assert cli.run("eval", workdir / "nowhere.json", workdir / "o") == 2
    assert cli.run("cz", workdir / "eval.json", workdir / "o") == 2


def test_audit_failure_exit_1(workdir, capsys):
    doc = json.loads((workdir / "bessel.json").read_text())
    doc["bessel_bound"] = 1e-6
    (workdir / "strict.json").write_text(json.dumps(doc))
    assert cli.run("bessel", workdir / "strict.json", workdir / "o") == 1
    assert "bessel_bound" in capsys.readouterr().err
    assert json.loads((workdir / "o" / "manifest.json").read_text())["pass"] is False


def test_out_dir_env_override(workdir, monkeypatch):
    target = workdir / "env_out"
    monkeypatch.setenv(cli.OUT_ENV, str(target))
    assert cli.main(["eval", "--config", str(workdir / "eval.json")]) == 0
    assert (target / "manifest.json").is_file()
    flag = workdir / "flag_out"
    assert cli.main(["eval", "--config", str(workdir / "eval.json"), "--out", str(flag)]) == 0
    assert (flag / "manifest.json").is_file()
