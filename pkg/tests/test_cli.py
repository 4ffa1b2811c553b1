import json

import pytest

from incidence_lab import __version__
from incidence_lab.cli import main


def _write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture
def singleton(tmp_path):
    return (
        _write(tmp_path / "p.txt", "scale m=4 kind=cell\n3 5\n"),
        _write(tmp_path / "l.txt", "scale m=4 kind=dual\n0 5\n"),
    )


def test_count_singleton(singleton, capsys):
    assert main(["count", *singleton]) == 0
    assert capsys.readouterr().out == "1\n"


def test_malformed_file_reports_line(tmp_path, singleton, capsys):
    bad = _write(tmp_path / "bad.txt", "scale m=4 kind=cell\n3 5\n3 x\n")
    assert main(["count", bad, singleton[1]]) == 2
    assert "line 3" in capsys.readouterr().err


def test_distinct_validation_errors(tmp_path, singleton, capsys):
    other = _write(tmp_path / "l5.txt", "scale m=5 kind=dual\n0 5\n")
    assert main(["count", singleton[0], other]) == 2
    assert "scale mismatch" in capsys.readouterr().err
    assert main(["count", str(tmp_path / "missing.txt"), singleton[1]]) == 2
    assert "cannot read" in capsys.readouterr().err
    assert main(["count", singleton[1], singleton[1]]) == 2
    assert "expected a cell family" in capsys.readouterr().err
    assert main(["bound", *singleton, "--s", "2", "--t", "1"]) == 2
    assert "(0, 1]" in capsys.readouterr().err
    assert main(["clique", *singleton, "--s", "1", "--t", "1", "--u", "1", "--params", "{bad"]) == 2
    assert "line 1" in capsys.readouterr().err


def test_pipeline_failure_exit_code(tmp_path, capsys):
    p = _write(tmp_path / "p.txt", "scale m=4 kind=cell\n1 1\n")
    l = _write(tmp_path / "l.txt", "scale m=4 kind=dual\n0 -16\n")
    assert main(["clique", p, l, "--s", "1", "--t", "1", "--u", "1"]) == 3
    assert "pipeline failure" in capsys.readouterr().err


def test_gen_is_byte_identical_and_reports_provenance(tmp_path):
    outs = []
    for name in ("a", "b"):
        d = tmp_path / name
        assert main(["gen", "sheaf", "--s", "1", "--t", "1", "--m", "8", "--seed", "3", "--out", str(d)]) == 0
        outs.append({f.name: f.read_bytes() for f in sorted(d.iterdir())})
    assert outs[0] == outs[1]
    assert set(outs[0]) == {"P.txt", "L.txt", "labels.json", "report.json"}
    rep = json.loads(outs[0]["report.json"])
    assert rep["version"] == __version__ and rep["params"]["seed"] == 3


def test_pipeline_commands_embed_digests(tmp_path, capsys):
    d = tmp_path / "g"
    main(["gen", "sheaf", "--s", "1", "--t", "1", "--m", "8", "--out", str(d)])
    P, L = str(d / "P.txt"), str(d / "L.txt")
    params = _write(tmp_path / "params.json", json.dumps({"n_max": 3}))
    assert main(["exhaust", P, L, "--s", "1", "--t", "1", "--u", "1", "--params", params, "--out", str(tmp_path / "ex")]) == 0
    rep = json.loads((tmp_path / "ex" / "report.json").read_text())
    assert set(rep["inputs"]) == {P, L} and rep["params"]["clique"]["n_max"] == 3
    assert len(rep["result"]["cliques"]) <= 3
    assert main(["clique", P, L, "--s", "1", "--t", "1", "--u", "1", "--trace", "--out", str(tmp_path / "c")]) == 0
    rep = json.loads((tmp_path / "c" / "report.json").read_text())
    assert rep["result"]["theta"] >= 0.5 and rep["result"]["trace"]
    cp, cl = str(tmp_path / "c" / "P_clique.txt"), str(tmp_path / "c" / "L_clique.txt")
    capsys.readouterr()
    assert main(["sheaf", cp, cl, "--theta", "0.5"]) == 0
    assert json.loads(capsys.readouterr().out)["result"]["good"]
    assert main(["bound", P, L, "--s", "1", "--t", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["result"]["ratio"] < 1
    assert main(["verify", P, "--s", "1", "--C", "8"]) == 0
    assert json.loads(capsys.readouterr().out)["result"]["katz_tao_ok"]
    assert main(["count", P, L, "--out", str(tmp_path / "n")]) == 0
    assert (tmp_path / "n" / "per_tube.csv").read_text().startswith("tube_a,tube_b,count\n")


def test_uniformize_and_branching(tmp_path, capsys):
    d = tmp_path / "g"
    main(["gen", "random", "--m", "6", "--count", "300", "--out", str(d)])
    assert main(["uniformize", str(d / "P.txt"), "--H", "2", "--out", str(tmp_path / "u")]) == 0
    assert (tmp_path / "u" / "uniform.txt").exists()
    capsys.readouterr()
    assert main(["branching", str(d / "P.txt"), "--H", "1"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("j,beta\n") and "a_left,a_right,sigma" in out


def test_sweep_fit(tmp_path):
    assert main(["sweep", "--s", "1", "--t", "1", "--ms", "6,8,10", "--jobs", "2", "--out", str(tmp_path)]) == 0
    fit = (tmp_path / "fit.csv").read_text().splitlines()
    slope = float(fit[-1].split(",")[1])
    assert abs(slope - 1.5) <= 0.15
    assert (tmp_path / "sweep.csv").read_text().startswith("m,seed,P,L,incidences")
