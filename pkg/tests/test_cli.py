import json

import numpy as np
import pytest

from hypoheat.cli import LabConfig, main, read_matrix, threads, verify_all
from hypoheat.kernel import read_hypk

RANK1 = {"n": 2, "m": 1, "sigma": [1, 1],
         "fields": [{"coeffs": [{"var": 0, "poly": [{"exps": [0, 0], "num": 1, "den": 1}]}]}]}


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze(capsys):
    code, out, _ = run(capsys, "analyze", "--system", "grushin")
    assert code == 0
    rep = json.loads(out)
    assert (rep["N"], rep["layers"], rep["q"], rep["step"]) == (3, [2, 1], 3, 2)
    assert rep["grading_ok"] and rep["jacobi_defect"] == 0


def test_lift(capsys):
    code, out, _ = run(capsys, "lift", "--system", "power3")
    assert code == 0
    rep = json.loads(out)
    assert rep["Q"] == 7 and rep["exponents"] == [1, 2, 3, 1]


def test_rank_deficient_system_exits_2(capsys, tmp_path):
    path = tmp_path / "rank1.json"
    path.write_text(json.dumps(RANK1))
    code, _, err = run(capsys, "analyze", "--system", str(path))
    assert code == 2
    assert "RankDeficientAtZero rank=1 (need 2)" in err


def test_unknown_system_exits_2(capsys):
    code, _, err = run(capsys, "analyze", "--system", "no-such-system")
    assert code == 2 and err


def test_distance_csv(capsys, tmp_path):
    code, out, _ = run(capsys, "distance", "--system", "grushin", "--x", "0,0", "--y", "0,1")
    assert code == 0
    header, row = out.strip().splitlines()
    assert header == "x,y,d_hat,converged"
    assert row.split(",")[2] == "2.510667210964372"
    pairs = tmp_path / "pairs.csv"
    pairs.write_text("0,0,1,0\n0,0,3,4\n")
    code, out, _ = run(capsys, "distance", "--system", "euclidean", "--pairs", str(pairs))
    d = [float(line.split(",")[2]) for line in out.strip().splitlines()[1:]]
    np.testing.assert_allclose(d, [1.0, 5.0], rtol=1e-9)


def test_ball_csv(capsys, tmp_path):
    out_file = tmp_path / "ball.csv"
    code, _, _ = run(capsys, "ball", "--system", "euclidean", "--radii", "1", "--samples", "2000",
                     "--out", str(out_file))
    assert code == 0
    lines = out_file.read_text().strip().splitlines()
    assert lines[0] == "r,volume,stderr,samples,seed"
    r, vol, se, n, seed = lines[1].split(",")
    assert abs(float(vol) - np.pi) < 4 * float(se) and n == "2000" and "np." not in lines[1]
    code, _, err = run(capsys, "ball", "--system", "euclidean", "--samples", "10")
    assert code == 3 and "10^3" in err


def test_kernel_hypk(capsys, tmp_path):
    path = tmp_path / "k.hypk"
    code, out, _ = run(capsys, "kernel", "--system", "grushin", "--active-nodes", "33",
                       "--passive-nodes", "32,16", "--out", str(path))
    assert code == 0
    meta = json.loads(out)
    assert meta["dims"] == [33, 32, 16] and meta["method"] == "spectral"
    values, spacings, extents = read_hypk(path)
    assert values.shape == (33, 32, 16)
    assert float(values.sum() * np.prod(spacings)) == pytest.approx(meta["mass"], rel=1e-12)
    assert extents[0] == pytest.approx(tuple(meta["extent"][0]))


def test_read_matrix(tmp_path):
    np.testing.assert_array_equal(read_matrix("identity", 2), np.eye(2))
    np.testing.assert_array_equal(read_matrix("2,0.5;0.5,1", 2), [[2, 0.5], [0.5, 1]])
    (tmp_path / "a.json").write_text(json.dumps([[1.0, 0.0], [0.0, 2.0]]))
    np.testing.assert_array_equal(read_matrix(str(tmp_path / "a.json"), 2), np.diag([1.0, 2.0]))


def test_thread_cap(monkeypatch):
    monkeypatch.setenv("HYPOHEAT_THREADS", "1")
    assert threads() == 1


def test_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"suites": ["symbolic"], "bogus": 1}))
    with pytest.raises(ValueError, match="bogus"):
        LabConfig.load(str(path))
    toml = tmp_path / "cfg.toml"
    toml.write_text('suites = ["symbolic"]\nseed = 7\n')
    assert LabConfig.load(str(toml)).seed == 7


def test_verify_all_is_deterministic(tmp_path, capsys):
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("suites: [symbolic, lifting]\nsystems: [grushin, power3]\nlift_samples: 20\nrank_points: 10\n")
    codes = [run(capsys, "verify-all", "--config", str(cfg), "--out", str(tmp_path / d))[0] for d in ("a", "b")]
    assert codes == [0, 0]
    a = (tmp_path / "a" / "report.json").read_bytes()
    assert a == (tmp_path / "b" / "report.json").read_bytes()
    assert (tmp_path / "a" / "report.txt").read_bytes() == (tmp_path / "b" / "report.txt").read_bytes()
    rep = json.loads(a)
    assert rep["summary"]["FAIL"] == 0 and rep["summary"]["PASS"] > 0
    assert {r["system"] for r in rep["rows"]} >= {"grushin", "power3"}
    rows = (tmp_path / "a" / "rows.jsonl").read_text().splitlines()
    assert json.loads(rows[0])["run"]["suites"] == ["symbolic", "lifting"]


def test_verify_all_skipped_and_failed(tmp_path, capsys):
    cfg = tmp_path / "skip.json"
    cfg.write_text(json.dumps({"suites": ["kernel-const"], "kernel_probes": 0,
                               "kernel_active_nodes": 33, "kernel_passive_nodes": [32, 16]}))
    code, _, err = run(capsys, "verify-all", "--config", str(cfg), "--out", str(tmp_path / "s"))
    assert code == 0 and "SKIPPED" in err
    rep = verify_all(LabConfig(suites=["kernel-const"], kernel_width=0.5, kernel_active_nodes=33,
                               kernel_passive_nodes=[32, 16]), tmp_path / "f")
    assert rep["summary"]["required_failed"] > 0
