import subprocess
import sys

import pytest

from groundloc.cli import main


def run(*argv):
    return subprocess.run([sys.executable, "-m", "groundloc", *argv], capture_output=True, text=True)


@pytest.fixture(scope="module")
def worlds(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["--seed", "4", "gen-world", "--out", str(d / "maps"), "--count", "2"]) == 0
    assert main(["gen-world", "--seed", "4", "--out", str(d / "plain"), "--count", "3", "--no-map"]) == 0
    return d


def test_gen_world_outputs(worlds):
    assert sorted(p.name for p in (worlds / "maps").iterdir()) == [
        "scenario_0000.bevm", "scenario_0000.json", "scenario_0001.bevm", "scenario_0001.json"]
    assert len(list((worlds / "plain").glob("*.json"))) == 3
    assert not list((worlds / "plain").glob("*.bevm"))


def test_gen_world_seed_precedence(worlds, tmp_path):
    main(["--seed", "9", "gen-world", "--seed", "4", "--out", str(tmp_path), "--count", "2"])
    for name in ("scenario_0000.json", "scenario_0001.bevm"):
        assert (tmp_path / name).read_bytes() == (worlds / "maps" / name).read_bytes()


def test_eval_loc(worlds, tmp_path, capsys):
    out = tmp_path / "loc.csv"
    rc = main(["eval-loc", "--scenarios", str(worlds / "maps"), "--identity", "--trials", "2", "--out", str(out)])
    assert rc == 0
    assert "r@1=" in capsys.readouterr().out
    assert len(out.read_text().splitlines()) == 3


def test_train_and_eval_with_weights(worlds, tmp_path):
    w = tmp_path / "w.lpw"
    assert main(["train", "--scenarios", str(worlds / "maps"), "--steps", "2", "--out", str(w)]) == 0
    assert w.read_bytes()[:4] == b"LPW1"
    assert (tmp_path / "w.loss.csv").read_text().startswith("step,loss\n")
    out = tmp_path / "loc.csv"
    assert main(["eval-loc", "--scenarios", str(worlds / "maps"), "--weights", str(w), "--trials", "1",
                 "--out", str(out)]) == 0


def test_jitter_sweep(worlds, tmp_path):
    out = tmp_path / "s.csv"
    assert main(["jitter-sweep", "--scenarios", str(worlds / "plain"), "--axis", "rot", "--levels", "0,1",
                 "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 3


def test_bench(tmp_path):
    out = tmp_path / "b.csv"
    assert main(["bench", "--configs", "identity,tiny", "--sizes", "24", "--reps", "3", "--out", str(out),
                 "--backends", str(tmp_path / "k.csv")]) == 0
    assert len(out.read_text().splitlines()) == 5
    assert (tmp_path / "k.csv").exists()


def test_grad_check():
    r = run("grad-check", "--seed", "1")
    assert r.returncode == 0 and "PASS" in r.stdout


def test_failures_exit_nonzero_with_one_line(tmp_path):
    r = run("eval-loc", "--scenarios", str(tmp_path / "none"), "--identity", "--out", str(tmp_path / "x.csv"))
    assert r.returncode == 1
    assert r.stderr.count("\n") == 1 and "error" in r.stderr
    r = run("bench", "--configs", "huge", "--out", str(tmp_path / "b.csv"))
    assert r.returncode == 1 and "unknown net config" in r.stderr
    r = run("frobnicate")
    assert r.returncode == 2 and r.stderr.count("\n") == 1
    r = run("jitter-sweep", "--scenarios", ".", "--axis", "rot", "--levels", "a,b", "--out", "x")
    assert r.returncode == 2 and r.stderr.count("\n") == 1


def test_train_rejects_mapless_corpus(worlds, tmp_path):
    assert main(["train", "--scenarios", str(worlds / "plain"), "--steps", "1", "--out", str(tmp_path / "w")]) == 1
