import csv
import json
import subprocess
import sys

import pytest

from sgc_influence.cli import main


@pytest.fixture(scope="module")
def bundle(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--seed", "2", "--nodes-per-block", "20", "--p-in", "0.25", "--p-out", "0.02",
                 "--feature-dim", "4", "--out", str(root)]) == 0
    return root


def _rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _header(path):
    return open(path).readline().strip()


def test_synth_writes_bundle(bundle):
    names = sorted(p.name for p in bundle.iterdir())
    assert names == ["edges.tsv", "features.csv", "ground_truth.json", "labels.tsv", "splits.json"]


def test_train_and_influence(bundle, tmp_path):
    model = tmp_path / "m.json"
    assert main(["train", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--out", str(model)]) == 0
    assert json.loads(model.read_text())["k"] == 2
    for targets in ("edges", "nodes", "samples"):
        out = tmp_path / f"{targets}.csv"
        code = main(["influence", "--data", str(bundle), "--model", str(model), "--targets", targets,
                     "--sample", "5", "--seed", "1", "--eval", "test", "--out", str(out)])
        assert code == 0
        assert _header(out) == "target_type,target_a,target_b,eval_influence,param_change_norm"
        rows = _rows(out)
        assert len(rows) == 5 and {r["target_type"] for r in rows} == {targets[:-1]}


def test_validate_outputs(bundle, tmp_path):
    out, summary = tmp_path / "s.csv", tmp_path / "s.json"
    assert main(["validate", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--targets", "edges",
                 "--sample", "15", "--out", str(out), "--summary", str(summary)]) == 0
    assert _header(out) == "target_type,target_a,target_b,estimated,actual"
    info = json.loads(summary.read_text())
    assert info["n_targets"] == 15 and info["n_failed"] == 0 and info["rho"] > 0.5


def test_bound_sweep_outputs(bundle, tmp_path):
    out = tmp_path / "sweep.csv"
    assert main(["bound-sweep", "--data", str(bundle), "--k", "2", "--lambdas", "1e-1,1e-2",
                 "--edges", "4", "--seed", "0", "--lipschitz", "2.0", "--out", str(out)]) == 0
    rows = _rows(out)
    assert len(rows) == 8
    assert _header(out).startswith("lambda,edge_i,edge_j,degree_sum,estimated,actual,observed_err,bound")
    assert all(float(r["bound"]) >= float(r["observed_err"]) for r in rows)


def test_prune_and_attack(bundle, tmp_path):
    traj = tmp_path / "p.csv"
    assert main(["prune", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--budget", "3",
                 "--out", str(traj)]) == 0
    header = "step,removed_type,removed_a,removed_b,estimated_influence,val_accuracy,test_accuracy,val_loss"
    assert _header(traj) == header
    assert _rows(traj)[0]["step"] == "0"
    plan = tmp_path / "plan.csv"
    assert main(["attack", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--kind", "nodes",
                 "--rate", "0.1", "--baseline", "degree", "--seed", "3", "--out", str(traj),
                 "--plan-out", str(plan)]) == 0
    assert _header(traj) == header
    assert all(r["strategy"] == "degree" for r in _rows(plan))
    assert main(["attack", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--count", "2",
                 "--out", str(traj)]) == 0
    assert len(_rows(traj)) == 3


def test_reports_are_byte_identical(bundle, tmp_path):
    def run(tag):
        out = tmp_path / f"{tag}.csv"
        summary = tmp_path / f"{tag}.json"
        main(["validate", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--targets", "nodes",
              "--sample", "6", "--seed", "4", "--out", str(out), "--summary", str(summary)])
        traj = tmp_path / f"{tag}-attack.csv"
        main(["attack", "--data", str(bundle), "--k", "2", "--lambda", "0.1", "--rate", "0.05",
              "--baseline", "random", "--seed", "7", "--out", str(traj)])
        return out.read_bytes(), summary.read_bytes(), traj.read_bytes()

    assert run("a") == run("b")


def test_synth_is_byte_identical(tmp_path):
    for tag in ("a", "b"):
        assert main(["synth", "--seed", "5", "--out", str(tmp_path / tag)]) == 0
    for name in ("edges.tsv", "features.csv", "labels.tsv", "splits.json", "ground_truth.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_validation_error_exit_code(bundle, tmp_path, capsys):
    assert main(["train", "--data", str(tmp_path / "missing"), "--lambda", "0.1", "--out", "x"]) == 2
    assert main(["train", "--data", str(bundle), "--lambda", "-1", "--out", str(tmp_path / "m")]) == 2
    assert main(["attack", "--data", str(bundle), "--lambda", "0.1", "--rate", "2",
                 "--out", str(tmp_path / "t")]) == 2
    assert "error:" in capsys.readouterr().err


def test_nonconvergence_exit_code(bundle, tmp_path):
    assert main(["train", "--data", str(bundle), "--lambda", "1e-6", "--max-iters", "1",
                 "--out", str(tmp_path / "m")]) == 3


def test_bad_flags_exit_2(bundle):
    with pytest.raises(SystemExit) as info:
        main(["attack", "--data", str(bundle), "--lambda", "0.1", "--rate", "0.1", "--count", "2",
              "--out", "x"])
    assert info.value.code == 2


def test_module_entry_point(bundle, tmp_path):
    out = tmp_path / "m.json"
    proc = subprocess.run([sys.executable, "-m", "sgc_influence", "train", "--data", str(bundle),
                           "--lambda", "0.1", "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    assert "test_accuracy" in json.loads(proc.stdout)
