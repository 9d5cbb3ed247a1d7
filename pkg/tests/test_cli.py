import json
import subprocess
import sys

import numpy as np
import pytest

from intercept.cli import main
from intercept.config import config_from_text
from intercept.estimator import write_measurement_log
from intercept.sim import ThrowSpec, generate_throw, write_truth_log

TOY = "trials: 3\ntree:\n  grid: [3, 3, 3]\n  d_max: 1\n  eps: 0.15\n"


@pytest.fixture
def toy(tmp_path):
    p = tmp_path / "toy.yaml"
    p.write_text(TOY)
    return p


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def noiseless_throw(outlier_rate=0.0, seed=0):
    spec = ThrowSpec((-7.0, 0.0, 1.2), (10.0, 0.1, 4.0), (0.01,) * 3, (0.1,) * 3, 0.0, seed,
                     outlier_rate=outlier_rate, outlier_magnitude=2.0)
    return generate_throw(spec)


def test_help_lists_subcommands_and_config_keys():
    out = subprocess.run([sys.executable, "-m", "intercept.cli", "experiment", "--help"],
                         capture_output=True, text=True, check=True).stdout
    assert "filter.sigma0" in out and "tree.eps" in out
    top = subprocess.run([sys.executable, "-m", "intercept.cli", "--help"],
                         capture_output=True, text=True, check=True).stdout
    for cmd in ("build-tree", "replay-filter", "trial", "experiment"):
        assert cmd in top


def test_build_tree_is_deterministic(capsys, toy, tmp_path):
    code, out, _ = run(capsys, "build-tree", "--config", toy, "--out", tmp_path / "a.json")
    assert code == 0
    stats = json.loads(out)
    assert stats["nodes"] > 1 and stats["max_depth"] == stats["d_max"] + 1 == 2
    assert run(capsys, "build-tree", "--config", toy, "--out", tmp_path / "b.json")[0] == 0
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()


def test_malformed_config_exits_2_with_line(capsys, tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("seed: 1\ntree:\n  eps: -0.1\n")
    code, _, err = run(capsys, "build-tree", "--config", bad, "--out", tmp_path / "t.json")
    assert code == 2
    assert f"{bad}:3:" in err
    assert not (tmp_path / "t.json").exists()


def test_missing_config_exits_2(capsys, tmp_path):
    assert run(capsys, "trial", "--config", tmp_path / "none.yaml")[0] == 2


def test_replay_noiseless_log_tracks_truth(capsys, tmp_path):
    th = noiseless_throw()
    write_measurement_log(tmp_path / "m.csv", th.measurements)
    write_truth_log(tmp_path / "t.csv", th)
    code, out, _ = run(capsys, "replay-filter", tmp_path / "m.csv", "--truth", tmp_path / "t.csv",
                       "--dump", tmp_path / "d.csv")
    assert code == 0
    rep = json.loads(out)
    assert rep["records"] == rep["matched"] == len(th.measurements)
    # the first estimate starts at the measured point, later ones are pulled by a noiseless stream
    assert rep["position_rmse"] < 1e-2
    dump = np.loadtxt(tmp_path / "d.csv", delimiter=",", skiprows=1)
    assert dump.shape == (len(th.measurements), 14)
    assert np.all(dump[:, 7:13] >= 0)


def test_replay_counts_outliers(capsys, tmp_path):
    th = noiseless_throw(outlier_rate=0.1, seed=4)
    assert th.outliers
    write_measurement_log(tmp_path / "m.csv", th.measurements)
    code, out, _ = run(capsys, "replay-filter", tmp_path / "m.csv")
    assert code == 0
    rep = json.loads(out)
    # gating starts once the innovation window holds enough samples
    late = [i for i in th.outliers if i > 20]
    assert late
    assert set(late) <= set(rep["gated_indices"])


def test_replay_empty_or_broken_log_exits_2(capsys, tmp_path):
    (tmp_path / "e.csv").write_text("# nothing here\n")
    code, _, err = run(capsys, "replay-filter", tmp_path / "e.csv")
    assert code == 2 and "no measurement" in err
    (tmp_path / "b.csv").write_text("0.0, 1, 2, 3\n0.02, 1, x, 3\n")
    code, _, err = run(capsys, "replay-filter", tmp_path / "b.csv")
    assert code == 2 and ":2" in err
    assert run(capsys, "replay-filter", tmp_path / "missing.csv")[0] == 2


def test_trial_prints_both_policies_and_writes_decisions(capsys, toy, tmp_path):
    code, out, _ = run(capsys, "trial", "--config", toy, "--index", 1, "--cache", tmp_path,
                       "--decisions", tmp_path / "dec")
    assert code == 0
    recs = json.loads(out)
    assert set(recs) == {"qmdp", "naive"}
    assert recs["qmdp"]["trial"] == 1
    lines = (tmp_path / "dec" / "decisions_qmdp.jsonl").read_text().splitlines()
    assert lines and all("policy" in json.loads(x) or json.loads(x) for x in lines)
    # the cached tree is reused on the second call
    assert run(capsys, "trial", "--config", toy, "--index", 1, "--cache", tmp_path)[1] == out


def test_experiment_rerun_is_byte_identical(capsys, toy, tmp_path):
    for d in ("a", "b"):
        code, out, _ = run(capsys, "experiment", "--config", toy, "--seed", 11,
                           "--out-dir", tmp_path / d)
        assert code == 0
    assert "paired comparison" in out
    for name in ("trials.jsonl", "summary.json", "paired.csv", "success_vs_noise.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert summary["seed"] == 11 and summary["trials"] == 3
    other = tmp_path / "c"
    run(capsys, "experiment", "--config", toy, "--seed", 12, "--out-dir", other)
    assert (other / "trials.jsonl").read_bytes() != (tmp_path / "a" / "trials.jsonl").read_bytes()


def test_config_file_wins_ties_and_flags_fill_gaps(capsys, toy, tmp_path):
    code, out, _ = run(capsys, "experiment", "--config", toy, "--trials", 1, "--policy", "naive",
                       "--out-dir", tmp_path)
    assert code == 0
    s = json.loads((tmp_path / "summary.json").read_text())
    assert s["trials"] == 3
    assert set(s["policies"]) == {"naive"}


def test_experiment_zero_trials_and_bench(capsys, toy, tmp_path):
    cfg = tmp_path / "zero.yaml"
    cfg.write_text(TOY.replace("trials: 3", "trials: 0"))
    code, out, _ = run(capsys, "experiment", "--config", cfg, "--out-dir", tmp_path / "z")
    assert code == 0 and "trials: 0" in out
    code, out, _ = run(capsys, "experiment", "--config", cfg, "--out-dir", tmp_path / "z",
                       "--bench", "--bench-cycles", 20)
    assert code == 0
    b = json.loads((tmp_path / "z" / "bench.json").read_text())
    assert b["cycles"] == 20 and b["median_ms"] > 0


def test_cli_config_matches_loader(toy):
    assert config_from_text(toy.read_text()).trials == 3
