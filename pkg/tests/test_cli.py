import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from lrtune.cli import RunRegistry, config_hash, load_schedule, main, save_schedule
from lrtune.trace import Schedule

SINGLE = {
    "seed": 3,
    "runner": {"record_every": 25},
    "single": {"Q": 3, "d": 3, "total_steps": 300, "lr_min": 0.01, "lr_max": 1.0, "n_mc": 32, "grid_points": 17,
               "num_inducing": 15, "fit_steps": 80, "refit_steps": 30},
    "baselines": {"n_constant": 3, "gammas": [0.5, 0.9], "n_initial": 2},
    "export": {"n_samples": 64},
}

MULTI = {
    "seed": 5,
    "runner": {"record_every": 25},
    "family": {"family_seed": 0, "M": 2, "spread": 0.5, "dim": 4},
    "multi": {"N0": 2, "N": 4, "d": 2, "total_steps": 200, "num_inducing": 12, "n_mc": 16, "n_mc_J": 16,
              "n_outer": 2, "n_inner": 4, "n_starts": 1, "grad_iters": 1, "grid_points": 9, "fit_steps": 60,
              "refit_steps": 20, "n_hull": 8},
    "warm_start": {"n_w": 4, "n_traj": 4, "n_candidates": 2, "embedding_steps": 10},
    "export": {"n_samples": 64, "grid": 64},
}


def write_cfg(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return str(p)


def run_cli(*args):
    return subprocess.run([sys.executable, "-m", "lrtune", *args], capture_output=True, text=True)


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


@pytest.fixture(scope="module")
def single_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("single")
    cfg = write_cfg(tmp, SINGLE)
    assert main(["tune-single", "--config", cfg, "--out", str(tmp / "out")]) == 0
    return tmp, cfg


@pytest.fixture(scope="module")
def multi_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("multi")
    cfg = write_cfg(tmp, MULTI)
    assert main(["tune-multi", "--config", cfg, "--out", str(tmp / "out")]) == 0
    return tmp, cfg


# -- exit codes -----------------------------------------------------------------

def test_usage_errors_exit_2(tmp_path):
    assert main([]) == 2
    assert main(["nope"]) == 2
    assert main(["tune-single", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == 2
    bad = write_cfg(tmp_path, {"seed": 1, "single": {"Q": 3, "bogus": 1}})
    assert main(["tune-single", "--config", bad, "--out", str(tmp_path / "o")]) == 2
    worse = write_cfg(tmp_path, {"single": {"lr_min": 1.0, "lr_max": 0.1}}, "w.json")
    assert main(["tune-single", "--config", worse, "--out", str(tmp_path / "o")]) == 2
    (tmp_path / "junk.json").write_text("{not json")
    assert main(["run-baselines", "--config", str(tmp_path / "junk.json"), "--out", str(tmp_path / "o")]) == 2
    assert main(["export-plot", "--registry", str(tmp_path / "empty"), "--kind", "surface",
                 "--out", str(tmp_path / "s.csv")]) == 2


def test_runtime_failure_exits_1(tmp_path):
    cfg = dict(SINGLE, single=dict(SINGLE["single"], lr_min=5.0, lr_max=50.0, use_classifier=False))
    assert main(["tune-single", "--config", write_cfg(tmp_path, cfg), "--out", str(tmp_path / "o")]) == 1


def test_warm_start_requires_a_multi_task_snapshot(single_run, tmp_path):
    tmp, cfg = single_run
    snap = tmp / "out" / "snapshots" / "model.json"
    assert snap.is_file()
    assert main(["warm-start", "--config", cfg, "--snapshot", str(snap), "--out", str(tmp_path / "w")]) == 2
    assert main(["warm-start", "--config", cfg, "--out", str(tmp_path / "w")]) == 2


# -- registry and schemas ---------------------------------------------------------

def test_registry_sequence_and_partial_line_recovery(tmp_path):
    reg = RunRegistry(tmp_path)
    for i in range(3):
        reg.append("x", {"i": i}, "h")
    with open(reg.path, "ab") as fh:
        fh.write(b'{"seq": 4, "kind": "x", "trunc')
    recs = reg.records()
    assert [r["seq"] for r in recs] == [1, 2, 3]
    assert reg.append("y", {}, "h")["seq"] == 4
    assert reg.path.read_bytes().endswith(b"\n")
    assert [r["kind"] for r in reg.records("y")] == ["y"]


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_schedule_file_roundtrip(tmp_path):
    s = Schedule.uniform(100, [0.1, 0.9], 1e-4, 1.0)
    save_schedule(tmp_path / "s.json", s)
    assert load_schedule(tmp_path / "s.json") == s


def test_single_outputs(single_run):
    tmp, _ = single_run
    out = tmp / "out"
    reg = RunRegistry(out)
    res = reg.records("result")[-1]
    assert res["audit"]["cap_violations"] == 0 and res["audit"]["checkpoint_mismatches"] == 0
    seqs = [r["seq"] for r in reg.records()]
    assert seqs == list(range(1, len(seqs) + 1))
    assert load_schedule(out / "schedule.json").d == 3
    rows = read_csv(out / "traces_rates.csv")
    assert rows and set(rows[0]) == {"t", "run", "y", "lr"}


def test_multi_outputs(multi_run):
    tmp, _ = multi_run
    out = tmp / "out"
    reg = RunRegistry(out)
    assert len(reg.records("run")) == MULTI["multi"]["N"]
    assert len(reg.records("round")) == MULTI["multi"]["N"] - MULTI["multi"]["N0"]
    assert {p.stem for p in (out / "schedules").glob("*.json")} == {"quad0", "quad1"}
    pva = read_csv(out / "predicted_vs_actual.csv")
    assert all(float(r["q05"]) <= float(r["q50"]) <= float(r["q95"]) for r in pva)
    assert len(read_csv(out / "embeddings.csv")) == 2


def test_export_plot_kinds(multi_run):
    tmp, _ = multi_run
    reg = str(tmp / "out")
    surf = tmp / "surface.csv"
    assert main(["export-plot", "--registry", reg, "--kind", "surface", "--out", str(surf)]) == 0
    rows = read_csv(surf)
    assert len(rows) == 64 * 64 and {"phi_f1", "phi_f2"} <= set(rows[0])
    assert all(float(r["phi_f1"]) >= 0 for r in rows)
    fan = tmp / "fan.csv"
    assert main(["export-plot", "--registry", reg, "--kind", "fan", "--out", str(fan), "--task", "1"]) == 0
    q = np.array([[float(r[k]) for k in ("q05", "q50", "q95")] for r in read_csv(fan)])
    assert np.all(np.diff(q, axis=1) >= 0)
    assert np.all(np.diff(q[:, 1]) >= -1e-12)   # monotone link: medians cannot decrease
    for kind in ("traces", "embeddings"):
        assert main(["export-plot", "--registry", reg, "--kind", kind, "--out", str(tmp / f"{kind}.csv")]) == 0
    assert main(["export-plot", "--registry", reg, "--kind", "bogus", "--out", str(tmp / "b.csv")]) == 2


def test_warm_start_and_baselines_outputs(multi_run, single_run, tmp_path):
    tmp, cfg = multi_run
    snap = tmp / "out" / "snapshots" / "model.json"
    assert main(["warm-start", "--config", cfg, "--snapshot", str(snap), "--out", str(tmp_path / "w")]) == 0
    ws = json.loads((tmp_path / "w" / "warm_start.json").read_text())
    assert len(ws["w_new"]) == 2 and ws["prefix_intervals"] == 1
    assert load_schedule(tmp_path / "w" / "schedule.json").d == MULTI["multi"]["d"]
    _, scfg = single_run
    assert main(["run-baselines", "--config", scfg, "--out", str(tmp_path / "b")]) == 0
    rows = read_csv(tmp_path / "b" / "baselines.csv")
    assert [r["kind"] for r in rows].count("decay") == 4 and [r["kind"] for r in rows].count("constant") == 3


# -- determinism across processes ------------------------------------------------------

def test_commands_are_byte_identical_across_processes(tmp_path, multi_run):
    s = write_cfg(tmp_path, SINGLE, "s.json")
    m = write_cfg(tmp_path, MULTI, "m.json")
    snap = str(multi_run[0] / "out" / "snapshots" / "model.json")
    cmds = {
        "tune-single": ["--config", s],
        "run-baselines": ["--config", s],
        "tune-multi": ["--config", m],
        "warm-start": ["--config", m, "--snapshot", snap],
    }
    for name, extra in cmds.items():
        trees = []
        for rep in range(2):
            out = tmp_path / f"{name}{rep}"
            r = run_cli(name, *extra, "--out", str(out), "--seed", "11")
            assert r.returncode == 0, r.stderr
            if name == "tune-multi":
                for kind in ("surface", "fan", "traces", "embeddings"):
                    r = run_cli("export-plot", "--registry", str(out), "--kind", kind, "--out", str(out / f"{kind}.csv"))
                    assert r.returncode == 0, r.stderr
            trees.append(tree_bytes(out))
        assert trees[0].keys() == trees[1].keys()
        for k in trees[0]:
            assert trees[0][k] == trees[1][k], f"{name}: {k} differs"
