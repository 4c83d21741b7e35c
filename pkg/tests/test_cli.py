import dataclasses
import json
import os
import subprocess
import sys

import numpy as np
import pytest

from repri.cli import build_parser, main
from repri.core import Hyperparams
from repri.evaluation import ablation_suite, SynthTaskSource, mismatch_suite_config
from repri.taskio import SynthConfig, synth_episode, write_task_container


@pytest.fixture(scope="module")
def task_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("tasks")
    rc = main(["synth", "--n", "6", "--out", str(out), "--seed", "3", "--shift", "0.3"])
    assert rc == 0
    return out


def test_synth_writes_containers(task_dir):
    assert len(list(task_dir.glob("*.rpri"))) == 6


def test_infer_summary_has_full_trajectory(task_dir, tmp_path):
    summary = tmp_path / "s.json"
    out = tmp_path / "o.rpri"
    rc = main(["infer", "--task", str(task_dir / "task_00000.rpri"),
               "--summary", str(summary), "--out", str(out)])
    assert rc == 0
    data = json.loads(summary.read_text())
    assert len(data["loss_trajectory"]) == 51  # t = 0..50
    assert len(data["pi_history"]) == 51
    assert data["iou"] is not None
    from repri.taskio import read_container

    arrays = read_container(out).arrays
    assert arrays["query_probs"].shape == (16, 16, 2)
    assert arrays["query_mask_pred"].shape == (16, 16)


def test_infer_explicit_defaults_equivalent(task_dir, tmp_path):
    s1, s2 = tmp_path / "a.json", tmp_path / "b.json"
    task = str(task_dir / "task_00001.rpri")
    assert main(["infer", "--task", task, "--summary", str(s1)]) == 0
    assert main(["infer", "--task", task, "--summary", str(s2),
                 "--iters", "50", "--lr", "0.025", "--t-pi", "10", "--tau", "20"]) == 0
    assert s1.read_bytes() == s2.read_bytes()


def test_infer_oracle_without_ground_truth_exits_2(tmp_path, capsys):
    _, task = synth_episode(SynthConfig(), 1)
    bare = dataclasses.replace(task, query_gt=None)
    path = tmp_path / "bare.rpri"
    write_task_container(path, bare)
    rc = main(["infer", "--task", str(path), "--mode", "oracle"])
    assert rc == 2
    assert "MissingGroundTruth" in capsys.readouterr().err


def test_bench_deterministic_across_jobs(task_dir, tmp_path):
    base = ["bench", "--tasks", str(task_dir), "--runs", "2", "--tasks-per-run", "4",
            "--seed", "42"]
    r1, r2, r3 = (tmp_path / n for n in ("r1.json", "r2.json", "r3.json"))
    assert main(base + ["--out", str(r1)]) == 0
    assert main(base + ["--out", str(r2)]) == 0
    assert main(base + ["--out", str(r3), "--jobs", "2"]) == 0
    assert r1.read_bytes() == r2.read_bytes() == r3.read_bytes()


def test_bench_delta_csv(task_dir, tmp_path):
    csv = tmp_path / "d.csv"
    rc = main(["bench", "--tasks", str(task_dir), "--runs", "1", "--tasks-per-run", "3",
               "--seed", "1", "--out", str(tmp_path / "r.json"), "--delta-csv", str(csv)])
    assert rc == 0
    lines = csv.read_text().splitlines()
    assert lines[0] == "task,delta0,delta_tpi"
    assert len(lines) == 4


def test_sweep_grid_includes_zero(tmp_path):
    out = tmp_path / "sweep.json"
    csv = tmp_path / "sweep.csv"
    rc = main(["sweep", "--tasks", "synth", "--deltas", "-0.5:1.0:0.25",
               "--n-tasks", "2", "--seed", "1", "--out", str(out), "--csv", str(csv)])
    assert rc == 0
    rows = json.loads(out.read_text())["rows"]
    assert [r["delta"] for r in rows] == [-0.5, -0.25, 0.0, 0.25, 0.5, 0.75, 1.0]
    assert len(csv.read_text().splitlines()) == 8


def test_sweep_comma_list(tmp_path):
    rc = main(["sweep", "--tasks", "synth", "--deltas", "-0.25,0,0.25",
               "--n-tasks", "2", "--seed", "1", "--out", str(tmp_path / "s.json")])
    assert rc == 0
    rows = json.loads((tmp_path / "s.json").read_text())["rows"]
    assert [r["delta"] for r in rows] == [-0.25, 0.0, 0.25]


def test_ablate_matches_api(tmp_path):
    out = tmp_path / "ab.json"
    rc = main(["ablate", "--tasks", "synth", "--n-tasks", "3", "--seed", "4",
               "--out", str(out)])
    assert rc == 0
    rows = json.loads(out.read_text())["rows"]
    api_rows = ablation_suite(SynthTaskSource(SynthConfig(k=1)), Hyperparams(), n_tasks=3, seed=4)
    assert [r["losses"] for r in rows] == ["ce", "ce+h", "full"]
    assert [r["mean_miou"] for r in rows] == [r["mean_miou"] for r in api_rows]


def test_gradcheck_deterministic_reports(tmp_path):
    g1, g2 = tmp_path / "g1.json", tmp_path / "g2.json"
    assert main(["gradcheck", "--trials", "4", "--seed", "7", "--out", str(g1)]) == 0
    assert main(["gradcheck", "--trials", "4", "--seed", "7", "--out", str(g2)]) == 0
    assert g1.read_bytes() == g2.read_bytes()


def test_usage_errors_exit_1():
    with pytest.raises(SystemExit) as exc:
        main(["bench"])  # --tasks is required
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["bench", "--tasks", "synth", "--no-such-flag"])
    assert exc.value.code == 1


def test_value_validation_exits_1(tmp_path, capsys):
    assert main(["bench", "--tasks", str(tmp_path / "nowhere"), "--runs", "1",
                 "--tasks-per-run", "1"]) == 1
    assert main(["sweep", "--tasks", "synth", "--deltas", "zero", "--n-tasks", "1"]) == 1
    assert main(["bench", "--tasks", "synth", "--losses", "dice"]) == 1
    assert main(["infer", "--task", str(tmp_path / "missing.rpri")]) == 1
    capsys.readouterr()


def test_runtime_failures_exit_2(tmp_path, capsys):
    corrupt = tmp_path / "corrupt.rpri"
    corrupt.write_bytes(b"XXXX garbage")
    assert main(["infer", "--task", str(corrupt)]) == 2
    assert "BadMagic" in capsys.readouterr().err


def test_help_documents_defaults(capsys):
    for sub in ("infer", "bench", "ablate", "sweep", "synth", "gradcheck"):
        with pytest.raises(SystemExit) as exc:
            main([sub, "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        assert "--help" not in ("",)  # keep capsys drained per subcommand
        if sub in ("infer", "bench", "ablate", "sweep"):
            assert "0.025" in text and "default 50" in text and "default 10" in text
            assert "default 20" in text


def test_repri_jobs_env_default(monkeypatch):
    monkeypatch.setenv("REPRI_JOBS", "3")
    args = build_parser().parse_args(["bench", "--tasks", "synth"])
    assert args.jobs == 3


def test_cli_entry_point_runs_as_module(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "repri.cli", "gradcheck", "--trials", "2", "--seed", "1"],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0
    assert "gradcheck" in proc.stdout


def test_stdout_report_is_pure_json(capsys):
    rc = main(["bench", "--tasks", "synth", "--runs", "1", "--tasks-per-run", "2",
               "--seed", "8"])
    assert rc == 0
    out = capsys.readouterr().out
    json.loads(out)  # nothing but the report on stdout


def test_crafted_class_id_rejected(tmp_path):
    from repri.core import RepriError
    from repri.taskio import read_task_container, write_container
    import numpy as np

    path = tmp_path / "bad.rpri"
    write_container(path, {
        "support_features": np.ones((1, 2, 2, 3), dtype=np.float32),
        "support_masks": np.ones((1, 2, 2), dtype=np.uint8),
        "query_features": np.ones((2, 2, 3), dtype=np.float32),
        "class_id": np.zeros((0,), dtype=np.uint8),
    })
    with pytest.raises(RepriError):
        read_task_container(path)
