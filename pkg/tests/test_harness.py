import csv
import statistics

import numpy as np
import pytest

from ctpg import harness
from ctpg.harness import CSV_HEADER, main, plotdata, read_metrics, steps_to_threshold, summarize, sweep

SMALL = """\
env.suite = gridskills
env.n_tasks = 2
env.grid_size = 7
env.episode_length = 40
guide.k = 5
train.mode = base
train.total_steps_per_task = 300
train.eval_every = 100
train.eval_episodes = 2
replay.min_fill_before_training = 100
sac.batch_per_task = 16
sac.optimizer = sgd
sac.lr_critic = 10
sac.lr_actor = 10
guide.optimizer = sgd
"""


@pytest.fixture
def base_cfg(tmp_path):
    p = tmp_path / "base.cfg"
    p.write_text(SMALL)
    return p


def _metrics(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def test_run_twice_gives_byte_identical_csv(base_cfg, tmp_path):
    for name in ("a", "b"):
        assert main(["run", str(base_cfg), "--set", "train.seed=1", "--out", str(tmp_path / name)]) == 0
    a, b = (tmp_path / "a" / "metrics.csv").read_bytes(), (tmp_path / "b" / "metrics.csv").read_bytes()
    assert a == b and a.startswith(",".join(CSV_HEADER).encode())


def test_base_mode_ignores_guide_toggles(base_cfg, tmp_path):
    main(["run", str(base_cfg), "--out", str(tmp_path / "on")])
    main(["run", str(base_cfg), "--out", str(tmp_path / "off"), "--set", "guide.enable_filter_gate=false",
          "--set", "guide.enable_block_gate=false", "--set", "guide.enable_hindsight=false"])
    assert (tmp_path / "on" / "metrics.csv").read_bytes() == (tmp_path / "off" / "metrics.csv").read_bytes()


def test_missing_suite_names_the_key(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text(SMALL.replace("env.suite = gridskills\n", ""))
    assert main(["run", str(p), "--out", str(tmp_path / "x")]) == 2
    assert "env.suite" in capsys.readouterr().err


def test_unknown_key_names_the_key(base_cfg, tmp_path, capsys):
    assert main(["run", str(base_cfg), "--set", "sac.nonsense=1", "--out", str(tmp_path / "x")]) == 2
    assert "sac.nonsense" in capsys.readouterr().err


def test_ctpg_adds_guide_metrics(base_cfg, tmp_path):
    main(["run", str(base_cfg), "--out", str(tmp_path / "b")])
    main(["run", str(base_cfg), "--set", "train.mode=ctpg", "--out", str(tmp_path / "c")])
    names_b = {r[3] for r in _metrics(tmp_path / "b" / "metrics.csv")[1:]}
    names_c = {r[3] for r in _metrics(tmp_path / "c" / "metrics.csv")[1:]}
    assert {"guide_entropy", "mask_pass_rate"} <= names_c
    assert not names_b & {"guide_entropy", "mask_pass_rate"}


def test_divergence_exits_nonzero_and_keeps_partial_csv(base_cfg, tmp_path):
    out = tmp_path / "div"
    assert main(["run", str(base_cfg), "--set", "sac.lr_critic=1e305", "--out", str(out)]) == 3
    rows = _metrics(out / "metrics.csv")
    assert tuple(rows[0]) == CSV_HEADER and len(rows) > 1


def test_out_dir_environment_variable(base_cfg, tmp_path, monkeypatch):
    monkeypatch.setenv("CTPG_OUT_DIR", str(tmp_path / "root"))
    assert main(["run", str(base_cfg), "--set", "train.seed=4"]) == 0
    assert (tmp_path / "root" / "gridskills-base-seed4" / "metrics.csv").exists()


def test_eval_subcommand_uses_checkpoint(base_cfg, tmp_path, capsys):
    main(["run", str(base_cfg), "--out", str(tmp_path / "r")])
    capsys.readouterr()
    assert main(["eval", str(tmp_path / "r" / "checkpoint.npz"), "--episodes", "2"]) == 0
    out = capsys.readouterr().out
    assert "task 0: success_rate" in out and "mean: success_rate" in out


# -- sweep ---------------------------------------------------------------------

def test_sweep_counts_runs_and_modes(base_cfg, tmp_path):
    records, summary = sweep(base_cfg, [1, 2, 3, 4, 5], ["base", "ctpg"], root=tmp_path / "sw")
    assert len(records) == 10 and [r["mode"] for r in summary] == ["base", "ctpg"]
    assert all(r["runs"] == 5 and r["failed"] == 0 for r in summary)
    with open(tmp_path / "sw" / "sweep_summary.csv") as fh:
        assert len(fh.read().strip().splitlines()) == 3


def test_sweep_single_seed_has_zero_std(base_cfg, tmp_path):
    _, summary = sweep(base_cfg, [3], ["base"], root=tmp_path / "one")
    assert summary[0]["final_std"] == 0.0 and summary[0]["steps_std"] == 0.0


def test_sweep_records_failures(base_cfg, tmp_path):
    records, summary = sweep(base_cfg, [1], ["base"], overrides=["sac.lr_critic=1e305"], root=tmp_path / "f")
    assert records[0]["status"].startswith("diverged")
    assert summary[0]["failed"] == 1


def test_steps_to_threshold_censoring():
    assert steps_to_threshold([(0, 0.0), (100, 0.9)], 0.8, 300) == (100, False)
    assert steps_to_threshold([(0, 0.0), (100, 0.5)], 0.8, 300) == (300, True)


def test_summarize_statistics():
    recs = [{"mode": "m", "status": "ok", "final": f, "steps": s, "censored": c}
            for f, s, c in ((0.2, 100, False), (0.4, 300, True), (0.9, 200, False))]
    recs.append({"mode": "m", "status": "diverged: x", "final": float("nan"), "steps": float("nan"),
                 "censored": False})
    (row,) = summarize(recs)
    assert row["runs"] == 4 and row["failed"] == 1 and row["censored"] == 1
    assert row["final_median"] == 0.4 and row["steps_median"] == 200
    assert row["final_std"] == pytest.approx(statistics.pstdev([0.2, 0.4, 0.9]))


# -- plotdata --------------------------------------------------------------------

def _write_run(path, values, steps=(0, 100, 200), mode=None):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for st, v in zip(steps, values):
            w.writerow((0, st, "mean", "success_rate", repr(v)))
            w.writerow((0, st, "0", "alpha", "1.0"))
    if mode:
        (path.parent / "manifest.cfg").write_text(f"train.mode = {mode}\n")
    return path


def test_plotdata_identical_runs_zero_std(tmp_path):
    paths = [_write_run(tmp_path / f"r{i}" / "metrics.csv", [0.1, 0.5, 0.7], mode="ctpg") for i in range(5)]
    rows = plotdata(paths)
    assert [r[3] for r in rows] == [0.0, 0.0, 0.0] and all(r[4] == 5 for r in rows)


def test_plotdata_groups_by_mode(tmp_path):
    paths = [_write_run(tmp_path / f"{m}{i}" / "metrics.csv", [0.1 * i, 0.2, 0.3], mode=m)
             for m in ("base", "ctpg") for i in range(3)]
    assert {r[0] for r in plotdata(paths)} == {"base", "ctpg"}


def test_plotdata_mean_matches_recomputation(tmp_path):
    values = [[0.0, 0.25, 0.5], [0.5, 0.5, 1.0], [0.25, 1.0, 0.75]]
    paths = [_write_run(tmp_path / f"r{i}" / "metrics.csv", v, mode="base") for i, v in enumerate(values)]
    rows = plotdata(paths)
    for col, (_, step, mean, std, n) in enumerate(rows):
        column = [v[col] for v in values]
        assert step == (0, 100, 200)[col] and n == 3
        assert mean == pytest.approx(statistics.fmean(column), abs=1e-15)
        assert std == pytest.approx(statistics.pstdev(column), abs=1e-15)


def test_plotdata_rejects_misaligned_grids(tmp_path):
    a = _write_run(tmp_path / "a" / "metrics.csv", [0.1, 0.2, 0.3], mode="base")
    b = _write_run(tmp_path / "b" / "metrics.csv", [0.1, 0.2, 0.3], steps=(0, 100, 250), mode="base")
    with pytest.raises(ValueError, match="b/metrics.csv"):
        plotdata([a, b])


def test_plotdata_cli_writes_curves(tmp_path, capsys):
    paths = [str(_write_run(tmp_path / f"r{i}" / "metrics.csv", [0.0, 0.5, 1.0], mode="base")) for i in range(2)]
    assert main(["plotdata", *paths, "--out", str(tmp_path / "curves.csv")]) == 0
    rows = _metrics(tmp_path / "curves.csv")
    assert rows[0] == ["mode", "env_steps_per_task", "mean", "std", "n_runs"] and len(rows) == 4
    assert main(["plotdata", str(tmp_path / "nope.csv")]) == 2


def test_read_metrics_round_trip(base_cfg, tmp_path):
    main(["run", str(base_cfg), "--out", str(tmp_path / "r")])
    rows = read_metrics(tmp_path / "r" / "metrics.csv")
    steps = sorted({r[1] for r in rows})
    assert steps == [0, 100, 200, 300]
    assert all(np.isfinite(r[4]) for r in rows)


def test_metrics_writer_skips_non_finite(tmp_path):
    w = harness.MetricsWriter(tmp_path / "m.csv", 7)
    w([(0, "mean", "x", 1.5), (0, "mean", "y", float("nan"))])
    w.close()
    assert _metrics(tmp_path / "m.csv")[1:] == [["7", "0", "mean", "x", "1.5"]]
