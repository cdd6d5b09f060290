"""Command line driver: single runs, seed sweeps, checkpoint evaluation, plot data.

Every run directory holds ``manifest.cfg`` (the full resolved config),
``metrics.csv`` and ``checkpoint.npz``.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .approx import DivergenceError, load_checkpoint
from .config import Config, ConfigError
from .trainer import Trainer

log = logging.getLogger("ctpg")

CSV_HEADER = ("seed", "env_steps_per_task", "task", "metric", "value")
EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED = 0, 2, 3


def out_root(default: str = "runs") -> Path:
    return Path(os.environ.get("CTPG_OUT_DIR") or default)


def _fmt(v: float) -> str:
    return repr(float(v))


class MetricsWriter:
    """Append-only CSV writer that flushes after every evaluation."""

    def __init__(self, path: Path, seed: int):
        self.path, self.seed = Path(path), seed
        self.fh = open(self.path, "w", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(CSV_HEADER)
        self.rows: list[tuple] = []

    def __call__(self, rows) -> None:
        for step, task, metric, value in rows:
            if not np.isfinite(value):
                continue
            self.writer.writerow((self.seed, step, task, metric, _fmt(value)))
            self.rows.append((step, task, metric, float(value)))
        self.fh.flush()

    def close(self):
        self.fh.close()


@dataclass
class RunResult:
    out_dir: Path
    per_task: np.ndarray
    mean: float
    rows: list = field(default_factory=list)
    hardest_task: int = 0
    metric: str = "success_rate"
    total_steps: int = 0

    def curve(self, task) -> list[tuple[int, float]]:
        task = str(task)
        return [(s, v) for s, t, m, v in self.rows if t == task and m == self.metric]


def run_config(cfg: Config, out_dir: Path) -> RunResult:
    """Train one config into ``out_dir``.  Raises ``DivergenceError`` with the partial CSV kept."""
    cfg.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.cfg").write_text(cfg.dumps())
    trainer = Trainer(cfg)
    writer = MetricsWriter(out_dir / "metrics.csv", cfg.train.seed)
    try:
        per_task, mean = trainer.run(writer)
    finally:
        writer.close()
    trainer.save(out_dir / "checkpoint.npz")
    return RunResult(out_dir, per_task, mean, writer.rows, trainer.suite.hardest_task(),
                     trainer.suite.metric_kind, cfg.train.total_steps_per_task)


def steps_to_threshold(curve, threshold: float, total_steps: int) -> tuple[int, bool]:
    """First evaluation step at which the metric reaches ``threshold``; ``(total, True)`` when never."""
    for step, value in curve:
        if value >= threshold:
            return int(step), False
    return int(total_steps), True


def _run_name(cfg: Config) -> str:
    return f"{cfg.env.suite}-{cfg.train.mode}-seed{cfg.train.seed}"


def _load(path, overrides) -> Config:
    return cfgmod.load(path, overrides or [])


# -- subcommands --------------------------------------------------------------

def cmd_run(args) -> int:
    cfg = _load(args.config, args.set)
    out = Path(args.out) if args.out else out_root() / _run_name(cfg)
    res = run_config(cfg, out)
    for i, v in enumerate(res.per_task):
        print(f"task {i}: {res.metric} = {v:.4f}")
    print(f"mean: {res.metric} = {res.mean:.4f}")
    print(f"outputs in {out}")
    return EXIT_OK


def summarize(records: list[dict]) -> list[dict]:
    """Per-mode median/mean/std (population) of final metric and steps-to-threshold."""
    out = []
    for mode in dict.fromkeys(r["mode"] for r in records):
        rs = [r for r in records if r["mode"] == mode]
        ok = [r for r in rs if r["status"] == "ok"]
        row = {"mode": mode, "runs": len(rs), "failed": len(rs) - len(ok)}
        for key in ("final", "steps"):
            vals = np.array([r[key] for r in ok], dtype=np.float64)
            row[f"{key}_median"] = float(np.median(vals)) if vals.size else float("nan")
            row[f"{key}_mean"] = float(vals.mean()) if vals.size else float("nan")
            row[f"{key}_std"] = float(vals.std()) if vals.size else float("nan")
        row["censored"] = sum(int(r["censored"]) for r in ok)
        out.append(row)
    return out


def _write_dicts(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def sweep(config_path, seeds, modes, overrides=(), root: Path | None = None, threshold: float = 0.8,
          task: str = "hardest") -> tuple[list[dict], list[dict]]:
    if not seeds:
        raise ConfigError("sweep needs at least one seed")
    root = Path(root) if root else out_root()
    records = []
    for mode in modes:
        for seed in seeds:
            cfg = _load(config_path, list(overrides) + [f"train.mode={mode}", f"train.seed={seed}"])
            rec = {"mode": mode, "seed": seed, "status": "ok", "final": float("nan"),
                   "steps": float("nan"), "censored": False}
            try:
                res = run_config(cfg, root / _run_name(cfg))
            except DivergenceError as exc:
                rec["status"] = f"diverged: {exc}"
            else:
                t = res.hardest_task if task == "hardest" else task
                rec["final"] = res.mean
                rec["steps"], rec["censored"] = steps_to_threshold(res.curve(t), threshold, res.total_steps)
            records.append(rec)
            log.info("sweep %s seed %s: %s", mode, seed, rec["status"])
    summary = summarize(records)
    root.mkdir(parents=True, exist_ok=True)
    _write_dicts(root / "sweep_runs.csv", records)
    _write_dicts(root / "sweep_summary.csv", summary)
    return records, summary


def cmd_sweep(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s]
    modes = [m for m in args.modes.split(",") if m]
    _, summary = sweep(args.config, seeds, modes, args.set, Path(args.out) if args.out else None,
                       args.threshold, args.task)
    for row in summary:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return EXIT_OK if all(r["failed"] == 0 for r in summary) else EXIT_DIVERGED


def cmd_eval(args) -> int:
    _, header = load_checkpoint(args.checkpoint)
    cfg = cfgmod.parse_text(header["meta"]["config"])
    cfgmod.apply_overrides(cfg, args.set or [])
    cfg.validate()
    trainer = Trainer(cfg)
    trainer.load_policy(args.checkpoint)
    per_task, mean = trainer.evaluate(args.episodes)
    metric = trainer.suite.metric_kind
    for i, v in enumerate(per_task):
        print(f"task {i}: {metric} = {v:.4f}")
    print(f"mean: {metric} = {mean:.4f}")
    return EXIT_OK


def read_metrics(path) -> list[tuple[int, int, str, str, float]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader)) != CSV_HEADER:
            raise ValueError(f"{path}: unexpected header")
        return [(int(s), int(st), t, m, float(v)) for s, st, t, m, v in reader]


def _mode_of(path: Path) -> str:
    manifest = Path(path).parent / "manifest.cfg"
    if manifest.exists():
        return cfgmod.parse_text(manifest.read_text()).train.mode
    return "unknown"


def plotdata(paths, metric: str | None = None, task: str = "mean", modes: list[str] | None = None) -> list[tuple]:
    """Learning curves ``(mode, step, mean, std, n_runs)`` across seeds, grouped by mode."""
    groups: dict[str, list[tuple[Path, dict]]] = {}
    for i, p in enumerate(paths):
        rows = read_metrics(p)
        m = metric or next((r[3] for r in rows if r[3] in ("success_rate", "episode_return")), None)
        curve = {st: v for _, st, t, name, v in rows if t == task and name == m}
        mode = modes[i] if modes else _mode_of(Path(p))
        groups.setdefault(mode, []).append((Path(p), curve))
    out = []
    for mode, runs in groups.items():
        grid = sorted(runs[0][1])
        bad = [str(p) for p, c in runs if sorted(c) != grid]
        if bad:
            raise ValueError(f"misaligned step grids in mode {mode!r}: " + ", ".join(bad))
        for step in grid:
            vals = np.array([c[step] for _, c in runs])
            out.append((mode, step, float(vals.mean()), float(vals.std()), len(runs)))
    return out


def cmd_plotdata(args) -> int:
    rows = plotdata(args.metrics, args.metric, args.task)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("mode", "env_steps_per_task", "mean", "std", "n_runs"))
    for mode, step, mean, std, n in rows:
        w.writerow((mode, step, _fmt(mean), _fmt(std), n))
    if args.out:
        fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ctpg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def with_set(p):
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        return p

    p = with_set(sub.add_parser("run", help="train one configuration"))
    p.add_argument("config")
    p.add_argument("--out", help="run directory (default $CTPG_OUT_DIR/<suite>-<mode>-seed<seed>)")
    p.set_defaults(fn=cmd_run)

    p = with_set(sub.add_parser("sweep", help="run every (seed, mode) pair and summarize"))
    p.add_argument("config")
    p.add_argument("--seeds", default="1,2,3,4,5")
    p.add_argument("--modes", default="base,ctpg")
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--task", default="hardest", help="task index for steps-to-threshold, 'hardest' or 'mean'")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_sweep)

    p = with_set(sub.add_parser("eval", help="evaluate a saved checkpoint"))
    p.add_argument("checkpoint")
    p.add_argument("--episodes", type=int, default=None)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("plotdata", help="aggregate metrics files into learning curves")
    p.add_argument("metrics", nargs="+")
    p.add_argument("--metric")
    p.add_argument("--task", default="mean")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_plotdata)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
