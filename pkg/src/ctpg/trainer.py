"""Training loop: collection with gates, control/guide updates, evaluation.

The loop alternates a collection cycle (one episode per task, round-robin)
with as many training iterations as environment steps per task were
collected.  Every ``K``-th control update also runs one guide update.  The
guide-block set is refreshed every ``train.epoch_episodes`` cycles.

RNG streams are split by purpose so that base mode never touches any stream
the guide uses and evaluation never advances a training stream.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import envs
from .approx import DivergenceError, load_checkpoint, rng_state, save_checkpoint
from .config import Config
from .guide import (GuideBlockSet, GuideBundle, GuideMask, comparable_critic_step, guide_actor_step,
                    guide_block_subset, guide_critic_step, guide_temperature_step, masked_select,
                    policy_filter_mask)
from .replay import ReplayBuffer, Transition
from .sac import ControlPolicy, act, actor_step, critic_step, sync_target, temperature_step

log = logging.getLogger(__name__)

_STREAM_CONTROL_INIT, _STREAM_GUIDE_INIT, _STREAM_COLLECT, _STREAM_TRAIN, _STREAM_GUIDE, _STREAM_EVAL, \
    _STREAM_BPT, _STREAM_GUIDE_TRAIN = range(8)


@dataclass
class LossWeights:
    w: np.ndarray

    def __post_init__(self):
        if np.any(self.w[self.w != 0] <= 0):
            raise ValueError("weights must be positive")


@dataclass
class Aggregate:
    total: float
    weights: np.ndarray
    masked: list[int]
    skipped: bool = False


def control_loss_aggregate(task_losses, alphas, threshold: float = 3e3, rescale: bool = True) -> Aggregate:
    """Drop tasks whose loss exceeds ``threshold`` (or is non-finite) and weight the rest.

    Surviving tasks are weighted by ``softmax(-alpha)`` renormalized over the
    survivors (uniformly when ``rescale`` is off).
    """
    if not isinstance(task_losses, dict):
        task_losses = dict(enumerate(np.asarray(task_losses, dtype=np.float64)))
    alphas = np.asarray(alphas, dtype=np.float64)
    masked = [t for t, v in task_losses.items() if not np.isfinite(v) or v > threshold]
    live = [t for t in task_losses if t not in masked]
    w = np.zeros(len(alphas))
    if not live:
        return Aggregate(float("nan"), w, masked, skipped=True)
    if rescale:
        z = -alphas[live]
        z = np.exp(z - z.max())
        w[live] = z / z.sum()
    else:
        w[live] = 1.0 / len(live)
    LossWeights(w[live])
    total = float(sum(w[t] * task_losses[t] for t in live))
    return Aggregate(total, w, masked)


def _weight_fn(threshold: float, rescale: bool):
    def fn(task_losses, alphas):
        agg = control_loss_aggregate(task_losses, alphas, threshold, rescale)
        return {t: float(agg.weights[t]) for t in task_losses if agg.weights[t] > 0}, agg.masked
    return fn


def make_suite(cfg: Config) -> envs.TaskSuite:
    e = cfg.env
    if e.suite == "gridskills":
        return envs.build_gridskills(e.n_tasks, e.grid_size, e.skill_graph, e.episode_length or 100)
    if e.suite == "pointmass":
        return envs.build_pointmass(e.n_tasks, e.variation, e.episode_length or 200)
    raise ValueError(f"unknown suite {e.suite!r}")


def _approx_kind(cfg: Config, suite) -> str:
    kind = cfg.sac.approx
    if kind == "auto":
        return "table" if suite.tabular else "mlp"
    if kind == "table" and not suite.tabular:
        raise ValueError("table approximators need a tabular suite")
    return kind


def _feature_kwargs(suite, kind):
    if kind == "table":
        return dict(n_states=suite.n_states)
    return dict(feature_dim=suite.feature_dim)


class _MLPFeatures:
    """Normalized float features for running networks on GridSkills."""

    def __init__(self, suite):
        self.scale = float(max(suite.grid_size - 1, 1))

    def __call__(self, states):
        s = np.asarray(states, dtype=np.float64)
        return s / self.scale


def evaluate(policy: ControlPolicy, suite: envs.TaskSuite, episodes_per_task: int, rng: np.random.Generator,
             featurize: Callable | None = None, behavior: Callable[[int], int] | None = None,
             tasks=None) -> tuple[np.ndarray, float]:
    """Greedy rollouts with each task's own policy (or ``behavior(task)``).

    Returns ``(per_task_metric, mean)`` where the metric is the success rate
    or the mean undiscounted, unscaled return depending on the suite.
    """
    if episodes_per_task < 1:
        raise ValueError("episodes_per_task >= 1 required")
    featurize = featurize or suite.features
    tasks = range(suite.n_tasks) if tasks is None else tasks
    out = np.zeros(suite.n_tasks)
    for task in tasks:
        who = task if behavior is None else behavior(task)
        scores = []
        for _ in range(episodes_per_task):
            state = suite.reset(task, rng)
            ret, success = 0.0, False
            for t in range(suite.episode_length):
                a, _ = act(policy, who, featurize(state), "mean", rng)
                res = suite.step(task, state, a, t)
                ret += res.reward
                success |= res.success
                state = res.next_state
                if res.terminated or res.truncated:
                    break
            scores.append(float(success) if suite.metric_kind == "success_rate" else ret)
        out[task] = np.mean(scores)
    return out, float(np.mean(out[list(tasks)]))


@dataclass
class _Window:
    decisions: int = 0
    mask_pass: int = 0
    mask_total: int = 0
    guide_entropy: float = 0.0
    losses: dict = field(default_factory=dict)

    def add_loss(self, name, value):
        if np.isfinite(value):
            s, n = self.losses.get(name, (0.0, 0))
            self.losses[name] = (s + value, n + 1)


class Trainer:
    def __init__(self, cfg: Config, suite: envs.TaskSuite | None = None):
        cfg.validate()
        self.cfg = cfg
        self.suite = suite or make_suite(cfg)
        s = self.suite
        self.n_tasks = s.n_tasks
        self.mode = cfg.train.mode
        if cfg.guide.k > s.episode_length:
            raise ValueError("guide.k must not exceed the episode length")
        seed = cfg.train.seed

        def stream(i, *extra):
            return np.random.default_rng([seed, i, *extra])

        self._stream = stream
        self.kind = _approx_kind(cfg, s)
        self.featurize = s.features if self.kind == "table" or not s.tabular else _MLPFeatures(s)
        feat_kw = _feature_kwargs(s, self.kind)
        self.policy = ControlPolicy(s.n_tasks, discrete=s.discrete, n_actions=s.n_actions, action_dim=s.action_dim,
                                    approx=self.kind, config=cfg.sac, rng=stream(_STREAM_CONTROL_INIT), **feat_kw)
        self.guide: GuideBundle | None = None
        if self.mode == "ctpg":
            self.guide = GuideBundle(s.n_tasks, approx=self.kind, config=cfg.guide,
                                     rng=stream(_STREAM_GUIDE_INIT), **feat_kw)
            self.rng_guide = stream(_STREAM_GUIDE)
            self.rng_guide_train = stream(_STREAM_GUIDE_TRAIN)
        self.rng_collect = stream(_STREAM_COLLECT)
        self.rng_train = stream(_STREAM_TRAIN)
        self.replay = ReplayBuffer(cfg.replay.capacity, s.n_tasks, cfg.guide.k)
        self.weight_fn = _weight_fn(cfg.train.maskout_threshold, cfg.train.loss_rescale)

        self.total_env_steps = 0
        self.cycles = 0
        self.control_updates = 0
        self.guide_updates = 0
        self.guide_skipped = 0
        self.skipped_streak = 0
        self.eval_count = 0
        self.bpt_count = 0
        self.block_set = GuideBlockSet(frozenset(range(s.n_tasks)), tuple(self.policy.log_alpha))
        self.bpt_assignment = list(range(s.n_tasks))
        self.last_eval = np.zeros(s.n_tasks)
        self.window = _Window()
        self.decision_log: list[tuple[int, int, int]] | None = None  # (task, t, j) when enabled

    # -- bookkeeping ----------------------------------------------------------
    @property
    def env_steps_per_task(self) -> int:
        return self.total_env_steps // self.n_tasks

    @property
    def warm(self) -> bool:
        return self.env_steps_per_task < self.cfg.replay.min_fill_before_training

    def refresh_block_set(self) -> GuideBlockSet:
        """Snapshot the tasks that receive guidance for the coming epoch."""
        gcfg, acfg = self.cfg.guide, self.cfg.ablate
        if not gcfg.enable_block_gate:
            self.block_set = GuideBlockSet(frozenset(range(self.n_tasks)), tuple(self.policy.log_alpha))
        elif acfg.block_metric == "success_rate":
            need = frozenset(int(i) for i in np.flatnonzero(self.last_eval <= acfg.success_block_threshold))
            self.block_set = GuideBlockSet(need, tuple(self.policy.log_alpha))
        else:
            self.block_set = guide_block_subset(self.policy.log_alpha.copy())
        return self.block_set

    # -- collection -----------------------------------------------------------
    def behavior_index(self, task: int, feat) -> int:
        if self.warm or self.mode == "base":
            return task
        if self.mode == "bpt":
            return self.bpt_assignment[task]
        if task not in self.block_set:  # guide-block gate
            return task
        g = self.guide
        p = g.probs(task, feat)
        if self.cfg.guide.enable_filter_gate:
            mask = policy_filter_mask(g, self.policy, task, feat, self.cfg.guide.mc_samples, self.rng_guide)
        else:
            mask = GuideMask(np.ones(self.n_tasks, dtype=np.int64))
        w = self.window
        w.decisions += 1
        w.mask_pass += int(mask.m.sum())
        w.mask_total += self.n_tasks
        w.guide_entropy += float(-np.sum(p[p > 0] * np.log(p[p > 0])))
        return masked_select(p, mask.m, task, self.rng_guide)

    def collect_episode(self, task: int) -> dict:
        s = self.suite
        k = self.cfg.guide.k
        scale = self.cfg.sac.reward_scale
        rng = self.rng_collect
        state = s.reset(task, rng)
        feat = self.featurize(state)
        warm = self.warm
        ret, success, decisions, j = 0.0, False, 0, task
        for t in range(s.episode_length):
            if t % k == 0:
                j = self.behavior_index(task, feat)
                decisions += 1
                if self.decision_log is not None:
                    self.decision_log.append((task, t, j))
            if warm:
                a = int(rng.integers(s.n_actions)) if s.discrete else rng.uniform(-1.0, 1.0, s.action_dim)
            else:
                a, _ = act(self.policy, j, feat, "sample", rng)
            res = s.step(task, state, a, t)
            next_feat = self.featurize(res.next_state)
            self.replay.push(Transition(task, feat, a, j, res.reward * scale, next_feat,
                                        res.terminated, res.truncated, t))
            ret += res.reward
            success |= res.success
            state, feat = res.next_state, next_feat
            if res.terminated or res.truncated:
                break
        self.total_env_steps += t + 1
        return {"return": ret, "success": success, "length": t + 1, "decisions": decisions}

    # -- training -------------------------------------------------------------
    def train_iteration(self) -> None:
        cfg = self.cfg
        p = self.policy
        batch = self.replay.sample_control_batch(cfg.sac.batch_per_task, self.rng_train)
        crit = critic_step(p, batch, self.rng_train, self.weight_fn)
        actr = actor_step(p, batch.tasks, batch.feats, self.rng_train, self.weight_fn)
        temperature_step(p, batch.tasks, batch.feats, self.rng_train)
        sync_target(p)
        self.control_updates += 1
        self.skipped_streak = self.skipped_streak + 1 if crit.skipped else 0
        if self.skipped_streak >= cfg.train.max_skipped_updates:
            raise DivergenceError(f"critic loss masked for every task on {self.skipped_streak} consecutive updates")
        self.window.add_loss("loss_critic", crit.loss)
        self.window.add_loss("loss_actor", actr.loss)
        if self.mode == "ctpg" and self.control_updates % cfg.guide.k == 0:
            self.guide_iteration()

    def guide_iteration(self) -> bool:
        cfg, g = self.cfg, self.guide
        tasks = list(self.block_set)
        gb = None
        if tasks:
            gb = self.replay.sample_guide_batch(tasks, cfg.sac.batch_per_task * len(tasks), self.rng_guide_train)
        if gb is None:
            self.guide_skipped += 1
            return False
        hs = cfg.guide.enable_hindsight
        rep = guide_critic_step(g, self.policy, gb, hindsight=hs)
        first = gb.feats[:, 0]
        a_loss = guide_actor_step(g, gb.tasks, first)
        guide_temperature_step(g, gb.tasks, first)
        c_rep = comparable_critic_step(g, self.policy, gb, self.rng_guide_train, hindsight=hs)
        g.sync_targets()
        self.guide_updates += 1
        self.window.add_loss("loss_guide_critic", rep.loss)
        self.window.add_loss("loss_guide_actor", a_loss)
        self.window.add_loss("loss_comparable", c_rep.loss)
        return True

    # -- baselines ------------------------------------------------------------
    def bpt_refresh(self) -> list[int]:
        """Cross-evaluate every control policy on every task and assign the best performer."""
        rng = self._stream(_STREAM_BPT, self.bpt_count)
        self.bpt_count += 1
        n = self.n_tasks
        scores = np.zeros((n, n))
        for j in range(n):
            scores[j], _ = evaluate(self.policy, self.suite, self.cfg.train.bpt_eval_episodes, rng,
                                    self.featurize, behavior=lambda task, j=j: j)
        assign = []
        for i in range(n):
            best = scores[:, i].max()
            assign.append(i if scores[i, i] >= best else int(np.argmax(scores[:, i])))
        self.bpt_assignment = assign
        return assign

    # -- evaluation -----------------------------------------------------------
    def evaluate(self, episodes: int | None = None):
        rng = self._stream(_STREAM_EVAL, self.eval_count)
        self.eval_count += 1
        per_task, mean = evaluate(self.policy, self.suite, episodes or self.cfg.train.eval_episodes, rng,
                                  self.featurize)
        self.last_eval = per_task
        return per_task, mean

    def _eval_rows(self, step: int):
        metric = self.suite.metric_kind
        per_task, mean = self.evaluate()
        rows = [(step, str(i), metric, float(v)) for i, v in enumerate(per_task)]
        rows.append((step, "mean", metric, mean))
        rows += [(step, str(i), "alpha", float(a)) for i, a in enumerate(self.policy.alpha)]
        w = self.window
        if self.mode == "ctpg":
            rows.append((step, "mean", "block_set_size", float(len(self.block_set))))
            if w.decisions:
                rows.append((step, "mean", "guide_entropy", w.guide_entropy / w.decisions))
                rows.append((step, "mean", "mask_pass_rate", w.mask_pass / w.mask_total))
        for name in sorted(w.losses):
            total, n = w.losses[name]
            rows.append((step, "mean", name, total / n))
        self.window = _Window()
        return rows

    # -- main loop ------------------------------------------------------------
    def run(self, emit: Callable[[list], None] | None = None) -> tuple[np.ndarray, float]:
        """Train to ``train.total_steps_per_task``; ``emit`` receives metric rows at every evaluation."""
        cfg = self.cfg.train
        emit = emit or (lambda rows: None)
        warmup = self.cfg.replay.min_fill_before_training
        next_eval = 0
        emit(self._eval_rows(0))
        next_eval += cfg.eval_every
        while self.env_steps_per_task < cfg.total_steps_per_task:
            if self.cycles % cfg.epoch_episodes == 0 and self.mode == "ctpg":
                self.refresh_block_set()
            for task in range(self.n_tasks):
                self.collect_episode(task)
            self.cycles += 1
            due = max(0, self.env_steps_per_task - warmup) - self.control_updates
            if not self.warm:
                for _ in range(due):
                    self.train_iteration()
                if self.mode == "bpt" and self.cycles % cfg.bpt_every == 0:
                    self.bpt_refresh()
            while next_eval <= min(self.env_steps_per_task, cfg.total_steps_per_task):
                emit(self._eval_rows(next_eval))
                next_eval += cfg.eval_every
        if next_eval - cfg.eval_every < cfg.total_steps_per_task:
            emit(self._eval_rows(cfg.total_steps_per_task))
        return self.last_eval.copy(), float(np.mean(self.last_eval))

    # -- persistence ----------------------------------------------------------
    def save(self, path) -> None:
        blocks = dict(self.policy.blocks())
        if self.guide is not None:
            blocks.update(self.guide.blocks())
        rngs = {"collect": rng_state(self.rng_collect), "train": rng_state(self.rng_train)}
        meta = {"config": self.cfg.dumps(),
                "env_steps_per_task": self.env_steps_per_task, "control_updates": self.control_updates,
                "guide_updates": self.guide_updates}
        save_checkpoint(path, blocks, rngs, meta)

    def load_policy(self, path) -> dict:
        blocks, header = load_checkpoint(path)
        self.policy.load_blocks(blocks)
        return header
