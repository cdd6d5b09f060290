"""Multi-task soft actor-critic for the control policies.

One actor, one critic (no twin-Q) and one Polyak target, each a
:class:`~ctpg.approx.TaskNet` indexed by task.  Temperatures are kept per
task as ``log_alpha`` and optimized by independent per-task Adam states so
that a batch without task ``j`` never moves ``alpha_j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .approx import AdamState, DivergenceError, Optimizer, TaskNet, adam_step

LOG_STD_MIN, LOG_STD_MAX = -20.0, 2.0
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)


@dataclass
class SACConfig:
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    lr_alpha: float = 1e-4
    init_alpha: float = 1.0
    target_entropy_scale: float = 1.0
    optimizer: str = "adam"
    hidden_sizes: tuple[int, ...] = (64, 64)
    shared_trunk: bool = False
    reward_scale: float = 0.1
    batch_per_task: int = 128
    approx: str = "auto"


@dataclass
class ControlBatch:
    """Per-transition minibatch.  ``weights`` (optional) reweights rows within a task."""

    tasks: np.ndarray
    feats: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_feats: np.ndarray
    terminated: np.ndarray
    weights: np.ndarray | None = None

    def __len__(self):
        return len(self.tasks)


@dataclass
class StepReport:
    loss: float
    task_losses: dict[int, float]
    masked: list[int] = field(default_factory=list)
    skipped: bool = False


WeightFn = Callable[[dict, np.ndarray], tuple]


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """``log(1 - tanh(u)^2)`` evaluated without cancellation."""
    return 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))


def squashed_log_prob(u: np.ndarray, mean: np.ndarray, log_std: np.ndarray) -> np.ndarray:
    """Log-density of ``a = tanh(u)`` with ``u ~ N(mean, exp(log_std)^2)``, summed over the last axis."""
    eps = (u - mean) * np.exp(-log_std)
    return np.sum(-0.5 * eps * eps - log_std - _HALF_LOG_2PI - log1m_tanh2(u), axis=-1)


class ControlPolicy:
    """Per-task control actors and critics with per-task temperatures."""

    def __init__(self, n_tasks: int, *, discrete: bool, n_actions: int = 0, action_dim: int = 0,
                 approx: str = "mlp", n_states: int = 0, feature_dim: int = 0,
                 config: SACConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg = config or SACConfig()
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_tasks, self.discrete = n_tasks, discrete
        self.n_actions, self.action_dim = n_actions, action_dim
        if discrete:
            if n_actions < 1:
                raise ValueError("discrete policies need n_actions >= 1")
            actor_out, critic_in, critic_out = n_actions, feature_dim, n_actions
            self.target_entropy = cfg.target_entropy_scale * 0.5 * np.log(n_actions)
        else:
            if approx == "table":
                raise ValueError("continuous action spaces need mlp approximators")
            actor_out, critic_in, critic_out = 2 * action_dim, feature_dim + action_dim, 1
            self.target_entropy = -cfg.target_entropy_scale * float(action_dim)
        common = dict(rng=rng, n_states=n_states, hidden_sizes=cfg.hidden_sizes, shared=cfg.shared_trunk)
        self.actor = TaskNet(approx, n_tasks, actor_out, input_dim=feature_dim, **common)
        self.critic = TaskNet(approx, n_tasks, critic_out, input_dim=critic_in, **common)
        self.critic_target = self.critic.params.copy()
        self.log_alpha = np.full(n_tasks, np.log(cfg.init_alpha))
        self.actor_opt = Optimizer(self.actor.size, cfg.lr_actor, cfg.optimizer)
        self.critic_opt = Optimizer(self.critic.size, cfg.lr_critic, cfg.optimizer)
        self.alpha_states = [AdamState.zeros(1) for _ in range(n_tasks)]

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    # -- distribution helpers -------------------------------------------------
    def _head(self, tasks, feats):
        out, cache = self.actor.forward_cache(tasks, feats)
        if self.discrete:
            return out, cache
        mean = out[:, :self.action_dim]
        log_std = np.clip(out[:, self.action_dim:], LOG_STD_MIN, LOG_STD_MAX)
        return (mean, log_std, out), cache

    def _q(self, tasks, feats, actions=None, params=None):
        if self.discrete:
            return self.critic.forward(tasks, feats, params)
        x = np.concatenate([feats, actions], axis=1)
        return self.critic.forward(tasks, x, params)[:, 0]

    def _sample(self, mean, log_std, rng):
        eps = rng.standard_normal(mean.shape)
        u = mean + np.exp(log_std) * eps
        return np.tanh(u), u, eps

    def log_prob(self, tasks, feats, actions) -> np.ndarray:
        """Log-likelihood of stored actions under each row's task policy."""
        tasks = np.asarray(tasks)
        if self.discrete:
            logits, _ = self._head(tasks, feats)
            lp = log_softmax(logits)
            return lp[np.arange(len(tasks)), np.asarray(actions, dtype=np.int64)]
        (mean, log_std, _), _ = self._head(tasks, feats)
        a = np.clip(np.asarray(actions, dtype=np.float64), -1.0 + 1e-6, 1.0 - 1e-6)
        return squashed_log_prob(np.arctanh(a), mean, log_std)

    def entropy(self, tasks, feats, rng=None, n_samples: int = 1) -> np.ndarray:
        """Exact categorical entropy, or an ``n_samples`` estimate of ``-E log pi``."""
        if self.discrete:
            logits, _ = self._head(tasks, feats)
            lp = log_softmax(logits)
            return -np.sum(np.exp(lp) * lp, axis=1)
        (mean, log_std, _), _ = self._head(tasks, feats)
        total = np.zeros(len(mean))
        for _ in range(n_samples):
            _, u, _ = self._sample(mean, log_std, rng)
            total -= squashed_log_prob(u, mean, log_std)
        return total / n_samples

    def soft_value(self, tasks, feats, rng=None, n_samples: int = 1, params=None) -> np.ndarray:
        """``E_a[Q(s,a) - alpha log pi(a|s)]`` per row (exact for discrete)."""
        tasks = np.asarray(tasks)
        alpha = self.alpha[tasks]
        if self.discrete:
            logits, _ = self._head(tasks, feats)
            lp = log_softmax(logits)
            q = self._q(tasks, feats, params=params)
            return np.sum(np.exp(lp) * (q - alpha[:, None] * lp), axis=1)
        (mean, log_std, _), _ = self._head(tasks, feats)
        total = np.zeros(len(tasks))
        for _ in range(n_samples):
            a, u, _ = self._sample(mean, log_std, rng)
            total += self._q(tasks, feats, a, params) - alpha * squashed_log_prob(u, mean, log_std)
        return total / n_samples

    def blocks(self) -> dict[str, np.ndarray]:
        return {"actor": self.actor.params, "critic": self.critic.params,
                "critic_target": self.critic_target, "log_alpha": self.log_alpha}

    def load_blocks(self, blocks: dict) -> None:
        self.actor.params[...] = blocks["actor"]
        self.critic.params[...] = blocks["critic"]
        self.critic_target[...] = blocks["critic_target"]
        self.log_alpha[...] = blocks["log_alpha"]


# ---------------------------------------------------------------------------
# operations


def act(policy: ControlPolicy, task: int, feat, mode: str = "sample", rng=None):
    """Return ``(action, log_prob)`` for a single state."""
    tasks = np.array([task])
    feats = np.asarray(feat)[None]
    if policy.discrete:
        logits, _ = policy._head(tasks, feats)
        if not np.all(np.isfinite(logits)):
            raise DivergenceError("non-finite policy logits")
        lp = log_softmax(logits)[0]
        if mode == "mean":
            a = int(np.argmax(lp))
        else:
            cdf = np.cumsum(np.exp(lp))
            a = int(min(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"), len(cdf) - 1))
        return a, float(lp[a])
    (mean, log_std, _), _ = policy._head(tasks, feats)
    if not (np.all(np.isfinite(mean)) and np.all(np.isfinite(log_std))):
        raise DivergenceError("non-finite policy output")
    if mode == "mean":
        u = mean
    else:
        _, u, _ = policy._sample(mean, log_std, rng)
    return np.tanh(u[0]), float(squashed_log_prob(u, mean, log_std)[0])


def value_estimate(policy: ControlPolicy, task: int, feat, mc_samples: int = 5, rng=None) -> float:
    """Soft state value ``V_i(s)``; exact sum for discrete, ``mc_samples`` draws otherwise."""
    if not policy.discrete and mc_samples < 1:
        raise ValueError("mc_samples >= 1 required for continuous policies")
    return float(policy.soft_value(np.array([task]), np.asarray(feat)[None], rng, max(mc_samples, 1))[0])


def _task_means(values: np.ndarray, tasks: np.ndarray, weights: np.ndarray | None):
    out, norms = {}, {}
    for t in np.unique(tasks):
        rows = tasks == t
        w = np.ones(rows.sum()) if weights is None else weights[rows]
        norms[int(t)] = w.sum()
        out[int(t)] = float(np.sum(w * values[rows]) / norms[int(t)])
    return out, norms


def _row_scale(tasks, weights, task_w: dict, norms: dict) -> np.ndarray:
    per_task = np.zeros(int(tasks.max()) + 1)
    for t, w in task_w.items():
        per_task[t] = w / norms[t]
    scale = per_task[tasks]
    return scale if weights is None else scale * weights


def uniform_weights(task_losses: dict, alphas: np.ndarray):
    """Default aggregation: equal weight over the tasks present, nothing masked."""
    live = [t for t, v in task_losses.items() if np.isfinite(v)]
    masked = [t for t in task_losses if t not in live]
    return {t: 1.0 / len(live) for t in live} if live else {}, masked


def _aggregate(task_losses, policy, weight_fn):
    weight_fn = weight_fn or uniform_weights
    task_w, masked = weight_fn(task_losses, policy.alpha)
    total = float(sum(w * task_losses[t] for t, w in task_w.items()))
    return task_w, masked, total


def critic_step(policy: ControlPolicy, batch: ControlBatch, rng=None, weight_fn: WeightFn | None = None) -> StepReport:
    """One soft Bellman residual step on the critic; the target uses the Polyak critic."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    cfg = policy.cfg
    tasks = np.asarray(batch.tasks)
    v_next = policy.soft_value(tasks, batch.next_feats, rng, 1, params=policy.critic_target)
    y = batch.rewards + cfg.gamma * (1.0 - batch.terminated) * v_next
    if policy.discrete:
        q_all, cache = policy.critic.forward_cache(tasks, batch.feats)
        rows = np.arange(len(tasks))
        acts = np.asarray(batch.actions, dtype=np.int64)
        pred = q_all[rows, acts]
    else:
        x = np.concatenate([batch.feats, batch.actions], axis=1)
        q_out, cache = policy.critic.forward_cache(tasks, x)
        pred = q_out[:, 0]
    err = pred - y
    with np.errstate(over="ignore", invalid="ignore"):  # overflow is reported through maskout
        task_losses, norms = _task_means(0.5 * err * err, tasks, batch.weights)
    task_w, masked, total = _aggregate(task_losses, policy, weight_fn)
    if not task_w:
        return StepReport(float("nan"), task_losses, masked, skipped=True)
    g_pred = np.where(np.isfinite(err), err, 0.0) * _row_scale(tasks, batch.weights, task_w, norms)
    if policy.discrete:
        upstream = np.zeros_like(q_all)
        upstream[rows, acts] = g_pred
    else:
        upstream = g_pred[:, None]
    grad, _ = policy.critic.backward(cache, upstream)
    policy.critic_opt.step(policy.critic.params, grad)
    return StepReport(total, task_losses, masked)


def actor_step(policy: ControlPolicy, tasks, feats, rng=None, weight_fn: WeightFn | None = None,
               weights=None) -> StepReport:
    """Policy improvement step minimizing ``E[alpha log pi - Q]``."""
    tasks = np.asarray(tasks)
    if len(tasks) == 0:
        raise ValueError("empty batch")
    alpha = policy.alpha[tasks]
    if policy.discrete:
        logits, cache = policy.actor.forward_cache(tasks, feats)
        lp = log_softmax(logits)
        pi = np.exp(lp)
        q = policy._q(tasks, feats)
        f = alpha[:, None] * lp - q
        row_loss = np.sum(pi * f, axis=1)
        task_losses, norms = _task_means(row_loss, tasks, weights)
        task_w, masked, total = _aggregate(task_losses, policy, weight_fn)
        if not task_w:
            return StepReport(float("nan"), task_losses, masked, skipped=True)
        scale = _row_scale(tasks, weights, task_w, norms)
        upstream = pi * (f - row_loss[:, None]) * scale[:, None]
    else:
        out, cache = policy.actor.forward_cache(tasks, feats)
        d = policy.action_dim
        mean, raw_log_std = out[:, :d], out[:, d:]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        a, u, eps = policy._sample(mean, log_std, rng)
        logp = squashed_log_prob(u, mean, log_std)
        x = np.concatenate([feats, a], axis=1)
        q_out, q_cache = policy.critic.forward_cache(tasks, x)
        row_loss = alpha * logp - q_out[:, 0]
        task_losses, norms = _task_means(row_loss, tasks, weights)
        task_w, masked, total = _aggregate(task_losses, policy, weight_fn)
        if not task_w:
            return StepReport(float("nan"), task_losses, masked, skipped=True)
        scale = _row_scale(tasks, weights, task_w, norms)
        _, gx = policy.critic.backward(q_cache, np.ones((len(tasks), 1)))
        dq_da = gx[:, -d:]
        g_u = alpha[:, None] * 2.0 * a - dq_da * (1.0 - a * a)
        g_mean = g_u
        g_log_std = g_u * np.exp(log_std) * eps - alpha[:, None]
        g_log_std = g_log_std * ((raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX))
        upstream = np.concatenate([g_mean, g_log_std], axis=1) * scale[:, None]
    grad, _ = policy.actor.backward(cache, upstream)
    policy.actor_opt.step(policy.actor.params, grad)
    return StepReport(total, task_losses, masked)


def temperature_step(policy: ControlPolicy, tasks, feats, rng=None) -> dict[int, float]:
    """Per-task temperature losses ``E[-alpha_i log pi_i - alpha_i H_target]``.

    Only tasks present in the batch are updated.
    """
    tasks = np.asarray(tasks)
    if policy.discrete:
        logits, _ = policy._head(tasks, feats)
        lp = log_softmax(logits)
        neg_ent = np.sum(np.exp(lp) * lp, axis=1)
    else:
        (mean, log_std, _), _ = policy._head(tasks, feats)
        _, u, _ = policy._sample(mean, log_std, rng)
        neg_ent = squashed_log_prob(u, mean, log_std)
    losses = {}
    for t in np.unique(tasks):
        t = int(t)
        mean_logp = float(neg_ent[tasks == t].mean())
        alpha = float(np.exp(policy.log_alpha[t]))
        loss = -alpha * (mean_logp + policy.target_entropy)
        # d loss / d log_alpha equals the loss itself
        new, policy.alpha_states[t] = adam_step(policy.log_alpha[t:t + 1], np.array([loss]),
                                                policy.alpha_states[t], policy.cfg.lr_alpha)
        policy.log_alpha[t] = new[0]
        losses[t] = loss
    return losses


def sync_target(policy: ControlPolicy, tau: float | None = None) -> None:
    tau = policy.cfg.tau if tau is None else tau
    policy.critic_target *= 1.0 - tau
    policy.critic_target += tau * policy.critic.params
