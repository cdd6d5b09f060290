"""Guide policies that choose which task's control policy acts next.

Each task ``i`` owns a categorical guide policy over the ``N`` control
policies.  A decision lasts ``K`` environment steps, so the guide lives in a
semi-MDP with reward ``sum_k gamma^k r_k`` and bootstrap ``gamma^L`` for a
segment of length ``L``.

Two critics are trained from the same segments:

* the guide critic, a discrete-SAC critic whose soft value carries the guide
  policy's own entropy bonus;
* the comparable critic, whose per-step bonus is ``alpha_i H(pi_i(.|s))`` of
  the *task's own* control policy.  Its values sit on the same scale as the
  control soft value ``V_i(s)``, which is what the policy-filter gate needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .approx import AdamState, DivergenceError, Optimizer, TaskNet, adam_step
from .replay import SegmentBatch, SegmentRecord
from .sac import ControlPolicy, log_softmax

LOGP_FLOOR = -1e6


@dataclass
class GuideConfig:
    k: int = 10
    mc_samples: int = 5
    gamma: float = 0.99
    tau: float = 0.005
    lr_actor: float = 1e-4
    lr_critic: float = 1e-4
    lr_alpha: float = 1e-4
    init_alpha: float = 1.0
    target_entropy_scale: float = 0.5
    optimizer: str = "adam"
    hidden_sizes: tuple[int, ...] = (64, 64)
    enable_filter_gate: bool = True
    enable_block_gate: bool = True
    enable_hindsight: bool = True


@dataclass(frozen=True)
class GuideMask:
    m: np.ndarray

    @property
    def all_zero(self) -> bool:
        return not bool(np.any(self.m))


@dataclass(frozen=True)
class GuideBlockSet:
    tasks: frozenset
    log_alphas: tuple

    def __contains__(self, task) -> bool:
        return int(task) in self.tasks

    def __iter__(self):
        return iter(sorted(self.tasks))

    def __len__(self):
        return len(self.tasks)


class GuideBundle:
    """Guide actor, guide critic, comparable critic (each with N heads) and guide temperatures."""

    def __init__(self, n_tasks: int, *, approx: str = "mlp", n_states: int = 0, feature_dim: int = 0,
                 config: GuideConfig | None = None, rng: np.random.Generator | None = None):
        self.cfg = cfg = config or GuideConfig()
        if cfg.k < 1:
            raise ValueError("guide step K must be >= 1")
        rng = np.random.default_rng(0) if rng is None else rng
        self.n_tasks = n_tasks
        common = dict(rng=rng, n_states=n_states, input_dim=feature_dim, hidden_sizes=cfg.hidden_sizes,
                      shared=True)
        self.actor = TaskNet(approx, n_tasks, n_tasks, **common)
        self.critic = TaskNet(approx, n_tasks, n_tasks, **common)
        self.comparable = TaskNet(approx, n_tasks, n_tasks, **common)
        self.critic_target = self.critic.params.copy()
        self.comparable_target = self.comparable.params.copy()
        self.log_alpha = np.full(n_tasks, np.log(cfg.init_alpha))
        self.target_entropy = cfg.target_entropy_scale * np.log(n_tasks)
        self.actor_opt = Optimizer(self.actor.size, cfg.lr_actor, cfg.optimizer)
        self.critic_opt = Optimizer(self.critic.size, cfg.lr_critic, cfg.optimizer)
        self.comparable_opt = Optimizer(self.comparable.size, cfg.lr_critic, cfg.optimizer)
        self.alpha_states = [AdamState.zeros(1) for _ in range(n_tasks)]
        self.forced_probs: np.ndarray | None = None

    @property
    def k(self) -> int:
        return self.cfg.k

    @property
    def alpha(self) -> np.ndarray:
        return np.exp(self.log_alpha)

    def log_probs(self, tasks, feats) -> np.ndarray:
        if self.forced_probs is not None:
            with np.errstate(divide="ignore"):
                return np.log(self.forced_probs[np.asarray(tasks)])
        return log_softmax(self.actor.forward(tasks, feats))

    def probs(self, task: int, feat) -> np.ndarray:
        return np.exp(self.log_probs(np.array([task]), np.asarray(feat)[None])[0])

    def sync_targets(self, tau: float | None = None) -> None:
        tau = self.cfg.tau if tau is None else tau
        for online, target in ((self.critic, self.critic_target), (self.comparable, self.comparable_target)):
            target *= 1.0 - tau
            target += tau * online.params

    def blocks(self) -> dict[str, np.ndarray]:
        return {"guide_actor": self.actor.params, "guide_critic": self.critic.params,
                "guide_critic_target": self.critic_target, "guide_comparable": self.comparable.params,
                "guide_comparable_target": self.comparable_target, "guide_log_alpha": self.log_alpha}


def _xlogy(p: np.ndarray, logp: np.ndarray) -> np.ndarray:
    return np.where(p > 0.0, p * np.where(p > 0.0, logp, 0.0), 0.0)


# ---------------------------------------------------------------------------
# segment arithmetic


def guide_reward(segment: SegmentRecord, gamma: float) -> float:
    """Discounted reward accumulated over one segment."""
    r = np.asarray(segment.rewards, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty segment")
    return float(np.sum(gamma ** np.arange(r.size) * r))


def guide_rewards(batch: SegmentBatch, gamma: float) -> np.ndarray:
    disc = gamma ** np.arange(batch.rewards.shape[1])
    return np.sum(np.where(batch.valid, batch.rewards, 0.0) * disc, axis=1)


def _segment_loglik(batch: SegmentBatch, policy: ControlPolicy):
    B, K = batch.valid.shape
    N = policy.n_tasks
    flat_feats = batch.feats.reshape((B * K,) + batch.feats.shape[2:])
    flat_actions = batch.actions.reshape((B * K,) + batch.actions.shape[2:])
    ll = np.empty((B, N))
    flagged = 0
    for j in range(N):
        lp = policy.log_prob(np.full(B * K, j), flat_feats, flat_actions).reshape(B, K)
        bad = ~np.isfinite(lp) | (lp < LOGP_FLOOR)
        flagged += int(np.sum(bad & batch.valid))
        lp = np.where(bad, LOGP_FLOOR, lp)
        ll[:, j] = np.sum(np.where(batch.valid, lp, 0.0), axis=1)
    return ll, flagged


def hindsight_relabel_batch(batch: SegmentBatch, policy: ControlPolicy) -> tuple[np.ndarray, int]:
    """Most likely behavior index per segment under the current control policies.

    Returns ``(labels, flagged)`` where ``flagged`` counts clamped log-probs.
    ``np.argmax`` resolves ties to the lowest index.
    """
    ll, flagged = _segment_loglik(batch, policy)
    return np.argmax(ll, axis=1), flagged


def hindsight_relabel(segment: SegmentRecord, policy: ControlPolicy) -> int:
    labels, _ = hindsight_relabel_batch(SegmentBatch.from_records([segment]), policy)
    return int(labels[0])


# ---------------------------------------------------------------------------
# training steps


@dataclass
class GuideReport:
    loss: float
    relabeled: int = 0
    flagged: int = 0
    skipped: bool = False


def _weights(batch: SegmentBatch) -> np.ndarray:
    return np.ones(len(batch)) if batch.weights is None else batch.weights


def _labels(bundle, policy, batch, hindsight):
    if hindsight:
        labels, flagged = hindsight_relabel_batch(batch, policy)
        return labels, flagged, int(np.sum(labels != batch.guides))
    return batch.guides.astype(np.int64), 0, 0


def _critic_update(net: TaskNet, opt: Optimizer, tasks, feats, labels, y, w):
    q, cache = net.forward_cache(tasks, feats)
    rows = np.arange(len(tasks))
    err = q[rows, labels] - y
    if not np.all(np.isfinite(err)):
        return float("nan"), True
    loss = float(np.sum(w * 0.5 * err * err) / w.sum())
    upstream = np.zeros_like(q)
    upstream[rows, labels] = w * err / w.sum()
    grad, _ = net.backward(cache, upstream)
    opt.step(net.params, grad)
    return loss, False


def _first_feats(batch: SegmentBatch):
    return batch.feats[:, 0]


def guide_critic_step(bundle: GuideBundle, policy: ControlPolicy, batch: SegmentBatch,
                      hindsight: bool = True) -> GuideReport:
    """Soft semi-MDP Bellman step on the guide critic."""
    if len(batch) == 0:
        raise ValueError("empty segment batch")
    gamma = bundle.cfg.gamma
    labels, flagged, changed = _labels(bundle, policy, batch, hindsight)
    tasks = batch.tasks
    lp = bundle.log_probs(tasks, batch.final_feats)
    p = np.exp(lp)
    q_next = bundle.critic.forward(tasks, batch.final_feats, bundle.critic_target)
    ga = bundle.alpha[tasks]
    v_next = np.sum(np.where(p > 0.0, p * q_next, 0.0), axis=1) - ga * np.sum(_xlogy(p, lp), axis=1)
    y = guide_rewards(batch, gamma) + gamma ** batch.lengths * (1.0 - batch.terminated) * v_next
    loss, bad = _critic_update(bundle.critic, bundle.critic_opt, tasks, _first_feats(batch), labels, y,
                               _weights(batch))
    return GuideReport(loss, changed, flagged, skipped=bad)


def comparable_targets(bundle: GuideBundle, policy: ControlPolicy, batch: SegmentBatch, rng=None) -> np.ndarray:
    """Targets for the comparable critic: entropy of the task's own control policy at every step."""
    gamma = bundle.cfg.gamma
    B, K = batch.valid.shape
    tasks = batch.tasks
    flat_feats = batch.feats.reshape((B * K,) + batch.feats.shape[2:])
    ent = policy.entropy(np.repeat(tasks, K), flat_feats, rng, bundle.cfg.mc_samples).reshape(B, K)
    bonus = policy.alpha[tasks][:, None] * ent
    disc = gamma ** np.arange(K)
    head = np.sum(np.where(batch.valid, (batch.rewards + bonus) * disc, 0.0), axis=1)
    p = np.exp(bundle.log_probs(tasks, batch.final_feats))
    q_next = bundle.comparable.forward(tasks, batch.final_feats, bundle.comparable_target)
    boot = np.sum(np.where(p > 0.0, p * q_next, 0.0), axis=1)
    return head + gamma ** batch.lengths * (1.0 - batch.terminated) * boot


def comparable_critic_step(bundle: GuideBundle, policy: ControlPolicy, batch: SegmentBatch, rng=None,
                           hindsight: bool = True) -> GuideReport:
    if len(batch) == 0:
        raise ValueError("empty segment batch")
    labels, flagged, changed = _labels(bundle, policy, batch, hindsight)
    y = comparable_targets(bundle, policy, batch, rng)
    loss, bad = _critic_update(bundle.comparable, bundle.comparable_opt, batch.tasks, _first_feats(batch),
                               labels, y, _weights(batch))
    return GuideReport(loss, changed, flagged, skipped=bad)


def guide_actor_step(bundle: GuideBundle, tasks, feats, weights=None) -> float:
    """Exact categorical SAC actor step ``E_j[alpha_g log Pi(j|s) - Q_g(s, j)]``."""
    tasks = np.asarray(tasks)
    logits, cache = bundle.actor.forward_cache(tasks, feats)
    lp = log_softmax(logits)
    p = np.exp(lp)
    q = bundle.critic.forward(tasks, feats)
    f = bundle.alpha[tasks][:, None] * lp - q
    row = np.sum(p * f, axis=1)
    w = np.ones(len(tasks)) if weights is None else np.asarray(weights, dtype=np.float64)
    if not np.all(np.isfinite(row)):
        raise DivergenceError("non-finite guide actor loss")
    loss = float(np.sum(w * row) / w.sum())
    upstream = p * (f - row[:, None]) * (w / w.sum())[:, None]
    grad, _ = bundle.actor.backward(cache, upstream)
    bundle.actor_opt.step(bundle.actor.params, grad)
    return loss


def guide_temperature_step(bundle: GuideBundle, tasks, feats) -> dict[int, float]:
    tasks = np.asarray(tasks)
    lp = bundle.log_probs(tasks, feats)
    neg_ent = np.sum(_xlogy(np.exp(lp), lp), axis=1)
    losses = {}
    for t in np.unique(tasks):
        t = int(t)
        alpha = float(np.exp(bundle.log_alpha[t]))
        loss = -alpha * (float(neg_ent[tasks == t].mean()) + bundle.target_entropy)
        new, bundle.alpha_states[t] = adam_step(bundle.log_alpha[t:t + 1], np.array([loss]),
                                                bundle.alpha_states[t], bundle.cfg.lr_alpha)
        bundle.log_alpha[t] = new[0]
        losses[t] = loss
    return losses


# ---------------------------------------------------------------------------
# gates


def filter_mask_from_values(q_hat: np.ndarray, v: float) -> GuideMask:
    return GuideMask((np.asarray(q_hat) >= v).astype(np.int64))


def policy_filter_mask(bundle: GuideBundle, policy: ControlPolicy, task: int, feat, mc_samples: int | None = None,
                       rng=None) -> GuideMask:
    """Admit candidate ``j`` iff the comparable guide value is at least ``V_i(s)``."""
    from .sac import value_estimate

    mc = bundle.cfg.mc_samples if mc_samples is None else mc_samples
    q_hat = bundle.comparable.forward(np.array([task]), np.asarray(feat)[None])[0]
    v = value_estimate(policy, task, feat, mc, rng)
    return filter_mask_from_values(q_hat, v)


def masked_distribution(p: np.ndarray, m: np.ndarray) -> np.ndarray | None:
    """Renormalized ``p * m``; None when nothing survives the mask."""
    q = np.asarray(p, dtype=np.float64) * np.asarray(m)
    z = q.sum()
    if not np.any(m) or z <= 0.0:
        return None
    return q / z


def masked_select(p, m, own: int, rng: np.random.Generator) -> int:
    dist = masked_distribution(p, m)
    if dist is None:
        return int(own)
    cdf = np.cumsum(dist)
    j = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    j = min(j, len(cdf) - 1)
    while dist[j] == 0.0:  # float edge at the top of the cdf
        j -= 1
    return j


def guide_block_subset(log_alphas) -> GuideBlockSet:
    """Tasks whose log-temperature is at most the mean log-temperature."""
    la = np.asarray(log_alphas, dtype=np.float64)
    if not np.all(np.isfinite(la)):
        raise ValueError("log alphas must be finite")
    if la.max() == la.min():
        return GuideBlockSet(frozenset(range(la.size)), tuple(float(x) for x in la))
    # x <= mean  <=>  sum(la) - n*x >= 0; fsum is correctly rounded, so the sign is exact
    n = la.size
    members = frozenset(i for i, x in enumerate(la.tolist()) if math.fsum(la.tolist() + [-x] * n) >= 0.0)
    return GuideBlockSet(members, tuple(float(x) for x in la))
