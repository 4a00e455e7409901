"""REINFORCE loss and its extensions: baselines, hill-climb, reward
shaping, and the KL / entropy / agent-likelihood regularizers.

Shaped rewards are plain floats (detached): the gradient flows only
through the log-probability terms, never through the shaping formula.
The composer applies stages in a fixed order -- hill-climb on raw
rewards, then shaping, then baseline subtraction, then the policy
gradient plus regularizer terms.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import numcore as nc

__all__ = [
    "ShapingConfig",
    "BaselineState",
    "RegConfig",
    "TrainEpisode",
    "ComposeInfo",
    "reinforce_loss",
    "loo_baselines",
    "mab_update",
    "hill_climb_filter",
    "reinvent_reshape",
    "acegen_reshape",
    "shape_rewards",
    "kl_term",
    "entropy_term",
    "all_term",
    "compose_loss",
    "LOGPROB_FLOOR",
]

# agent probabilities are floored here before any log inside KL
PROB_FLOOR = 1e-12
LOGPROB_FLOOR = math.log(PROB_FLOOR)

SHAPING_VARIANTS = ("none", "reinvent", "acegen")
BASELINE_KINDS = ("none", "mab", "loo")


@dataclass
class ShapingConfig:
    variant: str = "none"
    sigma: float = 0.0
    alpha: float = 1.0

    def __post_init__(self):
        if self.variant not in SHAPING_VARIANTS:
            raise ValueError(f"unknown shaping variant {self.variant!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")


@dataclass
class BaselineState:
    kind: str = "none"
    value: Optional[float] = None  # moving average, set on first batch
    decay: float = 0.1

    def __post_init__(self):
        if self.kind not in BASELINE_KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}")
        if not (0.0 < self.decay <= 1.0):
            raise ValueError("mab decay must be in (0, 1]")


@dataclass
class RegConfig:
    lambda_kl: float = 0.0
    lambda_ent: float = 0.0
    lambda_all: float = 0.0
    topk_frac: float = 1.0

    def __post_init__(self):
        for name in ("lambda_kl", "lambda_ent", "lambda_all"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (0.0 < self.topk_frac <= 1.0):
            raise ValueError("topk_frac must be in (0, 1]")


# ---------------------------------------------------------------------------
# Core estimator pieces

def reinforce_loss(logp_sums, shaped_rewards, baselines) -> nc.Tensor:
    """loss = -mean_i [ (sum_t log pi(a_t|s_t))_i * (R_i - b_i) ].

    logp_sums may be a taped Tensor (training) or a plain array (tests);
    shaped_rewards and baselines are constants.
    """
    rewards = np.asarray(shaped_rewards, dtype=np.float64)
    base = np.asarray(baselines, dtype=np.float64)
    if rewards.size == 0:
        raise ValueError("reinforce_loss: empty batch")
    if not (np.all(np.isfinite(rewards)) and np.all(np.isfinite(base))):
        raise ValueError("reinforce_loss: non-finite rewards or baselines")
    adv = rewards - np.broadcast_to(base, rewards.shape)
    sums = logp_sums if isinstance(logp_sums, nc.Tensor) else nc.constant(logp_sums)
    if sums.size != rewards.size:
        raise ValueError(
            f"reinforce_loss: {sums.size} log-prob sums vs {rewards.size} rewards"
        )
    return nc.neg(nc.mean(nc.mul(sums, adv.reshape(sums.shape))))


def loo_baselines(rewards) -> np.ndarray:
    """Leave-one-out baseline: b_i = mean of all rewards except i."""
    r = np.asarray(rewards, dtype=np.float64)
    n = r.size
    if n < 2:
        raise ValueError("loo_baselines: need at least 2 episodes")
    return (r.sum() - r) / (n - 1)


def mab_update(state: BaselineState, batch_mean_reward: float) -> float:
    """Moving-average update; initializes to the first batch mean."""
    m = float(batch_mean_reward)
    if not math.isfinite(m):
        raise ValueError("mab_update: non-finite batch mean")
    if state.value is None:
        state.value = m
    else:
        state.value = (1.0 - state.decay) * state.value + state.decay * m
    return state.value


def hill_climb_filter(episodes: Sequence, topk_frac: float) -> List:
    """Keep the ceil(topk_frac * n) episodes with highest reward.

    Ties break toward the lower batch index; the retained episodes come
    back in their original batch order. Episodes need a .reward attribute.
    """
    idx = hill_climb_indices([e.reward for e in episodes], topk_frac)
    return [episodes[i] for i in idx]


def hill_climb_indices(rewards, topk_frac: float) -> List[int]:
    if not (0.0 < topk_frac <= 1.0):
        raise ValueError("topk_frac must be in (0, 1]")
    r = np.asarray(rewards, dtype=np.float64)
    n = r.size
    if n == 0:
        return []
    k = int(math.ceil(topk_frac * n))
    order = np.argsort(-r, kind="stable")  # stable: ties keep batch order
    return sorted(int(i) for i in order[:k])


# ---------------------------------------------------------------------------
# Reward shaping

def reinvent_reshape(reward: float, prior_ll: float, agent_ll: float, sigma: float) -> float:
    """(prior_ll - agent_ll + sigma * R)^2 / agent_ll, exactly as printed.

    With log-likelihoods the denominator is negative, so outputs are
    <= 0; kept verbatim, discrepancy documented at the call sites.
    """
    if agent_ll == 0.0:
        raise ValueError("reinvent_reshape: agent log-likelihood must be nonzero")
    return (prior_ll - agent_ll + sigma * reward) ** 2 / agent_ll


def acegen_reshape(reward: float, prior_ll: float, sigma: float, alpha: float) -> float:
    """max(0, R + sigma * prior_ll)^alpha.

    prior_ll is a log-likelihood (<= 0), so sigma scales a prior penalty;
    the clip keeps the reshaped reward non-negative and, for R in [0,1],
    the output stays in [0,1].
    """
    if sigma < 0 or alpha < 0:
        raise ValueError("acegen_reshape: sigma and alpha must be >= 0")
    base = reward + sigma * prior_ll
    if base <= 0.0:
        return 0.0
    return base ** alpha


def shape_rewards(
    rewards,
    prior_lls,
    agent_lls,
    shaping: ShapingConfig,
) -> np.ndarray:
    """Apply the configured reshape elementwise; variant 'none' is identity."""
    r = np.asarray(rewards, dtype=np.float64)
    if shaping.variant == "none":
        return r.copy()
    p = np.asarray(prior_lls, dtype=np.float64)
    if shaping.variant == "acegen":
        out = [acegen_reshape(ri, pi, shaping.sigma, shaping.alpha) for ri, pi in zip(r, p)]
        return np.array(out, dtype=np.float64)
    a = np.asarray(agent_lls, dtype=np.float64)
    out = [
        reinvent_reshape(ri, pi, ai, shaping.sigma) for ri, pi, ai in zip(r, p, a)
    ]
    return np.array(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# Regularizer terms

def _as_prob_array(dists) -> np.ndarray:
    arr = np.asarray(dists, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    return arr


def kl_term(prior_dists, agent_dists, lambda_kl: float):
    """lambda_kl * sum_t sum_a p_prior log(p_prior / p_agent).

    Distributions are probability rows (one per step). Agent entries are
    floored at 1e-12 before the log. Returns a Tensor when agent_dists is
    a taped Tensor, else a float.
    """
    p = _as_prob_array(prior_dists)
    if isinstance(agent_dists, nc.Tensor):
        if agent_dists.shape != p.shape:
            raise ValueError(
                f"kl_term: prior shape {p.shape} != agent shape {agent_dists.shape}"
            )
        log_p = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), 0.0)
        const_part = float((p * log_p).sum())
        cross = nc.sum(nc.mul(p, nc.log(nc.clip_min(agent_dists, PROB_FLOOR))))
        return nc.mul(nc.sub(const_part, cross), lambda_kl)
    q = _as_prob_array(agent_dists)
    if p.shape != q.shape:
        raise ValueError(f"kl_term: prior shape {p.shape} != agent shape {q.shape}")
    q = np.maximum(q, PROB_FLOOR)
    log_ratio = np.log(np.where(p > 0, p, 1.0)) - np.log(q)
    return float(lambda_kl * np.where(p > 0, p * log_ratio, 0.0).sum())


def entropy_term(agent_dists, lambda_ent: float):
    """lambda_ent * sum_t H(p_t); the composer subtracts this bonus from
    the loss, so minimizing the loss maximizes entropy."""
    if isinstance(agent_dists, nc.Tensor):
        logs = nc.log(nc.clip_min(agent_dists, PROB_FLOOR))
        return nc.mul(nc.neg(nc.sum(nc.mul(agent_dists, logs))), lambda_ent)
    q = _as_prob_array(agent_dists)
    plogp = np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0)
    return float(-lambda_ent * plogp.sum())


def all_term(agent_nll, lambda_all: float):
    """lambda_all / NLL, added to the loss: pushes the agent NLL upward,
    penalizing very likely sequences. NLL must be positive."""
    if isinstance(agent_nll, nc.Tensor):
        if np.any(agent_nll.data <= 0):
            raise ValueError("all_term: agent NLL must be positive")
        return nc.mul(nc.reciprocal(agent_nll), lambda_all)
    if agent_nll <= 0:
        raise ValueError("all_term: agent NLL must be positive")
    return lambda_all / agent_nll


# ---------------------------------------------------------------------------
# Composition

@dataclass
class TrainEpisode:
    """Policy-agnostic episode view the composer consumes.

    reward is the effective raw reward (diversity filter and novelty
    bonus already applied for fresh episodes; stored raw reward for
    replayed ones). agent_ll is the sampling-time value for fresh
    episodes and the recomputed current-policy value for replays.
    """

    tokens: List[int]
    reward: float
    prior_ll: float
    agent_ll: float
    replay: bool = False


@dataclass
class ComposeInfo:
    retained: List[int]  # indices into the fresh subset kept by hill-climb
    training: List[TrainEpisode]  # retained fresh + replays, loss order
    shaped: np.ndarray  # shaped rewards for the training set
    baselines: np.ndarray  # per-episode baseline values


def compose_loss(
    episodes: Sequence[TrainEpisode],
    shaping: ShapingConfig,
    baseline: BaselineState,
    reg: RegConfig,
    forward_fn: Callable[[Sequence[Sequence[int]]], "object"],
    prior_logp_fn: Optional[Callable[[Sequence[Sequence[int]]], List[np.ndarray]]] = None,
) -> Tuple[nc.Tensor, ComposeInfo]:
    """Assemble the total loss for one training batch.

    Stage order: hill-climb filter on fresh episodes' rewards -> reward
    shaping -> baseline subtraction -> REINFORCE loss, plus lambda_KL * KL
    minus the entropy bonus plus the likelihood penalty, each averaged
    over the training episodes. Replayed episodes skip the hill-climb.

    forward_fn(token_seqs) must return a policy.ForwardPack recorded on
    the active tape; prior_logp_fn(token_seqs) must return per-sequence
    prior log-distribution arrays and is only called when lambda_kl > 0.
    """
    fresh = [e for e in episodes if not e.replay]
    replays = [e for e in episodes if e.replay]
    if not fresh and not replays:
        raise ValueError("compose_loss: empty batch")
    retained = hill_climb_indices([e.reward for e in fresh], reg.topk_frac)
    training = [fresh[i] for i in retained] + replays
    m = len(training)

    shaped = shape_rewards(
        [e.reward for e in training],
        [e.prior_ll for e in training],
        [e.agent_ll for e in training],
        shaping,
    )

    if baseline.kind == "none":
        base = np.zeros(m)
    elif baseline.kind == "loo":
        base = loo_baselines(shaped)
    else:  # mab: use the value standing before this batch (first batch
        # initializes to its own mean), then fold the batch mean in
        batch_mean = float(shaped.mean())
        base = np.full(m, baseline.value if baseline.value is not None else batch_mean)
        mab_update(baseline, batch_mean)
    adv = shaped - base

    token_seqs = [e.tokens for e in training]
    pack = forward_fn(token_seqs)
    T = len(pack.step_logps)

    need_all = reg.lambda_all > 0
    need_kl = reg.lambda_kl > 0
    need_ent = reg.lambda_ent > 0

    prior_rows: Optional[List[np.ndarray]] = None
    if need_kl:
        if prior_logp_fn is None:
            raise ValueError("compose_loss: lambda_kl > 0 needs prior_logp_fn")
        prior_rows = prior_logp_fn(token_seqs)

    pg_acc = nc.constant(0.0)
    kl_acc = nc.constant(0.0)
    ent_acc = nc.constant(0.0)
    nll_vec = nc.constant(np.zeros(m)) if need_all else None
    for t in range(T):
        rows = pack.step_logps[t]
        mask_t = pack.mask[:, t]
        picked = nc.take_per_row(rows, pack.targets[:, t])
        pg_acc = nc.add(pg_acc, nc.sum(nc.mul(picked, adv * mask_t)))
        if need_all:
            nll_vec = nc.add(nll_vec, nc.neg(nc.mul(picked, mask_t)))
        if need_kl:
            prior_logp_t = _stack_prior_rows(prior_rows, t, rows.shape)
            p_prior = np.exp(prior_logp_t) * mask_t[:, None]
            floored = nc.clip_min(rows, LOGPROB_FLOOR)
            kl_acc = nc.add(
                kl_acc, nc.sum(nc.mul(p_prior, nc.sub(prior_logp_t * mask_t[:, None], floored)))
            )
        if need_ent:
            probs = nc.exp(rows)
            plogp = nc.mul(probs, rows)
            ent_acc = nc.add(ent_acc, nc.sum(nc.mul(plogp, mask_t[:, None])))

    loss = nc.mul(nc.neg(pg_acc), 1.0 / m)
    if need_kl:
        loss = nc.add(loss, nc.mul(kl_acc, reg.lambda_kl / m))
    if need_ent:
        # ent_acc holds sum of p log p (= -H); adding lambda/m * ent_acc
        # subtracts the entropy bonus from the loss
        loss = nc.add(loss, nc.mul(ent_acc, reg.lambda_ent / m))
    if need_all:
        loss = nc.add(loss, nc.mean(all_term(nll_vec, reg.lambda_all)))

    info = ComposeInfo(retained=retained, training=training, shaped=shaped, baselines=base)
    return loss, info


def _stack_prior_rows(
    prior_rows: List[np.ndarray], t: int, shape: Tuple[int, int]
) -> np.ndarray:
    """Step-t prior log rows padded to the batch; masked steps get zeros."""
    out = np.zeros(shape)
    for i, rows in enumerate(prior_rows):
        if t < rows.shape[0]:
            out[i] = rows[t]
    return out
