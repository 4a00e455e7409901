"""Deterministic toy reward functions and the optimization harness.

Rewards map an analyzed molecule string to [0, 1]; invalid strings
always score 0. The harness samples, scores, applies the extension
pipeline (diversity filter -> novelty bonus -> hill-climb -> shaping ->
baseline -> loss -> regularizers), steps Adam, and logs every scored
molecule until the budget is spent. Everything derives from the run
seed, so a run is reproducible record-for-record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import numcore as nc
from . import policy as pol
from . import rl_core
from .config import RunConfig
from .explore import DiversityMemory, ReplayBuffer, RndState
from .metrics import MetricReport, RunLog, compute_report
from .smiles import MolString, analyze, descriptors, fingerprint, tanimoto

__all__ = [
    "RewardFn",
    "TaskRun",
    "reward_aromatic_frac",
    "make_property_mpo",
    "make_similarity",
    "make_reward",
    "run_task",
]

RewardFn = Callable[[MolString], float]


def reward_aromatic_frac(mol: MolString) -> float:
    """Fraction of aromatic atoms; maximizable by degenerate all-aromatic
    strings, which is exactly the reward-hacking pressure the
    regularizers are meant to counter."""
    if not mol.valid:
        return 0.0
    return descriptors(mol.tokens)["aromatic_fraction"]


def make_property_mpo(targets: Dict[str, Tuple[float, float]]) -> RewardFn:
    """Geometric mean of per-descriptor Gaussian responses
    exp(-(d - center)^2 / (2 width^2))."""
    if not targets:
        raise ValueError("property_mpo needs at least one descriptor target")
    for name, (_, width) in targets.items():
        if width <= 0:
            raise ValueError(f"descriptor {name!r} needs a positive width")

    def reward(mol: MolString) -> float:
        if not mol.valid:
            return 0.0
        desc = descriptors(mol.tokens)
        log_score = 0.0
        for name, (center, width) in targets.items():
            d = desc[name]
            log_score += -((d - center) ** 2) / (2.0 * width ** 2)
        return math.exp(log_score / len(targets))

    return reward


def make_similarity(target: str) -> RewardFn:
    """Tanimoto similarity of token n-gram fingerprints to a target."""
    target_mol = analyze(target)
    if not target_mol.valid:
        raise ValueError(f"similarity target {target!r} is not a valid molecule string")
    target_fp = fingerprint(target_mol.tokens)

    def reward(mol: MolString) -> float:
        if not mol.valid:
            return 0.0
        return tanimoto(fingerprint(mol.tokens), target_fp)

    return reward


def _parse_mpo_targets(raw: str) -> Dict[str, Tuple[float, float]]:
    targets: Dict[str, Tuple[float, float]] = {}
    for part in raw.split(","):
        part = part.strip()
        if not part:
            continue
        fields = part.split(":")
        if len(fields) != 3:
            raise ValueError(f"mpo target {part!r} is not name:center:width")
        targets[fields[0]] = (float(fields[1]), float(fields[2]))
    return targets


def make_reward(config: RunConfig) -> RewardFn:
    if config.task == "aromatic_frac":
        return reward_aromatic_frac
    if config.task == "property_mpo":
        return make_property_mpo(_parse_mpo_targets(config.mpo_targets))
    if config.task == "similarity":
        return make_similarity(config.task_target)
    raise ValueError(f"unknown task {config.task!r}")


# ---------------------------------------------------------------------------
# Harness

@dataclass
class TaskRun:
    task: str
    seed: int
    budget: int
    num_envs: int
    log: RunLog
    report: Optional[MetricReport]


def _annealed_lr(config: RunConfig, scored: int) -> float:
    """Cosine from lr down to lr_final over the first half of the budget."""
    if not config.lr_annealing or config.total_smiles <= 0:
        return config.lr
    progress = min(scored / config.total_smiles / 0.5, 1.0)
    lo, hi = config.lr_final, config.lr
    return lo + (hi - lo) * 0.5 * (1.0 + math.cos(math.pi * progress))


def run_task(config: RunConfig, prior: pol.PolicyParams, seed: Optional[int] = None) -> TaskRun:
    """Optimize a fresh copy of the prior against the configured task.

    One log record per scored molecule (invalid and duplicate included);
    the final batch may overshoot the budget. Replayed episodes are not
    re-scored and do not appear in the log.
    """
    seed = config.seed if seed is None else seed
    reward_fn = make_reward(config)
    agent = prior.copy()
    opt = nc.AdamState(agent.ordered, lr=config.lr)
    shaping = config.shaping_config()
    reg = config.reg_config()
    baseline = config.baseline_state()

    buffer = ReplayBuffer(config.replay_buffer_size, config.replay_sampler) if config.experience_replay else None
    replay_rng = np.random.default_rng([seed, 1])
    memory = DiversityMemory(config.df, config.df_threshold, config.df_bin_capacity) if config.df != "none" else None
    rnd = (
        RndState(coef=config.rnd_coef, lr=config.rnd_lr, seed=int(np.random.default_rng([seed, 3]).integers(2**31)))
        if config.rnd_coef > 0
        else None
    )

    log = RunLog(budget=config.total_smiles)
    scored = 0
    batch_id = 0
    episode_counter = 0
    while scored < config.total_smiles:
        episodes = pol.sample_batch(agent, config.num_envs, seed, start_index=episode_counter)
        episode_counter += config.num_envs
        mols = [analyze(agent.config.vocab.to_string(ep.tokens)) for ep in episodes]
        raw = np.array([reward_fn(m) for m in mols])
        prior_lls = pol.log_likelihood_batch(prior, [ep.tokens for ep in episodes])
        agent_lls = np.array([ep.agent_ll for ep in episodes])

        effective = raw.copy()
        if memory is not None:
            for i, mol in enumerate(mols):
                if mol.valid:
                    fp = fingerprint(mol.tokens) if memory.mode == "similar" else None
                    effective[i] *= memory.penalty(mol.key, fp)
        if rnd is not None:
            valid_idx = [i for i, m in enumerate(mols) if m.valid]
            if valid_idx:
                fps = [fingerprint(mols[i].tokens) for i in valid_idx]
                rnd.observe(rnd.raw_errors(fps))
                bonuses = rnd.bonuses(fps)
                for j, i in enumerate(valid_idx):
                    effective[i] = min(1.0, effective[i] + bonuses[j])
                rnd.train(fps)
        if buffer is not None:
            for i, mol in enumerate(mols):
                if mol.valid:
                    buffer.insert(mol.key, episodes[i].tokens, raw[i], prior_ll=float(prior_lls[i]))

        shaped_all = rl_core.shape_rewards(effective, prior_lls, agent_lls, shaping)
        for i, (ep, mol) in enumerate(zip(episodes, mols)):
            log.append(
                index=scored + i,
                smiles=mol.raw,
                reward=float(raw[i]),
                shaped_reward=float(shaped_all[i]),
                prior_nll=float(-prior_lls[i]),
                agent_nll=float(-agent_lls[i]),
                batch=batch_id,
            )

        train_eps = [
            rl_core.TrainEpisode(
                tokens=ep.tokens,
                reward=float(effective[i]),
                prior_ll=float(prior_lls[i]),
                agent_ll=float(agent_lls[i]),
            )
            for i, ep in enumerate(episodes)
        ]
        if buffer is not None and len(buffer) > 0 and config.replay_batch_size > 0:
            entries = buffer.sample(config.replay_batch_size, replay_rng)
            replay_lls = pol.log_likelihood_batch(agent, [e.tokens for e in entries])
            for e, all_ in zip(entries, replay_lls):
                train_eps.append(
                    rl_core.TrainEpisode(
                        tokens=e.tokens,
                        reward=e.reward,
                        prior_ll=float(e.prior_ll) if e.prior_ll is not None
                        else pol.log_likelihood(prior, e.tokens),
                        agent_ll=float(all_),
                        replay=True,
                    )
                )

        prior_logp_fn = (
            (lambda seqs: pol.step_log_distributions_batch(prior, seqs))
            if reg.lambda_kl > 0
            else None
        )
        with nc.Tape() as tape:
            loss, _info = rl_core.compose_loss(
                train_eps,
                shaping,
                baseline,
                reg,
                forward_fn=lambda seqs: pol.training_forward(agent, seqs),
                prior_logp_fn=prior_logp_fn,
            )
        grads = nc.backward(loss, tape)
        opt.lr = _annealed_lr(config, scored)
        nc.adam_step(agent.ordered, grads, opt)

        scored += len(episodes)
        batch_id += 1

    report = None
    if len(log) > 0:
        report = compute_report(
            log,
            ranges=config.descriptor_ranges(),
            interval=config.auc_interval,
            sediv_sample=config.sediv_sample,
            sediv_threshold=config.sediv_threshold,
            sediv_seed=int(np.random.default_rng([seed, 2]).integers(2**31)),
            unique_includes_invalid=config.unique_includes_invalid,
        )
    return TaskRun(
        task=config.task,
        seed=seed,
        budget=config.total_smiles,
        num_envs=config.num_envs,
        log=log,
        report=report,
    )
