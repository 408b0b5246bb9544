"""Clipped-surrogate PPO for single-step grasp episodes."""
from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .policy import GraspAgent, advantage, normalize_advantages

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    """A non-finite loss was produced; the update was rolled back."""


@dataclass(frozen=True)
class PPOConfig:
    clip_eps: float = 0.2
    lr: float = 3e-4
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    epochs: int = 4
    batch_size: int = 64
    minibatch_size: int = 16
    max_grad_norm: float = 0.5
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    normalize_advantage: bool = True

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        for name in ("lr", "entropy_coef", "value_coef", "max_grad_norm", "adam_eps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.epochs < 1 or self.minibatch_size < 1 or self.batch_size < self.minibatch_size:
            raise ValueError("need epochs >= 1 and batch_size >= minibatch_size >= 1")


@dataclass
class Transition:
    action: int
    log_prob: float
    value: float
    reward: int
    episode: int
    seed: int
    features: np.ndarray | None = None  # cached backbone output, fixed-backbone runs
    color: np.ndarray | None = None  # raw observation, adaptive-backbone runs
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.reward not in (0, 1):
            raise ValueError("reward must be 0 or 1")
        if self.log_prob > 0:
            raise ValueError("log_prob must be <= 0")


STAT_KEYS = ("policy_loss", "value_loss", "entropy", "clip_fraction", "approx_kl")


def clipped_surrogate(logp: torch.Tensor, old_logp: torch.Tensor, adv: torch.Tensor, clip_eps: float):
    """Negated clipped objective and the probability ratio."""
    ratio = torch.exp(logp - old_logp)
    surr1 = ratio * adv
    surr2 = torch.clamp(ratio, 1 - clip_eps, 1 + clip_eps) * adv
    return -torch.min(surr1, surr2).mean(), ratio


def ppo_loss(agent: GraspAgent, inputs: torch.Tensor, actions, old_log_probs, advantages, returns, config: PPOConfig, from_color: bool):
    """Total loss and per-term statistics for one minibatch."""
    if from_color:
        logits, values = agent(inputs)
    else:
        logits, values = agent.policy(inputs)
    flat = logits.reshape(logits.shape[0], -1)
    logp_all = torch.log_softmax(flat, dim=1)
    logp = logp_all.gather(1, actions[:, None])[:, 0]
    entropy = -(logp_all.exp() * logp_all).sum(dim=1).mean()
    policy_loss, ratio = clipped_surrogate(logp, old_log_probs, advantages, config.clip_eps)
    value_loss = ((values - returns) ** 2).mean()
    total = policy_loss + config.value_coef * value_loss - config.entropy_coef * entropy
    with torch.no_grad():
        stats = {
            "policy_loss": float(policy_loss),
            "value_loss": float(value_loss),
            "entropy": float(entropy),
            "clip_fraction": float(((ratio - 1).abs() > config.clip_eps).float().mean()),
            "approx_kl": float((old_log_probs - logp).mean()),
        }
    return total, stats


def make_optimizer(agent: GraspAgent, config: PPOConfig) -> torch.optim.Adam:
    params = [p for p in agent.parameters() if p.requires_grad]
    return torch.optim.Adam(params, lr=config.lr, betas=config.betas, eps=config.adam_eps)


def batch_tensors(agent: GraspAgent, batch: list[Transition], config: PPOConfig):
    from_color = not agent.fixed_backbone
    if from_color:
        inputs = torch.from_numpy(np.stack([t.color for t in batch]).astype(np.float32))
    else:
        inputs = torch.from_numpy(np.stack([t.features for t in batch]).astype(np.float32))
    dtype = next(agent.parameters()).dtype
    inputs = inputs.to(dtype)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    values = np.array([t.value for t in batch], dtype=np.float64)
    adv = np.array([advantage(r, v) for r, v in zip(rewards, values)])
    if config.normalize_advantage:
        adv = normalize_advantages(adv)
    return (
        inputs,
        torch.tensor([t.action for t in batch], dtype=torch.long),
        torch.tensor([t.log_prob for t in batch], dtype=dtype),
        torch.tensor(adv, dtype=dtype),
        torch.tensor(rewards, dtype=dtype),
        from_color,
    )


def ppo_update(agent: GraspAgent, optimizer: torch.optim.Optimizer, batch: list[Transition], config: PPOConfig, seed: int = 0) -> dict:
    """Several epochs of shuffled minibatch steps; returns mean loss statistics.

    On a non-finite loss every parameter and the optimizer state are rolled back
    and NumericalError is raised.
    """
    if not batch:
        raise ValueError("empty batch")
    if len(batch) < config.minibatch_size:
        raise ValueError("batch smaller than one minibatch")
    inputs, actions, old_logp, adv, returns, from_color = batch_tensors(agent, batch, config)
    saved_params = copy.deepcopy(agent.state_dict())
    saved_opt = copy.deepcopy(optimizer.state_dict())
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x990]))
    params = [p for p in agent.parameters() if p.requires_grad]
    totals = {k: 0.0 for k in STAT_KEYS}
    steps = 0
    n = len(batch)
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n - config.minibatch_size + 1, config.minibatch_size):
            idx = torch.from_numpy(order[start : start + config.minibatch_size])
            loss, stats = ppo_loss(
                agent, inputs[idx], actions[idx], old_logp[idx], adv[idx], returns[idx], config, from_color
            )
            if not torch.isfinite(loss):
                agent.load_state_dict(saved_params)
                optimizer.load_state_dict(saved_opt)
                log.error("non-finite PPO loss %s; update rolled back (stats %s)", float(loss.detach()), stats)
                raise NumericalError(f"non-finite loss {float(loss.detach())}")
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params, config.max_grad_norm)
            optimizer.step()
            for k in STAT_KEYS:
                totals[k] += stats[k]
            steps += 1
    return {k: v / steps for k, v in totals.items()}
