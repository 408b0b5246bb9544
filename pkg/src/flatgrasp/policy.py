"""Actor-critic head over the feature volume and the categorical action over map cells."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import Backbone, BackboneConfig, conv3x3, init_uniform_fan_in

AC_MODES = ("shared", "independent")


def _trunk(channels: int, hidden: int) -> nn.Sequential:
    return nn.Sequential(conv3x3(channels, hidden), nn.ReLU(), conv3x3(hidden, hidden), nn.ReLU())


class PolicyNetwork(nn.Module):
    """Conv trunk, 1x1 actor head producing per-cell logits, mean-pooled critic."""

    def __init__(self, channels: int = 8, hidden: int = 16, ac_mode: str = "shared", seed: int = 0):
        super().__init__()
        if ac_mode not in AC_MODES:
            raise ValueError(f"ac_mode must be one of {AC_MODES}")
        self.ac_mode = ac_mode
        self.trunk = _trunk(channels, hidden)
        self.critic_trunk = _trunk(channels, hidden) if ac_mode == "independent" else None
        self.actor = nn.Conv2d(hidden, 1, 1)
        self.critic = nn.Linear(hidden, 1)
        init_uniform_fan_in(self, seed + 1)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if features.dim() != 4:
            raise ValueError(f"expected (B, C, H, W) features, got {tuple(features.shape)}")
        h = self.trunk(features)
        logits = self.actor(h)[:, 0]
        hc = h if self.critic_trunk is None else self.critic_trunk(features)
        value = self.critic(hc.mean(dim=(2, 3)))[:, 0]
        return logits, value


class GraspAgent(nn.Module):
    """Backbone plus actor-critic; the unit that is trained, snapshotted and checkpointed."""

    def __init__(self, backbone_config: BackboneConfig = BackboneConfig(), ac_mode: str = "shared", hidden: int = 16):
        super().__init__()
        self.backbone = Backbone(backbone_config)
        self.policy = PolicyNetwork(backbone_config.channels, hidden, ac_mode, backbone_config.seed)

    @property
    def fixed_backbone(self) -> bool:
        return self.backbone.fixed

    def features(self, color: torch.Tensor) -> torch.Tensor:
        return self.backbone(color)

    def forward(self, color: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.policy(self.backbone(color))

    def architecture(self) -> dict:
        return {
            "backbone": {
                "mode": self.backbone.config.mode,
                "channels": self.backbone.config.channels,
                "seed": self.backbone.config.seed,
                "strides": list(self.backbone.config.strides),
            },
            "ac_mode": self.policy.ac_mode,
            "hidden": self.policy.actor.in_channels,
        }


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64).ravel()
    z = z - z.max()
    p = np.exp(z)
    return p / p.sum()


def sample_actions(logits, rng: np.random.Generator, n: int) -> np.ndarray:
    """``n`` inverse-CDF draws from softmax(logits); flat indices."""
    p = softmax_probs(logits)
    cdf = np.cumsum(p)
    u = rng.random(n) * cdf[-1]
    return np.minimum(np.searchsorted(cdf, u, side="right"), len(p) - 1)


def log_softmax_at(logits, idx: int) -> float:
    z = np.asarray(logits, dtype=np.float64).ravel()
    shifted = z - z.max()
    return float(min(shifted[idx] - np.log(np.exp(shifted).sum()), 0.0))


def sample_action(logits, seed) -> tuple[int, float]:
    """Draw one cell from softmax(logits); returns (flat index, log-probability)."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    if not np.all(np.isfinite(z)):
        raise ValueError("logits must be finite")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = int(sample_actions(z, rng, 1)[0])
    return idx, log_softmax_at(z, idx)


def greedy_action(logits) -> tuple[int, float]:
    """Argmax cell, ties broken by the smallest flat index."""
    z = np.asarray(logits, dtype=np.float64).ravel()
    idx = int(np.argmax(z))
    return idx, log_softmax_at(z, idx)


def advantage(reward: float, value: float) -> float:
    """Single-step episodes: the return is the reward itself."""
    return float(reward) - float(value)


def normalize_advantages(adv: np.ndarray, min_std: float = 1e-8) -> np.ndarray:
    adv = np.asarray(adv, dtype=np.float64)
    return (adv - adv.mean()) / max(adv.std(), min_std)


@dataclass(frozen=True)
class Snapshot:
    """Read-only copy of every agent parameter and buffer, in declaration order."""

    version: int
    architecture: dict
    names: tuple[str, ...]
    arrays: tuple[np.ndarray, ...]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(zip(self.names, self.arrays))


SNAPSHOT_VERSION = 1


def snapshot(agent: GraspAgent) -> Snapshot:
    names, arrays = [], []
    for name, t in agent.state_dict().items():
        a = t.detach().cpu().numpy().copy()
        a.setflags(write=False)
        names.append(name)
        arrays.append(a)
    return Snapshot(SNAPSHOT_VERSION, agent.architecture(), tuple(names), tuple(arrays))


def restore(agent: GraspAgent, snap: Snapshot) -> None:
    if snap.version != SNAPSHOT_VERSION:
        raise ValueError(f"snapshot version {snap.version} != {SNAPSHOT_VERSION}")
    state = agent.state_dict()
    if tuple(state) != snap.names or snap.architecture != agent.architecture():
        raise ValueError("snapshot does not match agent architecture")
    for name, a in zip(snap.names, snap.arrays):
        if tuple(state[name].shape) != a.shape:
            raise ValueError(f"shape mismatch for {name}: {a.shape} vs {tuple(state[name].shape)}")
    with torch.no_grad():
        for name, a in zip(snap.names, snap.arrays):
            state[name].copy_(torch.from_numpy(np.array(a)).to(state[name].dtype))


def agent_from_snapshot(snap: Snapshot) -> GraspAgent:
    arch = snap.architecture
    bb = arch["backbone"]
    agent = GraspAgent(
        BackboneConfig(bb["mode"], bb["channels"], bb["seed"], tuple(bb["strides"])),
        arch["ac_mode"],
        arch["hidden"],
    )
    restore(agent, snap)
    return agent
