"""Single-step grasp MDP and order-preserving parallel rollouts."""
from __future__ import annotations

import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .decoder import MAP_SIZE, DecoderParams, GraspPlan, decode
from .geometry import (
    TRAINING_FAMILIES,
    Observation,
    Pose2D,
    Scene,
    generate_object,
    rasterize,
    sample_pose,
)
from .outcome import GraspOutcome, GraspParams, evaluate
from .policy import GraspAgent, Snapshot, agent_from_snapshot, greedy_action, sample_action
from .ppo import Transition

RECORD_SCHEMA_VERSION = 1
# network forward passes run in fixed-size chunks so results never depend on worker count
FORWARD_CHUNK = 32


def derive_seed(*parts: int) -> int:
    """Stable 64-bit seed from integer parts."""
    ss = np.random.SeedSequence([int(p) & 0xFFFFFFFFFFFFFFFF for p in parts])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass(frozen=True)
class EnvConfig:
    families: tuple[str, ...] = TRAINING_FAMILIES
    seed: int = 0
    backbone_mode: str = "fixed"
    evaluation: bool = False
    mc_trials: int = 0
    grasp: GraspParams = GraspParams()
    decoder: DecoderParams = DecoderParams()

    def __post_init__(self):
        if not self.families:
            raise ValueError("family pool must not be empty")

    @property
    def grasp_params(self) -> GraspParams:
        if self.mc_trials == self.grasp.mc_trials:
            return self.grasp
        return replace(self.grasp, mc_trials=self.mc_trials)


@dataclass(frozen=True)
class EpisodeSpec:
    """What to put on the table: a pool draw, a fixed object, or a frozen scene."""

    seed: int
    family: str | None = None
    object_seed: int | None = None
    scene: Scene | None = None
    index: int = 0


@dataclass
class EpisodeRecord:
    seed: int
    object: dict
    pose: dict
    action: list[int]
    plan: dict
    outcome: dict
    reward: int
    duration_ms: float
    index: int = 0

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "seed": self.seed,
            "object": self.object,
            "pose": self.pose,
            "action": self.action,
            "plan": self.plan,
            "outcome": self.outcome,
            "reward": self.reward,
            "duration_ms": self.duration_ms,
        }


class GraspEnv:
    def __init__(self, config: EnvConfig = EnvConfig()):
        self.config = config
        self.scene: Scene | None = None
        self.observation: Observation | None = None
        self.seed = 0
        self._t0 = 0.0

    def reset(self, seed: int, family: str | None = None, object_seed: int | None = None, scene: Scene | None = None) -> Observation:
        self._t0 = time.perf_counter()
        self.seed = int(seed)
        if scene is None:
            rng = np.random.default_rng(derive_seed(seed, 0xFA))
            if family is None:
                family = self.config.families[int(rng.integers(len(self.config.families)))]
            if object_seed is None:
                object_seed = derive_seed(seed, 0x0B)
            obj = generate_object(family, object_seed)
            scene = Scene(obj, sample_pose(obj, derive_seed(seed, 0x90)))
        self.scene = scene
        self.observation = rasterize(scene)
        return self.observation

    def step(self, action) -> tuple[int, EpisodeRecord, bool]:
        if self.scene is None:
            raise RuntimeError("reset() before step()")
        cell = divmod(int(action), MAP_SIZE) if np.ndim(action) == 0 else (int(action[0]), int(action[1]))
        obs = self.observation
        plan = decode(cell, obs.mask, obs.depth, self.scene.edges_world(), self.config.decoder)
        outcome = evaluate(plan, self.scene, self.config.grasp_params, seed=derive_seed(self.seed, 0x0C))
        r = outcome.reward
        record = make_record(self.seed, self.scene, cell, plan, outcome, (time.perf_counter() - self._t0) * 1000)
        return r, record, True


def make_record(seed: int, scene: Scene, cell, plan: GraspPlan, outcome: GraspOutcome, duration_ms: float, index: int = 0) -> EpisodeRecord:
    obj = scene.object
    return EpisodeRecord(
        seed=int(seed),
        object=obj.manifest_entry(),
        pose={"x": scene.pose.x, "y": scene.pose.y, "theta": scene.pose.theta},
        action=[int(cell[0]), int(cell[1])],
        plan=plan.to_dict(),
        outcome=outcome.to_dict(),
        reward=outcome.reward,
        duration_ms=duration_ms,
        index=index,
    )


# ---------------------------------------------------------------------------
# rollouts


def _reset_task(args):
    config, spec = args
    env = GraspEnv(config)
    obs = env.reset(spec.seed, spec.family, spec.object_seed, spec.scene)
    return env.scene, obs, time.perf_counter() - env._t0


def _step_task(args):
    config, spec, scene, obs, cell, elapsed = args
    t0 = time.perf_counter()
    env = GraspEnv(config)
    env.scene, env.observation, env.seed = scene, obs, spec.seed
    env._t0 = t0 - elapsed
    r, record, _ = env.step(cell)
    record.index = spec.index
    return r, record


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def policy_outputs(agent: GraspAgent, colors: np.ndarray):
    """Features, logits and values for a stack of color images, chunked deterministically."""
    feats, logits, values = [], [], []
    dtype = next(agent.parameters()).dtype
    with torch.no_grad():
        for i in range(0, len(colors), FORWARD_CHUNK):
            x = torch.from_numpy(np.ascontiguousarray(colors[i : i + FORWARD_CHUNK])).to(dtype)
            f = agent.features(x)
            lg, v = agent.policy(f)
            feats.append(f.numpy())
            logits.append(lg.numpy())
            values.append(v.numpy())
    if not feats:
        return np.zeros((0,)), np.zeros((0, MAP_SIZE, MAP_SIZE)), np.zeros((0,))
    return np.concatenate(feats), np.concatenate(logits), np.concatenate(values)


def episode_specs(n: int, seed: int, start_index: int = 0) -> list[EpisodeSpec]:
    return [EpisodeSpec(derive_seed(seed, start_index + i), index=start_index + i) for i in range(n)]


def rollout(
    config: EnvConfig,
    policy: GraspAgent | Snapshot,
    n: int | None = None,
    seed: int = 0,
    workers: int = 1,
    evaluation: bool | None = None,
    specs: list[EpisodeSpec] | None = None,
    start_index: int = 0,
) -> tuple[list[Transition], list[EpisodeRecord]]:
    """Run single-step episodes; output order follows episode index, never scheduling."""
    agent = agent_from_snapshot(policy) if isinstance(policy, Snapshot) else policy
    greedy = config.evaluation if evaluation is None else evaluation
    if specs is None:
        specs = episode_specs(n or 0, seed, start_index)
    if not specs:
        return [], []
    resets = _map(_reset_task, [(config, s) for s in specs], workers)
    colors = np.stack([obs.color for _, obs, _ in resets])
    feats, logits, values = policy_outputs(agent, colors)
    actions, logps = [], []
    for spec, lg in zip(specs, logits):
        if greedy:
            idx, _ = greedy_action(lg)
        else:
            idx, _ = sample_action(lg, np.random.default_rng(derive_seed(spec.seed, 0xAC)))
        actions.append(idx)
        flat = torch.from_numpy(lg.reshape(1, -1))
        logps.append(min(float(torch.log_softmax(flat, dim=1)[0, idx]), 0.0))
    h, w = logits.shape[1:]
    step_args = [
        (config, spec, scene, obs, divmod(a, w), elapsed)
        for spec, (scene, obs, elapsed), a in zip(specs, resets, actions)
    ]
    results = _map(_step_task, step_args, workers)
    fixed = agent.fixed_backbone
    transitions, records = [], []
    for i, (spec, (r, record)) in enumerate(zip(specs, results)):
        transitions.append(
            Transition(
                action=actions[i],
                log_prob=logps[i],
                value=float(values[i]),
                reward=int(r),
                episode=spec.index,
                seed=spec.seed,
                features=feats[i] if fixed else None,
                color=None if fixed else colors[i],
            )
        )
        records.append(record)
    return transitions, records


# ---------------------------------------------------------------------------
# record stream


class RecordWriter:
    """JSONL episode stream with a schema header on the first line."""

    def __init__(self, path, mode: str = "w"):
        self.path = Path(path)
        fresh = mode == "w" or not self.path.exists()
        self._fh = open(self.path, "w" if fresh else "a")
        if fresh:
            self._fh.write(json.dumps({"schema": "flatgrasp.episode", "version": RECORD_SCHEMA_VERSION}) + "\n")

    def write(self, record: EpisodeRecord) -> None:
        self.write_dict(record.to_dict())

    def write_dict(self, doc: dict) -> None:
        self._fh.write(json.dumps(doc) + "\n")

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_records(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    if not lines:
        return []
    header = json.loads(lines[0])
    if header.get("schema") != "flatgrasp.episode":
        raise ValueError(f"{path} is not an episode record stream")
    return [json.loads(line) for line in lines[1:] if line.strip()]


def scene_from_record(rec: dict) -> Scene:
    obj = generate_object(rec["object"]["family"], rec["object"]["seed"])
    p = rec["pose"]
    return Scene(obj, Pose2D(p["x"], p["y"], p["theta"]))


__all__ = [
    "EnvConfig",
    "EpisodeRecord",
    "EpisodeSpec",
    "GraspEnv",
    "RecordWriter",
    "derive_seed",
    "episode_specs",
    "read_records",
    "rollout",
    "scene_from_record",
]
