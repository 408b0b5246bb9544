"""Rollout/update training loop with metrics, periodic checkpoints and resume."""
from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt_io
from .config import RunConfig
from .env import EpisodeSpec, RecordWriter, derive_seed, episode_specs, read_records, rollout
from .geometry import Scene
from .policy import GraspAgent, snapshot
from .ppo import STAT_KEYS, make_optimizer, ppo_update

log = logging.getLogger(__name__)

METRICS_VERSION = 1
METRIC_FIELDS = ("episode", "round", "success_trailing", "success_batch") + STAT_KEYS
FINAL_NAME = "final.fgsp"


@dataclass
class TrainResult:
    episodes: int
    final_checkpoint: Path
    metrics_path: Path
    success_trailing: float
    agent: GraspAgent


def build_agent(config: RunConfig) -> GraspAgent:
    return GraspAgent(config.backbone_config(), config.policy.ac_mode, config.policy.hidden)


def checkpoint_name(episode: int) -> str:
    return f"ckpt_{episode:07d}.fgsp"


def read_metrics(path) -> tuple[dict, list[dict]]:
    lines = Path(path).read_text().splitlines()
    return json.loads(lines[0]), [json.loads(line) for line in lines[1:] if line.strip()]


def _open_metrics(path: Path, resume_episode: int | None):
    header = json.dumps({"version": METRICS_VERSION, "fields": list(METRIC_FIELDS)})
    if resume_episode is None or not path.exists():
        fh = open(path, "w")
        fh.write(header + "\n")
        return fh
    # drop anything logged after the checkpoint we resume from
    _, rows = read_metrics(path)
    kept = [r for r in rows if r["episode"] <= resume_episode]
    fh = open(path, "w")
    fh.write(header + "\n")
    for r in kept:
        fh.write(json.dumps(r) + "\n")
    return fh


def _open_records(path: Path, resume_episode: int | None) -> RecordWriter:
    if resume_episode is None or not path.exists():
        return RecordWriter(path, "w")
    kept = [r for r in read_records(path) if r["index"] < resume_episode]
    writer = RecordWriter(path, "w")
    for r in kept:
        writer.write_dict(r)
    return writer


def train(
    config: RunConfig,
    out_dir=None,
    resume=None,
    workers: int | None = None,
    scene: Scene | None = None,
    progress=None,
) -> TrainResult:
    """Train to ``config.total_episodes``.

    ``scene`` freezes every episode onto one scene (bandit mode). ``resume``
    is a checkpoint path; training continues at its recorded episode index.
    Raises ``ppo.NumericalError`` on a non-finite loss.
    """
    torch.set_num_threads(1)
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    workers = workers or config.workers
    env_cfg = config.env_config()
    ppo_cfg = config.ppo_config()
    # checkpoints stay byte-identical across output locations and worker counts
    cfg_json = config.model_dump(mode="json", exclude={"out_dir", "workers"})

    agent = build_agent(config)
    optimizer = make_optimizer(agent, ppo_cfg)
    episode = 0
    trailing: deque[int] = deque(maxlen=config.trailing_window)
    resume_episode = None
    if resume is not None:
        ck = ckpt_io.load(resume)
        if ck.meta.get("config_hash") not in (None, config.config_hash()):
            log.warning("resuming with a config that differs from the checkpoint's")
        ckpt_io.load_into(agent, ck, optimizer)
        episode = int(ck.meta["episode"])
        trailing.extend(int(r) for r in ck.meta.get("trailing", []))
        resume_episode = episode

    def save(name: str) -> Path:
        meta = {"episode": episode, "trailing": list(trailing), "config_hash": config.config_hash()}
        return ckpt_io.save(out / name, agent, cfg_json, meta, optimizer)

    metrics_path = out / "metrics.jsonl"
    records = None
    if config.record_episodes:
        records = _open_records(out / "episodes.jsonl", resume_episode)
    next_ckpt = (episode // config.eval_every + 1) * config.eval_every
    try:
        with _open_metrics(metrics_path, resume_episode) as metrics:
            while episode < config.total_episodes:
                n = min(ppo_cfg.batch_size, config.total_episodes - episode)
                rnd = episode // ppo_cfg.batch_size
                if scene is None:
                    specs = episode_specs(n, config.seed, episode)
                else:
                    specs = [
                        EpisodeSpec(derive_seed(config.seed, episode + i), scene=scene, index=episode + i)
                        for i in range(n)
                    ]
                batch, recs = rollout(env_cfg, snapshot(agent), specs=specs, workers=workers)
                if records is not None:
                    for r in recs:
                        records.write(r)
                rewards = [t.reward for t in batch]
                trailing.extend(rewards)
                episode += n
                row = {
                    "episode": episode,
                    "round": rnd,
                    "success_trailing": float(np.mean(trailing)),
                    "success_batch": float(np.mean(rewards)),
                }
                if n >= ppo_cfg.minibatch_size:
                    row.update(ppo_update(agent, optimizer, batch, ppo_cfg, seed=derive_seed(config.seed, rnd, 0x5E)))
                else:
                    row.update({k: None for k in STAT_KEYS})
                metrics.write(json.dumps(row) + "\n")
                metrics.flush()
                if progress is not None:
                    progress(row)
                if episode >= next_ckpt:
                    save(checkpoint_name(episode))
                    next_ckpt += config.eval_every
    finally:
        if records is not None:
            records.close()
    final = save(FINAL_NAME)
    return TrainResult(episode, final, metrics_path, float(np.mean(trailing)) if trailing else 0.0, agent)
