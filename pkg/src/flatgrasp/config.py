"""Run configuration: one JSON document, schema-checked, unknown keys rejected."""
from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .backbone import BackboneConfig
from .decoder import DecoderParams
from .env import EnvConfig
from .geometry import FAMILIES, TRAINING_FAMILIES
from .outcome import GraspParams
from .ppo import PPOConfig

SEED_ENV = "FLATGRASP_SEED"


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class EnvSection(_Section):
    families: list[str] = Field(default_factory=lambda: list(TRAINING_FAMILIES), min_length=1)
    mc_trials: int = Field(0, ge=0)

    @field_validator("families")
    @classmethod
    def _known(cls, v):
        unknown = [f for f in v if f not in FAMILIES]
        if unknown:
            raise ValueError(f"unknown families: {unknown}")
        return v


class BackboneSection(_Section):
    mode: Literal["fixed", "adaptive"] = "fixed"
    channels: int = Field(8, ge=1)
    strides: tuple[int, int, int] = (2, 2, 1)


class PolicySection(_Section):
    ac_mode: Literal["shared", "independent"] = "shared"
    hidden: int = Field(16, ge=1)


class PPOSection(_Section):
    clip_eps: float = Field(0.2, gt=0, lt=1)
    lr: float = Field(3e-4, gt=0)
    entropy_coef: float = Field(0.01, gt=0)
    value_coef: float = Field(0.5, gt=0)
    epochs: int = Field(4, ge=1)
    batch_size: int = Field(64, ge=1)
    minibatch_size: int = Field(16, ge=1)
    max_grad_norm: float = Field(0.5, gt=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    normalize_advantage: bool = True


class GraspSection(_Section):
    squeeze_force: float = Field(40.0, gt=0)
    gravity: float = Field(9.81, gt=0)
    lift_height: float = Field(0.45, gt=0)
    antipodal_tol_deg: float = Field(20.0, gt=0, lt=90)
    com_offset_max: float = Field(0.04, gt=0)
    h_min: float = Field(0.02, gt=0)
    contact_noise: float = Field(0.003, ge=0)
    mc_pass_fraction: float = Field(0.7, gt=0, le=1)


class DecoderSection(_Section):
    d_min: float = Field(0.15, gt=0)
    h_min: float = Field(0.02, gt=0)
    reach: float = Field(0.9, gt=0)
    refine_offset: int = Field(3, ge=0)


class RunConfig(_Section):
    seed: int = Field(0, ge=0, lt=2**63)
    total_episodes: int = Field(50_000, ge=0)
    eval_every: int = Field(5_000, ge=1)  # checkpoint cadence, in episodes
    trailing_window: int = Field(500, ge=1)
    workers: int = Field(1, ge=1)
    out_dir: str = "runs/default"
    record_episodes: bool = False
    env: EnvSection = EnvSection()
    backbone: BackboneSection = BackboneSection()
    policy: PolicySection = PolicySection()
    ppo: PPOSection = PPOSection()
    grasp: GraspSection = GraspSection()
    decoder: DecoderSection = DecoderSection()

    @field_validator("ppo")
    @classmethod
    def _batches(cls, v: PPOSection):
        if v.batch_size < v.minibatch_size:
            raise ValueError("batch_size must be >= minibatch_size")
        return v

    # -- conversions -----------------------------------------------------

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(self.backbone.mode, self.backbone.channels, self.seed, tuple(self.backbone.strides))

    def ppo_config(self) -> PPOConfig:
        return PPOConfig(**self.ppo.model_dump())

    def grasp_params(self) -> GraspParams:
        d = self.grasp.model_dump()
        d["antipodal_tol"] = math.radians(d.pop("antipodal_tol_deg"))
        d["mc_trials"] = self.env.mc_trials
        return GraspParams(**d)

    def decoder_params(self) -> DecoderParams:
        return DecoderParams(**self.decoder.model_dump())

    def env_config(self, evaluation: bool = False) -> EnvConfig:
        return EnvConfig(
            families=tuple(self.env.families),
            seed=self.seed,
            backbone_mode=self.backbone.mode,
            evaluation=evaluation,
            mc_trials=self.env.mc_trials,
            grasp=self.grasp_params(),
            decoder=self.decoder_params(),
        )

    def canonical_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), sort_keys=True)

    def config_hash(self) -> str:
        # output location and worker count never change results
        d = self.model_dump(mode="json", exclude={"out_dir", "workers"})
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


class ConfigError(ValueError):
    pass


def parse_config(text: str, seed: int | None = None, env: dict | None = None) -> RunConfig:
    """Parse a JSON document; FLATGRASP_SEED overrides the file, an explicit seed overrides both."""
    env = os.environ if env is None else env
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if env.get(SEED_ENV):
        try:
            data["seed"] = int(env[SEED_ENV])
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV} must be an integer") from exc
    if seed is not None:
        data["seed"] = int(seed)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path, seed: int | None = None, env: dict | None = None) -> tuple[RunConfig, str]:
    """Returns the validated config and the raw document text."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, seed, env), text
