"""Greedy evaluation on a frozen object manifest and the success table it produces."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import EnvConfig, EpisodeSpec, RecordWriter, derive_seed, rollout
from .geometry import FAMILIES, generate_object
from .policy import GraspAgent, snapshot

MANIFEST_VERSION = 1
DEFAULT_RUNS = 30


class ManifestError(ValueError):
    pass


def make_manifest(families, count: int, seed: int) -> dict:
    """``count`` objects per family; object seeds derive from ``seed``."""
    objects = []
    for family in families:
        if family not in FAMILIES:
            raise ManifestError(f"unknown family {family!r}")
        for k in range(count):
            obj = generate_object(family, derive_seed(seed, FAMILIES.index(family), k) % 2**63)
            objects.append(obj.manifest_entry())
    return {"version": MANIFEST_VERSION, "seed": int(seed), "objects": objects}


def dump_manifest(manifest: dict) -> str:
    return json.dumps(manifest, sort_keys=True, indent=1) + "\n"


def load_manifest(path) -> dict:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if data.get("version") != MANIFEST_VERSION or not isinstance(data.get("objects"), list):
        raise ManifestError("manifest must carry version 1 and an object list")
    for entry in data["objects"]:
        if entry.get("family") not in FAMILIES or not isinstance(entry.get("seed"), int):
            raise ManifestError(f"bad manifest entry {entry}")
        regenerated = generate_object(entry["family"], entry["seed"]).manifest_entry()
        if "dims" in entry and not _close(entry["dims"], regenerated["dims"]):
            raise ManifestError(f"manifest entry {entry['family']}/{entry['seed']} does not regenerate")
    return data


def _close(a: dict, b: dict) -> bool:
    return a.keys() == b.keys() and all(np.isclose(a[k], b[k], rtol=1e-9, atol=1e-12) for k in a)


def object_ids(entries) -> list[str]:
    counts: dict[str, int] = {}
    for e in entries:
        counts[e["family"]] = counts.get(e["family"], 0) + 1
    seen: dict[str, int] = {}
    ids = []
    for e in entries:
        fam = e["family"]
        if counts[fam] == 1:
            ids.append(fam)
        else:
            seen[fam] = seen.get(fam, 0) + 1
            ids.append(f"{fam}#{seen[fam]}")
    return ids


@dataclass
class ObjectResult:
    object_id: str
    family: str
    seed: int
    runs: int
    successes: int

    @property
    def mean(self) -> float:
        return 100.0 * self.successes / self.runs

    def to_dict(self) -> dict:
        return {
            "object_id": self.object_id,
            "family": self.family,
            "seed": self.seed,
            "runs": self.runs,
            "successes": self.successes,
            "mean": self.mean,
        }


@dataclass
class EvalReport:
    objects: list[ObjectResult]
    config_hash: str
    checkpoint_id: str
    seed: int
    extra: dict = field(default_factory=dict)

    @property
    def all_mean(self) -> float:
        return float(np.mean([o.mean for o in self.objects])) if self.objects else 0.0

    def to_dict(self) -> dict:
        return {
            "objects": [o.to_dict() for o in self.objects],
            "All": self.all_mean,
            "config_hash": self.config_hash,
            "checkpoint_id": self.checkpoint_id,
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def table(self, label: str = "Policy") -> str:
        """Plain-text table: one header row of object ids, one row of mean success %."""
        cols = [o.object_id for o in self.objects] + ["All"]
        vals = [f"{o.mean:.1f}" for o in self.objects] + [f"{self.all_mean:.1f}"]
        widths = [max(len(c), len(v)) for c, v in zip(cols, vals)]
        lw = max(len("Method"), len(label))
        head = "Method".ljust(lw) + " | " + " | ".join(c.rjust(w) for c, w in zip(cols, widths))
        row = label.ljust(lw) + " | " + " | ".join(v.rjust(w) for v, w in zip(vals, widths))
        return "\n".join([head, "-" * len(head), row]) + "\n"


def checkpoint_id(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def evaluate_agent(
    agent: GraspAgent,
    entries: list[dict],
    runs: int = DEFAULT_RUNS,
    seed: int = 0,
    env_config: EnvConfig | None = None,
    workers: int = 1,
    records_path=None,
    config_hash: str = "",
    ckpt_id: str = "",
) -> EvalReport:
    """Greedy policy, ``runs`` poses per object from a fixed per-object seed sequence."""
    if runs < 1:
        raise ValueError("runs must be >= 1")
    env_config = env_config or EnvConfig(evaluation=True)
    specs = [
        EpisodeSpec(derive_seed(seed, j, k), family=e["family"], object_seed=e["seed"], index=j * runs + k)
        for j, e in enumerate(entries)
        for k in range(runs)
    ]
    transitions, records = rollout(env_config, snapshot(agent), specs=specs, workers=workers, evaluation=True)
    if records_path is not None:
        with RecordWriter(records_path) as w:
            for r in records:
                w.write(r)
    rewards = np.array([t.reward for t in transitions], dtype=int).reshape(len(entries), runs) if entries else np.zeros((0, runs), int)
    results = [
        ObjectResult(oid, e["family"], int(e["seed"]), runs, int(rewards[j].sum()))
        for j, (oid, e) in enumerate(zip(object_ids(entries), entries))
    ]
    return EvalReport(results, config_hash, ckpt_id, int(seed))
