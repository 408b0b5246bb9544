"""Quasi-static squeeze-and-lift verdict for a dual-arm grasp plan."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .decoder import ContactSide, GraspPlan
from .geometry import Scene


@dataclass(frozen=True)
class GraspParams:
    squeeze_force: float = 40.0
    gravity: float = 9.81
    lift_height: float = 0.45
    antipodal_tol: float = float(np.deg2rad(20.0))
    com_offset_max: float = 0.04
    h_min: float = 0.02
    contact_noise: float = 0.003
    mc_trials: int = 0
    mc_pass_fraction: float = 0.7

    def __post_init__(self):
        if self.squeeze_force <= 0:
            raise ValueError("squeeze_force must be positive")
        if not 0 < self.antipodal_tol < np.pi / 2:
            raise ValueError("antipodal_tol must lie in (0, pi/2)")
        if self.com_offset_max <= 0:
            raise ValueError("com_offset_max must be positive")


@dataclass(frozen=True)
class CheckResult:
    passed: bool
    value: float

    def to_dict(self) -> dict:
        return {"pass": self.passed, "value": self.value}


@dataclass(frozen=True)
class GraspOutcome:
    success: bool
    checks: dict[str, CheckResult] = field(default_factory=dict)
    mc_pass_fraction: float | None = None

    @property
    def reward(self) -> int:
        return reward(self)

    def to_dict(self) -> dict:
        d = {
            "success": self.success,
            "reward": self.reward,
            "checks": {k: v.to_dict() for k, v in self.checks.items()},
        }
        if self.mc_pass_fraction is not None:
            d["mc_pass_fraction"] = self.mc_pass_fraction
        return d


def reward(outcome: GraspOutcome) -> int:
    return int(bool(outcome.success))


def _angle(u: np.ndarray, v: np.ndarray) -> float:
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu < 1e-12 or nv < 1e-12:
        return np.pi
    return float(np.arccos(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)))


def wedge_sign(bevel: float) -> float:
    """+1 when squeezing the face pushes the object up (top overhangs the base)."""
    return 1.0 if bevel > 0 else -1.0


def vertical_support(squeeze_force: float, friction: float, bevels) -> float:
    """Largest upward force both faces can carry: sum F (mu cos b + s sin b)."""
    return float(
        sum(squeeze_force * (friction * np.cos(b) + wedge_sign(b) * np.sin(abs(b))) for b in bevels)
    )


def point_segment_distance(p: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    ab = b - a
    denom = float(np.dot(ab, ab))
    t = 0.0 if denom == 0 else float(np.clip(np.dot(p - a, ab) / denom, 0.0, 1.0))
    return float(np.linalg.norm(p - (a + t * ab)))


def run_checks(a: ContactSide, b: ContactSide, scene: Scene, params: GraspParams) -> dict[str, CheckResult]:
    line = b.contact - a.contact
    worst = max(
        _angle(a.normal, -b.normal),
        _angle(a.normal, line),
        _angle(b.normal, -line),
    )
    antipodal = CheckResult(worst <= params.antipodal_tol, worst)

    obj = scene.object
    weight = obj.mass * params.gravity
    support = vertical_support(params.squeeze_force, obj.friction, (a.bevel, b.bevel))
    friction = CheckResult(support >= weight, support - weight)

    offset = point_segment_distance(scene.centroid_world(), a.contact, b.contact)
    torque = CheckResult(offset <= params.com_offset_max, offset)

    face_h = min(a.face_height, b.face_height)
    face = CheckResult(face_h >= params.h_min, face_h)
    return {"antipodal": antipodal, "friction": friction, "torque": torque, "face": face}


def _perturb(side: ContactSide, plan: GraspPlan, steps: int, offset: int) -> ContactSide:
    """Slide a contact cluster ``steps`` cells along the contour."""
    contour = plan.contour
    n = len(contour)
    idx = (side.contour_index + steps) % n
    picks = [(idx - offset) % n, idx, (idx + offset) % n]
    points = contour.xy[picks] * plan.cell_size
    outward = contour.normals[picks].mean(axis=0)
    norm = np.linalg.norm(outward)
    normal = -outward / norm if norm > 1e-12 else np.zeros(2)
    return replace(side, points=points, contact=points.mean(axis=0), normal=normal, contour_index=idx)


def evaluate(plan: GraspPlan, scene: Scene, params: GraspParams = GraspParams(), seed: int = 0) -> GraspOutcome:
    """Deterministic verdict when ``mc_trials == 0``; otherwise a seeded Monte Carlo pass rate."""
    if not plan.valid:
        return GraspOutcome(False)
    checks = run_checks(plan.side_a, plan.side_b, scene, params)
    if params.mc_trials <= 0 or plan.contour is None:
        return GraspOutcome(all(c.passed for c in checks.values()), checks)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x3C]))
    offset = plan.refine_offset
    passes = 0
    for _ in range(params.mc_trials):
        steps = np.rint(rng.normal(0.0, params.contact_noise, size=2) / plan.cell_size).astype(int)
        a = _perturb(plan.side_a, plan, int(steps[0]), offset)
        b = _perturb(plan.side_b, plan, int(steps[1]), offset)
        trial = run_checks(a, b, scene, params)
        passes += all(c.passed for c in trial.values())
    frac = passes / params.mc_trials
    return GraspOutcome(frac >= params.mc_pass_fraction, checks, frac)
