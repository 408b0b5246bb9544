"""PNG I/O for heightmaps and decoder overlays."""
from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from .decoder import GraspPlan
from .geometry import GRID, Observation

DEPTH_UNIT = 1e-4  # metres per 16-bit depth count (0.1 mm)


class ImageError(ValueError):
    pass


def color_to_u8(color: np.ndarray) -> np.ndarray:
    """3xHxW float in [0, 1] to HxWx3 uint8."""
    return np.clip(np.round(np.moveaxis(color, 0, -1) * 255), 0, 255).astype(np.uint8)


def depth_to_u16(depth: np.ndarray) -> np.ndarray:
    return np.clip(np.round(depth / DEPTH_UNIT), 0, 65535).astype(np.uint16)


def save_observation(obs: Observation, out_dir, stem: str) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {k: out / f"{stem}_{k}.png" for k in ("c", "d", "g")}
    Image.fromarray(color_to_u8(obs.color)).save(paths["c"])
    Image.fromarray(depth_to_u16(obs.depth)).save(paths["d"])
    Image.fromarray((obs.mask > 0).astype(np.uint8) * 255).save(paths["g"])
    return paths


def _load(path) -> np.ndarray:
    try:
        return np.array(Image.open(path))
    except (OSError, ValueError) as exc:
        raise ImageError(f"cannot read image {path}: {exc}") from exc


def load_mask(path, grid: int = GRID) -> np.ndarray:
    a = _load(path)
    if a.ndim == 3:
        a = a[..., 0]
    if a.shape != (grid, grid):
        raise ImageError(f"mask must be {grid}x{grid}, got {a.shape}")
    return (a > 0).astype(np.uint8)


def load_depth(path, grid: int = GRID) -> np.ndarray:
    a = _load(path)
    if a.ndim == 3:
        a = a[..., 0]
    if a.shape != (grid, grid):
        raise ImageError(f"depth must be {grid}x{grid}, got {a.shape}")
    return a.astype(np.float64) * DEPTH_UNIT


def _xy(point_rc) -> tuple[float, float]:
    # pixel (row, col) -> drawing coords (x=col, y=row), pixel centers
    return float(point_rc[1]) + 0.5, float(point_rc[0]) + 0.5


def _world_to_draw(p, cell: float) -> tuple[float, float]:
    return p[0] / cell, p[1] / cell


def overlay(plan: GraspPlan, mask: np.ndarray, color: np.ndarray | None = None, scale: int = 3) -> Image.Image:
    """Main point, cast line, both contact clusters, and the failure reason for invalid plans."""
    if color is None:
        base = np.where(mask[..., None] > 0, 200, 40).astype(np.uint8).repeat(3, axis=2)
    else:
        base = color_to_u8(color)
    img = Image.fromarray(base).resize((base.shape[1] * scale, base.shape[0] * scale), Image.NEAREST)
    draw = ImageDraw.Draw(img)
    s = scale
    mx, my = _xy(plan.main_pixel)
    if plan.axis_deg is not None:
        t = np.deg2rad(plan.axis_deg)
        d = np.array([np.cos(t), np.sin(t)]) * mask.shape[0] * 1.5
        draw.line([((mx - d[0]) * s, (my - d[1]) * s), ((mx + d[0]) * s, (my + d[1]) * s)], fill=(255, 220, 0), width=1)
    for side, col in ((plan.side_a, (230, 40, 40)), (plan.side_b, (40, 90, 230))):
        if side is None:
            continue
        for p in side.points:
            x, y = _world_to_draw(p, plan.cell_size)
            draw.ellipse([(x * s - 3, y * s - 3), (x * s + 3, y * s + 3)], outline=col, width=2)
        cx, cy = _world_to_draw(side.contact, plan.cell_size)
        draw.ellipse([(cx * s - 5, cy * s - 5), (cx * s + 5, cy * s + 5)], fill=col)
        nx, ny = side.normal
        draw.line([(cx * s, cy * s), ((cx + 12 * nx) * s, (cy + 12 * ny) * s)], fill=col, width=2)
    draw.ellipse([(mx * s - 5, my * s - 5), (mx * s + 5, my * s + 5)], outline=(0, 230, 0), width=3)
    label = f"axis {plan.axis_deg:.0f} deg" if plan.valid else f"invalid: {plan.failure_reason}"
    draw.text((6, 6), label, fill=(255, 255, 255))
    return img
