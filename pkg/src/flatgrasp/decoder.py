"""Dual-arm grasp decoder: main point -> axis line -> two 3-point contact clusters."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import CELL, GRID, pixel_to_world, segment_distances

AXES_DEG = (0.0, 60.0, 120.0)
MAP_SIZE = 56

FAILURE_REASONS = ("none", "off-object", "no-axis-found", "too-short")

# clockwise in image display, i.e. counter-clockwise with (x=col, y=row)
_NEIGHBORS = ((-1, 0), (-1, 1), (0, 1), (1, 1), (1, 0), (1, -1), (0, -1), (-1, -1))
# direction from the cell reached via neighbour d back to the cell examined just before it
_BACKTRACK = tuple(
    _NEIGHBORS.index((_NEIGHBORS[(d - 1) % 8][0] - _NEIGHBORS[d][0], _NEIGHBORS[(d - 1) % 8][1] - _NEIGHBORS[d][1]))
    for d in range(8)
)


@dataclass(frozen=True)
class DecoderParams:
    d_min: float = 0.15
    h_min: float = 0.02
    reach: float = 0.9
    refine_offset: int = 3
    step_px: float = 0.5
    # inward probe used to read the contact face height from the depth map
    face_probe: float = 0.06
    axes_deg: tuple[float, ...] = AXES_DEG


@dataclass(frozen=True, eq=False)
class Contour:
    cells: np.ndarray  # (n, 2) int rows/cols, closed loop
    normals: np.ndarray  # (n, 2) outward unit normals in (x, y)

    def __len__(self) -> int:
        return len(self.cells)

    @property
    def xy(self) -> np.ndarray:
        """Cell centers in pixel units as (x=col, y=row)."""
        return self.cells[:, ::-1].astype(float) + 0.5


@dataclass(frozen=True, eq=False)
class ContactSide:
    points: np.ndarray  # (3, 2) world m
    contact: np.ndarray  # (2,) world m, mean of points
    normal: np.ndarray  # (2,) inward unit normal
    face_height: float
    bevel: float
    contour_index: int

    def to_dict(self) -> dict:
        return {
            "points": self.points.tolist(),
            "contact": self.contact.tolist(),
            "normal": self.normal.tolist(),
            "face_height": self.face_height,
            "bevel": self.bevel,
        }


@dataclass(eq=False)
class GraspPlan:
    main_cell: tuple[int, int]
    main_pixel: tuple[int, int]
    main_world: np.ndarray
    axis_deg: float | None = None
    side_a: ContactSide | None = None
    side_b: ContactSide | None = None
    valid: bool = False
    failure_reason: str = "none"
    contour: Contour | None = field(default=None, repr=False)
    cell_size: float = CELL
    refine_offset: int = 3

    @property
    def separation(self) -> float:
        if not self.valid:
            return 0.0
        return float(np.linalg.norm(self.side_a.contact - self.side_b.contact))

    def to_dict(self) -> dict:
        return {
            "main_point": {
                "cell": list(self.main_cell),
                "pixel": list(self.main_pixel),
                "world": self.main_world.tolist(),
            },
            "axis_deg": self.axis_deg,
            "sideA": self.side_a.to_dict() if self.side_a else None,
            "sideB": self.side_b.to_dict() if self.side_b else None,
            "valid": self.valid,
            "failure_reason": self.failure_reason,
        }


PLAN_SCHEMA = {
    "type": "object",
    "required": ["main_point", "axis_deg", "sideA", "sideB", "valid", "failure_reason"],
    "additionalProperties": False,
    "properties": {
        "main_point": {
            "type": "object",
            "required": ["cell", "pixel", "world"],
            "properties": {
                "cell": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "pixel": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
                "world": {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2},
            },
        },
        "axis_deg": {"type": ["number", "null"]},
        "sideA": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/side"}]},
        "sideB": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/side"}]},
        "valid": {"type": "boolean"},
        "failure_reason": {"enum": list(FAILURE_REASONS)},
    },
    "$defs": {
        "side": {
            "type": "object",
            "required": ["points", "contact", "normal", "face_height", "bevel"],
            "properties": {
                "points": {"type": "array", "minItems": 3, "maxItems": 3},
                "contact": {"type": "array", "minItems": 2, "maxItems": 2},
                "normal": {"type": "array", "minItems": 2, "maxItems": 2},
                "face_height": {"type": "number"},
                "bevel": {"type": "number"},
            },
        }
    },
}


def main_point(cell, map_size: int = MAP_SIZE, grid: int = GRID) -> tuple[tuple[int, int], np.ndarray]:
    """Feature-map cell -> center pixel of its receptive block, and its world point."""
    r, c = int(cell[0]), int(cell[1])
    if not (0 <= r < map_size and 0 <= c < map_size):
        raise ValueError(f"cell {cell} outside {map_size}x{map_size} map")
    k = grid // map_size
    pixel = (k * r + k // 2, k * c + k // 2)
    return pixel, pixel_to_world(pixel, grid, grid * CELL)


def extract_contour(mask: np.ndarray) -> Contour | None:
    """Moore-neighbour trace of the outer boundary, counter-clockwise in (x, y).

    Returns None for an empty mask.
    """
    m = np.asarray(mask, dtype=bool)
    nz = np.flatnonzero(m)
    if nz.size == 0:
        return None
    h, w = m.shape
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    r0, c0 = int(rows[0]) - 1, int(cols[0]) - 1
    # one background cell of padding on every side so lookups never leave the buffer
    sub = np.zeros((rows[-1] - rows[0] + 3, cols[-1] - cols[0] + 3), dtype=np.uint8)
    sub[1:-1, 1:-1] = m[rows[0] : rows[-1] + 1, cols[0] : cols[-1] + 1]
    width = sub.shape[1]
    buf = sub.tobytes()
    offsets = [dr * width + dc for dr, dc in _NEIGHBORS]
    start = int(np.flatnonzero(sub)[0])

    # raster order guarantees the west neighbour of the start is background
    cells = [start]
    cur = start
    back = 6
    for _ in range(4 * h * w):
        found = None
        for k in range(1, 9):
            d = (back + k) & 7
            if buf[cur + offsets[d]]:
                found = d
                break
        if found is None:
            break
        nxt = cur + offsets[found]
        # closed once the first move repeats
        if cur == start and len(cells) > 1 and nxt == cells[1]:
            cells.pop()
            break
        # new backtrack is the background cell examined just before nxt
        back = _BACKTRACK[found]
        cells.append(nxt)
        cur = nxt
    cells = [(i // width + r0, i % width + c0) for i in cells]
    arr = np.array(cells, dtype=int)
    xy = arr[:, ::-1].astype(float)
    if len(arr) >= 3:
        area = 0.5 * (np.dot(xy[:, 0], np.roll(xy[:, 1], -1)) - np.dot(np.roll(xy[:, 0], -1), xy[:, 1]))
        if area < 0:
            arr = np.concatenate([arr[:1], arr[1:][::-1]])
            xy = arr[:, ::-1].astype(float)
    return Contour(arr, _outward_normals(xy))


def _outward_normals(xy: np.ndarray, window: int = 5) -> np.ndarray:
    n = len(xy)
    if n < 3:
        normals = np.zeros((n, 2))
        normals[:, 0] = 1.0
        return normals
    tangent = np.roll(xy, -1, axis=0) - np.roll(xy, 1, axis=0)
    half = window // 2
    smooth = sum(np.roll(tangent, s, axis=0) for s in range(-half, half + 1))
    normals = np.stack([smooth[:, 1], -smooth[:, 0]], axis=1)
    norm = np.linalg.norm(normals, axis=1, keepdims=True)
    norm[norm == 0] = 1.0
    return normals / norm


def _direction(angle_deg: float) -> np.ndarray:
    a = np.deg2rad(angle_deg)
    return np.array([np.cos(a), np.sin(a)])


def _march(mask: np.ndarray, start_xy: np.ndarray, direction: np.ndarray, step: float) -> np.ndarray:
    h, w = mask.shape
    n = int(np.ceil(np.hypot(h, w) / step)) + 1
    pts = start_xy[None, :] + (np.arange(1, n + 1) * step)[:, None] * direction[None, :]
    inside = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    # samples on a cell boundary belong to the cell being entered, which keeps
    # the march symmetric under a half-turn of the image
    pts = pts[inside] + 1e-6 * direction[None, :]
    cells = np.floor(pts[:, ::-1]).astype(int)
    ok = (cells[:, 0] >= 0) & (cells[:, 0] < h) & (cells[:, 1] >= 0) & (cells[:, 1] < w)
    return cells[ok]


def cast_axis(main_pixel, angle_deg: float, mask: np.ndarray, step: float = 0.5):
    """Farthest silhouette cell on each side of the main pixel along the axis.

    Returns ((row, col) in the +direction, (row, col) in the -direction), or
    None when the main pixel is off the mask or one side has no material.
    """
    m = np.asarray(mask, dtype=bool)
    r, c = int(main_pixel[0]), int(main_pixel[1])
    if not m[r, c]:
        return None
    start = np.array([c + 0.5, r + 0.5])
    d = _direction(angle_deg)
    out = []
    for sign in (1.0, -1.0):
        cells = _march(m, start, sign * d, step)
        if len(cells) == 0:
            return None
        hit = m[cells[:, 0], cells[:, 1]] & ~((cells[:, 0] == r) & (cells[:, 1] == c))
        idx = np.flatnonzero(hit)
        if idx.size == 0:
            return None
        out.append(tuple(int(v) for v in cells[idx[-1]]))
    return out[0], out[1]


def _face_height(depth: np.ndarray, cell, inward: np.ndarray, probe_px: float, step: float) -> float:
    start = np.array([cell[1] + 0.5, cell[0] + 0.5])
    n = max(1, int(probe_px / step))
    pts = start[None, :] + (np.arange(0, n + 1) * step)[:, None] * inward[None, :]
    h, w = depth.shape
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    cells = np.floor(pts[ok][:, ::-1]).astype(int)
    return float(depth[cells[:, 0], cells[:, 1]].max()) if len(cells) else 0.0


def _estimate_bevel(depth: np.ndarray, cell, inward: np.ndarray, face_height: float, cell_size: float) -> float:
    """Bevel from the width of the depth ramp behind a silhouette cell."""
    if face_height <= 0:
        return 0.0
    start = np.array([cell[1] + 0.5, cell[0] + 0.5])
    pts = start[None, :] + (np.arange(0, 80) * 0.5)[:, None] * inward[None, :]
    h, w = depth.shape
    ok = (pts[:, 0] >= 0) & (pts[:, 0] < w) & (pts[:, 1] >= 0) & (pts[:, 1] < h)
    cells = np.floor(pts[ok][:, ::-1]).astype(int)
    vals = depth[cells[:, 0], cells[:, 1]]
    reached = np.flatnonzero(vals >= 0.98 * face_height)
    if reached.size == 0:
        return 0.0
    run = max(0.0, (reached[0] * 0.5 - 0.5)) * cell_size
    return float(np.arctan2(run, face_height))


def _nearest(xy: np.ndarray, target: np.ndarray, direction: np.ndarray) -> int:
    """Nearest contour point; ties go to the one farthest along ``direction``, then leftmost of it.

    Both tie-break keys are unchanged by a half-turn of the image, unlike trace order.
    """
    off = xy - target
    d2 = np.sum(off**2, axis=1)
    tied = np.flatnonzero(d2 <= d2.min() + 1e-9)
    if len(tied) == 1:
        return int(tied[0])
    along = off[tied] @ direction
    left = direction[0] * off[tied, 1] - direction[1] * off[tied, 0]
    return int(tied[np.lexsort((-left, -along))[0]])


def _side(contour: Contour, cell, depth, sides, params: DecoderParams, cell_size: float, direction: np.ndarray) -> ContactSide:
    xy = contour.xy
    target = np.array([cell[1] + 0.5, cell[0] + 0.5])
    idx = _nearest(xy, target, direction)
    n = len(contour)
    k = params.refine_offset
    picks = [(idx - k) % n, idx, (idx + k) % n]
    pts_px = xy[picks]
    outward = contour.normals[picks].mean(axis=0)
    norm = np.linalg.norm(outward)
    inward = -outward / norm if norm > 1e-12 else np.zeros(2)
    points = pts_px * cell_size
    mean_px = pts_px.mean(axis=0)
    # at a sharp corner the cluster mean can leave the silhouette; pull it back
    if np.min(np.sum((xy - mean_px) ** 2, axis=1)) > 1.0:
        mean_px = xy[_nearest(xy, mean_px, direction)]
    contact = mean_px * cell_size
    probe_dir = inward if norm > 1e-12 else np.zeros(2)
    face_h = _face_height(depth, cell, probe_dir, params.face_probe / cell_size, params.step_px)
    if sides is not None:
        a, b, bevel = sides
        bevel_here = float(bevel[int(np.argmin(segment_distances(contact[None], a, b)[0]))])
    else:
        bevel_here = _estimate_bevel(depth, cell, probe_dir, face_h, cell_size)
    return ContactSide(points, contact, inward, face_h, bevel_here, idx)


def decode(
    action_cell,
    mask: np.ndarray,
    depth: np.ndarray,
    sides=None,
    params: DecoderParams = DecoderParams(),
    map_size: int = MAP_SIZE,
    contour: Contour | None = None,
) -> GraspPlan:
    """Hierarchical axis search. Never raises on geometry; failures set ``failure_reason``.

    ``sides`` is the optional posed edge metadata ``(starts, ends, bevel)``; when
    absent the contact bevel is estimated from the depth ramp.
    """
    pixel, _ = main_point(action_cell, map_size, mask.shape[0])
    return decode_pixel(pixel, mask, depth, sides, params, contour, cell=(int(action_cell[0]), int(action_cell[1])))


def decode_pixel(
    pixel,
    mask: np.ndarray,
    depth: np.ndarray,
    sides=None,
    params: DecoderParams = DecoderParams(),
    contour: Contour | None = None,
    cell=None,
) -> GraspPlan:
    """Same search seeded at an arbitrary image pixel instead of a feature-map cell."""
    grid = mask.shape[0]
    cell_size = CELL
    pixel = (int(pixel[0]), int(pixel[1]))
    world = pixel_to_world(pixel, grid, grid * cell_size)
    k = grid // MAP_SIZE
    if cell is None:
        cell = (min(pixel[0] // k, MAP_SIZE - 1), min(pixel[1] // k, MAP_SIZE - 1))
    plan = GraspPlan(cell, pixel, world, cell_size=cell_size, refine_offset=params.refine_offset)
    m = np.asarray(mask, dtype=bool)
    if not m.any() or not m[pixel]:
        plan.failure_reason = "off-object"
        return plan
    if contour is None:
        contour = extract_contour(m)
    plan.contour = contour
    reason = "no-axis-found"
    for angle in params.axes_deg:
        hits = cast_axis(pixel, angle, m, params.step_px)
        if hits is None:
            continue
        ha, hb = hits
        pa = pixel_to_world(ha, grid, grid * cell_size)
        pb = pixel_to_world(hb, grid, grid * cell_size)
        sep = float(np.linalg.norm(pa - pb))
        if not params.d_min <= sep <= params.reach:
            reason = "too-short"
            continue
        d = _direction(angle)
        side_a = _side(contour, ha, depth, sides, params, cell_size, d)
        side_b = _side(contour, hb, depth, sides, params, cell_size, -d)
        mean_sep = float(np.linalg.norm(side_a.contact - side_b.contact))
        if not params.d_min <= mean_sep <= params.reach:
            reason = "too-short"
            continue
        if min(side_a.face_height, side_b.face_height) < params.h_min:
            reason = "too-short"
            continue
        plan.axis_deg = float(angle)
        plan.side_a, plan.side_b = side_a, side_b
        plan.valid = True
        plan.failure_reason = "none"
        return plan
    plan.failure_reason = reason
    return plan
