"""Parametric flat objects, workspace poses and heightmap rasterization.

The workspace is a 1.0 m square table with its origin at a corner. A pixel
``(row, col)`` covers ``[col, col + 1) x [row, row + 1)`` cells, so the row
index follows the world y axis and the column index the world x axis.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np
from shapely.geometry import box as shapely_box
from shapely.ops import unary_union

GRID = 224
WORKSPACE = 1.0
CELL = WORKSPACE / GRID
MARGIN = 0.05
BACKGROUND = (0.5, 0.5, 0.5)

EXTENT_BOUNDS = (0.18, 0.44)
HEIGHT_BOUNDS = (0.025, 0.095)
CIRCLE_SIDES = 64

TRAINING_FAMILIES = (
    "training-square",
    "training-rectangle",
    "training-circle",
    "training-triangle",
)
BEVELED_FAMILIES = (
    "beveled-square",
    "beveled-rectangle",
    "beveled-circle",
    "beveled-triangle",
    "beveled-parallelogram",
    "beveled-trapezoid",
    "beveled-oval",
    "beveled-hexagon",
    "beveled-pentagon",
    "beveled-notch",
)
IRREGULAR_FAMILIES = (
    "irregular-L",
    "irregular-T",
    "irregular-U",
    "irregular-H",
    "irregular-E",
    "irregular-Z",
    "irregular-F",
    "irregular-plus",
    "irregular-step",
    "irregular-J",
)
HOUSEHOLD_FAMILIES = (
    "household-plate",
    "household-book",
    "household-bookholder",
    "household-bowl",
    "household-basket",
    "household-gelatinbox",
    "household-sugarcan",
    "household-crackerbox",
    "household-pot",
    "household-liptonbox",
)
FAMILIES = TRAINING_FAMILIES + BEVELED_FAMILIES + IRREGULAR_FAMILIES + HOUSEHOLD_FAMILIES
FAMILY_GROUPS = {
    "training": TRAINING_FAMILIES,
    "beveled": BEVELED_FAMILIES,
    "irregular": IRREGULAR_FAMILIES,
    "household": HOUSEHOLD_FAMILIES,
}


class PlacementError(RuntimeError):
    """Raised when an object cannot be posed inside the workspace margin."""


# ---------------------------------------------------------------------------
# polygon helpers


def polygon_area(poly: np.ndarray) -> float:
    """Signed shoelace area; positive for counter-clockwise vertex order."""
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_centroid(poly: np.ndarray) -> np.ndarray:
    """Area-weighted centroid of a simple polygon."""
    x, y = poly[:, 0], poly[:, 1]
    xn, yn = np.roll(x, -1), np.roll(y, -1)
    cross = x * yn - xn * y
    a = 0.5 * cross.sum()
    if abs(a) < 1e-15:
        return poly.mean(axis=0)
    cx = ((x + xn) * cross).sum() / (6.0 * a)
    cy = ((y + yn) * cross).sum() / (6.0 * a)
    return np.array([cx, cy])


def polygon_perimeter(poly: np.ndarray) -> float:
    return float(np.linalg.norm(np.roll(poly, -1, axis=0) - poly, axis=1).sum())


def points_in_polygon(points: np.ndarray, poly: np.ndarray) -> np.ndarray:
    """Even-odd crossing test for many points at once."""
    px = points[:, 0:1]
    py = points[:, 1:2]
    x0, y0 = poly[:, 0], poly[:, 1]
    x1, y1 = np.roll(x0, -1), np.roll(y0, -1)
    straddle = (y0 > py) != (y1 > py)
    dy = np.where(y1 == y0, 1.0, y1 - y0)
    x_cross = x0 + (py - y0) * (x1 - x0) / dy
    hits = straddle & (px < x_cross)
    return (hits.sum(axis=1) % 2) == 1


def segment_distances(points: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance from each point to every segment; shape (n_points, n_segments)."""
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    denom = np.where(denom == 0.0, 1.0, denom)
    ap = points[:, None, :] - a[None, :, :]
    t = np.clip(np.einsum("pij,ij->pi", ap, ab) / denom, 0.0, 1.0)
    closest = a[None] + t[..., None] * ab[None]
    return np.linalg.norm(points[:, None, :] - closest, axis=2)


def is_simple(poly: np.ndarray) -> bool:
    """True when no two non-adjacent edges intersect."""
    n = len(poly)
    if n < 3:
        return False

    def orient(p, q, r):
        return np.sign((q[0] - p[0]) * (r[1] - p[1]) - (q[1] - p[1]) * (r[0] - p[0]))

    for i in range(n):
        p1, p2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            q1, q2 = poly[j], poly[(j + 1) % n]
            o1, o2 = orient(p1, p2, q1), orient(p1, p2, q2)
            o3, o4 = orient(q1, q2, p1), orient(q1, q2, p2)
            if o1 != o2 and o3 != o4 and 0 not in (o1, o2, o3, o4):
                return False
    return True


def rotation(theta: float) -> np.ndarray:
    c, s = np.cos(theta), np.sin(theta)
    return np.array([[c, -s], [s, c]])


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True, eq=False)
class ObjectModel:
    footprint: np.ndarray
    height: float
    bevel: np.ndarray
    mass: float
    friction: float
    color: tuple[float, float, float]
    family: str
    seed: int = 0
    dims: dict = field(default_factory=dict)
    # (wall width m, floor height as a fraction of height); open-topped objects
    rim: tuple[float, float] | None = None

    @property
    def extent(self) -> float:
        span = self.footprint.max(axis=0) - self.footprint.min(axis=0)
        return float(span.max())

    @property
    def area(self) -> float:
        return polygon_area(self.footprint)

    def validate(self, extent_bounds=EXTENT_BOUNDS, height_bounds=HEIGHT_BOUNDS) -> None:
        if len(self.bevel) != len(self.footprint):
            raise ValueError("need one bevel per footprint edge")
        if polygon_area(self.footprint) <= 0:
            raise ValueError("footprint must be counter-clockwise")
        if not is_simple(self.footprint):
            raise ValueError("footprint self-intersects")
        lo, hi = extent_bounds
        if not lo - 1e-9 <= self.extent <= hi + 1e-9:
            raise ValueError(f"extent {self.extent:.3f} outside {extent_bounds}")
        lo, hi = height_bounds
        if not lo - 1e-9 <= self.height <= hi + 1e-9:
            raise ValueError(f"height {self.height:.3f} outside {height_bounds}")
        if self.mass <= 0 or self.friction <= 0:
            raise ValueError("mass and friction must be positive")
        if np.any(np.abs(self.bevel) >= np.pi / 2):
            raise ValueError("bevel must be within (-pi/2, pi/2)")

    def manifest_entry(self) -> dict:
        return {"family": self.family, "seed": int(self.seed), "dims": dict(self.dims)}

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "seed": int(self.seed),
            "footprint": self.footprint.tolist(),
            "height": self.height,
            "bevel": self.bevel.tolist(),
            "mass": self.mass,
            "friction": self.friction,
            "color": list(self.color),
            "dims": dict(self.dims),
            "rim": list(self.rim) if self.rim is not None else None,
        }


@dataclass(frozen=True)
class Pose2D:
    x: float
    y: float
    theta: float

    def transform(self, pts: np.ndarray) -> np.ndarray:
        return pts @ rotation(self.theta).T + np.array([self.x, self.y])


@dataclass(frozen=True, eq=False)
class Scene:
    object: ObjectModel
    pose: Pose2D
    workspace: float = WORKSPACE
    table_height: float = 0.0

    def footprint_world(self) -> np.ndarray:
        return self.pose.transform(self.object.footprint)

    def centroid_world(self) -> np.ndarray:
        return polygon_centroid(self.footprint_world())

    def edges_world(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Posed edge endpoints and the per-edge bevel: (starts, ends, bevel)."""
        poly = self.footprint_world()
        return poly, np.roll(poly, -1, axis=0), np.asarray(self.object.bevel, dtype=float)

    def rotated180(self) -> "Scene":
        c = self.workspace / 2
        p = Pose2D(2 * c - self.pose.x, 2 * c - self.pose.y, self.pose.theta + np.pi)
        return Scene(self.object, p, self.workspace, self.table_height)


@dataclass(frozen=True, eq=False)
class Observation:
    color: np.ndarray  # (3, H, W) float32 in [0, 1]
    depth: np.ndarray  # (H, W) float64 heights above the table, m
    mask: np.ndarray  # (H, W) uint8 in {0, 1}
    cell: float = CELL

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


# ---------------------------------------------------------------------------
# pixel <-> world


def world_to_pixel(p, grid: int = GRID, workspace: float = WORKSPACE) -> tuple[int, int]:
    x, y = float(p[0]), float(p[1])
    if not (0.0 <= x < workspace and 0.0 <= y < workspace):
        raise ValueError(f"point {p} outside workspace")
    cell = workspace / grid
    return min(int(np.floor(y / cell)), grid - 1), min(int(np.floor(x / cell)), grid - 1)


def pixel_to_world(cell_index, grid: int = GRID, workspace: float = WORKSPACE) -> np.ndarray:
    r, c = cell_index
    if not (0 <= r < grid and 0 <= c < grid):
        raise ValueError(f"cell {cell_index} outside {grid}x{grid} grid")
    cell = workspace / grid
    return np.array([(c + 0.5) * cell, (r + 0.5) * cell])


# ---------------------------------------------------------------------------
# object generation


def _regular_polygon(n: int, radius: float, phase: float = 0.0) -> np.ndarray:
    a = phase + 2 * np.pi * np.arange(n) / n
    return np.stack([radius * np.cos(a), radius * np.sin(a)], axis=1)


def _ellipse(a: float, b: float, n: int = CIRCLE_SIDES) -> np.ndarray:
    t = 2 * np.pi * np.arange(n) / n
    return np.stack([a * np.cos(t), b * np.sin(t)], axis=1)


def _rect(w: float, h: float) -> np.ndarray:
    return np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])


def _scale_to_extent(poly: np.ndarray, extent: float) -> np.ndarray:
    span = poly.max(axis=0) - poly.min(axis=0)
    return poly * (extent / span.max())


def _rect_union(rects) -> np.ndarray:
    """Outline of a union of axis-aligned (x0, y0, x1, y1) rectangles."""
    shape = unary_union([shapely_box(*r) for r in rects]).simplify(0.0)
    if shape.geom_type != "Polygon" or len(shape.interiors):
        raise ValueError("rectangle union is not a simple polygon")
    return np.asarray(shape.exterior.coords)[:-1]


def _letter(letter: str, w: float, h: float, t: float) -> np.ndarray:
    mid = (h - t) / 2
    layouts = {
        "L": [(0, 0, w, t), (0, 0, t, h)],
        "T": [(0, h - t, w, h), ((w - t) / 2, 0, (w + t) / 2, h)],
        "U": [(0, 0, w, t), (0, 0, t, h), (w - t, 0, w, h)],
        "H": [(0, 0, t, h), (w - t, 0, w, h), (0, mid, w, mid + t)],
        "E": [(0, 0, t, h), (0, 0, w, t), (0, mid, 0.8 * w, mid + t), (0, h - t, w, h)],
        "Z": [(0, h - t, 0.6 * w, h), (0.4 * w, 0, w, t), ((w - t) / 2, 0, (w + t) / 2, h)],
        "F": [(0, 0, t, h), (0, h - t, w, h), (0, mid, 0.75 * w, mid + t)],
        "plus": [(0, mid, w, mid + t), ((w - t) / 2, 0, (w + t) / 2, h)],
        "step": [(0, 0, w, t), (0, 0, 2 * w / 3, h / 2 + t / 2), (0, 0, w / 3, h)],
        "J": [(0, 0, w, t), (w - t, 0, w, h), (0, 0, t, 0.45 * h)],
    }
    return _rect_union(layouts[letter])


def _ccw(poly: np.ndarray) -> np.ndarray:
    poly = np.asarray(poly, dtype=float)
    if polygon_area(poly) < 0:
        poly = poly[::-1].copy()
    return poly


def _center_bbox(poly: np.ndarray) -> np.ndarray:
    return poly - (poly.max(axis=0) + poly.min(axis=0)) / 2


def _sample_color(rng: np.random.Generator) -> tuple[float, float, float]:
    # policy sees RGB only, so objects must separate from the gray table
    while True:
        c = rng.uniform(0.1, 0.9, size=3)
        if np.max(np.abs(c - np.asarray(BACKGROUND))) >= 0.15:
            return tuple(float(v) for v in c)


def _footprint_for(family: str, rng: np.random.Generator, extent: float) -> tuple[np.ndarray, dict]:
    kind = family.split("-", 1)[1]
    dims: dict = {"extent": extent}
    if kind == "square":
        poly = _rect(extent, extent)
    elif kind in ("rectangle", "book", "crackerbox", "liptonbox", "gelatinbox", "basket", "bookholder"):
        ratio = {
            "rectangle": (0.5, 0.8),
            "book": (0.65, 0.8),
            "crackerbox": (0.55, 0.75),
            "liptonbox": (0.45, 0.6),
            "gelatinbox": (0.7, 0.85),
            "basket": (0.6, 0.8),
            "bookholder": (0.45, 0.6),
        }[kind]
        short = float(rng.uniform(*ratio)) * extent
        dims["short"] = short
        poly = _rect(extent, short)
    elif kind in ("circle", "plate", "bowl", "pot", "sugarcan"):
        poly = _regular_polygon(CIRCLE_SIDES, extent / 2)
    elif kind == "triangle":
        poly = _regular_polygon(3, extent / np.sqrt(3), np.pi / 2)
        poly = _scale_to_extent(poly, extent)
    elif kind == "parallelogram":
        skew = float(rng.uniform(0.2, 0.35)) * extent
        base = extent - skew
        hh = float(rng.uniform(0.5, 0.8)) * extent
        dims.update(skew=skew, depth=hh)
        poly = np.array([[0, 0], [base, 0], [extent, hh], [skew, hh]])
    elif kind == "trapezoid":
        top = float(rng.uniform(0.5, 0.8)) * extent
        hh = float(rng.uniform(0.5, 0.8)) * extent
        dims.update(top=top, depth=hh)
        poly = np.array([[0, 0], [extent, 0], [(extent + top) / 2, hh], [(extent - top) / 2, hh]])
    elif kind == "oval":
        minor = float(rng.uniform(0.55, 0.8))
        dims["minor"] = minor * extent
        poly = _ellipse(extent / 2, minor * extent / 2)
    elif kind == "hexagon":
        poly = _scale_to_extent(_regular_polygon(6, 1.0), extent)
    elif kind == "pentagon":
        poly = _scale_to_extent(_regular_polygon(5, 1.0, np.pi / 2), extent)
    elif kind == "notch":
        short = float(rng.uniform(0.6, 0.85)) * extent
        nw = float(rng.uniform(0.2, 0.35)) * extent
        nd = float(rng.uniform(0.15, 0.3)) * short
        dims.update(short=short, notch_width=nw, notch_depth=nd)
        a, b = (extent - nw) / 2, (extent + nw) / 2
        poly = np.array([[0, 0], [extent, 0], [extent, short], [b, short], [b, short - nd], [a, short - nd], [a, short], [0, short]])
    elif family.startswith("irregular-"):
        h = float(rng.uniform(0.7, 1.0)) * extent
        t = float(rng.uniform(0.22, 0.4)) * min(extent, h)
        dims.update(depth=h, thickness=t)
        w = extent
        if rng.random() < 0.5:
            w, h = h, w
        poly = _letter(kind, w, h, t)
    else:
        raise ValueError(f"unknown family {family!r}")
    return _center_bbox(_ccw(poly)), dims


_HOUSEHOLD = {
    # extent bounds, height bounds, bevel bounds (deg), rim (width bounds, floor fraction)
    "plate": ((0.2, 0.3), (0.025, 0.04), (25, 40), ((0.03, 0.05), 0.35)),
    "bowl": ((0.22, 0.32), (0.07, 0.095), (20, 35), ((0.02, 0.03), 0.3)),
    "pot": ((0.2, 0.3), (0.08, 0.095), (0, 5), ((0.01, 0.02), 0.25)),
    "basket": ((0.3, 0.44), (0.06, 0.095), (5, 15), ((0.015, 0.03), 0.2)),
    "bookholder": ((0.25, 0.35), (0.05, 0.09), (0, 5), ((0.015, 0.025), 0.2)),
    "book": ((0.2, 0.3), (0.025, 0.05), (0, 0), None),
    "gelatinbox": ((0.18, 0.22), (0.03, 0.05), (0, 0), None),
    "sugarcan": ((0.18, 0.24), (0.06, 0.095), (0, 0), None),
    "crackerbox": ((0.2, 0.3), (0.06, 0.08), (0, 0), None),
    "liptonbox": ((0.18, 0.26), (0.05, 0.08), (0, 0), None),
}


def generate_object(family: str, seed: int) -> ObjectModel:
    """Sample a flat object of the given family; deterministic in (family, seed)."""
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(family.encode())])
    rng = np.random.default_rng(ss)
    rim = None
    if family.startswith("household-"):
        ext_b, h_b, bev_b, rim_spec = _HOUSEHOLD[family.split("-", 1)[1]]
        extent = float(rng.uniform(*ext_b))
        height = float(rng.uniform(*h_b))
        footprint, dims = _footprint_for(family, rng, extent)
        bevel = np.full(len(footprint), np.deg2rad(rng.uniform(*bev_b)))
        if rim_spec is not None:
            rim = (float(rng.uniform(*rim_spec[0])), rim_spec[1])
    else:
        extent = float(rng.uniform(*EXTENT_BOUNDS))
        height = float(rng.uniform(*HEIGHT_BOUNDS))
        footprint, dims = _footprint_for(family, rng, extent)
        if family.startswith("beveled-"):
            bevel = np.deg2rad(rng.uniform(10.0, 30.0, size=len(footprint)))
        else:
            bevel = np.zeros(len(footprint))
    dims["height"] = height
    obj = ObjectModel(
        footprint=footprint,
        height=height,
        bevel=bevel,
        mass=float(rng.uniform(0.3, 2.0)),
        friction=float(rng.uniform(0.4, 0.8)),
        color=_sample_color(rng),
        family=family,
        seed=int(seed),
        dims={k: round(float(v), 6) for k, v in dims.items()},
        rim=rim,
    )
    obj.validate()
    return obj


def object_from_dict(d: dict) -> ObjectModel:
    return ObjectModel(
        footprint=np.asarray(d["footprint"], dtype=float),
        height=float(d["height"]),
        bevel=np.asarray(d["bevel"], dtype=float),
        mass=float(d["mass"]),
        friction=float(d["friction"]),
        color=tuple(d["color"]),
        family=d["family"],
        seed=int(d.get("seed", 0)),
        dims=dict(d.get("dims", {})),
        rim=tuple(d["rim"]) if d.get("rim") is not None else None,
    )


# ---------------------------------------------------------------------------
# placement


def pose_fits(obj: ObjectModel, pose: Pose2D, margin: float = MARGIN, workspace: float = WORKSPACE) -> bool:
    pts = pose.transform(obj.footprint)
    return bool(np.all(pts >= margin) and np.all(pts <= workspace - margin))


def sample_pose(obj: ObjectModel, seed: int, margin: float = MARGIN, attempts: int = 1000) -> Pose2D:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, 0x9053]))
    for _ in range(attempts):
        theta = float(rng.uniform(0.0, 2 * np.pi))
        x, y = (float(v) for v in rng.uniform(margin, WORKSPACE - margin, size=2))
        pose = Pose2D(x, y, theta)
        if pose_fits(obj, pose, margin):
            return pose
    raise PlacementError(f"{obj.family} (extent {obj.extent:.3f} m) did not fit after {attempts} attempts")


def make_scene(family: str, seed: int) -> Scene:
    obj = generate_object(family, seed)
    return Scene(obj, sample_pose(obj, seed))


# ---------------------------------------------------------------------------
# rasterization


def height_profile(scene: Scene, points: np.ndarray) -> np.ndarray:
    """Object height at world points assumed to lie inside the posed footprint."""
    obj = scene.object
    h = obj.height
    depth = np.full(len(points), h, dtype=float)
    if len(points) == 0:
        return depth
    a, b, bevel = scene.edges_world()
    need_dist = np.any(bevel != 0) or obj.rim is not None
    if not need_dist:
        return depth
    dist = segment_distances(points, a, b)
    sloped = np.abs(bevel) > 1e-12
    if np.any(sloped):
        run = h * np.tan(np.abs(bevel[sloped]))
        ramp = h * np.minimum(1.0, dist[:, sloped] / run[None, :])
        depth = np.minimum(depth, ramp.min(axis=1))
    if obj.rim is not None:
        width, floor = obj.rim
        inner = dist.min(axis=1) > width
        depth = np.where(inner, np.minimum(depth, floor * h), depth)
    return depth


def rasterize(scene: Scene, grid: int = GRID) -> Observation:
    """Sample each cell at its center: color, height and mask heightmaps."""
    cell = scene.workspace / grid
    color = np.empty((3, grid, grid), dtype=np.float32)
    for ch in range(3):
        color[ch] = BACKGROUND[ch]
    depth = np.zeros((grid, grid), dtype=float)
    mask = np.zeros((grid, grid), dtype=np.uint8)
    poly = scene.footprint_world()
    if len(poly) < 3 or abs(polygon_area(poly)) < 1e-12:
        return Observation(color, depth, mask, cell)
    lo = np.clip(np.floor(poly.min(axis=0) / cell).astype(int), 0, grid - 1)
    hi = np.clip(np.ceil(poly.max(axis=0) / cell).astype(int), 0, grid - 1)
    cols = np.arange(lo[0], hi[0] + 1)
    rows = np.arange(lo[1], hi[1] + 1)
    cc, rr = np.meshgrid(cols, rows)
    pts = np.stack([(cc.ravel() + 0.5) * cell, (rr.ravel() + 0.5) * cell], axis=1)
    inside = points_in_polygon(pts, poly)
    rr_in, cc_in = rr.ravel()[inside], cc.ravel()[inside]
    h = height_profile(scene, pts[inside])
    # a center lying exactly on the silhouette still belongs to the object
    h = np.maximum(h, 1e-9)
    depth[rr_in, cc_in] = h
    mask[rr_in, cc_in] = 1
    for ch in range(3):
        color[ch, rr_in, cc_in] = scene.object.color[ch]
    return Observation(color, depth, mask, cell)
