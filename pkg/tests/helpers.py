"""Scene builders shared by the test modules."""
import numpy as np

from flatgrasp.geometry import ObjectModel, Pose2D, Scene, rasterize


def box(w, h, height=0.05, bevel=0.0, mass=1.0, friction=0.6, color=(0.8, 0.2, 0.2), family="square"):
    fp = np.array([[-w / 2, -h / 2], [w / 2, -h / 2], [w / 2, h / 2], [-w / 2, h / 2]])
    return ObjectModel(fp, height, np.full(4, bevel), mass, friction, color, family, dims={"w": w, "h": h})


def polygon_object(footprint, height=0.05, bevel=0.0, mass=1.0, friction=0.6, family="custom"):
    fp = np.asarray(footprint, dtype=float)
    return ObjectModel(fp, height, np.full(len(fp), bevel), mass, friction, (0.2, 0.6, 0.3), family)


def scene_of(obj, x=0.5, y=0.5, theta=0.0):
    s = Scene(obj, Pose2D(x, y, theta))
    return s, rasterize(s)


def centre_cell(x=0.5, y=0.5):
    """Action-map cell whose image pixel is nearest the world point."""
    return int(round((y * 224 - 2.5) / 4)), int(round((x * 224 - 2.5) / 4))
