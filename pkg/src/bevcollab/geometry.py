"""Planar poses, BEV grid warping, and oriented-box geometry.

All poses are SE(2): x, y in meters and yaw in radians, with yaw normalized
to (-pi, pi]. BEV grids are ego-centered with +x forward (columns) and +y
left (rows); a cell's metric position is its center.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, bilinear_sample
from .errors import ConfigError, ParameterError


def normalize_angle(a: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    r = math.fmod(a + math.pi, 2.0 * math.pi)
    if r <= 0.0:
        r += 2.0 * math.pi
    return r - math.pi


@dataclass
class Pose2D:
    x: float
    y: float
    yaw: float

    def __post_init__(self):
        self.yaw = normalize_angle(float(self.yaw))

    @staticmethod
    def identity() -> "Pose2D":
        return Pose2D(0.0, 0.0, 0.0)


@dataclass
class RelativePose:
    """Rigid transform mapping points from one agent frame into another."""

    rotation: np.ndarray  # (2, 2)
    translation: np.ndarray  # (2,)

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (2, 2) or self.translation.shape != (2,):
            raise ParameterError("RelativePose needs a 2x2 rotation and a 2-vector translation")

    @staticmethod
    def identity() -> "RelativePose":
        return RelativePose(np.eye(2), np.zeros(2))

    @staticmethod
    def from_angle(angle: float, translation=(0.0, 0.0)) -> "RelativePose":
        c, s = math.cos(angle), math.sin(angle)
        return RelativePose(np.array([[c, -s], [s, c]]), np.asarray(translation, dtype=np.float64))

    @property
    def angle(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (..., 2) array of points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def inverse(self) -> "RelativePose":
        rt = self.rotation.T
        return RelativePose(rt, -(rt @ self.translation))

    def compose(self, other: "RelativePose") -> "RelativePose":
        """self after other: (self @ other).apply(p) == self.apply(other.apply(p))."""
        return RelativePose(self.rotation @ other.rotation,
                            self.rotation @ other.translation + self.translation)

    def is_identity(self, tol: float = 0.0) -> bool:
        return (np.abs(self.rotation - np.eye(2)).max() <= tol
                and np.abs(self.translation).max() <= tol)


def relative_pose(ego: Pose2D, other: Pose2D) -> RelativePose:
    """Transform taking points expressed in ``other``'s frame into ``ego``'s frame."""
    dyaw = other.yaw - ego.yaw
    c, s = math.cos(ego.yaw), math.sin(ego.yaw)
    # rotate the world-frame offset into the ego frame
    dx, dy = other.x - ego.x, other.y - ego.y
    translation = np.array([c * dx + s * dy, -s * dx + c * dy])
    return RelativePose.from_angle(dyaw, translation)


@dataclass(frozen=True)
class GridSpec:
    """Physical layout of a BEV raster: H x W cells spanning D_y x D_x meters."""

    height: int
    width: int
    extent_x: float
    extent_y: float

    def __post_init__(self):
        if self.height <= 0 or self.width <= 0:
            raise ConfigError(f"grid cells must be positive, got {self.height}x{self.width}")
        if self.extent_x <= 0 or self.extent_y <= 0:
            raise ConfigError(f"grid extent must be positive, got {self.extent_x}x{self.extent_y}")

    @property
    def cell_x(self) -> float:
        return self.extent_x / self.width

    @property
    def cell_y(self) -> float:
        return self.extent_y / self.height

    def halved(self) -> "GridSpec":
        if self.height % 2 or self.width % 2:
            raise ConfigError(f"cannot halve odd grid {self.height}x{self.width}")
        return GridSpec(self.height // 2, self.width // 2, self.extent_x, self.extent_y)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) coordinates of every cell center, each (H, W)."""
        xs = (np.arange(self.width, dtype=np.float64) + 0.5) * self.cell_x - self.extent_x / 2.0
        ys = (np.arange(self.height, dtype=np.float64) + 0.5) * self.cell_y - self.extent_y / 2.0
        return np.broadcast_to(xs[None, :], (self.height, self.width)), \
            np.broadcast_to(ys[:, None], (self.height, self.width))


@dataclass
class FeatureMap:
    """A (C, H, W) feature tensor bound to its physical grid."""

    data: Tensor
    grid: GridSpec

    def __post_init__(self):
        if self.data.data.ndim != 3:
            raise ParameterError(f"feature map must be (C, H, W), got shape {self.data.shape}")
        if self.data.shape[1] != self.grid.height or self.data.shape[2] != self.grid.width:
            raise ParameterError(
                f"feature shape {self.data.shape} does not match grid {self.grid.height}x{self.grid.width}"
            )

    @property
    def channels(self) -> int:
        return self.data.shape[0]


@dataclass
class OrientedBox:
    """A yaw-oriented rectangle in some stated planar frame."""

    cx: float
    cy: float
    length: float
    width: float
    yaw: float
    confidence: float = 1.0

    def __post_init__(self):
        self.yaw = normalize_angle(float(self.yaw))

    def corners(self) -> np.ndarray:
        """(4, 2) corner coordinates, counter-clockwise."""
        hl, hw = self.length / 2.0, self.width / 2.0
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        rot = np.array([[c, -s], [s, c]])
        return local @ rot.T + np.array([self.cx, self.cy])

    @property
    def area(self) -> float:
        return self.length * self.width


def transform_box(box: OrientedBox, rel: RelativePose) -> OrientedBox:
    cx, cy = rel.apply(np.array([box.cx, box.cy]))
    return OrientedBox(float(cx), float(cy), box.length, box.width,
                       normalize_angle(box.yaw + rel.angle), box.confidence)


def footprint_mask(grid: GridSpec, boxes) -> np.ndarray:
    """Binary (H, W) mask of cells whose centers fall inside any box footprint."""
    xs, ys = grid.cell_centers()
    mask = np.zeros((grid.height, grid.width), dtype=bool)
    for b in boxes:
        dx, dy = xs - b.cx, ys - b.cy
        c, s = math.cos(b.yaw), math.sin(b.yaw)
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        mask |= (np.abs(lx) <= b.length / 2.0) & (np.abs(ly) <= b.width / 2.0)
    return mask


def _polygon_area(poly: np.ndarray) -> float:
    if len(poly) < 3:
        return 0.0
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))


def _clip_polygon(poly: list, a: np.ndarray, b: np.ndarray) -> list:
    """Keep the part of poly on the left of directed edge a->b (Sutherland-Hodgman step)."""
    edge = b - a
    out = []
    n = len(poly)
    for i in range(n):
        p, q = poly[i], poly[(i + 1) % n]
        side_p = edge[0] * (p[1] - a[1]) - edge[1] * (p[0] - a[0])
        side_q = edge[0] * (q[1] - a[1]) - edge[1] * (q[0] - a[0])
        if side_p >= 0:
            out.append(p)
        if (side_p > 0 and side_q < 0) or (side_p < 0 and side_q > 0):
            t = side_p / (side_p - side_q)
            out.append(p + t * (q - p))
    return out


def oriented_iou(a: OrientedBox, b: OrientedBox) -> float:
    """Intersection-over-union of two oriented rectangles via polygon clipping."""
    if a.length <= 0 or a.width <= 0 or b.length <= 0 or b.width <= 0:
        raise ParameterError("oriented_iou requires positive box extents")
    poly = [p for p in a.corners()]
    clip = b.corners()
    for i in range(4):
        if not poly:
            break
        poly = _clip_polygon(poly, clip[i], clip[(i + 1) % 4])
    inter = _polygon_area(np.asarray(poly)) if len(poly) >= 3 else 0.0
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def build_affine_grid(rel: RelativePose, grid: GridSpec, sender_grid: GridSpec | None = None) -> np.ndarray:
    """Normalized sampling grid pulling a sender map into the receiver frame.

    Each receiver cell center is mapped through the inverse of ``rel`` into
    sender metric coordinates, then normalized by half the sender map extent,
    giving (H, W, 2) coordinates in the sender's [-1, 1] space.
    """
    sender = sender_grid if sender_grid is not None else grid
    xs, ys = grid.cell_centers()
    pts = np.stack([xs, ys], axis=-1)  # receiver-frame metric positions
    src = rel.inverse().apply(pts)
    out = np.empty_like(src)
    out[..., 0] = src[..., 0] / (sender.extent_x / 2.0)
    out[..., 1] = src[..., 1] / (sender.extent_y / 2.0)
    return out


def warp_feature(fmap: FeatureMap, rel: RelativePose, receiver_grid: GridSpec | None = None) -> FeatureMap:
    """Resample a sender feature map into the receiver frame (pull sampling).

    An exactly-identity transform returns the input tensor unchanged so the
    self-message path is bitwise equal to no transform at all.
    """
    receiver = receiver_grid if receiver_grid is not None else fmap.grid
    if not (math.isclose(receiver.cell_x, fmap.grid.cell_x) and math.isclose(receiver.cell_y, fmap.grid.cell_y)):
        raise ConfigError(
            f"cell size mismatch: receiver {receiver.cell_x}x{receiver.cell_y} m "
            f"vs sender {fmap.grid.cell_x}x{fmap.grid.cell_y} m"
        )
    if rel.is_identity() and receiver == fmap.grid:
        return FeatureMap(fmap.data, fmap.grid)
    grid = build_affine_grid(rel, receiver, sender_grid=fmap.grid)
    return FeatureMap(bilinear_sample(fmap.data, grid), receiver)
