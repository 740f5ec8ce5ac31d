"""Synthetic ground-truth worlds and per-agent sensor rasters.

A scene is a set of non-overlapping vehicle-sized boxes plus agent poses in
a square world. Observations are modality-dependent rasters rendered in the
agent's frame: scan modalities histogram jittered contour points whose
density falls off with range, the camera modality blurs a silhouette mask
and drops far cells. Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import GenerationError, ParameterError, UnknownAgentError
from .geometry import (
    GridSpec,
    OrientedBox,
    Pose2D,
    footprint_mask,
    normalize_angle,
    oriented_iou,
    relative_pose,
)

SCENE_FILE_VERSION = 1

MODALITY_DENSE_SCAN = "dense-scan"
MODALITY_SPARSE_SCAN = "sparse-scan"
MODALITY_BLUR_CAM = "blur-cam"
MODALITY_BLUR_CAM_LOWRES = "blur-cam-lowres"
MODALITIES = (MODALITY_DENSE_SCAN, MODALITY_SPARSE_SCAN, MODALITY_BLUR_CAM, MODALITY_BLUR_CAM_LOWRES)

_MODALITY_CODE = {m: i for i, m in enumerate(MODALITIES)}

OBS_CHANNELS = 2


@dataclass
class AgentState:
    agent_id: int
    pose: Pose2D
    type_id: str
    sensing_radius: float


@dataclass
class Scene:
    boxes: list[OrientedBox]
    agents: list[AgentState]
    seed: int

    def agent(self, agent_id: int) -> AgentState:
        for a in self.agents:
            if a.agent_id == agent_id:
                return a
        raise UnknownAgentError(f"no agent with id {agent_id} in scene {self.seed}")


@dataclass
class SceneConfig:
    world_size: float = 40.0
    box_count: tuple[int, int] = (4, 12)
    box_length: tuple[float, float] = (3.5, 5.0)
    box_width: tuple[float, float] = (1.6, 2.2)
    agent_count: tuple[int, int] = (2, 5)
    agent_spread: float = 8.0  # agents spawn within this half-size central square
    sensing_radius: float = 25.0
    agent_type_mix: tuple[str, ...] = ("scan-deep",)
    max_placement_tries: int = 200


@dataclass
class Observation:
    data: np.ndarray  # (OBS_CHANNELS, H, W) float32, agent frame
    modality: str


@dataclass
class NoiseConfig:
    sigma_p: float = 0.0  # meters, applied to x and y
    sigma_r: float = 0.0  # radians, applied to yaw
    seed: int = 0

    def __post_init__(self):
        if self.sigma_p < 0 or self.sigma_r < 0:
            raise ParameterError("noise sigmas must be non-negative")


def generate_scene(cfg: SceneConfig, seed: int) -> Scene:
    """Sample a world: rejection-sampled disjoint boxes plus agent poses."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5CE2E]))
    half = cfg.world_size / 2.0

    n_boxes = int(rng.integers(cfg.box_count[0], cfg.box_count[1] + 1))
    boxes: list[OrientedBox] = []
    for _ in range(n_boxes):
        placed = False
        for _ in range(cfg.max_placement_tries):
            cand = OrientedBox(
                cx=float(rng.uniform(-half, half)),
                cy=float(rng.uniform(-half, half)),
                length=float(rng.uniform(*cfg.box_length)),
                width=float(rng.uniform(*cfg.box_width)),
                yaw=float(rng.uniform(-math.pi, math.pi)),
            )
            if all(oriented_iou(cand, b) == 0.0 for b in boxes):
                boxes.append(cand)
                placed = True
                break
        if not placed:
            raise GenerationError(
                f"could not place box {len(boxes) + 1}/{n_boxes} after {cfg.max_placement_tries} tries (seed {seed})"
            )

    n_agents = int(rng.integers(cfg.agent_count[0], cfg.agent_count[1] + 1))
    spread = min(cfg.agent_spread, half)
    agents = []
    for i in range(n_agents):
        pose = Pose2D(
            x=float(rng.uniform(-spread, spread)),
            y=float(rng.uniform(-spread, spread)),
            yaw=float(rng.uniform(-math.pi, math.pi)),
        )
        type_id = cfg.agent_type_mix[int(rng.integers(0, len(cfg.agent_type_mix)))]
        agents.append(AgentState(agent_id=i, pose=pose, type_id=type_id, sensing_radius=cfg.sensing_radius))
    return Scene(boxes=boxes, agents=agents, seed=int(seed))


def visible_boxes(scene: Scene, agent: AgentState) -> list[OrientedBox]:
    """Boxes whose centers lie within the agent's sensing radius."""
    out = []
    for b in scene.boxes:
        if math.hypot(b.cx - agent.pose.x, b.cy - agent.pose.y) <= agent.sensing_radius:
            out.append(b)
    return out


def _obs_rng(scene_seed: int, agent_id: int, modality: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(scene_seed), int(agent_id), _MODALITY_CODE[modality]]))


def _boxes_in_agent_frame(scene: Scene, agent: AgentState) -> list[tuple[OrientedBox, float]]:
    """Visible boxes expressed in the agent frame, paired with range to the agent."""
    rel = relative_pose(agent.pose, Pose2D.identity())  # world -> agent
    out = []
    for b in visible_boxes(scene, agent):
        local_c = rel.apply(np.array([b.cx, b.cy]))
        d = float(math.hypot(b.cx - agent.pose.x, b.cy - agent.pose.y))
        out.append((OrientedBox(float(local_c[0]), float(local_c[1]), b.length, b.width,
                                normalize_angle(b.yaw + rel.angle)), d))
    return out


def _rasterize_points(raster: np.ndarray, grid: GridSpec, pts: np.ndarray, hit_value: float,
                      range_values: np.ndarray) -> None:
    cols = np.floor((pts[:, 0] + grid.extent_x / 2.0) / grid.cell_x).astype(np.int64)
    rows = np.floor((pts[:, 1] + grid.extent_y / 2.0) / grid.cell_y).astype(np.int64)
    keep = (cols >= 0) & (cols < grid.width) & (rows >= 0) & (rows < grid.height)
    cols, rows = cols[keep], rows[keep]
    flat = rows * grid.width + cols
    np.add.at(raster[0].reshape(-1), flat, hit_value)
    np.add.at(raster[1].reshape(-1), flat, range_values[keep])


def _perimeter_points(box: OrientedBox, n: int, rng: np.random.Generator, jitter: float) -> np.ndarray:
    """Sample n jittered points along the rectangle outline (scan return analog)."""
    per = 2.0 * (box.length + box.width)
    t = rng.uniform(0.0, per, size=n)
    hl, hw = box.length / 2.0, box.width / 2.0
    pts = np.empty((n, 2))
    for i, ti in enumerate(t):
        if ti < box.length:
            pts[i] = (ti - hl, hw)
        elif ti < box.length + box.width:
            pts[i] = (hl, (ti - box.length) - hw)
        elif ti < 2 * box.length + box.width:
            pts[i] = ((ti - 2 * box.length - box.width) + hl, -hw)
        else:
            pts[i] = (-hl, (ti - 2 * box.length - box.width) - hw)
    pts += rng.normal(0.0, jitter, size=pts.shape)
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return pts @ rot.T + np.array([box.cx, box.cy])


def _blur3(img: np.ndarray, passes: int = 2) -> np.ndarray:
    """Separable 3x3 binomial blur, applied ``passes`` times."""
    k = np.array([0.25, 0.5, 0.25])
    out = img.astype(np.float64)
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (padded[:-2] * k[0] + padded[1:-1] * k[1] + padded[2:] * k[2])[:, 1:-1]
        padded = np.pad(out, ((0, 0), (1, 1)), mode="edge")
        out = padded[:, :-2] * k[0] + padded[:, 1:-1] * k[1] + padded[:, 2:] * k[2]
    return out


# per-modality render knobs: (points per box, jitter sigma in m)
_SCAN_PROFILE = {MODALITY_DENSE_SCAN: (180, 0.05), MODALITY_SPARSE_SCAN: (40, 0.12)}
_NOISE_FLOOR = 0.02
_HIT_SCALE = 0.15
_DENSITY_FLOOR = 0.01  # fraction of base density left at the sensing-radius edge


def render_observation(scene: Scene, agent_id: int, modality: str, grid: GridSpec) -> Observation:
    """Render the agent's sensor raster for one modality over its BEV window.

    Channel 0 carries occupancy evidence, channel 1 a range-weighted echo.
    Point density (scans) and cell retention (camera) decay with range, so a
    single agent perceives its window edges weakly.
    """
    agent = scene.agent(agent_id)
    if modality not in MODALITIES:
        raise ParameterError(f"unknown modality {modality!r}")
    rng = _obs_rng(scene.seed, agent_id, modality)

    render_grid = grid
    if modality == MODALITY_BLUR_CAM_LOWRES:
        if grid.height % 2 or grid.width % 2:
            raise ParameterError("low-resolution camera needs an even target raster")
        render_grid = GridSpec(grid.height // 2, grid.width // 2, grid.extent_x, grid.extent_y)

    raster = np.zeros((OBS_CHANNELS, render_grid.height, render_grid.width), dtype=np.float64)
    local_boxes = _boxes_in_agent_frame(scene, agent)

    if modality in _SCAN_PROFILE:
        base_pts, jitter = _SCAN_PROFILE[modality]
        for box, dist in local_boxes:
            # cubic return-density falloff: far boxes leave only a few hits
            falloff = max(_DENSITY_FLOOR, (1.0 - dist / agent.sensing_radius) ** 3)
            n = max(1, int(round(base_pts * falloff)))
            pts = _perimeter_points(box, n, rng, jitter * (1.0 + dist / 10.0))
            ranges = 1.0 - np.hypot(pts[:, 0], pts[:, 1]) / agent.sensing_radius
            _rasterize_points(raster, render_grid, pts, _HIT_SCALE, np.clip(ranges, 0.0, 1.0) * _HIT_SCALE)
        raster[0] = np.minimum(raster[0], 3.0)
        raster[1] = np.minimum(raster[1], 3.0)
    else:
        mask = footprint_mask(render_grid, [b for b, _ in local_boxes]).astype(np.float64)
        xs, ys = render_grid.cell_centers()
        cell_range = np.hypot(xs, ys)
        drop_p = np.clip(cell_range / (0.8 * agent.sensing_radius), 0.0, 0.95)
        kept = mask * (rng.uniform(size=mask.shape) >= drop_p)
        blurred = _blur3(kept)
        texture = 1.0 + 0.3 * _blur3(rng.normal(0.0, 1.0, size=mask.shape), passes=1)
        raster[0] = blurred * texture
        raster[1] = blurred * np.clip(1.0 - cell_range / agent.sensing_radius, 0.0, 1.0)

    raster += rng.normal(0.0, _NOISE_FLOOR, size=raster.shape)

    if modality == MODALITY_BLUR_CAM_LOWRES:
        raster = np.repeat(np.repeat(raster, 2, axis=1), 2, axis=2)

    return Observation(data=raster.astype(np.float32), modality=modality)


def perturb_pose(pose: Pose2D, noise: NoiseConfig, draw_seed: int) -> Pose2D:
    """Add independent zero-mean Gaussian errors to x, y, and yaw."""
    if noise.sigma_p == 0.0 and noise.sigma_r == 0.0:
        return Pose2D(pose.x, pose.y, pose.yaw)
    rng = np.random.default_rng(np.random.SeedSequence([int(noise.seed), int(draw_seed)]))
    dx, dy = rng.normal(0.0, noise.sigma_p, size=2) if noise.sigma_p > 0 else (0.0, 0.0)
    dyaw = rng.normal(0.0, noise.sigma_r) if noise.sigma_r > 0 else 0.0
    return Pose2D(pose.x + float(dx), pose.y + float(dy), normalize_angle(pose.yaw + float(dyaw)))


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def scene_to_dict(scene: Scene) -> dict:
    return {
        "seed": scene.seed,
        "boxes": [
            {"cx": b.cx, "cy": b.cy, "length": b.length, "width": b.width, "yaw": b.yaw}
            for b in scene.boxes
        ],
        "agents": [
            {
                "agent_id": a.agent_id,
                "x": a.pose.x,
                "y": a.pose.y,
                "yaw": a.pose.yaw,
                "type_id": a.type_id,
                "sensing_radius": a.sensing_radius,
            }
            for a in scene.agents
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    boxes = [OrientedBox(b["cx"], b["cy"], b["length"], b["width"], b["yaw"]) for b in d["boxes"]]
    agents = [
        AgentState(a["agent_id"], Pose2D(a["x"], a["y"], a["yaw"]), a["type_id"], a["sensing_radius"])
        for a in d["agents"]
    ]
    return Scene(boxes=boxes, agents=agents, seed=int(d["seed"]))


def save_scenes(path, scenes: list[Scene], metadata: dict | None = None) -> None:
    payload = {
        "version": SCENE_FILE_VERSION,
        "metadata": dict(metadata or {}),
        "scenes": [scene_to_dict(s) for s in scenes],
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_scenes(path) -> list[Scene]:
    with open(path) as fh:
        payload = json.load(fh)
    if payload.get("version") != SCENE_FILE_VERSION:
        raise ParameterError(f"unsupported scene file version {payload.get('version')!r}")
    return [scene_from_dict(d) for d in payload["scenes"]]
