"""Synthetic calibrated multiview pedestrian scenes and dataset persistence.

Randomness: every frame draws from ``numpy.random.Generator(PCG64(SeedSequence([seed, frame_id])))``,
so frames are independent of generation order and reproducible bit for bit.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import ConfigInvalid, SchemaMismatch
from .geometry import (
    CameraCalibration,
    GroundGrid,
    load_rig,
    ring_rig,
    save_rig,
    world_to_pixel_many,
)

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
VISIBILITY_THRESHOLD = 0.3
MAP_STRIDE = 4
GROUND_SIGMA_CELLS = 1.0
IMAGE_SIGMA_PX = 2.0

_HEAD_FRAC = 0.14
_TORSO_FRAC = 0.55


@dataclass(frozen=True)
class SceneConfig:
    n_views: int = 4
    image_size: tuple[int, int] = (96, 96)
    grid_shape: tuple[int, int] = (24, 24)
    cell_size: float = 0.2
    grid_origin: tuple[float, float] = (-2.4, -2.4)
    placement_margin: float = 0.4
    min_pedestrians: int = 1
    max_pedestrians: int = 5
    min_separation: float = 0.6
    n_train: int = 200
    n_test: int = 40
    noise_sigma: float = 0.01
    camera_radius: float = 7.0
    camera_height: float = 3.0
    focal: float = 110.0

    def __post_init__(self):
        for name in ("image_size", "grid_shape", "grid_origin"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        if self.n_views < 2:
            raise ConfigInvalid("n_views must be >= 2")
        if not 0 <= self.min_pedestrians <= self.max_pedestrians:
            raise ConfigInvalid("pedestrian count range is invalid")
        if self.n_train < 0 or self.n_test < 0:
            raise ConfigInvalid("frame counts must be non-negative")
        side_x = self.grid_shape[1] * self.cell_size - 2 * self.placement_margin
        side_y = self.grid_shape[0] * self.cell_size - 2 * self.placement_margin
        if side_x <= 0 or side_y <= 0:
            raise ConfigInvalid("placement_margin leaves no room for pedestrians")
        # loose hexagonal packing bound for discs of diameter min_separation
        s = self.min_separation
        capacity = (side_x / s + 1) * (side_y / (s * 0.866) + 1)
        if self.max_pedestrians > 0.5 * capacity:
            raise ConfigInvalid(
                f"max_pedestrians={self.max_pedestrians} cannot be placed with min_separation={s}"
            )

    @property
    def n_frames(self) -> int:
        return self.n_train + self.n_test

    @property
    def grid(self) -> GroundGrid:
        return GroundGrid(self.grid_origin, self.cell_size, self.grid_shape)

    @property
    def map_shape(self) -> tuple[int, int]:
        return (self.image_size[0] // MAP_STRIDE, self.image_size[1] // MAP_STRIDE)

    def rig(self) -> list[CameraCalibration]:
        return ring_rig(self.n_views, self.camera_radius, self.camera_height, self.focal, self.image_size)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneConfig":
        names = set(cls.__dataclass_fields__)
        missing = names - set(d)
        if missing:
            raise ConfigInvalid(f"scene config missing field(s): {', '.join(sorted(missing))}")
        return cls(**{k: d[k] for k in names})


@dataclass
class Pedestrian:
    id: int
    ground_position: tuple[float, float]
    height: float
    width: float
    appearance_seed: int


@dataclass
class GroundTruth:
    """Targets and annotations of one frame.

    Per-view arrays are indexed ``[view, pedestrian]``; body rects are float
    ``(x_min, x_max, y_min, y_max)`` in pixels.
    """

    occupancy: np.ndarray  # (G_y, G_x)
    head_maps: np.ndarray  # (N, H', W')
    foot_maps: np.ndarray  # (N, H', W')
    positions: np.ndarray  # (P, 2) meters
    visible: np.ndarray  # (N, P) bool
    body_rects: np.ndarray  # (N, P, 4)
    head_pixels: np.ndarray  # (N, P, 2)
    foot_pixels: np.ndarray  # (N, P, 2)
    heights: np.ndarray = field(default_factory=lambda: np.zeros(0))
    widths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    appearance_seeds: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def n_pedestrians(self) -> int:
        return len(self.positions)

    def to_json(self) -> dict:
        return {
            "positions": self.positions.tolist(),
            "heights": self.heights.tolist(),
            "widths": self.widths.tolist(),
            "appearance_seeds": self.appearance_seeds.tolist(),
            "visible": self.visible.tolist(),
            "body_rects": self.body_rects.tolist(),
            "head_pixels": self.head_pixels.tolist(),
            "foot_pixels": self.foot_pixels.tolist(),
        }


@dataclass
class MultiviewFrame:
    frame_id: int
    images: np.ndarray  # (N, H, W, 3) float64 in [0, 1]
    truth: GroundTruth

    @property
    def n_views(self) -> int:
        return self.images.shape[0]


@dataclass
class SceneState:
    pedestrians: list[Pedestrian]
    rng: np.random.Generator | None = None


# --------------------------------------------------------------------------
# targets


def gaussian_splats(shape, centers, sigma: float) -> np.ndarray:
    """Max-combined Gaussian bumps at continuous (col, row) centers."""
    out = np.zeros(shape, dtype=np.float64)
    if len(centers) == 0:
        return out
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing="ij")
    for cx, cy in centers:
        g = np.exp(-((cols - cx) ** 2 + (rows - cy) ** 2) / (2 * sigma**2))
        np.maximum(out, g, out=out)
    return out


def pixel_to_map(px) -> np.ndarray:
    """Image pixel coordinates to feature-map (col, row) with cell centers at integers."""
    return np.asarray(px, dtype=np.float64) / MAP_STRIDE - 0.5


# --------------------------------------------------------------------------
# rendering

_background_cache: dict = {}


def _background(calib: CameraCalibration) -> np.ndarray:
    key = (calib.view_id, calib.intrinsic.tobytes(), calib.rotation.tobytes(), calib.translation.tobytes())
    if key in _background_cache:
        return _background_cache[key]
    h, w = calib.image_size
    u, v = np.meshgrid(np.arange(w) + 0.5, np.arange(h) + 0.5)
    rays_cam = np.stack([u, v, np.ones_like(u)], -1) @ np.linalg.inv(calib.intrinsic).T
    rays = rays_cam @ calib.rotation  # camera -> world directions
    C = calib.center
    with np.errstate(divide="ignore", invalid="ignore"):
        s = -C[2] / rays[..., 2]
    ground = (rays[..., 2] < -1e-6) & (s > 0)
    gx = C[0] + s * rays[..., 0]
    gy = C[1] + s * rays[..., 1]
    checker = ((np.floor(gx) + np.floor(gy)) % 2).astype(np.float64)
    tex = 0.42 + 0.07 * checker + 0.03 * np.sin(3.1 * gx) * np.cos(2.3 * gy)
    img = np.empty((h, w, 3))
    img[..., 0] = tex * 0.92
    img[..., 1] = tex * 1.05
    img[..., 2] = tex * 0.85
    elev = np.clip(rays[..., 2], 0, 1)
    sky = np.stack([0.70 - 0.2 * elev, 0.74 - 0.1 * elev, 0.80 + 0.1 * elev], -1)
    img = np.where(ground[..., None], img, sky)
    img = np.clip(img, 0.0, 1.0)
    img.setflags(write=False)
    _background_cache[key] = img
    return img


def _appearance(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    return {
        "shirt_a": rng.uniform(0.05, 0.95, 3),
        "shirt_b": rng.uniform(0.05, 0.95, 3),
        "pants": rng.uniform(0.05, 0.35, 3),
        "skin": np.array([0.85, 0.65, 0.5]) * rng.uniform(0.6, 1.0),
        "pattern": int(rng.integers(0, 3)),
        "period": float(rng.uniform(0.12, 0.3)),
    }


def _texture(app: dict, uu: np.ndarray, vv: np.ndarray) -> np.ndarray:
    """Pedestrian texture at normalized body coordinates (uu across, vv down)."""
    out = np.empty(uu.shape + (3,))
    head = vv < _HEAD_FRAC
    torso = (vv >= _HEAD_FRAC) & (vv < _TORSO_FRAC)
    legs = vv >= _TORSO_FRAC
    p = app["period"]
    if app["pattern"] == 0:
        sel = (np.floor((vv - _HEAD_FRAC) / (p * 0.5)) % 2) == 0
    elif app["pattern"] == 1:
        sel = (np.floor(uu / p) % 2) == 0
    else:
        sel = ((np.floor(uu / p) + np.floor((vv - _HEAD_FRAC) / (p * 0.5))) % 2) == 0
    shirt = np.where(sel[..., None], app["shirt_a"], app["shirt_b"])
    out[:] = app["pants"]
    out[torso] = shirt[torso]
    out[head] = app["skin"]
    gap = legs & (np.abs(uu - 0.5) < 0.08) & (vv > _TORSO_FRAC + 0.1)
    out[gap] = np.nan  # see-through between the legs
    narrow_head = head & (np.abs(uu - 0.5) > 0.3)
    out[narrow_head] = np.nan
    return out


def _draw_body(img: np.ndarray, owner: np.ndarray, index: int, rect, app: dict) -> int:
    """Paint one billboard; returns its full (unclipped) silhouette pixel count."""
    h, w = owner.shape
    x0, x1, y0, y1 = rect
    c0, c1 = int(np.ceil(x0 - 0.5)), int(np.floor(x1 - 0.5)) + 1
    r0, r1 = int(np.ceil(y0 - 0.5)), int(np.floor(y1 - 0.5)) + 1
    if c1 <= c0 or r1 <= r0:
        return 0
    uu, vv = np.meshgrid((np.arange(c0, c1) + 0.5 - x0) / (x1 - x0),
                         (np.arange(r0, r1) + 0.5 - y0) / (y1 - y0))
    tex = _texture(app, uu, vv)
    solid = ~np.isnan(tex[..., 0])
    total = int(solid.sum())
    cc0, cc1, rr0, rr1 = max(c0, 0), min(c1, w), max(r0, 0), min(r1, h)
    if cc1 <= cc0 or rr1 <= rr0:
        return total
    sub = (slice(rr0 - r0, rr1 - r0), slice(cc0 - c0, cc1 - c0))
    mask = solid[sub]
    img[rr0:rr1, cc0:cc1][mask] = tex[sub][mask]
    owner[rr0:rr1, cc0:cc1][mask] = index
    return total


def project_pedestrian(calib: CameraCalibration, ped: Pedestrian):
    """Return (foot_px, head_px, body_rect, depth) for one view."""
    x, y = ped.ground_position
    px, depth = world_to_pixel_many(calib, [[x, y, 0.0], [x, y, ped.height]])
    foot, head = px[0], px[1]
    d = depth[0]
    half_w = 0.5 * calib.intrinsic[0, 0] * ped.width / max(d, 1e-6)
    cx = 0.5 * (foot[0] + head[0])
    rect = np.array([cx - half_w, cx + half_w, head[1], foot[1]])
    return foot, head, rect, d


def render_frame(scene_state: SceneState, calibs: Sequence[CameraCalibration], grid: GroundGrid,
                 noise_sigma: float = 0.01, frame_id: int = 0) -> MultiviewFrame:
    peds = scene_state.pedestrians
    rng = scene_state.rng if scene_state.rng is not None else np.random.default_rng(0)
    n, p = len(calibs), len(peds)
    h, w = calibs[0].image_size
    images = np.empty((n, h, w, 3))
    visible = np.zeros((n, p), dtype=bool)
    rects = np.zeros((n, p, 4))
    heads = np.zeros((n, p, 2))
    feet = np.zeros((n, p, 2))
    map_shape = (h // MAP_STRIDE, w // MAP_STRIDE)
    head_maps = np.zeros((n,) + map_shape)
    foot_maps = np.zeros((n,) + map_shape)

    for v, calib in enumerate(calibs):
        img = _background(calib).copy()
        owner = np.full((h, w), -1, dtype=np.int64)
        depths = np.zeros(p)
        for i, ped in enumerate(peds):
            feet[v, i], heads[v, i], rects[v, i], depths[i] = project_pedestrian(calib, ped)
        silhouette = np.zeros(p)
        for i in np.argsort(-depths, kind="stable"):
            if depths[i] <= 1e-6:
                continue
            drawn = _draw_body(img, owner, i, rects[v, i], _appearance(peds[i].appearance_seed))
            silhouette[i] = drawn
        for i in range(p):
            seen = np.count_nonzero(owner == i)
            visible[v, i] = silhouette[i] > 0 and seen / silhouette[i] >= VISIBILITY_THRESHOLD
        noise = rng.normal(0.0, noise_sigma, size=img.shape) if noise_sigma > 0 else 0.0
        images[v] = np.clip(img + noise, 0.0, 1.0)
        sig = IMAGE_SIGMA_PX / MAP_STRIDE
        head_maps[v] = gaussian_splats(map_shape, pixel_to_map(heads[v, visible[v]]), sig)
        foot_maps[v] = gaussian_splats(map_shape, pixel_to_map(feet[v, visible[v]]), sig)

    positions = np.array([pd.ground_position for pd in peds], dtype=np.float64).reshape(-1, 2)
    occupancy = gaussian_splats(grid.shape, grid.world_to_cell(positions), GROUND_SIGMA_CELLS)
    truth = GroundTruth(
        occupancy=occupancy,
        head_maps=head_maps,
        foot_maps=foot_maps,
        positions=positions,
        visible=visible,
        body_rects=rects,
        head_pixels=heads,
        foot_pixels=feet,
        heights=np.array([pd.height for pd in peds], dtype=np.float64),
        widths=np.array([pd.width for pd in peds], dtype=np.float64),
        appearance_seeds=np.array([pd.appearance_seed for pd in peds], dtype=np.int64),
    )
    return MultiviewFrame(frame_id, images, truth)


# --------------------------------------------------------------------------
# generation


def frame_rng(seed: int, frame_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(frame_id)])))


def sample_pedestrians(config: SceneConfig, rng: np.random.Generator, count: int | None = None) -> list[Pedestrian]:
    if count is None:
        count = int(rng.integers(config.min_pedestrians, config.max_pedestrians + 1))
    x0, x1, y0, y1 = config.grid.extent
    m = config.placement_margin
    peds: list[Pedestrian] = []
    attempts = 0
    while len(peds) < count:
        attempts += 1
        if attempts > 10000:
            raise ConfigInvalid(f"could not place {count} pedestrians at separation {config.min_separation}")
        pos = rng.uniform([x0 + m, y0 + m], [x1 - m, y1 - m])
        if any(np.hypot(*(pos - np.asarray(o.ground_position))) < config.min_separation for o in peds):
            continue
        peds.append(Pedestrian(
            id=len(peds),
            ground_position=(float(pos[0]), float(pos[1])),
            height=float(rng.uniform(1.5, 2.0)),
            width=float(rng.uniform(0.4, 0.7)),
            appearance_seed=int(rng.integers(0, 2**31 - 1)),
        ))
    return peds


def generate_frame(config: SceneConfig, seed: int, frame_id: int,
                   calibs: Sequence[CameraCalibration] | None = None,
                   pedestrians: list[Pedestrian] | None = None) -> MultiviewFrame:
    calibs = config.rig() if calibs is None else calibs
    rng = frame_rng(seed, frame_id)
    peds = sample_pedestrians(config, rng) if pedestrians is None else pedestrians
    return render_frame(SceneState(peds, rng), calibs, config.grid, config.noise_sigma, frame_id)


def generate_dataset(config: SceneConfig, seed: int) -> list[MultiviewFrame]:
    """All ``n_train + n_test`` frames; the first ``n_train`` form the training split."""
    calibs = config.rig()
    return [generate_frame(config, seed, fid, calibs) for fid in range(config.n_frames)]


def split_dataset(frames: list[MultiviewFrame], config: SceneConfig):
    return frames[: config.n_train], frames[config.n_train:]


# --------------------------------------------------------------------------
# persistence


@dataclass
class Dataset:
    config: SceneConfig
    seed: int
    calibs: list[CameraCalibration]
    frames: list[MultiviewFrame]

    @property
    def grid(self) -> GroundGrid:
        return self.config.grid

    @property
    def train(self) -> list[MultiviewFrame]:
        return self.frames[: self.config.n_train]

    @property
    def test(self) -> list[MultiviewFrame]:
        return self.frames[self.config.n_train:]


def persist_dataset(frames: Sequence[MultiviewFrame], directory, config: SceneConfig | None = None,
                    seed: int | None = None, calibs: Sequence[CameraCalibration] | None = None) -> Path:
    root = Path(directory)
    (root / "calib").mkdir(parents=True, exist_ok=True)
    (root / "frames").mkdir(parents=True, exist_ok=True)
    if calibs is None and config is not None:
        calibs = config.rig()
    if calibs is not None:
        save_rig(calibs, root / "calib" / "rig.json")
    for fr in frames:
        fdir = root / "frames" / f"{fr.frame_id:05d}"
        fdir.mkdir(parents=True, exist_ok=True)
        for v in range(fr.n_views):
            img = fr.images[v]
            Image.fromarray(np.round(img * 255).astype(np.uint8)).save(fdir / f"view{v}.png")
            img.astype("<f8").tofile(fdir / f"view{v}.raw")
        (fdir / "truth.json").write_text(json.dumps(fr.truth.to_json()))
    meta = {
        "schema_version": SCHEMA_VERSION,
        "n_frames": len(frames),
        "frame_ids": [fr.frame_id for fr in frames],
        "n_views": int(frames[0].n_views) if frames else (config.n_views if config else 0),
        "image_size": list(frames[0].images.shape[1:3]) if frames else (list(config.image_size) if config else []),
        "seed": seed,
        "config": config.to_dict() if config is not None else None,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return root


def _rebuild_truth(d: dict, config: SceneConfig | None, n_views: int, image_size) -> GroundTruth:
    positions = np.array(d["positions"], dtype=np.float64).reshape(-1, 2)
    visible = np.array(d["visible"], dtype=bool).reshape(n_views, len(positions))
    heads = np.array(d["head_pixels"], dtype=np.float64).reshape(n_views, -1, 2)
    feet = np.array(d["foot_pixels"], dtype=np.float64).reshape(n_views, -1, 2)
    h, w = image_size
    map_shape = (h // MAP_STRIDE, w // MAP_STRIDE)
    sig = IMAGE_SIGMA_PX / MAP_STRIDE
    grid = config.grid if config is not None else None
    occ = (gaussian_splats(grid.shape, grid.world_to_cell(positions), GROUND_SIGMA_CELLS)
           if grid is not None else np.zeros((0, 0)))
    return GroundTruth(
        occupancy=occ,
        head_maps=np.stack([gaussian_splats(map_shape, pixel_to_map(heads[v, visible[v]]), sig) for v in range(n_views)]),
        foot_maps=np.stack([gaussian_splats(map_shape, pixel_to_map(feet[v, visible[v]]), sig) for v in range(n_views)]),
        positions=positions,
        visible=visible,
        body_rects=np.array(d["body_rects"], dtype=np.float64).reshape(n_views, -1, 4),
        head_pixels=heads,
        foot_pixels=feet,
        heights=np.array(d["heights"], dtype=np.float64),
        widths=np.array(d["widths"], dtype=np.float64),
        appearance_seeds=np.array(d["appearance_seeds"], dtype=np.int64),
    )


def load_dataset(directory, raw: bool = True) -> Dataset:
    """Load a persisted dataset. ``raw=False`` reads the 8-bit PNGs instead of the exact sidecars."""
    root = Path(directory)
    meta_path = root / "meta.json"
    if not meta_path.exists():
        raise SchemaMismatch(f"{root} has no meta.json")
    meta = json.loads(meta_path.read_text())
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise SchemaMismatch(f"dataset schema {meta.get('schema_version')!r} != {SCHEMA_VERSION}")
    config = SceneConfig.from_dict(meta["config"]) if meta.get("config") else None
    rig_path = root / "calib" / "rig.json"
    calibs = load_rig(rig_path) if rig_path.exists() else (config.rig() if config else [])
    n_views = int(meta["n_views"])
    h, w = meta["image_size"]
    frames = []
    for fid in meta["frame_ids"]:
        fdir = root / "frames" / f"{fid:05d}"
        images = np.empty((n_views, h, w, 3))
        for v in range(n_views):
            path = fdir / (f"view{v}.raw" if raw else f"view{v}.png")
            if not path.exists():
                raise SchemaMismatch(f"missing view file {path}")
            if raw:
                data = np.fromfile(path, dtype="<f8")
                if data.size != h * w * 3:
                    raise SchemaMismatch(f"{path} has {data.size} values, expected {h * w * 3}")
                images[v] = data.reshape(h, w, 3)
            else:
                images[v] = np.asarray(Image.open(path), dtype=np.float64) / 255.0
        truth_path = fdir / "truth.json"
        if not truth_path.exists():
            raise SchemaMismatch(f"missing {truth_path}")
        truth = _rebuild_truth(json.loads(truth_path.read_text()), config, n_views, (h, w))
        frames.append(MultiviewFrame(int(fid), images, truth))
    return Dataset(config, meta.get("seed"), calibs, frames)
