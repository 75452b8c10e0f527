"""Camera models, ground-plane homographies and differentiable patch warping.

Conventions
-----------
World frame: right-handed, z up, the ground is the plane z = 0 (meters).
Camera frame: x right, y down, z forward along the optical axis.
Pixel coordinates are continuous; the pixel with integer index ``(col, row)``
covers ``[col, col + 1) x [row, row + 1)`` so its center sits at ``+0.5``.
This is the ``align_corners=False`` convention of ``torch.nn.functional``.
"""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    AnchorNotVisible,
    DegenerateRig,
    DegenerateRigWarning,
    NonPositiveDepth,
    RectOutOfBounds,
    SingularHomography,
)

logger = logging.getLogger(__name__)

MIN_DEPTH = 1e-9
MIN_TRANSFER_AREA = 4.0


@dataclass(frozen=True)
class CameraCalibration:
    view_id: int
    intrinsic: np.ndarray
    rotation: np.ndarray
    translation: np.ndarray
    image_size: tuple[int, int]  # (height, width)

    def __post_init__(self):
        K = np.asarray(self.intrinsic, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "intrinsic", K)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "image_size", (int(self.image_size[0]), int(self.image_size[1])))
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError(f"view {self.view_id}: rotation is not orthonormal")
        if K[0, 0] <= 0 or K[1, 1] <= 0 or np.any(np.tril(K, -1) != 0):
            raise ValueError(f"view {self.view_id}: malformed intrinsic matrix")

    @property
    def height(self) -> int:
        return self.image_size[0]

    @property
    def width(self) -> int:
        return self.image_size[1]

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Unit viewing direction in world coordinates."""
        return self.rotation[2].copy()

    def to_dict(self) -> dict:
        return {
            "view_id": self.view_id,
            "intrinsic": self.intrinsic.ravel().tolist(),
            "rotation": self.rotation.ravel().tolist(),
            "translation": self.translation.tolist(),
            "image_size": list(self.image_size),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraCalibration":
        return cls(
            view_id=int(d["view_id"]),
            intrinsic=np.array(d["intrinsic"], dtype=np.float64).reshape(3, 3),
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
            image_size=tuple(d["image_size"]),
        )


@dataclass(frozen=True)
class GroundGrid:
    """Discretization of the ground plane; cell ``(row, col)`` is centered at
    ``origin + ((col + 0.5) * cell_size, (row + 0.5) * cell_size)``."""

    origin: tuple[float, float]
    cell_size: float
    shape: tuple[int, int]  # (G_y, G_x)

    def __post_init__(self):
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if min(self.shape) < 8:
            raise ValueError("grid shape components must be >= 8")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))
        object.__setattr__(self, "shape", (int(self.shape[0]), int(self.shape[1])))

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(x_min, x_max, y_min, y_max) in meters."""
        x0, y0 = self.origin
        return (x0, x0 + self.shape[1] * self.cell_size, y0, y0 + self.shape[0] * self.cell_size)

    def cell_centers(self) -> np.ndarray:
        """World (x, y) of every cell center, shape (G_y, G_x, 2)."""
        rows, cols = np.meshgrid(np.arange(self.shape[0]), np.arange(self.shape[1]), indexing="ij")
        x = self.origin[0] + (cols + 0.5) * self.cell_size
        y = self.origin[1] + (rows + 0.5) * self.cell_size
        return np.stack([x, y], axis=-1)

    def world_to_cell(self, xy) -> np.ndarray:
        """Continuous grid coordinates (col, row); cell centers are integers."""
        xy = np.asarray(xy, dtype=np.float64)
        return (xy - np.asarray(self.origin)) / self.cell_size - 0.5

    def cell_to_world(self, colrow) -> np.ndarray:
        colrow = np.asarray(colrow, dtype=np.float64)
        return np.asarray(self.origin) + (colrow + 0.5) * self.cell_size

    def contains(self, xy) -> bool:
        x0, x1, y0, y1 = self.extent
        return bool(x0 <= xy[0] < x1 and y0 <= xy[1] < y1)

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "cell_size": self.cell_size, "shape": list(self.shape)}

    @classmethod
    def from_dict(cls, d: dict) -> "GroundGrid":
        return cls(tuple(d["origin"]), float(d["cell_size"]), tuple(d["shape"]))


@dataclass(frozen=True)
class PatchPlacement:
    """Integer pixel rectangle; the max bounds are exclusive."""

    view_id: int
    instance_id: int
    rect: tuple[int, int, int, int]  # (px_min, px_max, py_min, py_max)

    def __post_init__(self):
        r = tuple(int(v) for v in self.rect)
        if not (r[0] < r[1] and r[2] < r[3]):
            raise RectOutOfBounds(f"degenerate rect {r}")
        object.__setattr__(self, "rect", r)

    @property
    def width(self) -> int:
        return self.rect[1] - self.rect[0]

    @property
    def height(self) -> int:
        return self.rect[3] - self.rect[2]

    def check_bounds(self, image_size: tuple[int, int]) -> None:
        h, w = image_size
        x0, x1, y0, y1 = self.rect
        if x0 < 0 or y0 < 0 or x1 > w or y1 > h:
            raise RectOutOfBounds(f"rect {self.rect} outside image {w}x{h}")


# --------------------------------------------------------------------------
# projection


def world_to_pixel(calib: CameraCalibration, world_point) -> np.ndarray:
    X = np.asarray(world_point, dtype=np.float64).reshape(3)
    cam = calib.rotation @ X + calib.translation
    if cam[2] <= MIN_DEPTH:
        raise NonPositiveDepth(f"point {X} has depth {cam[2]:.3g} in view {calib.view_id}")
    p = calib.intrinsic @ cam
    return p[:2] / p[2]


def world_to_pixel_many(calib: CameraCalibration, points) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized projection; returns (pixels (n, 2), depths (n,)) without raising."""
    X = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = X @ calib.rotation.T + calib.translation
    depth = cam[:, 2]
    p = cam @ calib.intrinsic.T
    with np.errstate(divide="ignore", invalid="ignore"):
        px = p[:, :2] / p[:, 2:3]
    return px, depth


def ground_homography(calib: CameraCalibration) -> np.ndarray:
    """Homography mapping homogeneous ground points (x, y, 1) to pixels."""
    R, t = calib.rotation, calib.translation
    H = calib.intrinsic @ np.column_stack([R[:, 0], R[:, 1], t])
    if abs(np.linalg.det(H)) <= 1e-12:
        raise SingularHomography(f"view {calib.view_id}: ground homography is singular")
    return H


def apply_homography(H: np.ndarray, pts) -> np.ndarray:
    pts = np.asarray(pts, dtype=np.float64)
    flat = pts.reshape(-1, 2)
    hom = np.column_stack([flat, np.ones(len(flat))]) @ H.T
    return (hom[:, :2] / hom[:, 2:3]).reshape(pts.shape)


def homography_jacobian(H: np.ndarray, p) -> np.ndarray:
    """2x2 derivative of the normalized homography map at pixel ``p``."""
    p = np.asarray(p, dtype=np.float64)
    hp = H @ np.array([p[0], p[1], 1.0])
    out = hp[:2] / hp[2]
    return (H[:2, :2] - np.outer(out, H[2, :2])) / hp[2]


def _inside(calib: CameraCalibration, px) -> bool:
    return bool(0 <= px[0] < calib.width and 0 <= px[1] < calib.height)


def transfer_placement(
    src: PatchPlacement,
    src_calib: CameraCalibration,
    dst_calib: CameraCalibration,
    anchor_ground_point,
    instance_id: int | None = None,
) -> PatchPlacement | None:
    """Carry a source-view rectangle into another view.

    The map ``H_dst @ inv(H_src)`` is linearized about the anchor (the carrier's
    ground position) and reduced to its isotropic part, so the rectangle keeps
    its upright shape, follows the anchor and scales with the local ground
    magnification. Returns ``None`` when the clipped area is below 4 px^2.
    """
    anchor = np.array([anchor_ground_point[0], anchor_ground_point[1], 0.0])
    try:
        a_src = world_to_pixel(src_calib, anchor)
        a_dst = world_to_pixel(dst_calib, anchor)
    except NonPositiveDepth as exc:
        raise AnchorNotVisible(str(exc)) from exc
    if not (_inside(src_calib, a_src) and _inside(dst_calib, a_dst)):
        raise AnchorNotVisible(f"anchor {anchor[:2]} projects outside view {src_calib.view_id} or {dst_calib.view_id}")

    M = ground_homography(dst_calib) @ np.linalg.inv(ground_homography(src_calib))
    scale = math.sqrt(abs(np.linalg.det(homography_jacobian(M, a_src))))
    x0, x1, y0, y1 = src.rect
    corners = np.array([[x0, y0], [x1, y0], [x0, y1], [x1, y1]], dtype=np.float64)
    mapped = a_dst + scale * (corners - a_src)
    nx0, ny0 = np.round(mapped.min(axis=0)).astype(int)
    nx1, ny1 = np.round(mapped.max(axis=0)).astype(int)
    nx0, nx1 = max(nx0, 0), min(nx1, dst_calib.width)
    ny0, ny1 = max(ny0, 0), min(ny1, dst_calib.height)
    if nx1 <= nx0 or ny1 <= ny0 or (nx1 - nx0) * (ny1 - ny0) < MIN_TRANSFER_AREA:
        return None
    return PatchPlacement(
        dst_calib.view_id,
        src.instance_id if instance_id is None else instance_id,
        (nx0, nx1, ny0, ny1),
    )


def split_views(calibs: Sequence[CameraCalibration]) -> tuple[list[int], dict[int, list[int]]]:
    """Split a rig into two groups of cameras facing each other.

    Groups are formed by the sign of the x component of the optical axis (the
    y component when every x component agrees). The lowest view id of each
    group is its source. Returns ``(sources, {source: destinations})``.
    """
    if len(calibs) < 2:
        raise DegenerateRig("need at least two views to split a rig")
    ids = [c.view_id for c in calibs]
    axes = np.array([c.optical_axis[:2] for c in calibs])
    unit = axes / np.maximum(np.linalg.norm(axes, axis=1, keepdims=True), 1e-12)

    groups = None
    if np.max(np.linalg.norm(unit - unit[0], axis=1)) > 1e-6:
        for comp in (0, 1):
            pos = [i for i, a in zip(ids, axes) if a[comp] >= 0]
            neg = [i for i, a in zip(ids, axes) if a[comp] < 0]
            if pos and neg:
                groups = [pos, neg]
                break
    if groups is None:
        warnings.warn("optical axes are parallel; splitting views by index parity", DegenerateRigWarning)
        groups = [ids[0::2], ids[1::2]]

    groups = sorted((sorted(g) for g in groups), key=lambda g: g[0])
    sources = [g[0] for g in groups]
    return sources, {g[0]: g[1:] for g in groups}


# --------------------------------------------------------------------------
# differentiable resampling


def bilinear_resize(t: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear resize of a (..., C, h, w) tensor, half-pixel convention."""
    size = (int(size[0]), int(size[1]))
    if tuple(t.shape[-2:]) == size:
        return t
    lead = t.shape[:-3]
    x = t.reshape(-1, *t.shape[-3:])
    out = F.interpolate(x, size=size, mode="bilinear", align_corners=False)
    return out.reshape(*lead, t.shape[-3], *size)


def paste_chw(image: torch.Tensor, patch: torch.Tensor, rect) -> torch.Tensor:
    """Out-of-place paste of a (C, P_h, P_w) patch into a (C, H, W) image."""
    x0, x1, y0, y1 = rect
    resized = bilinear_resize(patch, (y1 - y0, x1 - x0))
    out = image.clone()
    out[:, y0:y1, x0:x1] = resized
    return out


def warp_region(image, patch, placement: PatchPlacement):
    """Resample ``patch`` (P_h, P_w, 3) into ``placement.rect`` of ``image`` (H, W, 3).

    Accepts numpy arrays or torch tensors and returns the same kind; torch inputs
    keep their autograd graph so the result is differentiable in the patch.
    """
    placement.check_bounds(tuple(image.shape[:2]))
    as_numpy = isinstance(image, np.ndarray)
    img = torch.as_tensor(image) if as_numpy else image
    pt = torch.as_tensor(patch, dtype=img.dtype) if isinstance(patch, np.ndarray) else patch.to(img.dtype)
    out = paste_chw(img.permute(2, 0, 1), pt.permute(2, 0, 1), placement.rect).permute(1, 2, 0)
    return out.numpy() if as_numpy else out


def crop_resize_chw(grad: torch.Tensor, rect, size: tuple[int, int]) -> torch.Tensor:
    x0, x1, y0, y1 = rect
    return bilinear_resize(grad[:, y0:y1, x0:x1], size)


# --------------------------------------------------------------------------
# rigs


def look_at_calibration(
    view_id: int,
    position,
    target,
    focal: float,
    image_size: tuple[int, int],
) -> CameraCalibration:
    C = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - C
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, [0.0, 0.0, 1.0])
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    h, w = image_size
    K = np.array([[focal, 0.0, w / 2.0], [0.0, focal, h / 2.0], [0.0, 0.0, 1.0]])
    return CameraCalibration(view_id, K, R, -R @ C, (h, w))


def ring_rig(
    n_views: int,
    radius: float,
    height: float,
    focal: float,
    image_size: tuple[int, int],
    target_height: float = 0.9,
    azimuth_offset_deg: float = 45.0,
) -> list[CameraCalibration]:
    """Cameras evenly spaced on a circle, all looking at the scene center."""
    calibs = []
    for v in range(n_views):
        az = math.radians(azimuth_offset_deg + 360.0 * v / n_views)
        pos = (radius * math.cos(az), radius * math.sin(az), height)
        calibs.append(look_at_calibration(v, pos, (0.0, 0.0, target_height), focal, image_size))
    return calibs


def save_rig(calibs: Sequence[CameraCalibration], path) -> None:
    Path(path).write_text(json.dumps({"views": [c.to_dict() for c in calibs]}, indent=2))


def load_rig(path) -> list[CameraCalibration]:
    data = json.loads(Path(path).read_text())
    return [CameraCalibration.from_dict(d) for d in data["views"]]
