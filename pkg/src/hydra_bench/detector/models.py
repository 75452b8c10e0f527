"""Toy multiview detectors: a convolutional aggregator and a deformable-attention variant.

Both share the per-view feature extractor, the per-view head/foot heads and the
projection of image features onto the ground grid. They differ in how the
projected per-view features are fused.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..geometry import CameraCalibration, GroundGrid, ground_homography

CONV = "conv"
ATTN = "attn"


@dataclass
class AttentionSamplingState:
    """Sampling geometry of the attention layers.

    ``reference_points`` is (l_Q, 2) in grid coordinates (col, row) with cell
    centers at integers; ``offsets`` is (B, L, H, l_Q, D, K, 2) in cells.
    """

    reference_points: torch.Tensor
    offsets: torch.Tensor

    @property
    def dims(self) -> tuple[int, int, int, int, int]:
        _, L, H, Q, D, K, _ = self.offsets.shape
        return L, H, Q, D, K

    @property
    def locations(self) -> torch.Tensor:
        return self.reference_points[None, None, None, :, None, None, :] + self.offsets


@dataclass
class DetectorOutput:
    occupancy: torch.Tensor  # (B, G_y, G_x) in [0, 1]
    head: torch.Tensor  # (B, N, H', W')
    foot: torch.Tensor  # (B, N, H', W')
    attention_state: AttentionSamplingState | None = None


def projection_grids(calibs: Sequence[CameraCalibration], grid: GroundGrid) -> torch.Tensor:
    """Normalized sampling coordinates of every ground cell in every view's feature map.

    Returns (N, G_y, G_x, 2) for ``F.grid_sample`` (align_corners=False). Cells
    behind a camera are sent far outside the image so they sample zeros.
    """
    centers = grid.cell_centers().reshape(-1, 2)
    hom = np.column_stack([centers, np.ones(len(centers))])
    out = []
    for c in calibs:
        p = hom @ ground_homography(c).T
        behind = p[:, 2] <= 1e-9
        px = p[:, :2] / np.where(behind, 1.0, p[:, 2])[:, None]
        # pixel -> [-1, 1]; the feature map spans the same extent as the image
        norm = np.stack([2 * px[:, 0] / c.width - 1, 2 * px[:, 1] / c.height - 1], -1)
        norm[behind] = -4.0
        norm = np.clip(norm, -4.0, 4.0)
        out.append(norm.reshape(*grid.shape, 2))
    return torch.tensor(np.stack(out), dtype=torch.float32)


def _coord_maps(shape: tuple[int, int]) -> torch.Tensor:
    ys = torch.linspace(-1, 1, shape[0])
    xs = torch.linspace(-1, 1, shape[1])
    yy, xx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([xx, yy])


class ViewEncoder(nn.Module):
    """Four 5x5 convolutions with two stride-2 stages (x4 downsampling).

    The last two layers are dilated so a feature at a pedestrian's foot sees
    the whole body (receptive field 41 px).
    """

    def __init__(self, width: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(3, width, 5, padding=2), nn.SiLU(),
            nn.Conv2d(width, width, 5, stride=2, padding=2), nn.SiLU(),
            nn.Conv2d(width, width, 5, padding=4, dilation=2), nn.SiLU(),
            nn.Conv2d(width, width, 5, stride=2, padding=4, dilation=2), nn.SiLU(),
        )

    def forward(self, x):
        return self.layers(x)


class OccupancyHead(nn.Module):
    """Three dilated 3x3 convolutions (dilations 1, 2, 4) producing occupancy logits."""

    def __init__(self, in_ch: int, width: int):
        super().__init__()
        self.layers = nn.Sequential(
            nn.Conv2d(in_ch, width, 3, padding=1), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=2, dilation=2), nn.SiLU(),
            nn.Conv2d(width, 1, 3, padding=4, dilation=4),
        )
        nn.init.constant_(self.layers[-1].bias, -4.0)

    def forward(self, x):
        return self.layers(x)


class DeformableViewAttention(nn.Module):
    """One deformable attention layer over D projected view maps.

    Every ground cell is a query at its own reference point; each head samples
    K points per view and mixes them with softmax weights over (view, point).
    """

    def __init__(self, width: int, n_views: int, heads: int, points: int):
        super().__init__()
        if width % heads:
            raise ValueError("feature width must be divisible by the number of heads")
        self.width, self.D, self.H, self.K = width, n_views, heads, points
        self.value_proj = nn.Conv2d(width, width, 1)
        self.sampling_offsets = nn.Linear(width, heads * n_views * points * 2)
        self.attention_weights = nn.Linear(width, heads * n_views * points)
        self.output_proj = nn.Conv2d(width, width, 1)
        self._reset_offsets()

    def _reset_offsets(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        angles = torch.arange(self.H * self.K, dtype=torch.float32) * (2 * math.pi / (self.H * self.K))
        ring = torch.stack([angles.cos(), angles.sin()], -1).view(self.H, 1, self.K, 2)
        radius = torch.arange(1, self.K + 1, dtype=torch.float32).view(1, 1, self.K, 1)
        bias = (ring * radius).expand(self.H, self.D, self.K, 2)
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(bias.reshape(-1))

    def sample(self, values: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
        """Bilinearly read ``values`` (B, D, H, C_h, G_y, G_x) at ``locations``
        (B, H, Q, D, K, 2) given in grid coordinates. Returns (B, H, C_h, Q, D, K)."""
        B, D, H, Ch, Gy, Gx = values.shape
        scale = torch.tensor([2.0 / Gx, 2.0 / Gy], dtype=locations.dtype)
        norm = (locations + 0.5) * scale - 1.0
        out = []
        for d in range(D):
            v = values[:, d].reshape(B * H, Ch, Gy, Gx)
            g = norm[:, :, :, d].reshape(B * H, -1, self.K, 2)
            s = F.grid_sample(v, g, mode="bilinear", padding_mode="zeros", align_corners=False)
            out.append(s.view(B, H, Ch, -1, self.K))
        return torch.stack(out, dim=-2)

    def forward(self, query: torch.Tensor, views: torch.Tensor, reference: torch.Tensor):
        """query (B, C, G_y, G_x); views (B, D, C, G_y, G_x); reference (Q, 2)."""
        B, C, Gy, Gx = query.shape
        D, H, K = self.D, self.H, self.K
        q = query.flatten(2).transpose(1, 2)  # (B, Q, C)
        offsets = self.sampling_offsets(q).view(B, -1, H, D, K, 2).permute(0, 2, 1, 3, 4, 5)
        logits = self.attention_weights(q).view(B, -1, H, D * K).permute(0, 2, 1, 3)
        weights = logits.softmax(-1).view(B, H, -1, D, K)
        values = self.value_proj(views.flatten(0, 1)).view(B, D, H, C // H, Gy, Gx)
        locations = reference.view(1, 1, -1, 1, 1, 2) + offsets
        sampled = self.sample(values, locations)  # (B, H, Ch, Q, D, K)
        mixed = (sampled * weights[:, :, None]).sum(dim=(-1, -2))  # (B, H, Ch, Q)
        out = self.output_proj(mixed.reshape(B, C, Gy, Gx))
        return out, offsets, weights


class MultiviewDetector(nn.Module):
    def __init__(
        self,
        variant: str,
        calibs: Sequence[CameraCalibration],
        grid: GroundGrid,
        feature_width: int = 16,
        head_width: int = 32,
        attn_layers: int = 1,
        attn_heads: int = 2,
        attn_points: int = 4,
    ):
        super().__init__()
        if variant not in (CONV, ATTN):
            raise ValueError(f"unknown variant {variant!r}")
        self.variant = variant
        self.n_views = len(calibs)
        self.image_size = calibs[0].image_size
        self.grid_shape = grid.shape
        C = feature_width
        self.encoder = ViewEncoder(C)
        self.view_head = nn.Conv2d(C, 2, 3, padding=1)
        nn.init.constant_(self.view_head.bias, -4.0)
        self.register_buffer("proj_grid", projection_grids(calibs, grid), persistent=False)
        self.register_buffer("coords", _coord_maps(grid.shape), persistent=False)
        rows, cols = torch.meshgrid(torch.arange(grid.shape[0]), torch.arange(grid.shape[1]), indexing="ij")
        self.register_buffer("reference", torch.stack([cols, rows], -1).reshape(-1, 2).float(), persistent=False)
        if variant == CONV:
            self.head = OccupancyHead(self.n_views * C + 2, head_width)
        else:
            self.query_proj = nn.Sequential(nn.Conv2d(self.n_views * C + 2, C, 1), nn.SiLU())
            self.attn = nn.ModuleList(
                DeformableViewAttention(C, self.n_views, attn_heads, attn_points) for _ in range(attn_layers)
            )
            self.head = OccupancyHead(C + 2, head_width)

    def set_calibrations(self, calibs: Sequence[CameraCalibration], grid: GroundGrid) -> None:
        self.proj_grid = projection_grids(calibs, grid).to(self.proj_grid)

    def project(self, feats: torch.Tensor) -> torch.Tensor:
        """(B, N, C, h, w) view features -> (B, N, C, G_y, G_x) ground features."""
        B, N, C, h, w = feats.shape
        g = self.proj_grid.to(feats.dtype).unsqueeze(0).expand(B, -1, -1, -1, -1).reshape(B * N, *self.grid_shape, 2)
        out = F.grid_sample(feats.reshape(B * N, C, h, w), g, mode="bilinear", padding_mode="zeros", align_corners=False)
        return out.view(B, N, C, *self.grid_shape)

    def forward(self, images: torch.Tensor) -> DetectorOutput:
        """images (B, N, 3, H, W) or (N, 3, H, W) in [0, 1]."""
        if images.dim() == 4:
            images = images.unsqueeze(0)
        B, N = images.shape[:2]
        feats = self.encoder(images.flatten(0, 1))
        hf = torch.sigmoid(self.view_head(feats)).view(B, N, 2, *feats.shape[-2:])
        ground = self.project(feats.view(B, N, *feats.shape[1:]))
        coords = self.coords.to(images.dtype).expand(B, -1, -1, -1)
        stacked = torch.cat([ground.flatten(1, 2), coords], 1)
        state = None
        if self.variant == CONV:
            logits = self.head(stacked)
        else:
            x = self.query_proj(stacked)
            all_offsets = []
            ref = self.reference.to(images.dtype)
            for layer in self.attn:
                x, offsets, _ = layer(x, ground, ref)
                x = F.silu(x)
                all_offsets.append(offsets)
            state = AttentionSamplingState(ref, torch.stack(all_offsets, 1))
            logits = self.head(torch.cat([x, coords], 1))
        return DetectorOutput(torch.sigmoid(logits[:, 0]), hf[:, :, 0], hf[:, :, 1], state)
