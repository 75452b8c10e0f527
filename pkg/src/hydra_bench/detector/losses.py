"""Detection losses: ground-plane distance, per-view head/foot distance and their weighted total."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import ShapeMismatch
from .models import DetectorOutput


@dataclass
class LossBreakdown:
    total: float
    ground: float
    single_view: list[float]
    omega: float

    @property
    def single_view_mean(self) -> float:
        return float(np.mean(self.single_view)) if self.single_view else 0.0


@dataclass
class TruthTensors:
    occupancy: torch.Tensor  # (B, G_y, G_x)
    head: torch.Tensor  # (B, N, H', W')
    foot: torch.Tensor  # (B, N, H', W')


def truth_tensors(truths, dtype=torch.float32) -> TruthTensors:
    """Stack GroundTruth objects (or a single one) into batched tensors."""
    if not isinstance(truths, (list, tuple)):
        truths = [truths]
    return TruthTensors(
        torch.tensor(np.stack([t.occupancy for t in truths]), dtype=dtype),
        torch.tensor(np.stack([t.head_maps for t in truths]), dtype=dtype),
        torch.tensor(np.stack([t.foot_maps for t in truths]), dtype=dtype),
    )


def _norm(x: torch.Tensor, dims, squared: bool) -> torch.Tensor:
    sq = (x * x).sum(dim=dims)
    return sq if squared else sq.sqrt()


def loss_terms(output: DetectorOutput, truth: TruthTensors, omega: float, squared: bool = False):
    """Per-frame tensors ``(total (B,), ground (B,), single_view (B, N))``.

    ``squared=True`` swaps the Euclidean norms for their squares (training only).
    """
    if output.occupancy.shape != truth.occupancy.shape:
        raise ShapeMismatch(f"occupancy {tuple(output.occupancy.shape)} vs {tuple(truth.occupancy.shape)}")
    if output.head.shape != truth.head.shape or output.foot.shape != truth.foot.shape:
        raise ShapeMismatch(f"head/foot {tuple(output.head.shape)} vs {tuple(truth.head.shape)}")
    dt = output.occupancy.dtype
    ground = _norm(output.occupancy - truth.occupancy.to(dt), (-2, -1), squared)
    single = _norm(output.head - truth.head.to(dt), (-2, -1), squared) + _norm(output.foot - truth.foot.to(dt), (-2, -1), squared)
    total = ground + omega * single.mean(dim=-1)
    return total, ground, single


def compute_losses(output: DetectorOutput, truth, omega: float = 1.0) -> LossBreakdown:
    """Loss breakdown averaged over the batch, using the unsquared norms."""
    if not isinstance(truth, TruthTensors):
        truth = truth_tensors(truth, dtype=output.occupancy.dtype)
    total, ground, single = loss_terms(output, truth, omega)
    return LossBreakdown(
        total=float(total.mean()),
        ground=float(ground.mean()),
        single_view=[float(v) for v in single.mean(dim=0)],
        omega=float(omega),
    )
