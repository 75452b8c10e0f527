"""Victim weights, training loop, serialization and per-view input gradients."""
from __future__ import annotations

import csv
import copy
import hashlib
import io
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from ..errors import ConfigInvalid, Diverged, NonFiniteGradient, SchemaMismatch, ShapeMismatch
from ..geometry import CameraCalibration, GroundGrid
from .losses import LossBreakdown, TruthTensors, compute_losses, loss_terms, truth_tensors
from .models import ATTN, CONV, DetectorOutput, MultiviewDetector

logger = logging.getLogger(__name__)

WEIGHTS_SCHEMA = 1


@dataclass(frozen=True)
class DetectorConfig:
    variant: str = CONV
    omega: float = 1.0
    epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 2e-3
    seed: int = 0
    feature_width: int = 16
    head_width: int = 32
    attn_layers: int = 1
    attn_heads: int = 2
    attn_points: int = 4
    squared_loss: bool = False

    def __post_init__(self):
        if self.variant not in (CONV, ATTN):
            raise ConfigInvalid(f"detector variant must be {CONV!r} or {ATTN!r}, got {self.variant!r}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigInvalid("epochs and batch_size must be >= 1")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        names = set(cls.__dataclass_fields__)
        missing = names - set(d)
        if missing:
            raise ConfigInvalid(f"detector config missing field(s): {', '.join(sorted(missing))}")
        return cls(**{k: d[k] for k in names})


@dataclass
class DetectorWeights:
    """A trained victim. Treat as immutable once returned by :func:`train`."""

    model: MultiviewDetector
    config: DetectorConfig
    calibs: list[CameraCalibration]
    grid: GroundGrid
    history: list[dict] = field(default_factory=list)
    train_seconds: float = 0.0

    @property
    def architecture(self) -> str:
        return self.model.variant

    @property
    def omega(self) -> float:
        return self.config.omega

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.model.state_dict().items()):
            h.update(k.encode())
            h.update(v.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    def with_calibrations(self, calibs: Sequence[CameraCalibration]) -> "DetectorWeights":
        model = copy.deepcopy(self.model)
        model.set_calibrations(calibs, self.grid)
        return DetectorWeights(model, self.config, list(calibs), self.grid, list(self.history), self.train_seconds)


def build_model(config: DetectorConfig, calibs, grid) -> MultiviewDetector:
    return MultiviewDetector(
        config.variant, calibs, grid,
        feature_width=config.feature_width,
        head_width=config.head_width,
        attn_layers=config.attn_layers,
        attn_heads=config.attn_heads,
        attn_points=config.attn_points,
    )


def images_tensor(frames_or_images, dtype=torch.float32) -> torch.Tensor:
    """(N, H, W, 3) arrays, frames, or lists thereof -> (B, N, 3, H, W)."""
    if isinstance(frames_or_images, torch.Tensor):
        return frames_or_images
    items = frames_or_images if isinstance(frames_or_images, (list, tuple)) else [frames_or_images]
    arrs = [getattr(x, "images", x) for x in items]
    return torch.tensor(np.stack(arrs), dtype=dtype).permute(0, 1, 4, 2, 3).contiguous()


def forward(weights: DetectorWeights, images) -> DetectorOutput:
    x = images_tensor(images)
    if x.dim() == 4:
        x = x.unsqueeze(0)
    n, h, w = x.shape[1], x.shape[3], x.shape[4]
    if n != weights.model.n_views or (h, w) != tuple(weights.model.image_size):
        raise ShapeMismatch(f"expected {weights.model.n_views} views of {weights.model.image_size}, got {n} of {(h, w)}")
    return weights.model(x.to(next(weights.model.parameters()).dtype))


def _set_seed(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def train(
    train_frames: Sequence,
    config: DetectorConfig,
    calibs: Sequence[CameraCalibration],
    grid: GroundGrid,
    val_frames: Sequence | None = None,
    progress: Callable[[dict], None] | None = None,
) -> DetectorWeights:
    """Minimize the weighted detection loss with Adam over shuffled minibatches."""
    if not train_frames:
        raise ConfigInvalid("training set is empty")
    start = time.perf_counter()
    _set_seed(config.seed)
    model = build_model(config, calibs, grid)
    model.train()
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
    images = images_tensor(list(train_frames))
    truth = truth_tensors([f.truth for f in train_frames])
    gen = torch.Generator().manual_seed(config.seed)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = torch.randperm(len(train_frames), generator=gen)
        sums = np.zeros(3)
        for i in range(0, len(order), config.batch_size):
            idx = order[i:i + config.batch_size]
            out = model(images[idx])
            t = TruthTensors(truth.occupancy[idx], truth.head[idx], truth.foot[idx])
            total, ground, single = loss_terms(out, t, config.omega, squared=config.squared_loss)
            loss = total.mean()
            if not torch.isfinite(loss):
                raise Diverged(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            with torch.no_grad():
                ev_total, ev_ground, ev_single = loss_terms(out, t, config.omega)
                sums += [float(ev_ground.sum()), float(ev_single.mean(-1).sum()), float(ev_total.sum())]
        sched.step()
        row = {"epoch": epoch, "ground": float(sums[0] / len(order)),
               "single_view_mean": float(sums[1] / len(order)), "total": float(sums[2] / len(order))}
        history.append(row)
        logger.info("epoch %d: total %.4f ground %.4f", epoch, row["total"], row["ground"])
        if progress:
            progress(row)
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    weights = DetectorWeights(model, config, list(calibs), grid, history, time.perf_counter() - start)
    if val_frames:
        weights.history[-1]["val_total"] = float(evaluate_loss(weights, val_frames).total)
    return weights


def evaluate_loss(weights: DetectorWeights, frames: Sequence) -> LossBreakdown:
    with torch.no_grad():
        out = forward(weights, list(frames))
        return compute_losses(out, [f.truth for f in frames], weights.omega)


def write_loss_csv(history: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "ground", "single_view_mean", "total"])
        for row in history:
            w.writerow([row["epoch"], f"{row['ground']:.8g}", f"{row['single_view_mean']:.8g}", f"{row['total']:.8g}"])


# --------------------------------------------------------------------------
# serialization


def save_weights(weights: DetectorWeights, path) -> None:
    """One versioned binary file. Wall-clock time is left out so equal runs give equal bytes."""
    payload = {
        "schema_version": WEIGHTS_SCHEMA,
        "architecture": weights.architecture,
        "config": weights.config.to_dict(),
        "calibrations": [c.to_dict() for c in weights.calibs],
        "grid": weights.grid.to_dict(),
        "history": weights.history,
        "state_dict": weights.model.state_dict(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def load_weights(path) -> DetectorWeights:
    payload = torch.load(path, map_location="cpu", weights_only=True)
    if payload.get("schema_version") != WEIGHTS_SCHEMA:
        raise SchemaMismatch(f"weights schema {payload.get('schema_version')!r} != {WEIGHTS_SCHEMA}")
    config = DetectorConfig.from_dict(payload["config"])
    if payload["architecture"] != config.variant:
        raise SchemaMismatch("architecture tag disagrees with the config echo")
    calibs = [CameraCalibration.from_dict(d) for d in payload["calibrations"]]
    grid = GroundGrid.from_dict(payload["grid"])
    model = build_model(config, calibs, grid)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    return DetectorWeights(model, config, calibs, grid, payload["history"])


# --------------------------------------------------------------------------
# gradients with respect to the input views


def detection_loss(weights: DetectorWeights, images: torch.Tensor, truth) -> tuple[torch.Tensor, DetectorOutput]:
    """Scalar weighted detection loss (unsquared norms) and the forward output."""
    out = weights.model(images)
    if not isinstance(truth, TruthTensors):
        truth = truth_tensors(truth, dtype=images.dtype)
    total, _, _ = loss_terms(out, truth, weights.omega)
    return total.sum(), out


def input_gradients(weights: DetectorWeights, images, truth, loss_spec=None) -> torch.Tensor:
    """Derivative of a scalar loss with respect to every input view.

    ``loss_spec`` is ``None`` for the weighted detection loss, or a callable
    ``(weights, images) -> scalar tensor``. Returns a tensor shaped like
    ``images`` (N, 3, H, W) or (B, N, 3, H, W).
    """
    x = images_tensor(images).to(next(weights.model.parameters()).dtype)
    x = x.detach().clone().requires_grad_(True)
    if loss_spec is None:
        loss, _ = detection_loss(weights, x if x.dim() == 5 else x.unsqueeze(0), truth)
    else:
        loss = loss_spec(weights, x)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NonFiniteGradient("input gradient contains non-finite values")
    return grad
