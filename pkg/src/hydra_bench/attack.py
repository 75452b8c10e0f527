"""Multiview adversarial patch generation.

Two loops share the same machinery:

* :func:`run_multiview_attack` places the patch on every pedestrian torso (source
  views directly, destination views through geometric transfer), projects the
  detection-loss gradient onto each view, crops and resizes every placement's
  gradient to the patch size and averages them into the update.
* :func:`run_attention_attack` uses one fixed rectangle per view and adds a
  loss on the sampling locations of the attention layers, merged with the
  detection gradient through projecting-conflicting-gradients surgery.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from PIL import Image

from .detector.losses import loss_terms, truth_tensors
from .detector.models import ATTN, CONV, AttentionSamplingState
from .detector.training import DetectorWeights, images_tensor
from .errors import (
    AnchorNotVisible,
    BadSize,
    ConfigInvalid,
    DimensionMismatch,
    Diverged,
    EmptyPlacementList,
    RectOutOfBounds,
    ShapeMismatch,
    WrongVictim,
)
from .geometry import (
    CameraCalibration,
    PatchPlacement,
    crop_resize_chw,
    paste_chw,
    split_views,
    transfer_placement,
    warp_region,
)

logger = logging.getLogger(__name__)

PER_TARGET = "per_target"
PER_VIEW_MASK = "per_view_mask"
RANDOM = "random"
SINGLE_VIEW_OPT = "single_view_opt"

TORSO_CENTER = 0.4  # patch center, as a fraction of body height from the top
TORSO_SCALE = (1.0, 0.6)  # patch (width, height) as fractions of the body box


@dataclass
class Patch:
    values: np.ndarray  # (P_h, P_w, 3) in [0, 1]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise BadSize(f"patch must be (P_h, P_w, 3), got {self.values.shape}")
        if not np.all(np.isfinite(self.values)) or self.values.min() < 0 or self.values.max() > 1:
            raise ValueError("patch values must be finite and inside [0, 1]")

    @property
    def psize(self) -> tuple[int, int]:
        return self.values.shape[:2]

    def tensor(self, dtype=torch.float32) -> torch.Tensor:
        return torch.tensor(self.values, dtype=dtype).permute(2, 0, 1).contiguous()

    @classmethod
    def from_tensor(cls, t: torch.Tensor) -> "Patch":
        return cls(t.detach().permute(1, 2, 0).double().clamp(0, 1).numpy())


@dataclass
class AttackConfig:
    alpha: float = 1.0
    n_epochs: int = 30
    n_iter: int | None = None  # frames per epoch; None -> all attack frames
    omega: float | None = None  # None -> the victim's training weight
    stop_loss: float | None = None
    mode: str = PER_TARGET
    psize: tuple[int, int] = (16, 16)
    normalize_step: bool = True
    torso_scale: tuple[float, float] = TORSO_SCALE
    mask_rects: list | None = None  # PER_VIEW_MASK rects per view; None -> centered default
    attention_targets: list | None = None  # (col, row) grid points; None -> grid corners
    attention_loss_sign: int = 1  # +1 ascends the attention loss, -1 descends it
    attention_weight: float = 3.0
    seed: int = 0
    checkpoint_every: int = 5

    def __post_init__(self):
        self.psize = tuple(int(v) for v in self.psize)
        self.torso_scale = tuple(float(v) for v in self.torso_scale)
        if len(self.torso_scale) != 2 or min(self.torso_scale) <= 0:
            raise ConfigInvalid("torso_scale must be two positive fractions")
        if self.alpha < 0:
            raise ConfigInvalid("alpha must be non-negative")
        if self.n_epochs < 1 or (self.n_iter is not None and self.n_iter < 1):
            raise ConfigInvalid("n_epochs and n_iter must be >= 1")
        if self.mode not in (PER_TARGET, PER_VIEW_MASK):
            raise ConfigInvalid(f"unknown attack mode {self.mode!r}")
        if self.attention_loss_sign not in (1, -1):
            raise ConfigInvalid("attention_loss_sign must be +1 or -1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["psize"] = list(self.psize)
        d["torso_scale"] = list(self.torso_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        names = set(cls.__dataclass_fields__)
        missing = names - set(d)
        if missing:
            raise ConfigInvalid(f"attack config missing field(s): {', '.join(sorted(missing))}")
        return cls(**{k: d[k] for k in names})


@dataclass
class PatchMask:
    """One rectangle per view and the binary masks it induces."""

    rects: list[tuple[int, int, int, int]]
    image_size: tuple[int, int]

    @property
    def masks(self) -> np.ndarray:
        h, w = self.image_size
        out = np.zeros((len(self.rects), h, w), dtype=bool)
        for v, (x0, x1, y0, y1) in enumerate(self.rects):
            out[v, y0:y1, x0:x1] = True
        return out

    def placements(self) -> list[PatchPlacement]:
        return [PatchPlacement(v, 0, r) for v, r in enumerate(self.rects)]


@dataclass
class AttentionLossTerms:
    terms: torch.Tensor  # (B, L, H, l_Q, D, K) squared distances
    total: torch.Tensor  # scalar, mean over the batch
    l_Q: int
    D: int
    K: int


@dataclass
class AttackResult:
    patch: Patch
    log: list[dict]
    checkpoints: list[tuple[int, Patch]] = field(default_factory=list)
    patch_history_bounds: list[tuple[float, float]] = field(default_factory=list)


# --------------------------------------------------------------------------
# primitives


def init_patch(psize) -> Patch:
    ph, pw = (int(v) for v in psize)
    if ph < 2 or pw < 2:
        raise BadSize(f"patch size must be at least 2x2, got {psize}")
    return Patch(np.full((ph, pw, 3), 0.5))


def update_patch(patch: Patch, step, alpha: float) -> Patch:
    step = np.asarray(step, dtype=np.float64)
    if step.shape != patch.values.shape:
        raise ShapeMismatch(f"step {step.shape} vs patch {patch.values.shape}")
    return Patch(np.clip(patch.values + alpha * step, 0.0, 1.0))


def _update_tensor(delta: torch.Tensor, step: torch.Tensor, alpha: float) -> torch.Tensor:
    return (delta + alpha * step).clamp_(0.0, 1.0)


def compute_patch_step(per_view_gradients, placements: Sequence[PatchPlacement], psize) -> torch.Tensor:
    """Mean over placements of the placement's gradient crop resized to ``psize``.

    ``per_view_gradients`` is (N, 3, H, W); the result is (3, P_h, P_w).
    """
    if not placements:
        raise EmptyPlacementList("no patch placements to aggregate")
    g = torch.as_tensor(per_view_gradients)
    acc = torch.zeros((g.shape[1],) + tuple(psize), dtype=g.dtype)
    for p in placements:
        acc = acc + crop_resize_chw(g[p.view_id], p.rect, psize)
    return acc / len(placements)


def mask_step(per_view_gradients, mask: PatchMask, psize) -> torch.Tensor:
    """Masked-view update: sum over views of the masked gradient, cropped to the
    view's rect and resized, divided by the number of views."""
    g = torch.as_tensor(per_view_gradients)
    m = torch.as_tensor(mask.masks, dtype=g.dtype)
    acc = torch.zeros((g.shape[1],) + tuple(psize), dtype=g.dtype)
    for d, rect in enumerate(mask.rects):
        acc = acc + crop_resize_chw(g[d] * m[d], rect, psize)
    return acc / len(mask.rects)


def _normalized(step: torch.Tensor) -> torch.Tensor:
    m = step.abs().max()
    return step / m if m > 0 else step


def place_patches(images, placements: Sequence[PatchPlacement], patch: Patch):
    """Return new (N, H, W, 3) images with the patch warped into every placement."""
    out = np.array(images, dtype=np.float64, copy=True)
    for p in placements:
        out[p.view_id] = warp_region(out[p.view_id], patch.values, p)
    return out


def place_chw(images: torch.Tensor, placements: Sequence[PatchPlacement], patch: torch.Tensor) -> torch.Tensor:
    """Tensor version over (N, 3, H, W) images; differentiable in ``patch``."""
    views = list(images.unbind(0))
    for p in placements:
        p.check_bounds(tuple(images.shape[-2:]))
        views[p.view_id] = paste_chw(views[p.view_id], patch, p.rect)
    return torch.stack(views)


# --------------------------------------------------------------------------
# placements


def torso_rect(body_rect, scale, image_size) -> tuple[int, int, int, int] | None:
    """Upper-body rect of ``scale`` = (width, height) fractions of the body box,
    centered horizontally and at ``TORSO_CENTER`` vertically, clipped to the image."""
    x0, x1, y0, y1 = body_rect
    half_w = max(scale[0] * (x1 - x0), 2.0) / 2
    half_h = max(scale[1] * (y1 - y0), 2.0) / 2
    cx = 0.5 * (x0 + x1)
    cy = y0 + TORSO_CENTER * (y1 - y0)
    h, w = image_size
    r = (int(round(cx - half_w)), int(round(cx + half_w)), int(round(cy - half_h)), int(round(cy + half_h)))
    r = (max(r[0], 0), min(r[1], w), max(r[2], 0), min(r[3], h))
    if r[1] - r[0] < 1 or r[3] - r[2] < 1:
        return None
    return r


def target_placements(frame, calibs: Sequence[CameraCalibration], scale=TORSO_SCALE,
                      views: Sequence[int] | None = None) -> list[PatchPlacement]:
    """Per-pedestrian placements: torso rects in the source views, transferred
    to the destination views. Views where the carrier is occluded are skipped."""
    truth = frame.truth
    sources, dests = split_views(calibs)
    by_id = {c.view_id: c for c in calibs}
    keep = set(range(len(calibs))) if views is None else set(views)
    out: list[PatchPlacement] = []
    for p in range(truth.n_pedestrians):
        for s in sources:
            rect = torso_rect(truth.body_rects[s, p], scale, by_id[s].image_size)
            if rect is None:
                continue
            src = PatchPlacement(s, p, rect)
            if s in keep and truth.visible[s, p]:
                out.append(src)
            for d in dests[s]:
                if d not in keep or not truth.visible[d, p]:
                    continue
                try:
                    moved = transfer_placement(src, by_id[s], by_id[d], truth.positions[p])
                except AnchorNotVisible:
                    continue
                if moved is not None:
                    out.append(moved)
    out.sort(key=lambda pl: (pl.view_id, pl.instance_id))
    return out


def default_mask(calibs: Sequence[CameraCalibration], psize) -> PatchMask:
    """One psize rect per view, centered horizontally just below the image center."""
    h, w = calibs[0].image_size
    ph, pw = psize
    x0 = (w - pw) // 2
    y0 = min(h // 2 + ph // 2, h - ph)
    return PatchMask([(x0, x0 + pw, y0, y0 + ph)] * len(calibs), (h, w))


def mask_from_config(config: AttackConfig, calibs) -> PatchMask:
    if config.mask_rects is None:
        return default_mask(calibs, config.psize)
    rects = [tuple(int(v) for v in r) for r in config.mask_rects]
    if len(rects) != len(calibs):
        raise ConfigInvalid("mask_rects needs exactly one rect per view")
    for v, r in enumerate(rects):
        PatchPlacement(v, 0, r).check_bounds(calibs[v].image_size)
    return PatchMask(rects, calibs[0].image_size)


# --------------------------------------------------------------------------
# attention loss and gradient surgery


def default_attention_targets(grid_shape, K: int) -> torch.Tensor:
    gy, gx = grid_shape
    corners = [(0.0, 0.0), (gx - 1.0, 0.0), (0.0, gy - 1.0), (gx - 1.0, gy - 1.0)]
    return torch.tensor([corners[k % 4] for k in range(K)])


def attention_loss(state: AttentionSamplingState, targets) -> AttentionLossTerms:
    """Squared distance between every sampling location and its point target,
    normalized by l_Q * D * K and summed over layers and heads."""
    loc = state.locations
    if loc.dim() == 6:
        loc = loc.unsqueeze(0)
    B, L, H, Q, D, K, _ = loc.shape
    tgt = torch.as_tensor(targets, dtype=loc.dtype).reshape(-1, 2)
    if tgt.shape[0] != K:
        raise DimensionMismatch(f"{tgt.shape[0]} targets for {K} sampling points")
    terms = ((loc - tgt.view(1, 1, 1, 1, 1, K, 2)) ** 2).sum(-1)
    per_lh = terms.sum(dim=(-1, -2, -3)) / (Q * D * K)
    total = per_lh.sum(dim=(1, 2)).mean()
    return AttentionLossTerms(terms, total, Q, D, K)


def pcgrad_combine(grad_lists: Sequence) -> torch.Tensor:
    """Project each task gradient off the others it conflicts with, then sum.

    Each entry is a tensor (e.g. the stacked per-view gradients of one loss);
    the surgery acts on the flattened vectors and uses the original gradients
    as the projection directions.
    """
    grads = [torch.as_tensor(g) for g in grad_lists]
    shape = grads[0].shape
    if any(g.shape != shape for g in grads):
        raise ShapeMismatch("task gradients must share one shape")
    flat = [g.reshape(-1) for g in grads]
    out = torch.zeros_like(flat[0])
    for i, gi in enumerate(flat):
        g = gi.clone()
        for j, gj in enumerate(flat):
            if i == j:
                continue
            nn_ = torch.dot(gj, gj)
            dot = torch.dot(g, gj)
            if nn_ > 0 and dot < 0:
                g = g - (dot / nn_) * gj
        out = out + g
    return out.reshape(shape)


# --------------------------------------------------------------------------
# attack loops


def select_attack_frames(frames: Sequence, n_frames: int, seed: int) -> list:
    """Seeded subset (without replacement) of the frames a patch is optimized on."""
    if n_frames >= len(frames):
        return list(frames)
    idx = np.random.default_rng(seed).choice(len(frames), n_frames, replace=False)
    return [frames[i] for i in idx]


def _frame_order(n_frames: int, n_iter: int | None, epoch: int, seed: int) -> list[int]:
    rng = np.random.default_rng([seed, epoch])
    order = rng.permutation(n_frames)
    return order[: n_iter or n_frames].tolist()


def _check_victim(weights: DetectorWeights, expected: str, allow_mismatch: bool):
    if weights.architecture != expected and not allow_mismatch:
        raise WrongVictim(f"this attack targets a {expected!r} detector, got {weights.architecture!r}")


def _run_loop(weights, frames, config: AttackConfig, placements_for, gradient_fn, step_fn) -> AttackResult:
    dtype = next(weights.model.parameters()).dtype
    delta = init_patch(config.psize).tensor(dtype)
    log: list[dict] = []
    checkpoints = [(0, Patch.from_tensor(delta))]
    bounds = []
    images = [images_tensor(f).to(dtype)[0] for f in frames]
    truths = [truth_tensors(f.truth, dtype) for f in frames]
    placements = [placements_for(f) for f in frames]
    for epoch in range(1, config.n_epochs + 1):
        epoch_losses = []
        for it, fi in enumerate(_frame_order(len(frames), config.n_iter, epoch, config.seed), start=1):
            if not placements[fi]:
                continue
            x = place_chw(images[fi], placements[fi], delta).detach().requires_grad_(True)
            grad, row = gradient_fn(x, truths[fi])
            if not np.isfinite(row["total"]):
                raise Diverged(f"non-finite loss at epoch {epoch}, iteration {it}")
            step = step_fn(grad, placements[fi])
            if config.normalize_step:
                step = _normalized(step)
            delta = _update_tensor(delta, step, config.alpha)
            bounds.append((float(delta.min()), float(delta.max())))
            log.append({"epoch": epoch, "iter": it, "frame": int(frames[fi].frame_id), **row})
            epoch_losses.append(row["total"])
        if config.checkpoint_every and epoch % config.checkpoint_every == 0:
            checkpoints.append((epoch, Patch.from_tensor(delta)))
        if config.stop_loss is not None and epoch_losses and np.mean(epoch_losses) >= config.stop_loss:
            logger.info("stop loss reached at epoch %d", epoch)
            if checkpoints[-1][0] != epoch:
                checkpoints.append((epoch, Patch.from_tensor(delta)))
            break
    return AttackResult(Patch.from_tensor(delta), log, checkpoints, bounds)


def _detection_gradient(weights: DetectorWeights, omega: float):
    def fn(x, truth):
        out = weights.model(x.unsqueeze(0))
        total, ground, single = loss_terms(out, truth, omega)
        (grad,) = torch.autograd.grad(total.sum(), x)
        return grad, {"ground": float(ground.detach().sum()), "single_view_mean": float(single.detach().mean()),
                      "attention": 0.0, "total": float(total.detach().sum())}
    return fn


def run_multiview_attack(
    weights: DetectorWeights,
    frames: Sequence,
    config: AttackConfig,
    placements: Callable | Sequence[PatchPlacement] | None = None,
    views: Sequence[int] | None = None,
    allow_mismatch: bool = False,
) -> AttackResult:
    """Per-target multiview patch by gradient projection and aggregation.

    ``placements`` overrides the per-pedestrian placements with a fixed list or
    a ``frame -> list`` callable; ``views`` restricts placements to those views.
    """
    _check_victim(weights, CONV, allow_mismatch)
    omega = weights.omega if config.omega is None else config.omega
    if placements is None:
        def placements_for(f):
            return target_placements(f, weights.calibs, config.torso_scale, views)
    elif callable(placements):
        placements_for = placements
    else:
        fixed = list(placements)
        def placements_for(f):
            return [p for p in fixed if views is None or p.view_id in views]
    return _run_loop(
        weights, frames, config, placements_for,
        _detection_gradient(weights, omega),
        lambda grad, pl: compute_patch_step(grad, pl, config.psize),
    )


def run_attention_attack(
    weights: DetectorWeights,
    frames: Sequence,
    config: AttackConfig,
    allow_mismatch: bool = False,
) -> AttackResult:
    """Masked multiview patch against the attention detector.

    The detection loss is ascended while the attention loss enters with
    ``attention_loss_sign`` (default +1: push sampling points away from the targets);
    the two input gradients are merged by :func:`pcgrad_combine`.
    """
    if weights.model.variant != ATTN and not allow_mismatch:
        raise WrongVictim("the attention-aware attack needs a detector exposing attention state")
    omega = weights.omega if config.omega is None else config.omega
    mask = mask_from_config(config, weights.calibs)
    targets = None
    if weights.model.variant == ATTN:
        layer = weights.model.attn[0]
        targets = (torch.as_tensor(config.attention_targets, dtype=torch.float32)
                   if config.attention_targets is not None
                   else default_attention_targets(weights.grid.shape, layer.K))
    fixed = mask.placements()

    def gradient_fn(x, truth):
        out = weights.model(x.unsqueeze(0))
        total, ground, single = loss_terms(out, truth, omega)
        use_att = targets is not None and config.attention_weight != 0 and out.attention_state is not None
        att = attention_loss(out.attention_state, targets).total if targets is not None and out.attention_state is not None else None
        g_det = torch.autograd.grad(total.sum(), x, retain_graph=use_att)[0]
        if use_att:
            g_att = torch.autograd.grad(att, x)[0] * (config.attention_loss_sign * config.attention_weight)
        else:
            g_att = torch.zeros_like(g_det)
        grad = pcgrad_combine([g_det, g_att])
        row = {"ground": float(ground.detach().sum()), "single_view_mean": float(single.detach().mean()),
               "attention": float(att.detach()) if att is not None else 0.0, "total": float(total.detach().sum())}
        return grad, row

    return _run_loop(
        weights, frames, config, lambda f: fixed, gradient_fn,
        lambda grad, pl: mask_step(grad, mask, config.psize),
    )


def baseline_patches(kind: str, psize=(16, 16), seed: int = 0, weights: DetectorWeights | None = None,
                     frames: Sequence | None = None, config: AttackConfig | None = None,
                     view: int = 0, allow_mismatch: bool = True) -> Patch:
    """Surrogates for off-the-shelf single-view patches.

    ``RANDOM`` is seeded uniform noise. ``SINGLE_VIEW_OPT`` runs the per-target
    loop with placements (and therefore gradients) restricted to ``view``.
    """
    if kind == RANDOM:
        ph, pw = (int(v) for v in psize)
        if ph < 2 or pw < 2:
            raise BadSize(f"patch size must be at least 2x2, got {psize}")
        return Patch(np.random.default_rng(seed).uniform(0.0, 1.0, (ph, pw, 3)))
    if kind == SINGLE_VIEW_OPT:
        if weights is None or frames is None:
            raise ConfigInvalid("single-view optimization needs a victim and frames")
        config = config or AttackConfig(psize=tuple(psize), seed=seed)
        return run_multiview_attack(weights, frames, config, views=[view], allow_mismatch=allow_mismatch).patch
    raise ConfigInvalid(f"unknown baseline kind {kind!r}")


# --------------------------------------------------------------------------
# artifacts


def save_patch(directory, patch: Patch, manifest: dict, log: Sequence[dict] = (),
               checkpoints: Sequence[tuple[int, Patch]] = ()) -> Path:
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    np.save(root / "patch.npy", patch.values)
    Image.fromarray(np.round(patch.values * 255).astype(np.uint8)).save(root / "patch.png")
    if checkpoints:
        np.savez(root / "checkpoints.npz", epochs=np.array([e for e, _ in checkpoints]),
                 patches=np.stack([p.values for _, p in checkpoints]))
    with open(root / "loss_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "iter", "ground", "single_view_mean", "attention", "total"])
        for r in log:
            w.writerow([r["epoch"], r["iter"], f"{r['ground']:.8g}", f"{r['single_view_mean']:.8g}",
                        f"{r['attention']:.8g}", f"{r['total']:.8g}"])
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return root


def load_patch(directory) -> tuple[Patch, dict, list[tuple[int, Patch]]]:
    root = Path(directory)
    if root.is_file():
        root = root.parent
    manifest = json.loads((root / "manifest.json").read_text()) if (root / "manifest.json").exists() else {}
    patch = Patch(np.load(root / "patch.npy"))
    checkpoints = []
    if (root / "checkpoints.npz").exists():
        data = np.load(root / "checkpoints.npz")
        checkpoints = [(int(e), Patch(p)) for e, p in zip(data["epochs"], data["patches"])]
    return patch, manifest, checkpoints
