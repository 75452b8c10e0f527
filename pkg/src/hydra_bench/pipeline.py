"""Glue between the experiment config, the attacks and the evaluation protocol."""
from __future__ import annotations

import dataclasses
from typing import Sequence

from .attack import (
    PER_TARGET,
    PER_VIEW_MASK,
    RANDOM,
    AttackResult,
    PatchMask,
    baseline_patches,
    mask_from_config,
    run_attention_attack,
    run_multiview_attack,
    select_attack_frames,
)
from .config import ALG1, ALG2, BASELINE_RANDOM, BASELINE_SINGLEVIEW, ExperimentConfig
from .detector.training import DetectorWeights
from .errors import ConfigInvalid
from .evaluation.experiments import PatchSpec


def placement_of(mode: str, config: ExperimentConfig, weights: DetectorWeights) -> dict:
    """How a patch made by ``mode`` is placed at evaluation time."""
    if mode == ALG2:
        mask = mask_from_config(config.alg2, weights.calibs)
        return {"mode": PER_VIEW_MASK, "mask_rects": [list(r) for r in mask.rects],
                "image_size": list(mask.image_size)}
    return {"mode": PER_TARGET, "torso_scale": list(config.eval.torso_scale)}


def generate_patch(mode: str, weights: DetectorWeights, train_frames: Sequence, config: ExperimentConfig,
                   seed: int, views: Sequence[int] | None = None, allow_mismatch: bool = False) -> AttackResult:
    """Optimize (or draw) one patch. ``seed`` picks the attack frames and their order."""
    attack_cfg = dataclasses.replace(config.attack(mode), seed=seed)
    frames = select_attack_frames(train_frames, config.protocol.attack_frames, seed)
    if mode == ALG1:
        return run_multiview_attack(weights, frames, attack_cfg, views=views, allow_mismatch=allow_mismatch)
    if mode == ALG2:
        return run_attention_attack(weights, frames, attack_cfg, allow_mismatch=allow_mismatch)
    if mode == BASELINE_RANDOM:
        patch = baseline_patches(RANDOM, attack_cfg.psize, seed=seed)
        return AttackResult(patch, [], [(0, patch)], [(float(patch.values.min()), float(patch.values.max()))])
    if mode == BASELINE_SINGLEVIEW:
        # Alg.-1 loop with placements, and therefore gradients, in one view only
        return run_multiview_attack(weights, frames, attack_cfg, views=[config.protocol.single_view],
                                    allow_mismatch=allow_mismatch)
    raise ConfigInvalid(f"unknown attack mode {mode!r}")


def spec_from_manifest(patch, placement: dict, checkpoints=()) -> PatchSpec:
    mode = placement.get("mode", PER_TARGET)
    mask = None
    if mode == PER_VIEW_MASK:
        mask = PatchMask([tuple(r) for r in placement["mask_rects"]], tuple(placement["image_size"]))
    return PatchSpec(patch, mode, mask, list(checkpoints))
