"""Patch evaluation protocol, attack reports and the cross-victim experiment suite."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from ..attack import (
    PER_TARGET,
    PER_VIEW_MASK,
    TORSO_SCALE,
    Patch,
    PatchMask,
    default_mask,
    place_chw,
    target_placements,
)
from ..detector.training import DetectorWeights, images_tensor
from .metrics import (
    DEFAULT_MATCH_RADIUS,
    DEFAULT_NMS_RADIUS,
    DEFAULT_THRESHOLD,
    MetricsReport,
    accumulate,
    compute_metrics,
    decode_detections,
    match_detections,
)


@dataclass(frozen=True)
class EvalConfig:
    threshold: float = DEFAULT_THRESHOLD
    nms_radius: float = DEFAULT_NMS_RADIUS
    match_radius: float = DEFAULT_MATCH_RADIUS
    torso_scale: tuple[float, float] = TORSO_SCALE
    batch_size: int = 8

    def __post_init__(self):
        object.__setattr__(self, "torso_scale", tuple(float(v) for v in self.torso_scale))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["torso_scale"] = list(self.torso_scale)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EvalConfig":
        from ..errors import ConfigInvalid

        names = set(cls.__dataclass_fields__)
        missing = names - set(d)
        if missing:
            raise ConfigInvalid(f"eval config missing field(s): {', '.join(sorted(missing))}")
        return cls(**{k: d[k] for k in names})


@dataclass
class PatchSpec:
    """A patch together with how it is placed during evaluation."""

    patch: Patch
    mode: str = PER_TARGET
    mask: PatchMask | None = None
    checkpoints: list = field(default_factory=list)


@dataclass
class AttackReport:
    victim: str
    patch: str
    clean: MetricsReport
    attacked: MetricsReport
    moda_drop_relative: float | None
    moda_drop_absolute: float | None
    recall_drop_relative: float | None
    miss_rate: float | None
    attack_success_rate: float | None
    trajectory: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["clean"] = self.clean.to_dict()
        d["attacked"] = self.attacked.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackReport":
        d = dict(d)
        d["clean"] = MetricsReport(**d["clean"])
        d["attacked"] = MetricsReport(**d["attacked"])
        return cls(**d)


def _relative_drop(clean, attacked):
    if clean is None or attacked is None or clean <= 0:
        return None
    return (clean - attacked) / clean


def make_report(victim: str, patch: str, clean: MetricsReport, attacked: MetricsReport,
                trajectory: Sequence[dict] = ()) -> AttackReport:
    rel = _relative_drop(clean.moda, attacked.moda)
    return AttackReport(
        victim=victim,
        patch=patch,
        clean=clean,
        attacked=attacked,
        moda_drop_relative=rel,
        moda_drop_absolute=None if clean.moda is None else clean.moda - attacked.moda,
        recall_drop_relative=_relative_drop(clean.recall, attacked.recall),
        miss_rate=None if attacked.gt_count == 0 else attacked.fn / attacked.gt_count,
        attack_success_rate=rel,
        trajectory=list(trajectory),
    )


def frame_placements(frame, weights: DetectorWeights, spec: PatchSpec | None, config: EvalConfig,
                     views: Sequence[int] | None = None):
    if spec is None:
        return []
    if spec.mode == PER_TARGET:
        return target_placements(frame, weights.calibs, config.torso_scale, views)
    if spec.mode == PER_VIEW_MASK:
        mask = spec.mask or default_mask(weights.calibs, spec.patch.psize)
        return [p for p in mask.placements() if views is None or p.view_id in views]
    raise ValueError(f"unknown placement mode {spec.mode!r}")


@torch.no_grad()
def predict(weights: DetectorWeights, frames: Sequence, spec: PatchSpec | None = None,
            config: EvalConfig = EvalConfig(), views: Sequence[int] | None = None) -> np.ndarray:
    """Occupancy predictions (F, G_y, G_x) with the patch applied per ``spec``."""
    dtype = next(weights.model.parameters()).dtype
    patch = spec.patch.tensor(dtype) if spec is not None else None
    preds = []
    for i in range(0, len(frames), config.batch_size):
        chunk = frames[i:i + config.batch_size]
        batch = images_tensor(list(chunk)).to(dtype)
        if spec is not None:
            batch = torch.stack([
                place_chw(batch[j], frame_placements(f, weights, spec, config, views), patch)
                for j, f in enumerate(chunk)
            ])
        preds.append(weights.model(batch).occupancy.numpy())
    return np.concatenate(preds) if preds else np.zeros((0,) + tuple(weights.grid.shape))


def evaluate(weights: DetectorWeights, frames: Sequence, patch: Patch | PatchSpec | None = None,
             placement_mode: str = PER_TARGET, config: EvalConfig = EvalConfig(),
             views: Sequence[int] | None = None) -> MetricsReport:
    """Place the patch on every frame, detect, match, and aggregate counts over all frames.

    ``views`` limits placements to a subset of the views (attacked-views sweep).
    """
    spec = patch if isinstance(patch, PatchSpec) or patch is None else PatchSpec(patch, placement_mode)
    occ = predict(weights, frames, spec, config, views)
    matches = []
    for o, f in zip(occ, frames):
        dets = decode_detections(o, weights.grid, config.threshold, config.nms_radius)
        matches.append(match_detections(dets, f.truth.positions, config.match_radius))
    gt = sum(f.truth.n_pedestrians for f in frames)
    return compute_metrics(accumulate(matches), gt, config.match_radius)


def evaluate_trajectory(weights, frames, spec: PatchSpec, config: EvalConfig = EvalConfig()) -> list[dict]:
    rows = []
    for epoch, p in spec.checkpoints:
        m = evaluate(weights, frames, PatchSpec(p, spec.mode, spec.mask), config=config)
        rows.append({"epoch": int(epoch), "moda": m.moda, "recall": m.recall,
                     "precision": m.precision, "modp": m.modp})
    return rows


@dataclass
class SuiteResult:
    reports: list[AttackReport]
    sweep: list[dict]  # rows: victim, patch, k, moda, recall, precision, modp


def run_experiment_suite(victims: dict[str, DetectorWeights], patches: dict[str, PatchSpec],
                         frames: Sequence, config: EvalConfig = EvalConfig(),
                         sweep: bool = True, trajectories: bool = True) -> SuiteResult:
    """Every patch against every victim, plus the attacked-views sweep k = 0..N."""
    if not victims or not patches:
        raise ValueError("need at least one victim and one patch")
    reports, rows = [], []
    for vname, w in victims.items():
        clean = evaluate(w, frames, None, config=config)
        for pname, spec in patches.items():
            attacked = evaluate(w, frames, spec, config=config)
            traj = evaluate_trajectory(w, frames, spec, config) if trajectories and spec.checkpoints else []
            reports.append(make_report(vname, pname, clean, attacked, traj))
            if sweep:
                for k in range(w.model.n_views + 1):
                    m = clean if k == 0 else evaluate(w, frames, spec, config=config, views=list(range(k)))
                    rows.append({"victim": vname, "patch": pname, "k": k, "moda": m.moda,
                                 "recall": m.recall, "precision": m.precision, "modp": m.modp})
    return SuiteResult(reports, rows)


# --------------------------------------------------------------------------
# output

REPORT_COLUMNS = ["victim", "patch", "clean_moda", "attacked_moda", "clean_recall", "attacked_recall",
                  "clean_precision", "attacked_precision", "clean_modp", "attacked_modp",
                  "moda_drop_relative", "moda_drop_absolute", "recall_drop_relative", "miss_rate",
                  "attack_success_rate"]


def _fmt(v):
    return "" if v is None else (f"{v:.6f}" if isinstance(v, float) else v)


def write_reports_csv(reports: Sequence[AttackReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(REPORT_COLUMNS)
        for r in reports:
            w.writerow([_fmt(v) for v in (
                r.victim, r.patch, r.clean.moda, r.attacked.moda, r.clean.recall, r.attacked.recall,
                r.clean.precision, r.attacked.precision, r.clean.modp, r.attacked.modp,
                r.moda_drop_relative, r.moda_drop_absolute, r.recall_drop_relative, r.miss_rate,
                r.attack_success_rate)])


def write_metrics_csv(report: MetricsReport, path) -> None:
    d = report.to_dict()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(list(d))
        w.writerow([_fmt(v) for v in d.values()])


def write_sweep_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["victim", "patch", "k", "moda", "recall", "precision", "modp"])
        for r in rows:
            w.writerow([_fmt(r[c]) for c in ("victim", "patch", "k", "moda", "recall", "precision", "modp")])


def write_reports_json(reports: Sequence[AttackReport], path) -> None:
    Path(path).write_text(json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True))


def read_reports_json(path) -> list[AttackReport]:
    return [AttackReport.from_dict(d) for d in json.loads(Path(path).read_text())]
