"""Occupancy decoding, detection matching and MODA/MODP/precision/recall."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy.ndimage import maximum_filter
from scipy.optimize import linear_sum_assignment

from ..geometry import GroundGrid

DEFAULT_THRESHOLD = 0.4
DEFAULT_NMS_RADIUS = 2.0  # cells
DEFAULT_MATCH_RADIUS = 0.5  # meters


@dataclass
class DetectionSet:
    positions: np.ndarray  # (n, 2) meters
    scores: np.ndarray  # (n,)

    def __len__(self):
        return len(self.scores)


@dataclass
class Matches:
    tp: int
    fp: int
    fn: int
    distances: np.ndarray  # (tp,) meters


@dataclass
class MetricsReport:
    tp: int
    fp: int
    fn: int
    gt_count: int
    moda: float | None
    modp: float | None
    precision: float
    recall: float | None
    match_radius: float

    @property
    def no_ground_truth(self) -> bool:
        return self.gt_count == 0

    def to_dict(self) -> dict:
        return asdict(self)


def decode_detections(occupancy, grid: GroundGrid, threshold: float = DEFAULT_THRESHOLD,
                      nms_radius: float = DEFAULT_NMS_RADIUS) -> DetectionSet:
    """Local maxima above ``threshold``, then greedy suppression within ``nms_radius`` cells."""
    occ = np.asarray(occupancy, dtype=np.float64)
    peaks = (occ >= threshold) & (occ == maximum_filter(occ, size=3, mode="constant", cval=-np.inf))
    rows, cols = np.nonzero(peaks)
    scores = occ[rows, cols]
    order = np.lexsort((cols, rows, -scores))  # score desc, ties by raster order
    kept: list[int] = []
    for i in order:
        if all((rows[i] - rows[j]) ** 2 + (cols[i] - cols[j]) ** 2 > nms_radius**2 for j in kept):
            kept.append(i)
    cells = np.stack([cols[kept], rows[kept]], -1).astype(np.float64).reshape(-1, 2)
    return DetectionSet(grid.cell_to_world(cells).reshape(-1, 2), scores[kept].astype(np.float64))


def match_detections(dets, truth_positions, r: float = DEFAULT_MATCH_RADIUS) -> Matches:
    """Maximum-cardinality assignment under distance ``r``, ties broken by total distance."""
    d = np.asarray(getattr(dets, "positions", dets), dtype=np.float64).reshape(-1, 2)
    t = np.asarray(truth_positions, dtype=np.float64).reshape(-1, 2)
    if len(d) == 0 or len(t) == 0:
        return Matches(0, len(d), len(t), np.zeros(0))
    dist = np.linalg.norm(d[:, None] - t[None], axis=-1)
    ok = dist <= r
    # every admissible pair earns a bonus larger than any sum of distances
    cost = np.where(ok, dist - (1.0 + r * min(len(d), len(t))), 0.0)
    ri, ci = linear_sum_assignment(cost)
    sel = ok[ri, ci]
    tp = int(sel.sum())
    return Matches(tp, len(d) - tp, len(t) - tp, dist[ri[sel], ci[sel]])


def compute_metrics(matches: Matches, gt_count: int, r: float = DEFAULT_MATCH_RADIUS) -> MetricsReport:
    tp, fp, fn = matches.tp, matches.fp, matches.fn
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    modp = float(np.mean(1.0 - matches.distances / r)) if tp > 0 else 0.0
    if gt_count == 0:
        return MetricsReport(tp, fp, fn, 0, None, None, precision, None, r)
    return MetricsReport(
        tp, fp, fn, gt_count,
        moda=1.0 - (fp + fn) / gt_count,
        modp=modp,
        precision=precision,
        recall=tp / gt_count,
        match_radius=r,
    )


def accumulate(per_frame: list[Matches]) -> Matches:
    return Matches(
        sum(m.tp for m in per_frame),
        sum(m.fp for m in per_frame),
        sum(m.fn for m in per_frame),
        np.concatenate([m.distances for m in per_frame]) if per_frame else np.zeros(0),
    )
