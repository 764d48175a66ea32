"""Association costs, row/column softmax normalization, and assignment."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment
from scipy.special import logsumexp

from .context import assign_cluster, build_window
from .core import BBox, DeltaFeatures, Detection, iou_matrix
from .flow import Batch, FlowCheckpoint, FlowNumericalError


def compute_deltas(track, predicted_measurement, det: Detection) -> DeltaFeatures:
    """Signed residuals ``prediction - candidate`` for cx, cy, w, h, d."""
    pred = np.asarray(predicted_measurement, dtype=float)
    return DeltaFeatures.from_array(pred - det.measurement())


@dataclass(frozen=True)
class Gate:
    center_px: float = 150.0
    dist_m: float = 10.0


@dataclass
class CostMatrix:
    """Rows are detections, columns tracks; ``gated`` marks forbidden cells."""

    values: np.ndarray
    gated: np.ndarray
    det_ids: list
    track_ids: list
    n_failed: int = 0  # cells masked because the provider returned a non-finite cost

    @property
    def shape(self):
        return self.values.shape


# -- providers ---------------------------------------------------------------

class CostProvider:
    """Lower cost means a better association."""

    name = "base"
    normalize = False
    max_cost: Optional[float] = None

    def prepare(self, scene_descriptor=None) -> None:
        """Called once per sequence."""

    def cell_costs(self, deltas, rows, cols, tracks, detections) -> np.ndarray:
        raise NotImplementedError


class IoUCost(CostProvider):
    name = "iou"

    def __init__(self, min_iou: float = 0.3):
        self.max_cost = 1.0 - min_iou

    def cell_costs(self, deltas, rows, cols, tracks, detections):
        pred_boxes = [_pred_box(t.prediction) for t in tracks]
        ious = iou_matrix([d.bbox for d in detections], pred_boxes)
        return 1.0 - ious[rows, cols]


class EuclideanCost(CostProvider):
    name = "euclidean"

    def __init__(self, max_px: Optional[float] = None):
        self.max_cost = max_px

    def cell_costs(self, deltas, rows, cols, tracks, detections):
        return np.hypot(deltas[:, 0], deltas[:, 1])


class DensityCost(CostProvider):
    """Negative log-likelihood from a trained checkpoint (joint or factorized)."""

    normalize = True

    def __init__(self, checkpoint: FlowCheckpoint, use_reject: bool = True):
        self.ckpt = checkpoint
        self.name = "flow" if checkpoint.kind == "flow" else "factorized"
        self.max_cost = checkpoint.nll_reject if use_reject else None
        self.cluster = 0

    def prepare(self, scene_descriptor=None) -> None:
        clusters = self.ckpt.clusters
        if scene_descriptor is not None and clusters is not None:
            self.cluster = assign_cluster(scene_descriptor, clusters)
        else:
            self.cluster = 0

    @torch.no_grad()
    def cell_costs(self, deltas, rows, cols, tracks, detections):
        windows = [build_window(t) for t in tracks]
        batch = Batch.from_arrays(
            deltas,
            np.stack([windows[c].steps for c in cols]) if len(cols) else None,
            np.stack([windows[c].mask for c in cols]) if len(cols) else None,
            np.full(len(cols), self.cluster),
        )
        return -self.ckpt.model.log_prob(batch).numpy()


def _pred_box(pred) -> BBox:
    return BBox(float(pred[0]), float(pred[1]), max(float(pred[2]), 1e-3), max(float(pred[3]), 1e-3))


def build_cost_matrix(tracks: Sequence, detections: Sequence[Detection], provider: CostProvider,
                      gate: Gate = Gate()) -> CostMatrix:
    """Tracks need ``.prediction`` ([cx, cy, w, h, d]), ``.history`` and ``.id``."""
    n_d, n_t = len(detections), len(tracks)
    values = np.full((n_d, n_t), np.nan)
    gated = np.ones((n_d, n_t), dtype=bool)
    cm = CostMatrix(values, gated, list(range(n_d)), [t.id for t in tracks])
    if n_d == 0 or n_t == 0:
        return cm
    preds = np.array([t.prediction for t in tracks], dtype=float)
    meas = np.array([d.measurement() for d in detections], dtype=float)
    deltas = preds[None, :, :] - meas[:, None, :]
    far = np.hypot(deltas[..., 0], deltas[..., 1]) > gate.center_px
    dd = np.abs(deltas[..., 4])
    far |= np.where(np.isfinite(dd), dd > gate.dist_m, False)
    rows, cols = np.nonzero(~far)
    if len(rows):
        try:
            costs = np.asarray(provider.cell_costs(deltas[rows, cols], rows, cols, tracks, detections),
                               dtype=float)
        except FlowNumericalError:
            costs = np.full(len(rows), np.nan)
        ok = np.isfinite(costs)
        values[rows[ok], cols[ok]] = costs[ok]
        gated[rows[ok], cols[ok]] = False
        cm.n_failed = int((~ok).sum())
    return cm


# -- normalization -----------------------------------------------------------

def _masked_softmax(logits: np.ndarray, mask: np.ndarray, axis: int) -> np.ndarray:
    x = np.where(mask, -np.inf, logits)
    lse = logsumexp(x, axis=axis, keepdims=True)
    with np.errstate(invalid="ignore"):
        out = np.exp(x - lse)
    return np.where(mask, np.nan, out)


def normalize_cost(cost: CostMatrix, sigma: float = 1.0, negate: bool = False) -> CostMatrix:
    """Cell-wise minimum of the row-wise and column-wise softmax of ``cost / sigma``.

    With ``negate`` the softmax is taken over ``-cost / sigma`` and the result is a
    match probability (higher is better) rather than a cost.
    """
    if not sigma > 0:
        raise ValueError("sigma must be > 0")
    sign = -1.0 if negate else 1.0
    logits = sign * np.where(cost.gated, 0.0, cost.values) / sigma
    row = _masked_softmax(logits, cost.gated, axis=1)
    col = _masked_softmax(logits, cost.gated, axis=0)
    out = np.where(cost.gated, np.nan, np.fmin(row, col))
    return CostMatrix(out, cost.gated.copy(), list(cost.det_ids), list(cost.track_ids), cost.n_failed)


# -- assignment --------------------------------------------------------------

@dataclass
class Assignment:
    pairs: list  # (row, col)
    unmatched_rows: list
    unmatched_cols: list

    def total(self, values: np.ndarray) -> float:
        return float(sum(values[r, c] for r, c in self.pairs))


def hungarian(values: np.ndarray, gated: Optional[np.ndarray] = None) -> Assignment:
    """Minimum-cost assignment over ungated cells; rectangular inputs allowed.

    Gated cells are never used. Among assignments, the largest number of ungated
    pairs is preferred, then the lowest total cost.
    """
    values = np.asarray(values, dtype=float)
    n_r, n_c = values.shape
    if gated is None:
        gated = ~np.isfinite(values)
    if n_r == 0 or n_c == 0 or gated.all():
        return Assignment([], list(range(n_r)), list(range(n_c)))
    finite = values[~gated]
    big = (np.abs(finite).max() + 1.0) * (min(n_r, n_c) + 1) * 2.0
    work = np.where(gated, big, values)
    r_idx, c_idx = linear_sum_assignment(work)
    pairs = [(int(r), int(c)) for r, c in zip(r_idx, c_idx) if not gated[r, c]]
    pairs.sort()
    used_r = {r for r, _ in pairs}
    used_c = {c for _, c in pairs}
    return Assignment(pairs, [r for r in range(n_r) if r not in used_r],
                      [c for c in range(n_c) if c not in used_c])


# -- diagnostics -------------------------------------------------------------

COST_LOG_HEADER = "frame,det_index,track_id,raw_cost,normalized,gated"


def cost_log_lines(frame: int, raw: CostMatrix, norm: Optional[CostMatrix]) -> list[str]:
    """One line per cell; ``nan`` marks gated or unnormalized values."""
    lines = []
    for r, det in enumerate(raw.det_ids):
        for c, tid in enumerate(raw.track_ids):
            nv = norm.values[r, c] if norm is not None else np.nan
            lines.append(f"{frame},{det},{tid},{raw.values[r, c]:.6f},{nv:.6f},{int(raw.gated[r, c])}")
    return lines
