"""SORT-style tracking loop with a pluggable association cost, and inlier extraction."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .assoc import (CostMatrix, CostProvider, Gate, IoUCost, build_cost_matrix, cost_log_lines,
                    hungarian, normalize_cost)
from .context import build_window
from .core import BBox, Detection, FrameObservations, iou_matrix
from .flow import AssociationSample
from .kalman import KalmanParams, kf_init, kf_predict, kf_update

TENTATIVE, CONFIRMED, DELETED = "tentative", "confirmed", "deleted"


@dataclass(frozen=True)
class TrackerParams:
    det_threshold: float = 0.3
    n_init: int = 3
    max_age: int = 30
    gate: Gate = Gate()
    sigma: float = 1.0
    accept_threshold: float = 0.9
    negate_before_softmax: bool = False
    normalize: Optional[bool] = None  # None: provider default
    two_stage: bool = False
    high_threshold: float = 0.6
    low_threshold: float = 0.1
    kalman: KalmanParams = KalmanParams()

    def __post_init__(self):
        if self.n_init < 1:
            raise ValueError("n_init must be >= 1")
        if self.max_age < 0:
            raise ValueError("max_age must be >= 0")
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")


@dataclass(frozen=True)
class TrackRow:
    frame: int
    id: int
    bbox: BBox
    dist: float
    dist_var: float = float("nan")


class Track:
    def __init__(self, key: int, det: Detection, kalman: KalmanParams):
        self.key = key  # internal, unique per sequence
        self.id = -1  # public id, assigned on confirmation
        self.state = kf_init(det, kalman)
        self.history = [det.measurement()]
        self.prediction = det.measurement()
        self.hits = 1
        self.time_since_update = 0
        self.status = TENTATIVE
        self.pending = [self._row(det.frame)]
        self.rows: list[TrackRow] = []

    def _row(self, frame: int) -> TrackRow:
        m = self.state.mean
        return TrackRow(frame, self.id, BBox(m[0], m[1], m[2], m[3]), float(m[4]),
                        float(self.state.covariance[4, 4]))

    def predict(self, kalman: KalmanParams) -> None:
        self.state, self.prediction = kf_predict(self.state, kalman)
        self.time_since_update += 1

    def update(self, det: Detection, kalman: KalmanParams) -> None:
        self.state = kf_update(self.state, det.measurement(), det.dist_var, kalman)
        self.history.append(det.measurement())
        if len(self.history) > 16:
            del self.history[0]
        self.hits += 1
        self.time_since_update = 0
        if self.status == CONFIRMED:
            self.rows.append(self._row(det.frame))
        else:
            self.pending.append(self._row(det.frame))

    def confirm(self, public_id: int) -> None:
        self.status = CONFIRMED
        self.id = public_id
        self.rows.extend(TrackRow(r.frame, public_id, r.bbox, r.dist, r.dist_var) for r in self.pending)
        self.pending = []


@dataclass
class TrackOutput:
    rows: list = field(default_factory=list)  # TrackRow, sorted by (frame, id)
    matches: list = field(default_factory=list)  # (frame, det_index, track_key)
    cost_log: list = field(default_factory=list)
    n_failed_cells: int = 0

    def by_frame(self) -> dict:
        out: dict = {}
        for r in self.rows:
            out.setdefault(r.frame, []).append(r)
        return out


def _associate(tracks, dets, provider: CostProvider, params: TrackerParams, frame: int,
               log: Optional[list]):
    raw = build_cost_matrix(tracks, dets, provider, params.gate)
    if provider.max_cost is not None:
        # cells past the provider's ceiling are never accepted; gating them before the
        # solve keeps the max-cardinality assignment from trading a good pair for two bad ones
        over = np.where(raw.gated, False, raw.values > provider.max_cost)
        raw.gated = raw.gated | over
        raw.values = np.where(over, np.nan, raw.values)
    normalize = provider.normalize if params.normalize is None else params.normalize
    norm = None
    work = raw.values
    if normalize:
        norm = normalize_cost(raw, params.sigma, params.negate_before_softmax)
        work = 1.0 - norm.values if params.negate_before_softmax else norm.values
    assignment = hungarian(work, raw.gated)
    matched = []
    for r, c in assignment.pairs:
        if provider.max_cost is not None and raw.values[r, c] > provider.max_cost:
            continue
        # on the printed-sign scale an isolated pair always normalizes to 1, so the
        # normalized threshold only applies to the probability (negated) form
        if normalize and params.negate_before_softmax and work[r, c] > params.accept_threshold:
            continue
        matched.append((r, c))
    if log is not None:
        log.extend(cost_log_lines(frame, raw, norm))
    return matched, raw.n_failed


def track_sequence(frames: Sequence[FrameObservations], provider: CostProvider,
                   params: TrackerParams = TrackerParams(), scene_descriptor=None,
                   keep_cost_log: bool = False) -> TrackOutput:
    """Run the tracker over ``frames`` (sorted by frame index)."""
    out = TrackOutput()
    if not frames:
        return out
    provider.prepare(scene_descriptor)
    second = IoUCost(0.5) if params.two_stage else None
    kp = params.kalman
    tracks: list[Track] = []
    finished: list[Track] = []
    next_key, next_id = 0, 1
    log = [] if keep_cost_log else None
    for fo in frames:
        for t in tracks:
            t.predict(kp)
        dets = list(fo.detections)
        if params.two_stage:
            first_idx = [k for k, d in enumerate(dets) if d.confidence >= params.high_threshold]
            low_idx = [k for k, d in enumerate(dets)
                       if params.low_threshold <= d.confidence < params.high_threshold]
        else:
            first_idx = [k for k, d in enumerate(dets) if d.confidence >= params.det_threshold]
            low_idx = []

        matched, n_failed = _associate(tracks, [dets[k] for k in first_idx], provider, params,
                                       fo.frame, log)
        out.n_failed_cells += n_failed
        pairs = [(first_idx[r], c) for r, c in matched]
        used_tracks = {c for _, c in matched}
        used_dets = {first_idx[r] for r, _ in matched}

        if second is not None and low_idx:
            rest = [c for c in range(len(tracks)) if c not in used_tracks]
            m2, _ = _associate([tracks[c] for c in rest], [dets[k] for k in low_idx], second,
                               dataclasses.replace(params, normalize=False),
                               fo.frame, None)
            for r, c in m2:
                pairs.append((low_idx[r], rest[c]))
                used_tracks.add(rest[c])
                used_dets.add(low_idx[r])

        for k, c in sorted(pairs):
            tracks[c].update(dets[k], kp)
            out.matches.append((fo.frame, k, tracks[c].key))

        survivors = []
        for c, t in enumerate(tracks):
            if c not in used_tracks:
                if t.status == TENTATIVE or t.time_since_update > params.max_age:
                    t.status = DELETED
                    finished.append(t)
                    continue
            survivors.append(t)
        tracks = survivors

        for k in first_idx:
            if k in used_dets:
                continue
            tracks.append(Track(next_key, dets[k], kp))
            next_key += 1

        for t in tracks:
            if t.status == TENTATIVE and t.hits >= params.n_init:
                t.confirm(next_id)
                next_id += 1

    finished.extend(tracks)
    rows = [r for t in finished if t.id > 0 for r in t.rows]
    rows.sort(key=lambda r: (r.frame, r.id))
    out.rows = rows
    out.cost_log = log or []
    return out


# -- inlier extraction ---------------------------------------------------------

def match_detections_to_gt(dets: Sequence[Detection], gt_rows, min_iou: float = 0.5) -> dict:
    """Detection index -> gt id by Hungarian matching on IoU (pairs below ``min_iou`` dropped)."""
    if not dets or not gt_rows:
        return {}
    ious = iou_matrix([d.bbox for d in dets], [g.bbox for g in gt_rows])
    a = hungarian(1.0 - ious, ious < min_iou)
    return {r: gt_rows[c].id for r, c in a.pairs}


def build_inlier_dataset(sequences, min_history: int = 2,
                         kalman: KalmanParams = KalmanParams(),
                         max_gap: Optional[int] = None) -> list[AssociationSample]:
    """Correct (track, next detection) associations from ground truth.

    ``sequences`` yields ``(frames, gt, cluster)`` triples. For every identity the
    Kalman filter is run along its ground-truth-matched detections, and each
    detection preceded by at least ``min_history`` matched ones yields a sample.
    With ``max_gap`` a chain restarts after a longer run of missing frames.
    """
    samples = []
    for frames, gt, cluster in sequences:
        chains: dict[int, list[Detection]] = {}
        for fo, gt_rows in zip(frames, gt):
            for k, gid in sorted(match_detections_to_gt(fo.detections, gt_rows).items()):
                chains.setdefault(gid, []).append(fo.detections[k])
        for gid in sorted(chains):
            dets = chains[gid]
            state = kf_init(dets[0], kalman)
            history = [dets[0].measurement()]
            last = dets[0].frame
            for det in dets[1:]:
                gap = det.frame - last
                if max_gap is not None and gap - 1 > max_gap:
                    state = kf_init(det, kalman)
                    history = [det.measurement()]
                    last = det.frame
                    continue
                for _ in range(gap):
                    state, pred = kf_predict(state, kalman)
                if len(history) >= min_history:
                    deltas = pred - det.measurement()
                    samples.append(AssociationSample(deltas, build_window(history), int(cluster)))
                state = kf_update(state, det.measurement(), det.dist_var, kalman)
                history.append(det.measurement())
                last = det.frame
    return samples
