"""Identity (IDF1, CLEAR) and distance-estimation metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .assoc import hungarian
from .core import iou_matrix

MATCH_IOU = 0.5
DEFAULT_BINS = ((0.0, 0.25), (0.25, 0.5), (0.5, 0.75), (0.75, 1.0))


@dataclass(frozen=True)
class EvalRow:
    frame: int
    id: int
    bbox: object  # BBox
    dist: float = float("nan")
    dist_var: float = float("nan")
    occlusion: float = 0.0


def _group(rows) -> dict:
    out: dict = {}
    for r in rows:
        out.setdefault(r.frame, []).append(r)
    return out


@dataclass
class EvalPair:
    gt: list
    pred: list

    def __post_init__(self):
        for name, rows in (("gt", self.gt), ("pred", self.pred)):
            seen = set()
            for r in rows:
                key = (r.frame, r.id)
                if key in seen:
                    raise ValueError(f"{name} table repeats id {r.id} in frame {r.frame}")
                seen.add(key)

    def frames(self) -> list:
        return sorted({r.frame for r in self.gt} | {r.frame for r in self.pred})


# -- identity metrics -----------------------------------------------------------

@dataclass
class IdentityCounts:
    n_gt: int = 0
    n_pred: int = 0
    idtp: int = 0
    fn: int = 0
    fp: int = 0
    idsw: int = 0
    matches: int = 0

    @property
    def idfn(self) -> int:
        return self.n_gt - self.idtp

    @property
    def idfp(self) -> int:
        return self.n_pred - self.idtp

    @property
    def idf1(self) -> float:
        denom = 2 * self.idtp + self.idfp + self.idfn
        if self.n_gt == 0:
            return float("nan")
        return 2 * self.idtp / denom if denom else float("nan")

    @property
    def mota(self) -> float:
        if self.n_gt == 0:
            return float("nan")
        return 1.0 - (self.fn + self.fp + self.idsw) / self.n_gt

    def __add__(self, other: "IdentityCounts") -> "IdentityCounts":
        return IdentityCounts(*(a + b for a, b in zip(asdict(self).values(), asdict(other).values())))


def overlap_counts(pair: EvalPair, min_iou: float = MATCH_IOU):
    """Frames in which each (gt id, pred id) pair overlaps with IoU >= ``min_iou``."""
    gt_ids = sorted({r.id for r in pair.gt})
    pr_ids = sorted({r.id for r in pair.pred})
    gi = {g: k for k, g in enumerate(gt_ids)}
    pi = {p: k for k, p in enumerate(pr_ids)}
    counts = np.zeros((len(gt_ids), len(pr_ids)), dtype=np.int64)
    gt_f, pr_f = _group(pair.gt), _group(pair.pred)
    for f in gt_f:
        if f not in pr_f:
            continue
        g_rows, p_rows = gt_f[f], pr_f[f]
        ious = iou_matrix([r.bbox for r in g_rows], [r.bbox for r in p_rows])
        for a, b in zip(*np.nonzero(ious >= min_iou)):
            counts[gi[g_rows[a].id], pi[p_rows[b].id]] += 1
    return counts, gt_ids, pr_ids


def idtp_global(counts: np.ndarray) -> int:
    """Maximum total overlap over one-to-one identity matchings."""
    if counts.size == 0:
        return 0
    r, c = linear_sum_assignment(-counts)
    return int(counts[r, c].sum())


def clear_counts(pair: EvalPair, min_iou: float = MATCH_IOU) -> IdentityCounts:
    """CLEAR-MOT counts; correspondences persist while IoU stays above threshold."""
    gt_f, pr_f = _group(pair.gt), _group(pair.pred)
    last_match: dict[int, int] = {}
    prev: dict[int, int] = {}
    fn = fp = idsw = matches = 0
    for f in pair.frames():
        g_rows, p_rows = gt_f.get(f, []), pr_f.get(f, [])
        ious = iou_matrix([r.bbox for r in g_rows], [r.bbox for r in p_rows])
        cur: dict[int, int] = {}
        used_p = set()
        # keep last frame's correspondences when still valid
        for a, g in enumerate(g_rows):
            if g.id in prev:
                for b, p in enumerate(p_rows):
                    if p.id == prev[g.id] and b not in used_p and ious[a, b] >= min_iou:
                        cur[a] = b
                        used_p.add(b)
                        break
        free_g = [a for a in range(len(g_rows)) if a not in cur]
        free_p = [b for b in range(len(p_rows)) if b not in used_p]
        if free_g and free_p:
            sub = ious[np.ix_(free_g, free_p)]
            asg = hungarian(1.0 - sub, sub < min_iou)
            for r, c in asg.pairs:
                cur[free_g[r]] = free_p[c]
        new_prev = {}
        for a, b in cur.items():
            gid, pid = g_rows[a].id, p_rows[b].id
            if gid in last_match and last_match[gid] != pid:
                idsw += 1
            last_match[gid] = pid
            new_prev[gid] = pid
        prev = new_prev
        matches += len(cur)
        fn += len(g_rows) - len(cur)
        fp += len(p_rows) - len(cur)
    return IdentityCounts(len(pair.gt), len(pair.pred), 0, fn, fp, idsw, matches)


def identity_counts(pair: EvalPair, min_iou: float = MATCH_IOU) -> IdentityCounts:
    counts, _, _ = overlap_counts(pair, min_iou)
    c = clear_counts(pair, min_iou)
    c.idtp = idtp_global(counts)
    return c


def idf1(pair: EvalPair) -> tuple[float, int, float]:
    """``(idf1, id_switches, mota)``; NaN rates when the ground truth is empty."""
    c = identity_counts(pair)
    return c.idf1, c.idsw, c.mota


# -- distance metrics -----------------------------------------------------------

def matched_distance_pairs(pair: EvalPair, min_iou: float = MATCH_IOU):
    """Per-frame Hungarian box matching; returns arrays (d_true, d_pred, d_var, occlusion)."""
    gt_f, pr_f = _group(pair.gt), _group(pair.pred)
    out = []
    for f in sorted(gt_f):
        if f not in pr_f:
            continue
        g_rows, p_rows = gt_f[f], pr_f[f]
        ious = iou_matrix([r.bbox for r in g_rows], [r.bbox for r in p_rows])
        asg = hungarian(1.0 - ious, ious < min_iou)
        for a, b in asg.pairs:
            out.append((g_rows[a].dist, p_rows[b].dist, p_rows[b].dist_var, g_rows[a].occlusion))
    arr = np.array(out, dtype=float).reshape(-1, 4)
    return arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]


def distance_metrics(d_true, d_pred) -> dict:
    d_true = np.asarray(d_true, dtype=float)
    d_pred = np.asarray(d_pred, dtype=float)
    if len(d_true) == 0:
        return {}
    if np.any(d_true <= 0) or np.any(d_pred <= 0):
        raise ValueError("distances must be positive")
    ratio = np.maximum(d_pred / d_true, d_true / d_pred)
    err = np.abs(d_pred - d_true)
    return {
        "delta_1.25": float(np.mean(ratio < 1.25)),
        "alp@0.5": float(np.mean(err < 0.5)),
        "alp@1": float(np.mean(err < 1.0)),
        "alp@2": float(np.mean(err < 2.0)),
        "abs_rel": float(np.mean(err / d_true)),
        "sq_rel": float(np.mean(err ** 2 / d_true)),
        "rmse": float(np.sqrt(np.mean(err ** 2))),
        "rmse_log": float(np.sqrt(np.mean((np.log(d_pred) - np.log(d_true)) ** 2))),
    }


def aloe(d_true, d_pred, occlusion, bins=DEFAULT_BINS) -> dict:
    """Mean absolute distance error per occlusion band ``[lo, hi]``; empty bands are absent."""
    d_true, d_pred, occlusion = (np.asarray(a, dtype=float) for a in (d_true, d_pred, occlusion))
    out = {}
    for lo, hi in bins:
        sel = (occlusion >= lo) & (occlusion <= hi)
        if sel.any():
            out[f"{lo:g}-{hi:g}"] = float(np.mean(np.abs(d_pred[sel] - d_true[sel])))
    return out


def gnll(d, d_var, d_true):
    """Gaussian negative log-likelihood, ``0.5 * (log var + (d - d_true)^2 / var)``."""
    d, d_var, d_true = np.asarray(d, float), np.asarray(d_var, float), np.asarray(d_true, float)
    if np.any(d_var <= 0):
        raise ValueError("variance must be positive")
    val = 0.5 * (np.log(d_var) + (d - d_true) ** 2 / d_var)
    return float(val) if val.ndim == 0 else val


# -- report ----------------------------------------------------------------------

@dataclass
class MetricsReport:
    idf1: float
    id_switches: int
    mota: float
    counts: dict
    distance: dict = field(default_factory=dict)
    aloe: dict = field(default_factory=dict)
    mean_gnll: Optional[float] = None
    n_distance_pairs: int = 0

    def to_json(self, header: Optional[dict] = None) -> str:
        body = asdict(self)
        for key in ("idf1", "mota"):
            if isinstance(body[key], float) and math.isnan(body[key]):
                body[key] = "undefined"
        if header:
            body = {"header": header, **body}
        return json.dumps(body, indent=2, sort_keys=True) + "\n"


def evaluate(pair: EvalPair, bins=DEFAULT_BINS) -> MetricsReport:
    c = identity_counts(pair)
    d_true, d_pred, d_var, occ = matched_distance_pairs(pair)
    ok = np.isfinite(d_pred) & (d_pred > 0)
    dist = distance_metrics(d_true[ok], d_pred[ok]) if ok.any() else {}
    al = aloe(d_true[ok], d_pred[ok], occ[ok], bins) if ok.any() else {}
    var_ok = ok & np.isfinite(d_var) & (d_var > 0)
    mg = float(np.mean(gnll(d_pred[var_ok], d_var[var_ok], d_true[var_ok]))) if var_ok.any() else None
    return MetricsReport(c.idf1, c.idsw, c.mota, _counts_dict(c), dist, al, mg, int(ok.sum()))


def _counts_dict(c: IdentityCounts) -> dict:
    d = asdict(c)
    d.update(idfp=c.idfp, idfn=c.idfn)
    return d


def aggregate(counts: Sequence[IdentityCounts]) -> IdentityCounts:
    """Pool counts across sequences (CLEAR accumulation)."""
    total = IdentityCounts()
    for c in counts:
        total = total + c
    return total


def counts_from_dict(d: dict) -> IdentityCounts:
    return IdentityCounts(d["n_gt"], d["n_pred"], d["idtp"], d["fn"], d["fp"], d["idsw"], d["matches"])
