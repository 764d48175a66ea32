"""End-to-end pipeline helpers and the provider comparison grid."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .assoc import CostProvider, DensityCost, EuclideanCost, IoUCost
from .context import SceneClusterModel, assign_cluster, kmeans_fit
from .flow import FlowCheckpoint, FlowConfig, collate, evaluate_nll, train
from .metrics import EvalPair, EvalRow, IdentityCounts, aggregate, identity_counts
from .sim import (ScenarioConfig, apply_eval_filters, generate_scenario, preset,
                  render_detections)
from .tracker import TrackerParams, build_inlier_dataset, track_sequence

PROVIDERS = ("iou", "euclidean", "factorized", "flow", "flow-gt")
REJECT_QUANTILE = 0.995


@dataclass
class SimSequence:
    config: ScenarioConfig
    frames: list
    gt: list  # per-frame GroundTruthRow lists, evaluation filters applied
    raw_gt: list  # unfiltered, used for inlier extraction
    descriptor: np.ndarray


def simulate(cfg: ScenarioConfig, gt_distances: bool = False) -> SimSequence:
    scenario = generate_scenario(cfg)
    frames, gt = render_detections(scenario, gt_distances=gt_distances)
    filtered = apply_eval_filters(gt, cfg.max_distance, cfg.max_hidden, cfg.hidden_occlusion)
    return SimSequence(cfg, frames, filtered, gt, scenario.descriptor)


def simulate_presets(names: Sequence[str], seeds: Sequence[int], gt_distances: bool = False):
    return [simulate(preset(n, s), gt_distances) for n in names for s in seeds]


# -- training -----------------------------------------------------------------

def fit_clusters(seqs: Sequence[SimSequence], k: int = 16, seed: int = 0) -> SceneClusterModel:
    desc = np.stack([s.descriptor for s in seqs])
    n_distinct = len(np.unique(np.round(desc, 12), axis=0))
    return kmeans_fit(desc, k=min(k, n_distinct), seed=seed)


def inlier_samples(seqs: Sequence[SimSequence], clusters: Optional[SceneClusterModel],
                   min_history: int = 1, tracker: TrackerParams = TrackerParams()):
    triples = []
    for s in seqs:
        c = assign_cluster(s.descriptor, clusters) if clusters is not None else 0
        triples.append((s.frames, s.raw_gt, c))
    return build_inlier_dataset(triples, min_history=min_history, kalman=tracker.kalman,
                                max_gap=tracker.max_age)


def fit_checkpoint(seqs: Sequence[SimSequence], cfg: FlowConfig, kind: str = "flow",
                   clusters: Optional[SceneClusterModel] = None, min_history: int = 1,
                   val_seqs: Optional[Sequence[SimSequence]] = None):
    """Train a density model on inliers of ``seqs``; returns ``(checkpoint, TrainResult)``."""
    if clusters is None and cfg.use_scene:
        clusters = fit_clusters(seqs, cfg.n_clusters, cfg.seed)
    if clusters is not None:
        cfg = cfg.replace(n_clusters=max(cfg.n_clusters, clusters.k))
    samples = inlier_samples(seqs, clusters, min_history)
    val = collate(inlier_samples(val_seqs, clusters, min_history)) if val_seqs else None
    result = train(samples, cfg, kind, val_dataset=val)
    nll = -_log_probs(result.model, collate(samples))
    reject = float(np.quantile(nll, REJECT_QUANTILE))
    meta = {"n_samples": len(samples), "best_epoch": result.best_epoch,
            "best_val_nll": result.best_val_nll}
    return FlowCheckpoint(kind, cfg, result.model, clusters, reject, meta), result


@torch.no_grad()
def _log_probs(model, batch, chunk: int = 8192) -> np.ndarray:
    parts = [model.log_prob(batch.index(slice(i, i + chunk))).numpy()
             for i in range(0, len(batch), chunk)]
    return np.concatenate(parts)


def heldout_nll(checkpoint: FlowCheckpoint, seqs: Sequence[SimSequence], min_history: int = 1) -> float:
    return evaluate_nll(checkpoint.model, collate(inlier_samples(seqs, checkpoint.clusters, min_history)))


# -- tracking and scoring ------------------------------------------------------

def gt_eval_rows(seq: SimSequence) -> list:
    return [EvalRow(r.frame, r.id, r.bbox, r.dist, float("nan"), r.occlusion)
            for rows in seq.gt for r in rows]


def track_eval_rows(rows) -> list:
    return [EvalRow(r.frame, r.id, r.bbox, r.dist, r.dist_var) for r in rows]


def make_provider(name: str, checkpoint: Optional[FlowCheckpoint] = None) -> CostProvider:
    if name == "iou":
        return IoUCost()
    if name == "euclidean":
        return EuclideanCost()
    if name in ("flow", "flow-gt", "factorized"):
        if checkpoint is None:
            raise ValueError(f"provider {name!r} needs a checkpoint")
        return DensityCost(checkpoint)
    raise ValueError(f"unknown provider {name!r}")


def run_sequence(seq: SimSequence, provider: CostProvider,
                 params: TrackerParams = TrackerParams()) -> IdentityCounts:
    out = track_sequence(seq.frames, provider, params, seq.descriptor)
    return identity_counts(EvalPair(gt_eval_rows(seq), track_eval_rows(out.rows)))


# -- comparison grid -------------------------------------------------------------

DENSITY_PROVIDERS = ("flow", "flow-gt", "factorized")


@dataclass
class GridCell:
    preset: str
    provider: str
    conditioning: str
    counts: list  # IdentityCounts per evaluation seed
    val_nll: Optional[float] = None


def _train_cell(provider: str, cond: str, cfg, cache: dict):
    gt = provider == "flow-gt"
    kind = "factorized" if provider == "factorized" else "flow"
    key = (kind, gt, cond)
    if key not in cache:
        seqs = [simulate(cfg.scenario_config(p, s), gt_distances=gt)
                for p in cfg.suite for s in cfg.train_seeds()]
        fc = cfg.flow.replace(seed=cfg.flow_seed())
        if cond == "uncond":
            fc = fc.replace(use_scene=False)
        if kind == "factorized":
            fc = fc.replace(use_context=False, use_scene=False)
        cache[key] = fit_checkpoint(seqs, fc, kind)[0]
    return cache[key]


def run_grid(cfg) -> list:
    """Run every (preset, provider, conditioning) cell over the evaluation seeds.

    ``cfg`` is an ExperimentConfig. Density models are trained once on the whole
    suite and shared by every preset.
    """
    torch.manual_seed(cfg.flow_seed())
    seeds = cfg.eval_seeds()
    cache: dict = {}
    cells = []
    for name in cfg.suite:
        noisy = [simulate(cfg.scenario_config(name, s), cfg.gt_distances) for s in seeds]
        exact = None
        for provider in cfg.providers:
            conds = cfg.conditioning if provider in ("flow", "flow-gt") else ("-",)
            for cond in conds:
                ckpt = _train_cell(provider, cond, cfg, cache) if provider in DENSITY_PROVIDERS else None
                if provider == "flow-gt":
                    if exact is None:
                        exact = [simulate(cfg.scenario_config(name, s), gt_distances=True)
                                 for s in seeds]
                    seqs = exact
                else:
                    seqs = noisy
                prov = make_provider(provider, ckpt)
                counts = [run_sequence(s, prov, cfg.tracker) for s in seqs]
                val = heldout_nll(ckpt, seqs) if ckpt is not None else None
                cells.append(GridCell(name, provider, cond, counts, val))
    return cells


def _fmt(v: Optional[float]) -> str:
    if v is None:
        return "-"
    return "undefined" if v != v else f"{v:.4f}"


def win_rate(a: Sequence[IdentityCounts], b: Sequence[IdentityCounts], metric: str = "idf1") -> float:
    """Fraction of paired seeds where ``a`` beats ``b`` (higher IDF1, or fewer switches)."""
    if metric == "idf1":
        wins = [x.idf1 > y.idf1 for x, y in zip(a, b)]
    else:
        wins = [x.idsw < y.idsw for x, y in zip(a, b)]
    return float(np.mean(wins)) if wins else float("nan")


TABLE_COLUMNS = ("preset", "provider", "conditioning", "n_seeds", "idf1", "mota", "id_switches",
                 "val_nll", "idf1_win_vs_iou", "idsw_win_vs_iou")


def grid_table(cfg, cells: Sequence[GridCell], baseline: str = "iou") -> str:
    """Deterministic TSV: pooled metrics per cell plus paired win rates against ``baseline``."""
    seeds = cfg.eval_seeds()
    lines = [f"# global_seed={cfg.seed} eval_seeds={','.join(map(str, seeds))} "
             f"train_seeds={','.join(map(str, cfg.train_seeds()))}",
             "\t".join(TABLE_COLUMNS)]
    base = {c.preset: c.counts for c in cells if c.provider == baseline}
    for c in cells:
        pooled = aggregate(c.counts)
        ref = base.get(c.preset)
        if ref is not None and c.provider != baseline:
            wins = (_fmt(win_rate(c.counts, ref, "idf1")), _fmt(win_rate(c.counts, ref, "idsw")))
        else:
            wins = ("-", "-")
        lines.append("\t".join([c.preset, c.provider, c.conditioning, str(len(c.counts)),
                                _fmt(pooled.idf1), _fmt(pooled.mota), str(pooled.idsw),
                                _fmt(c.val_nll), *wins]))
    return "\n".join(lines) + "\n"
