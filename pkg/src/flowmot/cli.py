"""Command-line entry point: simulate | train-flow | track | evaluate | compare | ablate.

Every failure prints one line ``flowmot: error[<code>]: <message>`` to stderr and
exits with the code's status; success exits 0.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import io
import json
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from .assoc import COST_LOG_HEADER
from .config import ConfigError, ExperimentConfig, derive_seed, format_config, load_config
from .experiment import (GridCell, SimSequence, fit_checkpoint, grid_table, make_provider,
                         run_grid, simulate)
from .flow import FlowCheckpoint, FlowNumericalError
from .metrics import EvalPair, EvalRow, aggregate, counts_from_dict, evaluate
from .mot_io import (MotParseError, MotRow, atomic_write_text, detections_to_rows, export_mot,
                     import_mot, rows_to_frames)
from .sim import GroundTruthRow
from .tracker import track_sequence

EXIT_CODES = {"usage": 2, "config": 3, "io": 4, "missing": 5, "parse": 6, "invalid": 7,
              "numeric": 8, "checkpoint": 9}


class CliError(Exception):
    def __init__(self, code: str, msg: str):
        super().__init__(msg)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", message)


# -- sequence directories ------------------------------------------------------------

def seq_dirs(root: Path) -> list:
    root = Path(root)
    if not root.is_dir():
        raise CliError("missing", f"data directory {root} does not exist")
    dirs = sorted(p for p in root.iterdir() if (p / "seqinfo.ini").is_file())
    if not dirs:
        raise CliError("missing", f"no sequence directories (with seqinfo.ini) under {root}")
    return dirs


def _ini_text(section: str, values: dict) -> str:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp[section] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def read_seqinfo(d: Path) -> dict:
    cp = configparser.ConfigParser()
    cp.optionxform = str
    cp.read(d / "seqinfo.ini")
    return dict(cp["Sequence"])


def write_sequence(seq: SimSequence, out: Path, global_seed: int, preset_name: str,
                   gt_distances: bool) -> None:
    cfg = seq.config
    d = out / cfg.name
    export_mot(detections_to_rows(seq.frames), d / "det" / "det.txt")
    gt_rows = [MotRow(r.frame, r.id + 1, r.bbox, 1.0, r.dist, 0.0, r.occlusion)
               for rows in seq.gt for r in rows]
    export_mot(gt_rows, d / "gt" / "gt.txt")
    atomic_write_text(d / "descriptor.txt", ",".join(repr(float(v)) for v in seq.descriptor) + "\n")
    atomic_write_text(d / "scenario.cfg", "".join(
        f"{f.name} = {getattr(cfg, f.name)}\n" for f in dataclasses.fields(cfg)))
    atomic_write_text(d / "seqinfo.ini", _ini_text("Sequence", {
        "name": cfg.name, "preset": preset_name, "seed": cfg.seed, "global_seed": global_seed,
        "gt_distances": str(gt_distances).lower(), "seqLength": cfg.n_frames,
        "frameRate": cfg.fps, "imWidth": cfg.image_w, "imHeight": cfg.image_h}))


def load_sequence(d: Path) -> SimSequence:
    info = read_seqinfo(d)
    n_frames = int(info["seqLength"])
    det = import_mot(d / "det" / "det.txt")
    frames = rows_to_frames(det, n_frames, info["name"])
    gt = [[] for _ in range(n_frames)]
    gt_path = d / "gt" / "gt.txt"
    if gt_path.exists():
        for r in import_mot(gt_path):
            gt[r.frame].append(GroundTruthRow(r.frame, r.id, r.bbox, r.dist_mean, r.occlusion or 0.0))
    desc = np.array([float(v) for v in (d / "descriptor.txt").read_text().strip().split(",")])
    return SimSequence(None, frames, gt, gt, desc)


# -- commands ------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    return cfg


def cmd_simulate(args) -> None:
    cfg = _config(args)
    gt_distances = cfg.gt_distances or args.gt_distances
    seeds = cfg.train_seeds() if args.split == "train" else cfg.eval_seeds()
    out = Path(args.out)
    for name in cfg.suite:
        for s in seeds:
            sc = cfg.scenario_config(name, s)
            write_sequence(simulate(sc, gt_distances), out, cfg.seed, name, gt_distances)
    atomic_write_text(out / "experiment.cfg", format_config(cfg))


def cmd_train_flow(args) -> None:
    cfg = _config(args)
    seqs = [load_sequence(d) for d in seq_dirs(args.data)]
    fc = cfg.flow.replace(seed=derive_seed(cfg.seed, "flow"))
    if args.no_scene_conditioning:
        fc = fc.replace(use_scene=False)
    if args.kind == "factorized":
        fc = fc.replace(use_context=False, use_scene=False)
    ckpt, result = fit_checkpoint(seqs, fc, args.kind)
    ckpt.meta.update(global_seed=cfg.seed, n_sequences=len(seqs))
    out = Path(args.out)
    ckpt.save(out)
    lines = [f"# global_seed={cfg.seed} flow_seed={fc.seed} kind={args.kind} "
             f"scene_conditioning={str(fc.use_scene).lower()} init_val_nll={result.init_val_nll:.6f}",
             "epoch\ttrain_nll\tval_nll"]
    lines += [f"{e}\t{tr:.6f}\t{va:.6f}" for e, tr, va in result.trace]
    atomic_write_text(trace_path(out), "\n".join(lines) + "\n")


def trace_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.stem + "_trace.tsv")


def cmd_track(args) -> None:
    cfg = _config(args)
    params = cfg.tracker
    if args.negate_before_softmax:
        params = dataclasses.replace(params, negate_before_softmax=True)
    if args.two_stage:
        params = dataclasses.replace(params, two_stage=True)
    ckpt = None
    if args.provider in ("flow", "flow-gt", "factorized"):
        if not args.checkpoint:
            raise CliError("checkpoint", f"provider {args.provider!r} requires --checkpoint")
        ckpt = _load_checkpoint(args.checkpoint)
    provider = make_provider(args.provider, ckpt)
    out = Path(args.out)
    for d in seq_dirs(args.data):
        seq = load_sequence(d)
        result = track_sequence(seq.frames, provider, params, seq.descriptor,
                                keep_cost_log=args.cost_log)
        rows = [MotRow(r.frame, r.id, r.bbox, 1.0, r.dist, r.dist_var) for r in result.rows]
        export_mot(rows, out / f"{d.name}.txt")
        if args.cost_log:
            atomic_write_text(out / f"{d.name}_costs.csv",
                              "\n".join([COST_LOG_HEADER, *result.cost_log]) + "\n")
    atomic_write_text(out / "run.ini", _ini_text("Run", {
        "global_seed": cfg.seed, "provider": args.provider,
        "checkpoint": args.checkpoint or "", "negate_before_softmax": params.negate_before_softmax,
        "two_stage": params.two_stage}))


def _load_checkpoint(path) -> FlowCheckpoint:
    if not Path(path).is_file():
        raise CliError("checkpoint", f"checkpoint {path} not found")
    try:
        return FlowCheckpoint.load(path)
    except (RuntimeError, KeyError, ValueError) as exc:
        raise CliError("checkpoint", f"cannot load checkpoint {path}: {exc}") from None


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    gt_dirs = seq_dirs(args.gt)
    pred_root = Path(args.pred)
    names = {d.name for d in gt_dirs}
    preds = {p.stem for p in pred_root.glob("*.txt")
             if not p.stem.endswith("_dist") and not p.stem.endswith("_costs")}
    missing = sorted(names - preds)
    if missing:
        raise CliError("missing", f"no predictions for sequence {missing[0]} in {pred_root}")
    extra = sorted(preds - names)
    if extra:
        raise CliError("missing", f"prediction {extra[0]} has no ground-truth sequence")
    out = Path(args.out)
    all_counts, all_gt, all_pred = [], [], []
    for d in gt_dirs:
        info = read_seqinfo(d)
        gt = [EvalRow(r.frame, r.id, r.bbox, r.dist_mean, float("nan"), r.occlusion or 0.0)
              for r in import_mot(d / "gt" / "gt.txt")]
        pred = [EvalRow(r.frame, r.id, r.bbox, r.dist_mean, r.dist_var)
                for r in import_mot(pred_root / f"{d.name}.txt")]
        report = evaluate(EvalPair(gt, pred), cfg.bins)
        atomic_write_text(out / f"{d.name}.json",
                          report.to_json({"sequence": d.name, "seed": int(info["seed"]),
                                          "global_seed": int(info["global_seed"])}))
        all_counts.append(counts_from_dict(report.counts))
        # offset ids per sequence so pooled distance metrics stay one table
        all_gt += [dataclasses.replace(r, frame=(len(all_counts), r.frame)) for r in gt]
        all_pred += [dataclasses.replace(r, frame=(len(all_counts), r.frame)) for r in pred]
    pooled = aggregate(all_counts)
    total = evaluate(EvalPair(all_gt, all_pred), cfg.bins)
    body = {"sequences": len(gt_dirs), "idf1": pooled.idf1, "mota": pooled.mota,
            "id_switches": pooled.idsw, "counts": dataclasses.asdict(pooled),
            "distance": total.distance, "aloe": total.aloe, "mean_gnll": total.mean_gnll}
    for k in ("idf1", "mota"):
        if body[k] != body[k]:
            body[k] = "undefined"
    atomic_write_text(out / "aggregate.json", json.dumps(body, indent=2, sort_keys=True) + "\n")


def _grid(args, conditioning: tuple) -> None:
    cfg = _config(args)
    cfg = dataclasses.replace(cfg, conditioning=conditioning)
    cells: list[GridCell] = run_grid(cfg)
    table = grid_table(cfg, cells)
    if args.out:
        atomic_write_text(args.out, table)
    else:
        sys.stdout.write(table)


def cmd_compare(args) -> None:
    _grid(args, ("cond",))


def cmd_ablate(args) -> None:
    _grid(args, ("cond", "uncond"))


# -- wiring ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="flowmot", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="experiment config file (key = value)")
        sp.add_argument("--seed", type=int, help="global seed (overrides the config)")

    sp = sub.add_parser("simulate", help="write synthetic sequences")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--split", choices=("eval", "train"), default="eval")
    sp.add_argument("--gt-distances", action="store_true", help="bypass the distance sensor")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("train-flow", help="fit the association density on inliers")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True, help="checkpoint path")
    sp.add_argument("--kind", choices=("flow", "factorized"), default="flow")
    sp.add_argument("--no-scene-conditioning", action="store_true")
    sp.set_defaults(func=cmd_train_flow)

    sp = sub.add_parser("track", help="run the tracker on sequence directories")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--provider", choices=("iou", "euclidean", "factorized", "flow", "flow-gt"),
                    default="iou")
    sp.add_argument("--checkpoint")
    sp.add_argument("--negate-before-softmax", action="store_true")
    sp.add_argument("--two-stage", action="store_true")
    sp.add_argument("--cost-log", action="store_true", help="write per-frame cost matrices")
    sp.set_defaults(func=cmd_track)

    sp = sub.add_parser("evaluate", help="score tracker output against ground truth")
    common(sp)
    sp.add_argument("--gt", required=True, help="directory of sequences")
    sp.add_argument("--pred", required=True, help="directory of tracker outputs")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    for name, func in (("compare", cmd_compare), ("ablate", cmd_ablate)):
        sp = sub.add_parser(name, help=f"{name} providers over seeds")
        common(sp)
        sp.add_argument("--out", help="table path (default: stdout)")
        sp.set_defaults(func=func)
    return p


def _classify(exc: BaseException) -> str:
    if isinstance(exc, ConfigError):
        return "config"
    if isinstance(exc, MotParseError):
        return "parse"
    if isinstance(exc, FlowNumericalError):
        return "numeric"
    if isinstance(exc, FileNotFoundError):
        return "missing"
    if isinstance(exc, OSError):
        return "io"
    return "invalid"


def main(argv: Optional[list] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
        return 0
    except CliError as exc:
        code, msg = exc.code, str(exc)
    except (ConfigError, MotParseError, FlowNumericalError, OSError, ValueError, KeyError) as exc:
        code, msg = _classify(exc), str(exc)
    msg = " ".join(msg.split())
    print(f"flowmot: error[{code}]: {msg}", file=sys.stderr)
    return EXIT_CODES[code]


if __name__ == "__main__":
    sys.exit(main())
