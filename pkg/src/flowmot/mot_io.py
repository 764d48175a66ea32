"""MOTChallenge text files plus a distance sidecar.

Main file rows: ``frame,id,bb_left,bb_top,w,h,conf,-1,-1,-1`` (frames 1-based on disk).
Sidecar rows, aligned line by line: ``frame,id,dist_mean,dist_var[,occlusion]``.
"""
from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

from .core import BBox, Detection, FrameObservations

_DECIMALS = 6


class MotParseError(ValueError):
    def __init__(self, path, lineno: int, msg: str):
        super().__init__(f"{path}:{lineno}: {msg}")
        self.path = path
        self.lineno = lineno


@dataclass(frozen=True)
class MotRow:
    frame: int
    id: int
    bbox: BBox
    conf: float = 1.0
    dist_mean: float = float("nan")
    dist_var: float = float("nan")
    occlusion: Optional[float] = None


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + "_dist" + path.suffix)


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(v: float) -> str:
    s = f"{v:.{_DECIMALS}f}"
    return "0.000000" if s == "-0.000000" else s


def export_mot(rows: Iterable[MotRow], path) -> None:
    main, side = [], []
    for r in rows:
        left, top, w, h = r.bbox.tlwh()
        main.append(",".join([str(r.frame + 1), str(r.id), _fmt(left), _fmt(top), _fmt(w),
                              _fmt(h), _fmt(r.conf), "-1", "-1", "-1"]))
        cols = [str(r.frame + 1), str(r.id), _fmt(r.dist_mean), _fmt(r.dist_var)]
        if r.occlusion is not None:
            cols.append(_fmt(r.occlusion))
        side.append(",".join(cols))
    atomic_write_text(path, "".join(line + "\n" for line in main))
    atomic_write_text(sidecar_path(path), "".join(line + "\n" for line in side))


def _read_rows(path) -> list[tuple[int, list[str]]]:
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if line:
                out.append((lineno, [c.strip() for c in line.split(",")]))
    return out


def import_mot(path) -> list[MotRow]:
    path = Path(path)
    side_path = sidecar_path(path)
    side = _read_rows(side_path) if side_path.exists() else None
    rows = []
    main = _read_rows(path)
    if side is not None and len(side) != len(main):
        raise MotParseError(side_path, len(side), f"sidecar has {len(side)} rows, main file {len(main)}")
    for k, (lineno, cols) in enumerate(main):
        if len(cols) < 7:
            raise MotParseError(path, lineno, f"expected at least 7 columns, got {len(cols)}")
        try:
            frame = int(float(cols[0])) - 1
            tid = int(float(cols[1]))
            left, top, w, h, conf = (float(c) for c in cols[2:7])
        except ValueError as exc:
            raise MotParseError(path, lineno, str(exc)) from None
        if frame < 0:
            raise MotParseError(path, lineno, f"frame must be >= 1, got {frame + 1}")
        if not (w > 0 and h > 0):
            raise MotParseError(path, lineno, f"box extents must be positive (w={w}, h={h})")
        dist_mean = dist_var = float("nan")
        occ = None
        if side is not None:
            slineno, scols = side[k]
            if len(scols) not in (4, 5):
                raise MotParseError(side_path, slineno, f"expected 4 or 5 columns, got {len(scols)}")
            try:
                sframe, sid = int(float(scols[0])) - 1, int(float(scols[1]))
                dist_mean, dist_var = float(scols[2]), float(scols[3])
                occ = float(scols[4]) if len(scols) == 5 else None
            except ValueError as exc:
                raise MotParseError(side_path, slineno, str(exc)) from None
            if (sframe, sid) != (frame, tid):
                raise MotParseError(side_path, slineno, "frame/id disagree with main file")
        rows.append(MotRow(frame, tid, BBox.from_tlwh(left, top, w, h), conf, dist_mean, dist_var, occ))
    return rows


def detections_to_rows(frames: Sequence[FrameObservations]) -> list[MotRow]:
    return [MotRow(d.frame, -1, d.bbox, d.confidence, d.dist_mean, d.dist_var)
            for fo in frames for d in fo.detections]


def rows_to_frames(rows: Sequence[MotRow], n_frames: Optional[int] = None,
                   scene_id: str = "") -> list[FrameObservations]:
    """Group detection rows into one FrameObservations per frame (empty frames included)."""
    last = max((r.frame for r in rows), default=-1)
    n = max(last + 1, n_frames or 0)
    per = [[] for _ in range(n)]
    for r in rows:
        per[r.frame].append(Detection(r.bbox, r.dist_mean, r.dist_var,
                                      min(1.0, max(0.0, r.conf)), r.frame, None))
    return [FrameObservations(t, tuple(d), scene_id) for t, d in enumerate(per)]
