import json
import math

import numpy as np
import pytest

from flowmot.core import BBox, iou
from flowmot.metrics import (EvalPair, EvalRow, IdentityCounts, aggregate, aloe, distance_metrics,
                             evaluate, gnll, idf1, identity_counts)

from oracles import brute_force_idtp


def _box(slot):
    return BBox(100.0 + 200.0 * slot, 300.0, 50.0, 120.0)


def _rows(table):
    """``table`` maps frame -> list of (id, slot)."""
    return [EvalRow(f, i, _box(s), 10.0 + s) for f, items in table.items() for i, s in items]


def test_perfect_tracking():
    gt = _rows({f: [(1, 0), (2, 1)] for f in range(5)})
    pred = _rows({f: [(7, 0), (9, 1)] for f in range(5)})
    assert idf1(EvalPair(gt, pred)) == (1.0, 0, 1.0)


def test_split_identity():
    # one gt id covered by pred 1 for 3 frames and pred 2 for 2 frames
    gt = _rows({f: [(1, 0)] for f in range(5)})
    pred = _rows({f: [(1 if f < 3 else 2, 0)] for f in range(5)})
    score, sw, _ = idf1(EvalPair(gt, pred))
    assert score == pytest.approx(0.6, abs=1e-12)
    assert sw == 1


def test_empty_prediction():
    gt = _rows({0: [(1, 0)], 1: [(1, 0)]})
    c = identity_counts(EvalPair(gt, []))
    assert c.idf1 == 0.0 and c.fn == 2 and c.mota == 0.0


def test_empty_ground_truth_is_undefined():
    pred = _rows({0: [(1, 0)]})
    score, _, mota = idf1(EvalPair([], pred))
    assert math.isnan(score) and math.isnan(mota)
    report = json.loads(evaluate(EvalPair([], pred)).to_json())
    assert report["idf1"] == "undefined"


def test_duplicate_rows_rejected():
    rows = _rows({0: [(1, 0), (1, 1)]})
    with pytest.raises(ValueError):
        EvalPair(rows, [])


def test_idf1_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n_frames = int(rng.integers(1, 11))
        gt, pred = {}, {}
        for f in range(n_frames):
            slots = rng.permutation(4)
            gt[f] = [(g, int(slots[g])) for g in range(int(rng.integers(0, 4)))]
            pred[f] = [(p, int(rng.choice(4))) for p in rng.permutation(4)[:int(rng.integers(0, 4))]]
            # a pred id occupies at most one slot per frame
            seen, keep = set(), []
            for p, s in pred[f]:
                if s not in seen:
                    keep.append((p, s))
                    seen.add(s)
            pred[f] = keep
        pair = EvalPair(_rows(gt), _rows(pred))
        c = identity_counts(pair)
        gt_f = {f: [(i, _box(s)) for i, s in items] for f, items in gt.items()}
        pr_f = {f: [(i, _box(s)) for i, s in items] for f, items in pred.items()}
        want = brute_force_idtp(gt_f, pr_f, iou)
        assert c.idtp == want
        if c.n_gt:
            assert c.idf1 == pytest.approx(2 * want / (c.n_gt + c.n_pred), abs=1e-12)


def test_label_permutation_invariance():
    gt = _rows({f: [(1, 0), (2, 1), (3, 2)] for f in range(6)})
    pred = _rows({f: [(1, 0 if f < 3 else 1), (2, 1 if f < 3 else 0), (3, 2)] for f in range(6)})
    relabeled = [EvalRow(r.frame, {1: 30, 2: 10, 3: 20}[r.id], r.bbox, r.dist) for r in pred]
    assert identity_counts(EvalPair(gt, pred)) == identity_counts(EvalPair(gt, relabeled))


def test_pooled_counts_add():
    a = IdentityCounts(10, 8, 6, 3, 1, 1, 7)
    b = IdentityCounts(5, 5, 5, 0, 0, 0, 5)
    total = aggregate([a, b])
    assert total == IdentityCounts(15, 13, 11, 3, 1, 1, 12)
    assert total.idf1 == pytest.approx(22 / 28)


def test_distance_hand_case():
    m = distance_metrics([10.0], [12.0])
    assert m["abs_rel"] == pytest.approx(0.2, abs=1e-12)
    assert m["sq_rel"] == pytest.approx(0.4, abs=1e-12)
    assert m["rmse"] == pytest.approx(2.0, abs=1e-12)
    assert m["rmse_log"] == pytest.approx(math.log(1.2), abs=1e-12)
    assert m["alp@1"] == 0.0
    assert m["alp@2"] == 0.0  # strict inequality
    assert m["delta_1.25"] == 1.0


def test_distance_metrics_scale_invariance():
    rng = np.random.default_rng(1)
    d = rng.uniform(2, 40, 50)
    p = d * rng.uniform(0.7, 1.3, 50)
    a, b = distance_metrics(d, p), distance_metrics(3 * d, 3 * p)
    for key in ("abs_rel", "rmse_log", "delta_1.25"):
        assert a[key] == pytest.approx(b[key], rel=1e-12)


def test_distance_rejects_nonpositive():
    with pytest.raises(ValueError):
        distance_metrics([0.0], [1.0])


def test_aloe_bands():
    out = aloe([10.0, 20.0], [11.0, 17.0], [0.1, 0.2])
    assert out == {"0-0.25": pytest.approx(2.0)}
    assert "0.75-1" not in out


def test_gnll_hand_cases():
    assert gnll(2.0, 1.0, 0.0) == pytest.approx(2.0, abs=1e-12)
    vs = np.linspace(0.2, 5, 4801)
    vals = gnll(np.full_like(vs, 1.0), vs, np.zeros_like(vs))
    assert vs[np.argmin(vals)] == pytest.approx(1.0, abs=1e-3)
    assert vals.min() == pytest.approx(0.5, abs=1e-6)
    with pytest.raises(ValueError):
        gnll(1.0, 0.0, 1.0)


def test_evaluate_reports_distance_and_gnll():
    gt = [EvalRow(0, 1, _box(0), 10.0, occlusion=0.3)]
    pred = [EvalRow(0, 5, _box(0), 11.0, 1.0)]
    r = evaluate(EvalPair(gt, pred))
    assert r.n_distance_pairs == 1
    assert r.aloe == {"0.25-0.5": pytest.approx(1.0)}
    assert r.mean_gnll == pytest.approx(0.5)
