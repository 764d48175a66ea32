import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from flowmot.assoc import (CostMatrix, DensityCost, EuclideanCost, Gate, IoUCost, build_cost_matrix,
                           compute_deltas, hungarian, normalize_cost)
from flowmot.context import build_window
from flowmot.core import BBox, Detection
from flowmot.flow import Batch, FlowCheckpoint, FlowConfig, build_model

from oracles import brute_force_assignment


class _Track:
    def __init__(self, pred, history=None, id=1):
        self.prediction = np.asarray(pred, dtype=float)
        self.history = history or [list(pred)]
        self.id = id


def _det(cx, cy, w=20.0, h=40.0, d=5.0, frame=0):
    return Detection(BBox(cx, cy, w, h), d, 0.25, 0.9, frame)


def _cm(values, gated=None):
    values = np.asarray(values, dtype=float)
    if gated is None:
        gated = np.zeros(values.shape, dtype=bool)
    return CostMatrix(values, np.asarray(gated), list(range(values.shape[0])),
                      list(range(values.shape[1])))


def test_deltas_are_prediction_minus_detection():
    d = compute_deltas(None, [10, 20, 30, 40, 6], _det(7, 25, 20, 45, 4.5))
    np.testing.assert_array_equal(d.as_array(), [3, -5, 10, -5, 1.5])


def test_normalize_single_cell_is_one():
    out = normalize_cost(_cm([[3.7]]))
    assert out.values[0, 0] == pytest.approx(1.0, abs=1e-12)


def test_normalize_uniform_matrix():
    out = normalize_cost(_cm(np.full((3, 3), 2.0)))
    np.testing.assert_allclose(out.values, 1 / 3, atol=1e-12)


def test_normalize_two_by_two_hand_case():
    out = normalize_cost(_cm([[0.0, math.log(3)], [math.log(3), 0.0]]))
    # rows and columns both give softmax([0, log 3]) = [1/4, 3/4]
    np.testing.assert_allclose(out.values, [[0.25, 0.75], [0.75, 0.25]], atol=1e-12)
    neg = normalize_cost(_cm([[0.0, math.log(3)], [math.log(3), 0.0]]), negate=True)
    np.testing.assert_allclose(neg.values, [[0.75, 0.25], [0.25, 0.75]], atol=1e-12)


def test_normalize_min_of_row_and_column():
    v = np.array([[0.0, 1.0, 2.0], [0.5, 0.0, 3.0]])
    out = normalize_cost(_cm(v)).values
    row = np.exp(v) / np.exp(v).sum(1, keepdims=True)
    col = np.exp(v) / np.exp(v).sum(0, keepdims=True)
    np.testing.assert_allclose(out, np.minimum(row, col), atol=1e-12)


def test_normalize_gated_cells_excluded():
    v = np.array([[0.0, 100.0], [1.0, 2.0]])
    out = normalize_cost(_cm(v, [[False, True], [False, False]])).values
    assert np.isnan(out[0, 1])
    assert out[0, 0] == pytest.approx(min(1.0, 1 / (1 + math.e)), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.floats(-50, 50), st.integers(0, 10_000))
def test_normalize_shift_invariant(n_r, n_c, shift, seed):
    v = np.random.default_rng(seed).normal(size=(n_r, n_c))
    a = normalize_cost(_cm(v)).values
    b = normalize_cost(_cm(v + shift)).values
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_normalize_rejects_bad_sigma():
    with pytest.raises(ValueError):
        normalize_cost(_cm([[1.0]]), sigma=0.0)


def test_hungarian_small_hand_case():
    a = hungarian(np.array([[1.0, 2.0], [3.0, 1.0]]))
    assert a.pairs == [(0, 0), (1, 1)]
    assert a.total(np.array([[1.0, 2.0], [3.0, 1.0]])) == 2.0


def test_hungarian_all_gated():
    a = hungarian(np.zeros((2, 3)), np.ones((2, 3), dtype=bool))
    assert a.pairs == [] and a.unmatched_rows == [0, 1] and a.unmatched_cols == [0, 1, 2]


def test_hungarian_prefers_more_pairs():
    v = np.array([[0.0, 10.0], [np.nan, 0.5]])
    gated = np.isnan(v)
    v2 = np.array([[0.0, 0.0], [0.0, 100.0]])
    assert len(hungarian(v2).pairs) == 2
    assert hungarian(v, gated).pairs == [(0, 0), (1, 1)]


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for trial in range(1000):
        n_r, n_c = rng.integers(1, 8, size=2)
        if n_r * n_c > 36:
            n_c = max(1, 36 // n_r)
        v = rng.normal(size=(n_r, n_c))
        gated = rng.random((n_r, n_c)) < 0.3
        a = hungarian(v, gated)
        n, total = brute_force_assignment(v, ~gated)
        assert len(a.pairs) == n
        assert a.total(v) == pytest.approx(total, abs=1e-9)
        assert all(not gated[r, c] for r, c in a.pairs)


def test_iou_provider_and_gate():
    tracks = [_Track([100, 100, 20, 40, 5]), _Track([400, 100, 20, 40, 5])]
    dets = [_det(100, 100), _det(105, 100)]
    cm = build_cost_matrix(tracks, dets, IoUCost(), Gate(center_px=50))
    assert cm.values[0, 0] == pytest.approx(0.0, abs=1e-12)
    assert cm.gated[:, 1].all()
    assert cm.values[1, 0] == pytest.approx(1 - 15 / 25, abs=1e-12)


def test_distance_gate():
    tracks = [_Track([100, 100, 20, 40, 5])]
    cm = build_cost_matrix(tracks, [_det(100, 100, d=20.0)], EuclideanCost(), Gate(dist_m=10))
    assert cm.gated.all()


def _density_ckpt():
    cfg = FlowConfig(n_blocks=2, hidden=8, n_clusters=2, seed=0)
    model = build_model(cfg)
    with torch.no_grad():
        g = torch.Generator().manual_seed(1)
        for p in model.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return FlowCheckpoint("flow", cfg, model, None, 1e9, {})


def test_density_single_cell_is_negative_log_prob():
    ck = _density_ckpt()
    hist = [[90, 100, 20, 40, 5], [95, 100, 20, 40, 5], [100, 100, 20, 40, 5]]
    track = _Track([104, 101, 21, 39, 5.2], hist)
    det = _det(102, 100, 20, 40, 5.0)
    cm = build_cost_matrix([track], [det], DensityCost(ck), Gate())
    w = build_window(hist)
    batch = Batch.from_arrays((track.prediction - det.measurement())[None], w.steps[None],
                              w.mask[None], np.zeros(1, dtype=int))
    with torch.no_grad():
        want = -ck.model.log_prob(batch).item()
    assert cm.values[0, 0] == pytest.approx(want, abs=1e-9)


def test_provider_is_pure():
    ck = _density_ckpt()
    prov = DensityCost(ck)
    tracks = [_Track([100, 100, 20, 40, 5], [[95, 100, 20, 40, 5], [100, 100, 20, 40, 5]])]
    dets = [_det(101, 99), _det(110, 100)]
    a = build_cost_matrix(tracks, dets, prov).values
    b = build_cost_matrix(tracks, dets, prov).values
    np.testing.assert_array_equal(a, b)
    assert len(tracks[0].history) == 2
