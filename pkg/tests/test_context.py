import numpy as np
import pytest
import torch

from flowmot.context import (WINDOW_LEN, ContextEncoder, assign_cluster, build_window,
                             encode_context, kmeans_fit)


def test_window_front_padded_with_zeros():
    hist = [[0, 0, 10, 20, 5], [1, 2, 10, 20, 5], [3, 2, 11, 20, 4]]
    w = build_window(hist)
    assert w.n_valid == 2
    assert not w.mask[:-2].any()
    np.testing.assert_array_equal(w.steps[:-2], 0.0)
    np.testing.assert_array_equal(w.steps[-2], [1, 2, 0, 0, 0])
    np.testing.assert_array_equal(w.steps[-1], [2, 0, 1, 0, -1])


def test_window_keeps_most_recent_steps():
    hist = [[k, 0, 1, 1, 1] for k in range(20)]
    hist[-1][0] = 100
    w = build_window(hist)
    assert w.n_valid == WINDOW_LEN
    assert w.steps[-1, 0] == 100 - 18


def test_single_observation_window_is_empty():
    assert build_window([[1, 2, 3, 4, 5]]).n_valid == 0


def test_empty_history_raises():
    with pytest.raises(ValueError):
        build_window([])


def test_kmeans_two_separated_clouds():
    rng = np.random.default_rng(0)
    a = rng.normal(0, 0.1, size=(30, 3))
    b = rng.normal(10, 0.1, size=(40, 3))
    model = kmeans_fit(np.vstack([a, b]), k=2, seed=0)
    cents = sorted(model.centroids_raw.tolist())
    np.testing.assert_allclose(cents[0], a.mean(0), atol=1e-9)
    np.testing.assert_allclose(cents[1], b.mean(0), atol=1e-9)


def test_kmeans_k_equals_n_puts_centroids_on_points():
    x = np.random.default_rng(1).normal(size=(6, 2))
    model = kmeans_fit(x, k=6, seed=3)
    assert model.inertia_trace[-1] == pytest.approx(0.0, abs=1e-18)
    got = sorted(map(tuple, np.round(model.centroids_raw, 9)))
    assert got == sorted(map(tuple, np.round(x, 9)))


def test_kmeans_inertia_monotone():
    x = np.random.default_rng(2).normal(size=(200, 4))
    tr = kmeans_fit(x, k=5, seed=0).inertia_trace
    assert all(b <= a * (1 + 1e-12) for a, b in zip(tr, tr[1:]))


def test_kmeans_needs_enough_distinct_points():
    with pytest.raises(ValueError):
        kmeans_fit(np.ones((10, 2)), k=2)


def test_assign_cluster_matches_exhaustive_scan():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(100, 3))
    model = kmeans_fit(x, k=4, seed=1)
    for q in rng.normal(size=(200, 3)):
        z = model.normalize(q)
        d2 = [float(((z - c) ** 2).sum()) for c in model.centroids]
        assert assign_cluster(q, model) == d2.index(min(d2))


def test_assign_cluster_tie_goes_to_lowest_index():
    x = np.array([[-1.0, 0.0], [1.0, 0.0], [-1.1, 0.0], [1.1, 0.0]])
    model = kmeans_fit(x, k=2, seed=0)
    assert assign_cluster(model.desc_mean, model) == 0


def _enc(**kw):
    torch.manual_seed(0)
    enc = ContextEncoder(**kw).double()
    with torch.no_grad():
        enc.scene_emb.weight.normal_()
    return enc


def test_encoder_deterministic_and_bounded():
    enc = _enc()
    w = build_window([[k, 2 * k, 10, 20, 5 - 0.1 * k] for k in range(6)])
    a = encode_context(w, 3, enc)
    b = encode_context(w, 3, enc)
    np.testing.assert_array_equal(a, b)
    assert a.shape == (16,) and np.all(np.abs(a) < 1)


def test_scene_ignored_when_disabled():
    enc = _enc(use_scene=False)
    w = build_window([[k, 0, 10, 20, 5] for k in range(4)])
    np.testing.assert_array_equal(encode_context(w, 0, enc), encode_context(w, 7, enc))
    enc_on = _enc(use_scene=True)
    assert not np.allclose(encode_context(w, 0, enc_on), encode_context(w, 7, enc_on))


def test_masked_steps_do_not_change_context():
    enc = _enc()
    w = build_window([[k, 0, 10, 20, 5] for k in range(4)])
    steps = torch.tensor(w.steps)[None]
    mask = torch.tensor(w.mask)[None]
    noisy = steps.clone()
    noisy[0, ~mask[0]] = 123.0
    c = torch.tensor([1])
    torch.testing.assert_close(enc(steps, mask, c), enc(noisy, mask, c), rtol=0, atol=0)


def test_no_gradient_reaches_masked_inputs():
    enc = _enc()
    w = build_window([[k, 0, 10, 20, 5] for k in range(4)])
    steps = torch.tensor(w.steps)[None].requires_grad_(True)
    mask = torch.tensor(w.mask)[None]
    enc(steps, mask, torch.tensor([0])).sum().backward()
    assert torch.all(steps.grad[0, ~mask[0]] == 0)
    assert steps.grad[0, mask[0]].abs().sum() > 0
