"""Conditioning signals: motion-history windows, scene clusters, and the context encoder."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

WINDOW_LEN = 8
STEP_DIM = 5


@dataclass(frozen=True)
class TrackWindow:
    """Relative displacements between consecutive matched observations.

    Front-padded: the most recent step is last; padded steps are exact zeros
    with ``mask == False``.
    """

    steps: np.ndarray  # (WINDOW_LEN, STEP_DIM)
    mask: np.ndarray  # (WINDOW_LEN,) bool

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def build_window(track, window_len: int = WINDOW_LEN) -> TrackWindow:
    """Window from a track's observation history (``track.history`` or a sequence of
    ``[cx, cy, w, h, d]`` measurements, oldest first)."""
    history = getattr(track, "history", track)
    if len(history) == 0:
        raise ValueError("track has no matched observations")
    obs = np.asarray(list(history)[-(window_len + 1):], dtype=float).reshape(-1, STEP_DIM)
    diffs = np.diff(obs, axis=0)
    steps = np.zeros((window_len, STEP_DIM))
    mask = np.zeros(window_len, dtype=bool)
    n = len(diffs)
    if n:
        steps[window_len - n:] = diffs
        mask[window_len - n:] = True
    return TrackWindow(steps, mask)


# -- scene clustering -----------------------------------------------------------

@dataclass(frozen=True)
class SceneClusterModel:
    centroids: np.ndarray  # (k, dim), in normalized descriptor space
    desc_mean: np.ndarray
    desc_std: np.ndarray
    inertia_trace: tuple = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]

    def normalize(self, descriptors) -> np.ndarray:
        return (np.asarray(descriptors, dtype=float) - self.desc_mean) / self.desc_std

    @property
    def centroids_raw(self) -> np.ndarray:
        return self.centroids * self.desc_std + self.desc_mean


def _inertia(x, centroids, labels) -> float:
    return float(((x - centroids[labels]) ** 2).sum())


def _kmeanspp(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            break
        idx = int(rng.choice(n, p=d2 / total))
        centers.append(x[idx])
        d2 = np.minimum(d2, ((x - x[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def kmeans_fit(descriptors, k: int = 16, seed: int = 0, tol: float = 1e-6,
               max_iter: int = 100) -> SceneClusterModel:
    x_raw = np.asarray(descriptors, dtype=float)
    if x_raw.ndim != 2:
        raise ValueError("descriptors must be a 2-D array")
    n_distinct = len(np.unique(x_raw, axis=0))
    if n_distinct < k:
        raise ValueError(f"need at least {k} distinct descriptors, got {n_distinct}")
    mean = x_raw.mean(axis=0)
    std = x_raw.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    x = (x_raw - mean) / std

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp(x, k, rng)
    labels = _assign(x, centroids)
    trace = [_inertia(x, centroids, labels)]
    for _ in range(max_iter):
        new = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new[j] = members.mean(axis=0)
        shift = float(np.max(np.linalg.norm(new - centroids, axis=1)))
        centroids = new
        labels = _assign(x, centroids)
        trace.append(_inertia(x, centroids, labels))
        if trace[-1] > trace[-2] * (1 + 1e-12) + 1e-12:
            raise RuntimeError("k-means inertia increased; Lloyd step is broken")
        if shift < tol:
            break
    return SceneClusterModel(centroids, mean, std, tuple(trace))


def _assign(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=-1)
    return np.argmin(d2, axis=1)


def assign_cluster(descriptor, model: SceneClusterModel) -> int:
    """Nearest centroid in squared L2; ties go to the lowest index."""
    z = model.normalize(descriptor)
    d2 = ((model.centroids - z) ** 2).sum(axis=1)
    return int(np.argmin(d2))


# -- context encoder ------------------------------------------------------------

class ContextEncoder(nn.Module):
    """GRU over the valid window steps, joined with a scene embedding and projected."""

    def __init__(self, ctx_dim: int = 16, hidden: int = 32, n_clusters: int = 16,
                 emb_dim: int = 8, use_scene: bool = True):
        super().__init__()
        self.hidden = hidden
        self.use_scene = use_scene
        self.n_clusters = n_clusters
        self.cell = nn.GRUCell(STEP_DIM, hidden)
        self.scene_emb = nn.Embedding(n_clusters, emb_dim)
        nn.init.zeros_(self.scene_emb.weight)  # starts equivalent to the scene-free model
        self.no_scene = nn.Parameter(torch.zeros(emb_dim))
        self.proj = nn.Linear(hidden + emb_dim, ctx_dim)
        self.register_buffer("step_mean", torch.zeros(STEP_DIM))
        self.register_buffer("step_std", torch.ones(STEP_DIM))

    @torch.no_grad()
    def data_init(self, windows: torch.Tensor, masks: torch.Tensor) -> None:
        valid = windows[masks.bool()]
        if len(valid) > 1:
            std = valid.std(dim=0, unbiased=False)
            self.step_mean.copy_(valid.mean(dim=0))
            self.step_std.copy_(torch.where(std > 1e-8, std, torch.ones_like(std)))

    def forward(self, windows: torch.Tensor, masks: torch.Tensor,
                clusters: Optional[torch.Tensor] = None) -> torch.Tensor:
        B, T, _ = windows.shape
        m = masks.to(windows.dtype)
        x = (windows - self.step_mean) / self.step_std
        h = windows.new_zeros(B, self.hidden)
        for t in range(T):
            mt = m[:, t:t + 1]
            # masked inputs are zeroed before the cell so they carry no gradient
            h_new = self.cell(x[:, t] * mt, h)
            h = mt * h_new + (1.0 - mt) * h
        if self.use_scene and clusters is not None:
            emb = self.scene_emb(clusters.long())
        else:
            emb = self.no_scene.expand(B, -1)
        return torch.tanh(self.proj(torch.cat([h, emb], dim=1)))


def encode_context(window: TrackWindow, cluster: Optional[int], encoder: ContextEncoder) -> np.ndarray:
    dtype = next(encoder.parameters()).dtype
    w = torch.as_tensor(window.steps, dtype=dtype)[None]
    m = torch.as_tensor(window.mask)[None]
    c = None if cluster is None else torch.tensor([cluster])
    with torch.no_grad():
        return encoder(w, m, c)[0].numpy()
