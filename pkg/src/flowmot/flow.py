"""Conditional normalizing flow over association deltas.

Each block, in the sampling direction, is a reversal permutation, an actnorm
``u = exp(log_s) * z + b`` and a masked autoregressive transform
``y_i = u_i * exp(alpha_i(y_<i, ctx)) + mu_i(y_<i, ctx)``. Densities are
evaluated in the opposite direction, which needs a single parallel network
call per block.
"""
from __future__ import annotations

import copy
import io
import dataclasses
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .mot_io import atomic_write_bytes
from .context import STEP_DIM, WINDOW_LEN, ContextEncoder, SceneClusterModel, TrackWindow

DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
CHECKPOINT_FORMAT = "flowmot-checkpoint/1"


class FlowNumericalError(FloatingPointError):
    def __init__(self, msg: str, block: Optional[int] = None, group: Optional[str] = None):
        super().__init__(msg)
        self.block = block
        self.group = group


@dataclass(frozen=True)
class FlowConfig:
    input_dim: int = 5
    n_blocks: int = 16
    hidden: int = 64
    ctx_dim: int = 16
    gru_hidden: int = 32
    n_clusters: int = 16
    scene_emb_dim: int = 8
    use_context: bool = True
    use_scene: bool = True
    alpha_clamp: float = 7.0
    lr: float = 1e-3
    batch_size: int = 512
    epochs: int = 30
    val_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        for name in ("input_dim", "hidden", "batch_size", "gru_hidden", "n_clusters", "scene_emb_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.use_context and self.ctx_dim < 1:
            raise ValueError("ctx_dim must be >= 1 when use_context is set")

    @property
    def effective_ctx_dim(self) -> int:
        return self.ctx_dim if self.use_context else 0

    def replace(self, **changes) -> "FlowConfig":
        return dataclasses.replace(self, **changes)


# -- batches ------------------------------------------------------------------

@dataclass
class Batch:
    deltas: torch.Tensor  # (B, D)
    windows: torch.Tensor  # (B, WINDOW_LEN, STEP_DIM)
    masks: torch.Tensor  # (B, WINDOW_LEN) bool
    clusters: torch.Tensor  # (B,) long

    def __len__(self) -> int:
        return self.deltas.shape[0]

    def index(self, idx) -> "Batch":
        return Batch(self.deltas[idx], self.windows[idx], self.masks[idx], self.clusters[idx])

    def with_deltas(self, deltas: torch.Tensor) -> "Batch":
        return Batch(deltas, self.windows, self.masks, self.clusters)

    @classmethod
    def from_arrays(cls, deltas, windows=None, masks=None, clusters=None) -> "Batch":
        d = torch.as_tensor(np.asarray(deltas, dtype=float), dtype=DTYPE)
        if d.ndim == 1:
            d = d[None]
        n = d.shape[0]
        w = (torch.zeros(n, WINDOW_LEN, STEP_DIM, dtype=DTYPE) if windows is None
             else torch.as_tensor(np.asarray(windows, dtype=float), dtype=DTYPE))
        m = (torch.zeros(n, WINDOW_LEN, dtype=torch.bool) if masks is None
             else torch.as_tensor(np.asarray(masks, dtype=bool)))
        c = (torch.zeros(n, dtype=torch.long) if clusters is None
             else torch.as_tensor(np.asarray(clusters), dtype=torch.long))
        return cls(d, w, m, c)


@dataclass(frozen=True)
class AssociationSample:
    deltas: np.ndarray  # (5,)
    window: TrackWindow
    cluster: int = 0


def collate(samples: Sequence[AssociationSample]) -> Batch:
    if not samples:
        raise ValueError("empty dataset")
    return Batch.from_arrays(
        np.stack([np.asarray(s.deltas, dtype=float) for s in samples]),
        np.stack([s.window.steps for s in samples]),
        np.stack([s.window.mask for s in samples]),
        np.array([s.cluster for s in samples]),
    )


# -- building blocks ----------------------------------------------------------

class MaskedLinear(nn.Linear):
    def __init__(self, in_features: int, out_features: int, mask: torch.Tensor):
        super().__init__(in_features, out_features)
        self.register_buffer("mask", mask.to(self.weight.dtype))

    def forward(self, x):
        return nn.functional.linear(x, self.weight * self.mask, self.bias)


class MADE(nn.Module):
    """Two-hidden-layer masked network emitting (mu, alpha) per input dimension.

    Hidden units of degree 0 see only the context, so a one-dimensional input can
    still be modulated by it.
    """

    def __init__(self, dim: int, hidden: int, ctx_dim: int = 0, alpha_clamp: float = 7.0):
        super().__init__()
        self.dim = dim
        self.alpha_clamp = alpha_clamp
        in_deg = torch.arange(1, dim + 1)
        h_deg = torch.arange(hidden) % dim
        out_deg = torch.cat([in_deg, in_deg])
        self.l1 = MaskedLinear(dim, hidden, (h_deg[:, None] >= in_deg[None, :]))
        self.l2 = MaskedLinear(hidden, hidden, (h_deg[:, None] >= h_deg[None, :]))
        self.l3 = MaskedLinear(hidden, 2 * dim, (out_deg[:, None] > h_deg[None, :]))
        self.ctx = nn.Linear(ctx_dim, hidden, bias=False) if ctx_dim > 0 else None
        nn.init.zeros_(self.l3.weight)
        nn.init.zeros_(self.l3.bias)

    def forward(self, x: torch.Tensor, ctx: Optional[torch.Tensor] = None):
        h = self.l1(x)
        if self.ctx is not None:
            h = h + self.ctx(ctx)
        h = torch.tanh(h)
        h = torch.tanh(self.l2(h))
        out = self.l3(h)
        mu, raw = out[:, :self.dim], out[:, self.dim:]
        c = self.alpha_clamp
        return mu, c * torch.tanh(raw / c)


class FlowBlock(nn.Module):
    def __init__(self, dim: int, hidden: int, ctx_dim: int, alpha_clamp: float):
        super().__init__()
        self.log_scale = nn.Parameter(torch.zeros(dim))
        self.bias = nn.Parameter(torch.zeros(dim))
        self.made = MADE(dim, hidden, ctx_dim, alpha_clamp)

    def inverse(self, y, ctx):
        """Density direction: y -> z with log|det dz/dy|."""
        mu, alpha = self.made(y, ctx)
        u = (y - mu) * torch.exp(-alpha)
        z = (u - self.bias) * torch.exp(-self.log_scale)
        log_det = -alpha.sum(dim=1) - self.log_scale.sum()
        return z.flip(1), log_det

    def forward(self, z, ctx):
        """Sampling direction; the autoregressive inversion is sequential."""
        u = torch.exp(self.log_scale) * z.flip(1) + self.bias
        y = torch.zeros_like(u)
        for i in range(u.shape[1]):
            mu, alpha = self.made(y, ctx)
            y = y.clone()
            y[:, i] = u[:, i] * torch.exp(alpha[:, i]) + mu[:, i]
        return y


class ConditionalFlow(nn.Module):
    """Standardization followed by a stack of flow blocks, over ``dim`` inputs."""

    def __init__(self, dim: int, n_blocks: int, hidden: int, ctx_dim: int = 0,
                 alpha_clamp: float = 7.0):
        super().__init__()
        self.dim = dim
        self.ctx_dim = ctx_dim
        self.blocks = nn.ModuleList(FlowBlock(dim, hidden, ctx_dim, alpha_clamp)
                                    for _ in range(n_blocks))
        self.register_buffer("x_mean", torch.zeros(dim))
        self.register_buffer("x_std", torch.ones(dim))
        self.to(DTYPE)

    @torch.no_grad()
    def set_standardization(self, x: torch.Tensor) -> None:
        std = x.std(dim=0, unbiased=False)
        guard = std > 1e-8 * torch.clamp(x.mean(dim=0).abs(), min=1.0)
        self.x_mean.copy_(x.mean(dim=0))
        self.x_std.copy_(torch.where(guard, std, torch.ones_like(std)))

    @torch.no_grad()
    def actnorm_init(self, x: torch.Tensor, ctx: Optional[torch.Tensor]) -> None:
        """Set every actnorm so its output on ``x`` has zero mean and unit variance."""
        z = (x - self.x_mean) / self.x_std
        for block in self.blocks:
            mu, alpha = block.made(z, ctx)
            u = (z - mu) * torch.exp(-alpha)
            mean = u.mean(dim=0)
            std = u.std(dim=0, unbiased=False).clamp_min(1e-6)
            block.bias.copy_(mean)
            block.log_scale.copy_(torch.log(std))
            z, _ = block.inverse(z, ctx)

    def density_pass(self, x: torch.Tensor, ctx: Optional[torch.Tensor] = None):
        """Map data to base noise. Returns ``(z0, log_det)``."""
        z = (x - self.x_mean) / self.x_std
        log_det = -torch.log(self.x_std).sum().expand(x.shape[0])
        for l, block in enumerate(self.blocks):
            z, ld = block.inverse(z, ctx)
            log_det = log_det + ld
            if not (torch.isfinite(z).all() and torch.isfinite(log_det).all()):
                raise FlowNumericalError(f"non-finite activation in block {l}", block=l)
        return z, log_det

    def log_prob(self, x: torch.Tensor, ctx: Optional[torch.Tensor] = None) -> torch.Tensor:
        z, log_det = self.density_pass(x, ctx)
        return -0.5 * (z ** 2).sum(dim=1) - 0.5 * self.dim * LOG_2PI + log_det

    def sample_from_noise(self, z0: torch.Tensor, ctx: Optional[torch.Tensor] = None) -> torch.Tensor:
        z = z0
        for block in reversed(self.blocks):
            z = block(z, ctx)
        return z * self.x_std + self.x_mean

    def sample(self, n: int, ctx: Optional[torch.Tensor] = None,
               generator: Optional[torch.Generator] = None) -> torch.Tensor:
        z0 = torch.randn(n, self.dim, generator=generator, dtype=DTYPE)
        return self.sample_from_noise(z0, ctx)


class AssociationDensity(nn.Module):
    """Flow over deltas conditioned on the context encoder output."""

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = (ContextEncoder(cfg.ctx_dim, cfg.gru_hidden, cfg.n_clusters,
                                       cfg.scene_emb_dim, cfg.use_scene)
                        if cfg.use_context else None)
        self.flow = ConditionalFlow(cfg.input_dim, cfg.n_blocks, cfg.hidden,
                                    cfg.effective_ctx_dim, cfg.alpha_clamp)
        self.to(DTYPE)

    def context(self, batch: Batch) -> Optional[torch.Tensor]:
        if self.encoder is None:
            return None
        return self.encoder(batch.windows, batch.masks, batch.clusters)

    def data_init(self, stats: Batch, first: Optional[Batch] = None) -> None:
        """Input statistics from ``stats``; actnorm fitted on ``first`` (default: ``stats``)."""
        first = stats if first is None else first
        self.flow.set_standardization(stats.deltas)
        if self.encoder is not None:
            self.encoder.data_init(stats.windows, stats.masks)
        with torch.no_grad():
            self.flow.actnorm_init(first.deltas, self.context(first))

    def log_prob(self, batch: Batch) -> torch.Tensor:
        return self.flow.log_prob(batch.deltas, self.context(batch))

    def density_pass(self, batch: Batch):
        return self.flow.density_pass(batch.deltas, self.context(batch))

    def sample(self, batch: Batch, generator: Optional[torch.Generator] = None) -> torch.Tensor:
        """One sample per context in ``batch`` (its deltas are ignored)."""
        with torch.no_grad():
            return self.flow.sample(len(batch), self.context(batch), generator)


class FactorizedDensity(nn.Module):
    """Independent flows over the (dx, dy), (dw, dh) and (dd) groups; log-probs add."""

    GROUPS = ((0, 1), (2, 3), (4,))

    def __init__(self, cfg: FlowConfig):
        super().__init__()
        self.cfg = cfg
        self.groups = [list(g) for g in self.GROUPS if max(g) < cfg.input_dim]
        self.parts = nn.ModuleList(
            AssociationDensity(cfg.replace(input_dim=len(g), use_context=False))
            for g in self.groups)
        self.to(DTYPE)

    def data_init(self, stats: Batch, first: Optional[Batch] = None) -> None:
        first = stats if first is None else first
        for g, part in zip(self.groups, self.parts):
            part.data_init(stats.with_deltas(stats.deltas[:, g]), first.with_deltas(first.deltas[:, g]))

    def group_log_probs(self, batch: Batch) -> list[torch.Tensor]:
        return [part.log_prob(batch.with_deltas(batch.deltas[:, g]))
                for g, part in zip(self.groups, self.parts)]

    def log_prob(self, batch: Batch) -> torch.Tensor:
        return torch.stack(self.group_log_probs(batch)).sum(dim=0)


def build_model(cfg: FlowConfig, kind: str = "flow") -> nn.Module:
    torch.manual_seed(cfg.seed)
    if kind == "flow":
        return AssociationDensity(cfg)
    if kind == "factorized":
        return FactorizedDensity(cfg)
    raise ValueError(f"unknown model kind {kind!r}")


# -- gradients and training ---------------------------------------------------

def mean_nll(model: nn.Module, batch: Batch) -> torch.Tensor:
    return -model.log_prob(batch).mean()


def grad_nll(model: nn.Module, batch: Batch) -> dict[str, torch.Tensor]:
    """Exact gradient of the batch-mean NLL for every trainable parameter."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    params = dict(model.named_parameters())
    loss = mean_nll(model, batch)
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    out = {}
    for (name, p), g in zip(params.items(), grads):
        g = torch.zeros_like(p) if g is None else g
        if not torch.isfinite(g).all():
            raise FlowNumericalError(f"non-finite gradient in {name}", group=name)
        out[name] = g
    return out


@dataclass
class TrainResult:
    model: nn.Module
    trace: list  # (epoch, train_nll, val_nll)
    init_val_nll: float
    best_epoch: int
    best_val_nll: float


def split_indices(n: int, val_fraction: float, seed: int):
    rng = np.random.default_rng([seed, 7])
    perm = rng.permutation(n)
    n_val = int(round(n * val_fraction)) if val_fraction > 0 else 0
    n_val = min(max(n_val, 1 if val_fraction > 0 else 0), n - 1)
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@torch.no_grad()
def evaluate_nll(model: nn.Module, batch: Batch, chunk: int = 8192) -> float:
    total = 0.0
    for start in range(0, len(batch), chunk):
        part = batch.index(slice(start, start + chunk))
        total += float(-model.log_prob(part).sum())
    return total / len(batch)


def train(dataset, cfg: FlowConfig, kind: str = "flow",
          val_dataset: Optional[Batch] = None) -> TrainResult:
    """Maximum-likelihood training with Adam; returns the best-validation parameters.

    ``dataset`` is a Batch or a list of AssociationSample. Unless ``val_dataset``
    is given, a seeded ``cfg.val_fraction`` split is held out.
    """
    data = dataset if isinstance(dataset, Batch) else collate(dataset)
    if len(data) == 0:
        raise ValueError("empty dataset")
    if val_dataset is None:
        tr_idx, va_idx = split_indices(len(data), cfg.val_fraction, cfg.seed)
        train_data, val_data = data.index(torch.as_tensor(tr_idx)), data.index(torch.as_tensor(va_idx))
    else:
        train_data, val_data = data, val_dataset
    if len(train_data) < cfg.batch_size:
        raise ValueError(f"training split ({len(train_data)}) smaller than batch size {cfg.batch_size}")

    model = build_model(cfg, kind)
    gen = torch.Generator().manual_seed(cfg.seed)
    first = torch.randperm(len(train_data), generator=gen)[:cfg.batch_size]
    model.data_init(train_data, train_data.index(first))

    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    init_val = evaluate_nll(model, val_data)
    best_val, best_epoch = init_val, -1
    best_state = copy.deepcopy(model.state_dict())
    trace = []
    n = len(train_data)
    for epoch in range(cfg.epochs):
        perm = torch.randperm(n, generator=gen)
        total, count = 0.0, 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            b = train_data.index(perm[start:start + cfg.batch_size])
            loss = mean_nll(model, b)
            if not torch.isfinite(loss):
                raise FlowNumericalError(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(b)
            count += len(b)
        val = evaluate_nll(model, val_data)
        trace.append((epoch, total / count, val))
        if val < best_val:
            best_val, best_epoch = val, epoch
            best_state = copy.deepcopy(model.state_dict())
    model.load_state_dict(best_state)
    model.eval()
    return TrainResult(model, trace, init_val, best_epoch, best_val)


# -- checkpoint ---------------------------------------------------------------

@dataclass
class FlowCheckpoint:
    kind: str
    config: FlowConfig
    model: nn.Module
    clusters: Optional[SceneClusterModel] = None
    nll_reject: Optional[float] = None
    meta: dict = field(default_factory=dict)

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "kind": self.kind,
            "config": dataclasses.asdict(self.config),
            "state_dict": self.model.state_dict(),
            "centroids": None if self.clusters is None else torch.as_tensor(self.clusters.centroids),
            "desc_mean": None if self.clusters is None else torch.as_tensor(self.clusters.desc_mean),
            "desc_std": None if self.clusters is None else torch.as_tensor(self.clusters.desc_std),
            "nll_reject": self.nll_reject,
            "meta": dict(self.meta),
        }
        buf = io.BytesIO()
        torch.save(payload, buf)
        atomic_write_bytes(path, buf.getvalue())

    @classmethod
    def load(cls, path) -> "FlowCheckpoint":
        payload = torch.load(path, map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
        cfg = FlowConfig(**payload["config"])
        model = build_model(cfg, payload["kind"])
        model.load_state_dict(payload["state_dict"])
        model.eval()
        clusters = None
        if payload["centroids"] is not None:
            clusters = SceneClusterModel(payload["centroids"].numpy(), payload["desc_mean"].numpy(),
                                         payload["desc_std"].numpy())
        return cls(payload["kind"], cfg, model, clusters, payload["nll_reject"], payload["meta"])
