"""Sphere-deformation decoder.

Three stages of dynamic-graph attention over point features, each modulated
by adaptive instance normalization with externally interpreted styles and an
additive per-point semantic feature, followed by a displacement head. The
displacement head's final layer initializes to zero, so an untrained model
reproduces its prior exactly.

The decoder consumes per-stage codes (styles sigma/mu, attribute code z, or
the plain-MLP replacement terms of the ablation variants); the full forward
pass is encode -> compute_codes -> decode, and capture/replay for
manipulation re-enters at decode with the same code objects.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, fields
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .attribute_flow import AFModule
from .config import STAGE_COUNT, ModelConfig
from .encoders import ImageEncoder, PointEncoder, gather_rows, propagate_features
from .geometry import knn_indices, sample_sphere


class GraphAttentionBlock(nn.Module):
    """Edge-convolution with attention: messages are an MLP of
    [q_k : q_j - q_k], aggregated with softmax attention over the k neighbors.
    """

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.edge_mlp = nn.Linear(2 * in_channels, out_channels)
        self.act = nn.LeakyReLU(0.2)
        self.attn = nn.Linear(2 * in_channels, 1)

    def forward(self, feats: torch.Tensor, idx: torch.Tensor, return_attention: bool = False):
        if idx.shape[-2] != feats.shape[-2]:
            raise ValueError(
                f"graph rows {idx.shape[-2]} do not match point count {feats.shape[-2]}"
            )
        neighbors = gather_rows(feats, idx)  # (B, N, k, C)
        center = feats.unsqueeze(2).expand_as(neighbors)
        edge = torch.cat([center, neighbors - center], dim=-1)
        msg = self.act(self.edge_mlp(edge))
        weights = torch.softmax(self.attn(edge), dim=2)
        out = (weights * msg).sum(dim=2)
        if return_attention:
            return out, weights.squeeze(-1)
        return out


class AdaptiveInstanceNorm(nn.Module):
    """Channel-wise normalization with externally supplied per-point styles.

    Train mode normalizes by the current batch's per-channel statistics over
    all points and folds them into the running buffers (the moving-average
    estimate); eval mode normalizes by the buffers. Variance is the biased
    (population) estimate.
    """

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__()
        if not (0.0 < momentum < 1.0):
            raise ValueError("momentum must be in (0, 1)")
        self.momentum = momentum
        self.eps = eps
        self.register_buffer("running_mean", torch.zeros(channels))
        self.register_buffer("running_var", torch.ones(channels))

    def forward(self, feats: torch.Tensor, sigma: torch.Tensor, mu: torch.Tensor):
        if sigma.shape != feats.shape or mu.shape != feats.shape:
            raise ValueError("style shapes must match the feature tensor")
        if self.training:
            mean = feats.mean(dim=(0, 1))
            var = feats.var(dim=(0, 1), unbiased=False)
            with torch.no_grad():
                self.running_mean.mul_(self.momentum).add_((1 - self.momentum) * mean)
                self.running_var.mul_(self.momentum).add_((1 - self.momentum) * var)
        else:
            mean, var = self.running_mean, self.running_var
        normalized = (feats - mean) / torch.sqrt(var + self.eps)
        return sigma * normalized + mu


class SemanticInjector(nn.Module):
    """Element-wise add of a per-point MLP of the semantic feature."""

    def __init__(self, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(channels, channels), nn.LeakyReLU(0.2), nn.Linear(channels, channels)
        )

    def forward(self, feats: torch.Tensor, semantic: torch.Tensor) -> torch.Tensor:
        if semantic.shape != feats.shape:
            raise ValueError(
                f"semantic feature shape {tuple(semantic.shape)} != features {tuple(feats.shape)}"
            )
        return feats + self.net(semantic)


class DisplacementHead(nn.Module):
    """Per-point MLP to signed 3-vectors; final layer zero-initialized."""

    def __init__(self, in_channels: int):
        super().__init__()
        self.hidden = nn.Linear(in_channels, in_channels)
        self.act = nn.LeakyReLU(0.2)
        self.out = nn.Linear(in_channels, 3)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        return self.out(self.act(self.hidden(feats)))


@dataclass
class StageCodes:
    """Everything one decoder stage consumes from the condition branch.

    Exactly the fields enabled by the model variant are set: (sigma_raw, mu)
    for the geometric styles, z for the attribute code, geo_add/sem_add for
    the plain-MLP replacement variants.
    """

    sigma_raw: Optional[torch.Tensor] = None
    mu: Optional[torch.Tensor] = None
    z: Optional[torch.Tensor] = None
    geo_add: Optional[torch.Tensor] = None
    sem_add: Optional[torch.Tensor] = None

    def detached(self) -> "StageCodes":
        vals = {
            f.name: (getattr(self, f.name).detach().clone() if getattr(self, f.name) is not None else None)
            for f in fields(self)
        }
        return StageCodes(**vals)


class _PlainGeoMLP(nn.Module):
    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(cond_dim + 3, channels), nn.LeakyReLU(0.2), nn.Linear(channels, channels)
        )

    def forward(self, cond, prior):
        return self.net(torch.cat([cond, prior], dim=-1))


class _PlainSemMLP(nn.Module):
    def __init__(self, in_dim: int, channels: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(in_dim, channels), nn.LeakyReLU(0.2), nn.Linear(channels, channels)
        )

    def forward(self, x):
        return self.net(x)


_VARIANT_TABLE = {
    # variant: (af_geometric, af_semantic, plain_geo, plain_sem)
    "full": (True, True, False, False),
    "no_semantic": (True, False, False, False),
    "no_geometric": (False, True, False, False),
    "semantic_mlp": (True, False, False, True),
    "geometric_mlp": (False, True, True, False),
    "only_mlp": (False, False, True, True),
}


class DeformationModel(nn.Module):
    """Full reconstruction/completion model over a fixed sphere prior."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.feature_dim
        c1, c2, c3 = config.channels

        if config.task == "reconstruct":
            self.encoder = ImageEncoder(config.image_resolution, d, config.image_channels)
        else:
            self.encoder = PointEncoder(d)

        geo, sem, plain_geo, plain_sem = _VARIANT_TABLE[config.variant]
        self.af = nn.ModuleList(
            [
                AFModule(d, c, config.code_dim, config.n_points, geometric=geo, semantic=sem)
                if (geo or sem)
                else None
                for c in config.channels
            ]
        )
        self.geo_mlps = (
            nn.ModuleList([_PlainGeoMLP(d, c) for c in config.channels]) if plain_geo else None
        )
        self.sem_mlps = (
            nn.ModuleList([_PlainSemMLP(d, c) for c in config.channels]) if plain_sem else None
        )

        self.lift = nn.Linear(3, c1)
        self.blocks = nn.ModuleList(
            [
                GraphAttentionBlock(c1, c1),
                GraphAttentionBlock(c1, c2),
                GraphAttentionBlock(c2, c3),
            ]
        )
        self.adain = nn.ModuleList([AdaptiveInstanceNorm(c) for c in config.channels])
        self.inject = nn.ModuleList([SemanticInjector(c) for c in config.channels])
        self.head = DisplacementHead(c3)

        prior = sample_sphere(config.n_points, config.prior_seed).tensor()
        self.register_buffer("prior", prior)

    # -- condition branch ---------------------------------------------------

    def banks(self):
        return [m.bank for m in self.af if m is not None and m.bank is not None]

    def _prior_batch(self, batch_size: int, prior: Optional[torch.Tensor]) -> torch.Tensor:
        p = self.prior if prior is None else torch.as_tensor(prior, dtype=self.prior.dtype)
        if p.ndim == 2:
            p = p.unsqueeze(0).expand(batch_size, -1, -1)
        return p

    def encode(self, inputs: torch.Tensor, prior_b: torch.Tensor):
        """Returns (global feature (B, D), per-point condition (B, N, D))."""
        if self.config.task == "reconstruct":
            x = self.encoder(inputs)
            cond = x.unsqueeze(1).expand(-1, prior_b.shape[1], -1)
        else:
            x, src_feats = self.encoder(inputs)
            cond = propagate_features(inputs, src_feats, prior_b, k=self.config.propagate_k)
        return x, cond

    def compute_codes(self, x: torch.Tensor, cond: torch.Tensor, prior_b: torch.Tensor):
        codes = []
        for i in range(STAGE_COUNT):
            sigma_raw = mu = z = geo_add = sem_add = None
            if self.af[i] is not None:
                sigma_raw, mu, z = self.af[i](x, cond, prior_b)
            if self.geo_mlps is not None:
                geo_add = self.geo_mlps[i](cond, prior_b)
            if self.sem_mlps is not None:
                sem_add = self.sem_mlps[i](x)
            codes.append(StageCodes(sigma_raw, mu, z, geo_add, sem_add))
        return codes

    # -- decoder ------------------------------------------------------------

    def decode(self, codes, prior: Optional[torch.Tensor] = None) -> torch.Tensor:
        batch = next(
            t for c in codes for t in (c.sigma_raw, c.z, c.geo_add, c.sem_add) if t is not None
        ).shape[0]
        prior_b = self._prior_batch(batch, prior)
        feats = self.lift(prior_b)
        for i in range(STAGE_COUNT):
            graph_src = prior_b if i == 0 else feats
            with torch.no_grad():
                idx = knn_indices(graph_src, self.config.knn_k, stable=False)
            feats = self.blocks[i](feats, idx)
            c = codes[i]
            if c.sigma_raw is not None:
                sigma = F.softplus(c.sigma_raw) + 0.1
                feats = self.adain[i](feats, sigma, c.mu)
            if c.geo_add is not None:
                feats = feats + c.geo_add
            if c.z is not None:
                feats = self.inject[i](feats, self.af[i].bank(c.z))
            if c.sem_add is not None:
                feats = feats + c.sem_add.unsqueeze(1)
        return prior_b + self.head(feats)

    # -- end-to-end ---------------------------------------------------------

    def forward(self, inputs: torch.Tensor, prior: Optional[torch.Tensor] = None):
        """Full pass; returns (output cloud (B, N, 3), per-stage codes)."""
        prior_b = self._prior_batch(inputs.shape[0], prior)
        x, cond = self.encode(inputs, prior_b)
        codes = self.compute_codes(x, cond, prior_b)
        return self.decode(codes, prior=prior_b), codes

    def reconstruct(self, images: torch.Tensor, prior: Optional[torch.Tensor] = None):
        if self.config.task != "reconstruct":
            raise ValueError("model was built for the completion task")
        return self.forward(images, prior)

    def complete(self, partial: torch.Tensor, prior: Optional[torch.Tensor] = None):
        if self.config.task != "complete":
            raise ValueError("model was built for the reconstruction task")
        return self.forward(partial, prior)


def build_model(config: ModelConfig, seed: int) -> DeformationModel:
    """Deterministic model construction: same (config, seed) -> same weights."""
    torch.manual_seed(seed)
    return DeformationModel(config)


def permute_prior_slots(model: DeformationModel, perm) -> DeformationModel:
    """Copy of the model with prior rows and all slot-tied state (basis rows,
    biases) permuted consistently. The semantic banks assign attributes to
    prior slots by index, so equivariance over the prior holds exactly when
    that slot-tied state moves with the points."""
    perm = torch.as_tensor(perm, dtype=torch.long)
    out = copy.deepcopy(model)
    with torch.no_grad():
        out.prior.copy_(model.prior[perm])
        for m in out.af:
            if m is not None and m.bank is not None:
                bank = m.bank
                basis = bank.basis.view(bank.n_points, bank.channels, bank.code_dim)
                bank.basis.copy_(basis[perm].reshape(bank.n_points * bank.channels, bank.code_dim))
                bank.bias.copy_(bank.bias[perm])
    return out
