"""Condition encoders: a strided CNN for silhouette images and a shared-MLP
point encoder for partial clouds, plus inverse-distance feature propagation
onto the sphere prior."""
from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn


def image_to_tensor(image: np.ndarray) -> torch.Tensor:
    """uint8 (H, W) grayscale -> float (1, H, W) in [0, 1]."""
    arr = np.asarray(image)
    if arr.ndim != 2:
        raise ValueError(f"expected a grayscale (H, W) image, got shape {arr.shape}")
    return torch.from_numpy(arr.astype(np.float32) / 255.0).unsqueeze(0)


class ImageEncoder(nn.Module):
    """Strided conv blocks + global average pool + linear head."""

    def __init__(self, resolution: int, out_dim: int, channels=(32, 64, 128, 256)):
        super().__init__()
        self.resolution = resolution
        self.out_dim = out_dim
        blocks = []
        c_in = 1
        for c_out in channels:
            blocks.append(nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1))
            blocks.append(nn.LeakyReLU(0.2))
            c_in = c_out
        self.blocks = nn.Sequential(*blocks)
        self.head = nn.Linear(c_in, out_dim)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        if image.ndim != 4 or image.shape[-2:] != (self.resolution, self.resolution):
            raise ValueError(
                f"expected (B, 1, {self.resolution}, {self.resolution}) input, "
                f"got {tuple(image.shape)}"
            )
        h = self.blocks(image)
        return self.head(h.mean(dim=(-2, -1)))


class PointEncoder(nn.Module):
    """Shared per-point MLP with max pooling.

    Returns the pooled global feature and the pre-pool per-point features;
    the global feature is exactly permutation invariant.
    """

    def __init__(self, out_dim: int, hidden=(64, 128)):
        super().__init__()
        layers = []
        c_in = 3
        for c in hidden:
            layers.append(nn.Linear(c_in, c))
            layers.append(nn.LeakyReLU(0.2))
            c_in = c
        layers.append(nn.Linear(c_in, out_dim))
        self.net = nn.Sequential(*layers)

    def forward(self, points: torch.Tensor):
        if points.ndim != 3 or points.shape[-1] != 3 or points.shape[1] < 1:
            raise ValueError(f"expected a non-empty (B, M, 3) cloud, got {tuple(points.shape)}")
        per_point = self.net(points)
        return per_point.max(dim=1).values, per_point


def gather_rows(feats: torch.Tensor, idx: torch.Tensor) -> torch.Tensor:
    """Select rows per batch: feats (B, M, F) indexed by idx (B, N, k)
    -> (B, N, k, F). Flat indexing keeps memory at the output size."""
    b, m, f = feats.shape
    offset = torch.arange(b, device=feats.device).view(b, 1, 1) * m
    flat = feats.reshape(b * m, f)
    return flat[(idx + offset).reshape(-1)].view(*idx.shape, f)


def propagate_features(
    source_xyz: torch.Tensor,
    source_feats: torch.Tensor,
    target_xyz: torch.Tensor,
    k: int = 3,
    eps: float = 1e-8,
) -> torch.Tensor:
    """Interpolate per-point features onto target points by inverse-distance
    weighting over the k nearest source points.

    A target coincident with a source degenerates to selecting that source's
    feature. Shapes: (B, M, 3), (B, M, F), (B, N, 3) -> (B, N, F).
    """
    m = source_xyz.shape[1]
    k = min(k, m)
    dist = torch.cdist(target_xyz, source_xyz)  # (B, N, M)
    near, idx = torch.topk(dist, k, dim=-1, largest=False)
    w = 1.0 / (near + eps)
    w = w / w.sum(dim=-1, keepdim=True)
    gathered = gather_rows(source_feats, idx)
    return (w.unsqueeze(-1) * gathered).sum(dim=2)
