"""Per-stage interpretation of the global condition feature.

Each stage turns the condition into two things: geometric styles (a per-point
scale/shift pair used for feature modulation downstream) and a low-dimensional
attribute code whose activations address columns of an orthogonal subspace
bank. The bank realizes a linear map from code space to a per-point semantic
feature: s = sum_j z_j * l_j * u_j + b, with each basis column u_j living on
the (point, channel) grid of its stage.
"""
from __future__ import annotations

import torch
import torch.nn as nn


class StyleNet(nn.Module):
    """Geometric sub-pipe: per-point MLP over the concatenated condition and
    prior coordinates, producing a (scale, shift) channel pair per point.

    The scale half is returned raw; positivity is applied at the modulation
    site so captured styles stay in a single convention.
    """

    def __init__(self, cond_dim: int, channels: int):
        super().__init__()
        width = 2 * channels
        self.channels = channels
        self.net = nn.Sequential(
            nn.Linear(cond_dim + 3, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, width),
            nn.LeakyReLU(0.2),
            nn.Linear(width, 2 * channels),
        )

    def forward(self, cond: torch.Tensor, prior: torch.Tensor):
        out = self.net(torch.cat([cond, prior], dim=-1))
        # contiguous halves: downstream kernels are layout-sensitive at the
        # last bit, and captured styles must replay bit-exactly
        return out[..., : self.channels].contiguous(), out[..., self.channels :].contiguous()


class CodeSqueeze(nn.Module):
    """Semantic sub-pipe head: squeeze the global feature into a bounded
    attribute code. Each stage owns independent weights."""

    def __init__(self, in_dim: int, code_dim: int):
        super().__init__()
        self.code_dim = code_dim
        self.linear = nn.Linear(in_dim, code_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return torch.tanh(self.linear(x))


class SubspaceBank(nn.Module):
    """Orthogonal basis columns with significance weights and a bias.

    Columns are flattened (n_points * channels) vectors so that basis^T basis
    is the d x d Gram matrix the orthogonality regularizer acts on. Columns
    initialize orthonormal (QR of Gaussian noise), weights to 1, bias to 0.
    """

    def __init__(self, n_points: int, channels: int, code_dim: int):
        super().__init__()
        if code_dim > n_points * channels:
            raise ValueError(
                f"code_dim {code_dim} exceeds flattened stage size {n_points * channels}"
            )
        self.n_points = n_points
        self.channels = channels
        self.code_dim = code_dim
        init = torch.linalg.qr(torch.randn(n_points * channels, code_dim)).Q
        self.basis = nn.Parameter(init.contiguous())
        self.weights = nn.Parameter(torch.ones(code_dim))
        self.bias = nn.Parameter(torch.zeros(n_points, channels))

    def gram(self) -> torch.Tensor:
        return self.basis.T @ self.basis

    def project(self, z: torch.Tensor) -> torch.Tensor:
        """Map codes (B, d) to per-point semantic features (B, N, C)."""
        if z.shape[-1] != self.code_dim:
            raise ValueError(f"code length {z.shape[-1]} != bank columns {self.code_dim}")
        flat = (z * self.weights) @ self.basis.T
        return flat.view(z.shape[0], self.n_points, self.channels) + self.bias

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.project(z)


class AFModule(nn.Module):
    """One stage of condition interpretation: geometric styles plus the
    squeezed attribute code (the semantic projection happens at decode time
    so that overridden codes flow through the same path)."""

    def __init__(
        self,
        cond_dim: int,
        channels: int,
        code_dim: int,
        n_points: int,
        geometric: bool = True,
        semantic: bool = True,
    ):
        super().__init__()
        self.style = StyleNet(cond_dim, channels) if geometric else None
        self.squeeze = CodeSqueeze(cond_dim, code_dim) if semantic else None
        self.bank = SubspaceBank(n_points, channels, code_dim) if semantic else None

    def forward(self, x: torch.Tensor, cond: torch.Tensor, prior: torch.Tensor):
        """x: (B, D) global feature; cond: (B, N, D) per-point condition
        (the repeated global feature, or propagated per-point features).
        Returns (sigma_raw, mu, z), entries None when the sub-pipe is off."""
        sigma_raw = mu = z = None
        if self.style is not None:
            sigma_raw, mu = self.style(cond, prior)
        if self.squeeze is not None:
            z = self.squeeze(x)
        return sigma_raw, mu, z
