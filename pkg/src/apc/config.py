"""Configuration objects shared across the package.

ModelConfig fixes the architecture (point count, stage widths, code
dimension); TrainConfig fixes one optimization run. Both serialize to plain
dicts so they can ride along inside checkpoints and config snapshots.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

STAGE_COUNT = 3

VARIANTS = ("full", "no_semantic", "no_geometric", "semantic_mlp", "geometric_mlp", "only_mlp")

ORTH_FORMS = ("gram_identity", "literal")


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``n_points`` is both the size of the sphere prior and of the output
    cloud. ``channels`` are the per-stage feature widths of the deformation
    pipe; the per-stage style/semantic tensors share those widths.
    """

    n_points: int = 2048
    channels: tuple[int, int, int] = (32, 64, 128)
    code_dim: int = 18
    feature_dim: int = 256
    image_resolution: int = 128
    image_channels: tuple[int, ...] = (32, 64, 128, 256)
    knn_k: int = 8
    prior_seed: int = 71
    variant: str = "full"
    task: str = "reconstruct"  # or "complete"
    # completion path: partial clouds are resampled to this many input points
    partial_points: int = 512
    propagate_k: int = 3

    def __post_init__(self) -> None:
        if len(self.channels) != STAGE_COUNT:
            raise ValueError(f"channels must have {STAGE_COUNT} entries, got {self.channels}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.task not in ("reconstruct", "complete"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.n_points < 1 or self.code_dim < 1:
            raise ValueError("n_points and code_dim must be positive")
        if self.knn_k >= self.n_points:
            raise ValueError("knn_k must be smaller than n_points")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["channels"] = list(self.channels)
        d["image_channels"] = list(self.image_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        d["image_channels"] = tuple(d["image_channels"])
        return cls(**d)


@dataclass
class TrainConfig:
    """One training run. ``alpha`` weights the basis-orthogonality term."""

    alpha: float = 100.0
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    variant: str = "full"
    code_dim: int = 18
    orth_form: str = "gram_identity"
    cosine_decay: bool = True
    # per-epoch resampling of dense targets down to the model's point count
    eval_batch_size: int = 8
    keep_fraction: float = 0.5  # completion task: crop ratio for partial inputs

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.orth_form not in ORTH_FORMS:
            raise ValueError(f"unknown orth_form {self.orth_form!r}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)
