"""Capture, override, sweep, and swap the per-stage codes of a trained model.

A CodeSet is everything the decoder consumes (per-stage styles sigma/mu and
attribute codes z, detached). Replaying a CodeSet through the decoder
reproduces the original reconstruction bit-exactly, which makes single-
dimension sweeps and cross-image component swaps well-defined edits of one
reconstruction. Stages are addressed 1-based (1..3), code dimensions
0-based.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .config import STAGE_COUNT
from .deformation import DeformationModel, StageCodes
from .encoders import image_to_tensor
from .geometry import PointCloud, save_cloud
from .synthgen import DatasetManifest
from .training import SplitArrays

SWAP_COMPONENTS = ("z", "mu", "sigma")


@dataclass
class CodeSet:
    """Detached per-stage decoder inputs for one reconstruction."""

    stages: list

    def __post_init__(self) -> None:
        if len(self.stages) != STAGE_COUNT:
            raise ValueError(f"expected {STAGE_COUNT} stages, got {len(self.stages)}")

    def clone(self) -> "CodeSet":
        return CodeSet([s.detached() for s in self.stages])

    def code(self, stage: int) -> torch.Tensor:
        return self.stages[_stage_index(stage)].z


def _stage_index(stage: int) -> int:
    if not (1 <= stage <= STAGE_COUNT):
        raise ValueError(f"stage must be in 1..{STAGE_COUNT}, got {stage}")
    return stage - 1


def _require_eval(model: DeformationModel) -> None:
    if model.training:
        raise ValueError("manipulation requires the model in eval mode")


def _as_batch(model: DeformationModel, image: np.ndarray) -> torch.Tensor:
    return image_to_tensor(image).unsqueeze(0).to(next(model.parameters()).dtype)


def capture_codes(model: DeformationModel, image: np.ndarray):
    """Run a reconstruction and keep all intermediate codes.

    Returns (PointCloud, CodeSet); decoding the CodeSet again reproduces the
    cloud bit-exactly.
    """
    _require_eval(model)
    with torch.no_grad():
        out, codes = model.reconstruct(_as_batch(model, image))
    return PointCloud(out[0].numpy()), CodeSet([c.detached() for c in codes])


def decode_codes(model: DeformationModel, codes: CodeSet) -> PointCloud:
    """Replay the decoder from captured codes."""
    _require_eval(model)
    with torch.no_grad():
        out = model.decode(codes.stages)
    return PointCloud(out[0].numpy())


def sweep_codes(model, codes: CodeSet, stage: int, dim: int, values) -> list:
    """Decode once per value with z[stage][dim] overridden, all else fixed."""
    _require_eval(model)
    si = _stage_index(stage)
    base = codes.stages[si].z
    if base is None:
        raise ValueError(f"model variant {model.config.variant!r} has no attribute codes")
    if not (0 <= dim < base.shape[-1]):
        raise ValueError(f"dim must be in 0..{base.shape[-1] - 1}, got {dim}")
    values = list(values)
    if not values:
        raise ValueError("values must be non-empty")
    clouds = []
    for v in values:
        edited = codes.clone()
        with torch.no_grad():
            edited.stages[si].z[0, dim] = float(v)
        clouds.append(decode_codes(model, edited))
    return clouds


def code_std(model: DeformationModel, manifest: DatasetManifest, split: str = "test"):
    """Per-dimension standard deviation of captured codes over a split;
    returns an array of shape (stages, code_dim)."""
    _require_eval(model)
    arrays = SplitArrays(manifest, split)
    zs = _collect_codes(model, arrays)
    return zs.std(axis=0, ddof=0)


def default_sweep_values(original: float, sigma: float, steps: int = 7):
    """Sweep grid centred on the captured activation, spanning +-3 std."""
    span = 3.0 * max(float(sigma), 1e-6)
    return np.linspace(original - span, original + span, steps).tolist()


def sweep_dimension(
    model: DeformationModel,
    image: np.ndarray,
    stage: int,
    dim: int,
    values=None,
    steps: int = 7,
    manifest: DatasetManifest | None = None,
):
    """Capture codes from the image, then sweep one dimension.

    With explicit ``values`` those are used as-is; otherwise the grid is the
    captured activation +-3 code standard deviations (over ``manifest``'s
    test split) in ``steps`` steps.
    """
    _, codes = capture_codes(model, image)
    if values is None:
        if manifest is None:
            raise ValueError("either values or a manifest (for the std grid) is required")
        stds = code_std(model, manifest)
        original = float(codes.code(stage)[0, dim])
        values = default_sweep_values(original, stds[_stage_index(stage), dim], steps)
    return sweep_codes(model, codes, stage, dim, values), list(values)


def normalize_which(which) -> dict:
    """Swap selector: {"z": [1, 3], "mu": [2], "sigma": []} (stages 1-based)."""
    which = dict(which or {})
    for key in which:
        if key not in SWAP_COMPONENTS:
            raise ValueError(f"unknown component {key!r}; expected {SWAP_COMPONENTS}")
    out = {}
    for comp in SWAP_COMPONENTS:
        stages = sorted(set(int(s) for s in which.get(comp, [])))
        for s in stages:
            _stage_index(s)
        out[comp] = stages
    return out


def swap_sets(model, codes_a: CodeSet, codes_b: CodeSet, which) -> PointCloud:
    """Decode A's codes with the selected components replaced by B's."""
    which = normalize_which(which)
    merged = codes_a.clone()
    for stage in which["z"]:
        merged.stages[_stage_index(stage)].z = codes_b.stages[_stage_index(stage)].z
    for stage in which["mu"]:
        merged.stages[_stage_index(stage)].mu = codes_b.stages[_stage_index(stage)].mu
    for stage in which["sigma"]:
        merged.stages[_stage_index(stage)].sigma_raw = codes_b.stages[_stage_index(stage)].sigma_raw
    return decode_codes(model, merged)


def swap_codes(model, image_a: np.ndarray, image_b: np.ndarray, which) -> PointCloud:
    """Reconstruct A with selected code components taken from B."""
    _, codes_a = capture_codes(model, image_a)
    _, codes_b = capture_codes(model, image_b)
    return swap_sets(model, codes_a, codes_b, which)


def all_components_which() -> dict:
    stages = list(range(1, STAGE_COUNT + 1))
    return {comp: list(stages) for comp in SWAP_COMPONENTS}


# ---------------------------------------------------------------------------
# disentanglement diagnostics


def _collect_codes(model: DeformationModel, arrays: SplitArrays) -> np.ndarray:
    """Codes for every sample: (n_samples, stages, code_dim)."""
    outs = []
    with torch.no_grad():
        for start in range(0, len(arrays), 16):
            imgs = arrays.images[start : start + 16]
            _, codes = model.reconstruct(imgs)
            zs = [c.z for c in codes]
            if any(z is None for z in zs):
                raise ValueError("model variant has no attribute codes to report on")
            outs.append(torch.stack(zs, dim=1).numpy())
    return np.concatenate(outs, axis=0)


def _abs_pearson(x: np.ndarray, y: np.ndarray) -> float:
    sx, sy = x.std(), y.std()
    if sx < 1e-12 or sy < 1e-12:
        return 0.0
    return float(abs(np.corrcoef(x, y)[0, 1]))


def disentanglement_report(
    model: DeformationModel,
    manifest: DatasetManifest,
    split: str = "test",
    permutations: int = 200,
    seed: int = 0,
) -> dict:
    """Absolute Pearson correlation between every code dimension and every
    generative factor (per family), with a max-statistic permutation null.

    The null distribution shuffles factor values across samples and records
    the maximum |r| over all (dimension, factor) pairs, controlling for the
    selection over 3*code_dim dimensions.
    """
    _require_eval(model)
    arrays = SplitArrays(manifest, split)
    zs = _collect_codes(model, arrays)  # (n, stages, d)
    n, stages, d = zs.shape
    flat = zs.reshape(n, stages * d)
    dim_names = [f"stage{s + 1}/z{j:02d}" for s in range(stages) for j in range(d)]

    families = np.array(arrays.families)
    columns = []
    factor_vectors = []
    masks = []
    for family in sorted(set(arrays.families)):
        mask = families == family
        factor_names = sorted(arrays.records[int(np.flatnonzero(mask)[0])]["factors"])
        for name in factor_names:
            vec = np.array(
                [rec["factors"][name] for rec, m in zip(arrays.records, mask) if m]
            )
            columns.append(f"{family}/{name}")
            factor_vectors.append(vec)
            masks.append(mask)

    matrix = np.zeros((stages * d, len(columns)))
    for c, (vec, mask) in enumerate(zip(factor_vectors, masks)):
        sub = flat[mask]
        for r in range(stages * d):
            matrix[r, c] = _abs_pearson(sub[:, r], vec)

    best_flat = int(matrix.argmax())
    best_dim, best_col = np.unravel_index(best_flat, matrix.shape)

    rng = np.random.default_rng(seed)
    null_max = np.zeros(permutations)
    for p in range(permutations):
        best = 0.0
        for vec, mask in zip(factor_vectors, masks):
            sub = flat[mask]
            perm = rng.permutation(len(vec))
            shuffled = vec[perm]
            for r in range(stages * d):
                best = max(best, _abs_pearson(sub[:, r], shuffled))
        null_max[p] = best

    top_per_factor = {
        col: {"dim": dim_names[int(matrix[:, c].argmax())], "r": float(matrix[:, c].max())}
        for c, col in enumerate(columns)
    }
    return {
        "dims": dim_names,
        "columns": columns,
        "matrix": matrix.tolist(),
        "top_per_factor": top_per_factor,
        "max": {
            "dim": dim_names[best_dim],
            "column": columns[best_col],
            "r": float(matrix[best_dim, best_col]),
            "null_q95": float(np.quantile(null_max, 0.95)),
            "n_permutations": permutations,
        },
    }


def report_to_csv(report: dict) -> str:
    lines = ["dim," + ",".join(report["columns"])]
    for name, row in zip(report["dims"], report["matrix"]):
        lines.append(name + "," + ",".join(f"{v:.6f}" for v in row))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# exports


def export_sweep(clouds, values, out_dir, stage: int, dim: int) -> Path:
    """Write swept clouds plus a JSON index; returns the index path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, cloud in enumerate(clouds):
        rel = f"sweep_{i:03d}.apc"
        save_cloud(out / rel, cloud)
        files.append(rel)
    index = {
        "stage": stage,
        "dim": dim,
        "values": [float(v) for v in values],
        "files": files,
    }
    index_path = out / "index.json"
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    return index_path
