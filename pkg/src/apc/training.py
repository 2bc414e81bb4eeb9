"""Losses, optimization loop, dataset adapters, checkpointing, and metric
tables.

The total loss is the symmetric L1 Chamfer distance plus alpha times the
subspace-orthogonality penalty (alpha defaults to 100). The orthogonality
penalty defaults to the Frobenius distance of each bank's Gram matrix from
identity; the literal published form (norm minus one) is kept behind
``orth_form="literal"`` for comparison, since it does not vanish on
orthonormal banks.

Checkpoints are single files: magic, JSON header (configs, epoch, metric
history, tensor index), then named raw tensors sorted by name, so that
save -> load -> save is byte-identical.
"""
from __future__ import annotations

import dataclasses
import json
import math
import struct
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .deformation import DeformationModel, build_model
from .geometry import PointCloud, chamfer_l1, chamfer_l2, load_cloud
from .synthgen import DatasetManifest, load_image, make_partial, view_basis

_CKPT_MAGIC = b"APCK"

_DTYPES = {
    "float32": torch.float32,
    "float64": torch.float64,
    "int64": torch.int64,
    "int32": torch.int32,
    "uint8": torch.uint8,
    "bool": torch.bool,
}


# ---------------------------------------------------------------------------
# losses


def orthogonality_loss(banks, form: str = "gram_identity") -> torch.Tensor:
    """Orthonormality penalty over the subspace banks.

    gram_identity: sum_i ||U_i^T U_i - I||_F (zero iff every bank is
    orthonormal). literal: (sum_i ||U_i^T U_i||_F) - 1.
    """
    terms = []
    for bank in banks:
        gram = bank.gram()
        if form == "gram_identity":
            ident = torch.eye(gram.shape[0], dtype=gram.dtype, device=gram.device)
            ss = (gram - ident).square().sum()
            # sqrt has an unbounded second derivative at 0; below the float
            # noise floor the squared form is an exact stand-in
            terms.append(torch.sqrt(ss) if float(ss.detach()) > 1e-20 else ss)
        elif form == "literal":
            terms.append(torch.sqrt(gram.square().sum()))
        else:
            raise ValueError(f"unknown orthogonality form {form!r}")
    if not terms:
        return torch.zeros(())
    total = torch.stack(terms).sum()
    return total - 1.0 if form == "literal" else total


def total_loss(output, target, banks, alpha: float, form: str = "gram_identity") -> torch.Tensor:
    return chamfer_l1(output, target) + alpha * orthogonality_loss(banks, form)


# ---------------------------------------------------------------------------
# dataset adapter


class SplitArrays:
    """One manifest split loaded into memory tensors."""

    def __init__(self, manifest: DatasetManifest, split: str):
        records = manifest.records(split)
        if not records:
            raise ValueError(f"split {split!r} is empty")
        images, clouds = [], []
        for rec in records:
            images.append(load_image(manifest.path(rec, "image")))
            clouds.append(load_cloud(manifest.path(rec, "cloud")).points)
        self.images = torch.from_numpy(
            np.stack(images).astype(np.float32) / 255.0
        ).unsqueeze(1)
        self.clouds = torch.from_numpy(np.stack(clouds))
        self.families = [rec["family"] for rec in records]
        self.records = records

    def __len__(self) -> int:
        return self.clouds.shape[0]

    def resample_targets(self, idx: torch.Tensor, n: int, gen: torch.Generator) -> torch.Tensor:
        dense = self.clouds[idx]
        if dense.shape[1] == n:
            return dense
        cols = torch.stack(
            [torch.randperm(dense.shape[1], generator=gen)[:n] for _ in range(len(idx))]
        )
        return torch.take_along_dim(dense, cols.unsqueeze(-1), dim=1)

    def partial_inputs(self, idx, n_partial: int, keep_fraction: float, gen: torch.Generator):
        """Depth-cropped partial clouds (each record's stored view), then
        resampled to a fixed input size."""
        out = []
        for i in idx.tolist():
            rec = self.records[i]
            direction = view_basis(*rec["view"])[0]
            part = make_partial(PointCloud(self.clouds[i].numpy()), direction, keep_fraction)
            pts = torch.from_numpy(part.points)
            cols = torch.randint(pts.shape[0], (n_partial,), generator=gen)
            out.append(pts[cols])
        return torch.stack(out)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, model: DeformationModel, train_config: TrainConfig, epoch: int, history):
    state = model.state_dict()
    index = []
    blobs = []
    offset = 0
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        data = t.numpy().tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(t.dtype).replace("torch.", ""),
                "shape": list(t.shape),
                "offset": offset,
                "nbytes": len(data),
            }
        )
        blobs.append(data)
        offset += len(data)
    header = json.dumps(
        {
            "model_config": model.config.to_dict(),
            "train_config": train_config.to_dict(),
            "epoch": epoch,
            "history": history,
            "tensors": index,
        },
        sort_keys=True,
        separators=(",", ":"),
    ).encode()
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for blob in blobs:
            f.write(blob)


def load_checkpoint(path):
    """Returns (model, meta) with meta holding train_config/epoch/history."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode())
        payload = f.read()

    config = ModelConfig.from_dict(header["model_config"])
    with torch.random.fork_rng():
        model = DeformationModel(config)
    state = {}
    for entry in header["tensors"]:
        dtype = _DTYPES[entry["dtype"]]
        raw = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
        np_dtype = np.dtype(entry["dtype"])
        arr = np.frombuffer(raw, dtype=np_dtype).reshape(entry["shape"]).copy()
        state[entry["name"]] = torch.from_numpy(arr).to(dtype)
    model.load_state_dict(state)
    model.eval()
    meta = {
        "train_config": TrainConfig.from_dict(header["train_config"]),
        "epoch": header["epoch"],
        "history": header["history"],
    }
    return model, meta


# ---------------------------------------------------------------------------
# training loop


def _batches(n: int, batch_size: int, gen: torch.Generator, shuffle: bool):
    order = torch.randperm(n, generator=gen) if shuffle else torch.arange(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def _model_inputs(split: SplitArrays, idx, model_config: ModelConfig, tc: TrainConfig, gen):
    if model_config.task == "reconstruct":
        return split.images[idx]
    return split.partial_inputs(idx, model_config.partial_points, tc.keep_fraction, gen)


def validate(model: DeformationModel, split: SplitArrays, tc: TrainConfig, metric: str = "l1"):
    """Mean Chamfer distance of eval-mode outputs against dense targets."""
    fn = chamfer_l1 if metric == "l1" else chamfer_l2
    was_training = model.training
    model.eval()
    gen = torch.Generator().manual_seed(0)  # fixed: validation inputs are deterministic
    vals = []
    with torch.no_grad():
        for idx in _batches(len(split), tc.eval_batch_size, gen, shuffle=False):
            inputs = _model_inputs(split, idx, model.config, tc, gen)
            out, _ = model(inputs)
            for b, i in enumerate(idx.tolist()):
                vals.append(float(fn(out[b], split.clouds[i])))
    if was_training:
        model.train()
    return float(np.mean(vals)), vals


def train(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_path=None,
    log=None,
):
    """Seed-deterministic minimization of the total loss; retains the
    best-validation model state. Returns (model, history)."""
    tc = train_config
    model_config = dataclasses.replace(
        model_config, variant=tc.variant, code_dim=tc.code_dim
    )
    model = build_model(model_config, tc.seed)
    model.train()

    train_split = SplitArrays(manifest, "train")
    val_split = SplitArrays(manifest, "val")

    opt = torch.optim.Adam(model.parameters(), lr=tc.lr)
    sched = (
        torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=max(tc.epochs, 1))
        if tc.cosine_decay
        else None
    )
    gen = torch.Generator().manual_seed(tc.seed)

    history = []
    best_val = math.inf
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    best_epoch = 0

    for epoch in range(tc.epochs):
        model.train()
        epoch_losses = []
        for idx in _batches(len(train_split), tc.batch_size, gen, shuffle=True):
            inputs = _model_inputs(train_split, idx, model_config, tc, gen)
            targets = train_split.resample_targets(idx, model_config.n_points, gen)
            out, _ = model(inputs)
            loss = total_loss(out, targets, model.banks(), tc.alpha, tc.orth_form)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"training diverged at epoch {epoch}: loss={loss.detach().item()} "
                    f"(variant={tc.variant}, seed={tc.seed}, lr={tc.lr})"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(loss.detach().item())
        if sched is not None:
            sched.step()

        val_cd, _ = validate(model, val_split, tc)
        history.append({"epoch": epoch, "train_loss": float(np.mean(epoch_losses)), "val_l1_cd": val_cd})
        if log:
            log(f"epoch {epoch:3d}  train {np.mean(epoch_losses):.5f}  val l1-cd {val_cd:.5f}")
        if val_cd < best_val:
            best_val = val_cd
            best_epoch = epoch
            best_state = {k: v.clone() for k, v in model.state_dict().items()}

    model.load_state_dict(best_state)
    model.eval()
    if out_path is not None:
        save_checkpoint(out_path, model, tc, best_epoch, history)
    return model, history


# ---------------------------------------------------------------------------
# evaluation tables


def metric_rows(values, families, metric: str = "l1"):
    """Group per-sample metric values into per-family means plus an
    unweighted average row (mean of the family means)."""
    key = f"{metric}_cd"
    by_family: dict = {}
    for family, v in zip(families, values):
        by_family.setdefault(family, []).append(v)
    rows = [
        {"family": fam, "count": len(vs), key: float(np.mean(vs))}
        for fam, vs in sorted(by_family.items())
    ]
    rows.append(
        {
            "family": "average",
            "count": len(values),
            key: float(np.mean([r[key] for r in rows])),
        }
    )
    return rows


def evaluate(model: DeformationModel, manifest: DatasetManifest, split: str = "test",
             metric: str = "l1", train_config: TrainConfig | None = None):
    """Per-family mean Chamfer distance of model outputs vs dense targets."""
    if metric not in ("l1", "l2"):
        raise ValueError(f"metric must be 'l1' or 'l2', got {metric!r}")
    tc = train_config or TrainConfig()
    arrays = SplitArrays(manifest, split)
    _, vals = validate(model, arrays, tc, metric)
    return metric_rows(vals, arrays.families, metric)


def metric_table_text(rows, metric: str = "l1") -> str:
    key = f"{metric}_cd"
    lines = [f"{'family':<10} {'count':>6} {key:>12} {key + ' (x100)':>14}"]
    for r in rows:
        lines.append(f"{r['family']:<10} {r['count']:>6} {r[key]:>12.6f} {r[key] * 100:>14.4f}")
    return "\n".join(lines)


def metric_table_csv(rows, metric: str = "l1") -> str:
    key = f"{metric}_cd"
    lines = ["family,count," + key]
    for r in rows:
        lines.append(f"{r['family']},{r['count']},{r[key]:.8f}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# ablations


def run_ablation(
    manifest: DatasetManifest,
    model_config: ModelConfig,
    base: TrainConfig,
    variants,
    seeds,
    out_dir=None,
    log=None,
):
    """Train each (variant, seed) under an identical budget; returns rows of
    final held-out L1-CD plus checkpoint paths."""
    out_dir = Path(out_dir) if out_dir else None
    results = []
    for variant in variants:
        for seed in seeds:
            tc = dataclasses.replace(base, variant=variant, seed=seed)
            path = out_dir / f"{variant}_seed{seed}.ckpt" if out_dir else None
            model, history = train(manifest, model_config, tc, out_path=path, log=log)
            rows = evaluate(model, manifest, "test", "l1", tc)
            test_cd = rows[-1]["l1_cd"]
            results.append(
                {
                    "variant": variant,
                    "seed": seed,
                    "test_l1_cd": test_cd,
                    "best_val_l1_cd": min(h["val_l1_cd"] for h in history),
                    "checkpoint": str(path) if path else None,
                }
            )
            if log:
                log(f"[ablate] {variant} seed={seed} test l1-cd {test_cd:.5f}")
    return results


def run_code_dim_sweep(manifest, model_config, base: TrainConfig, dims=(4, 8, 18, 32),
                       out_dir=None, log=None):
    """Train the full model across attribute-code dimensions."""
    out_dir = Path(out_dir) if out_dir else None
    rows = []
    for dim in dims:
        tc = dataclasses.replace(base, code_dim=dim, variant="full")
        path = out_dir / f"code_dim_{dim}.ckpt" if out_dir else None
        model, _ = train(manifest, model_config, tc, out_path=path, log=log)
        table = evaluate(model, manifest, "test", "l1", tc)
        rows.append({"code_dim": dim, "test_l1_cd": table[-1]["l1_cd"]})
        if log:
            log(f"[dims] d={dim} test l1-cd {rows[-1]['test_l1_cd']:.5f}")
    return rows
