"""Command-line entry point.

Subcommands: synth, train, eval, ablate, sweep, swap, report, serve. Flags
left unset fall back to a --config JSON file (when given), then to built-in
defaults; the seed additionally falls back to the APC_SEED environment
variable. Every run that produces artifacts writes a resolved-config
snapshot (run_config.json) alongside them, sufficient to reproduce the run.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from .config import VARIANTS, ModelConfig, TrainConfig
from .geometry import save_cloud


def _load_file_config(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    return json.loads(Path(path).read_text())


class _Resolver:
    """CLI flag > config file > env (seed only) > default."""

    def __init__(self, args, file_cfg: dict):
        self.args = args
        self.file_cfg = file_cfg
        self.resolved: dict = {}

    def get(self, name: str, default):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.file_cfg.get(name)
        if value is None and name == "seed" and os.environ.get("APC_SEED"):
            value = int(os.environ["APC_SEED"])
        if value is None:
            value = default
        self.resolved[name] = value
        return value


def _write_snapshot(out_dir, command: str, resolved: dict) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"command": command, "resolved": {k: _jsonable(v) for k, v in resolved.items()}}
    (out / "run_config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))


def _jsonable(v):
    if isinstance(v, (tuple, set)):
        return list(v)
    if isinstance(v, Path):
        return str(v)
    return v


def _csv_ints(text: str):
    return tuple(int(v) for v in str(text).split(",") if v != "")


def _csv_floats(text: str):
    return [float(v) for v in str(text).split(",") if v != ""]


def _csv_strs(text: str):
    return [v.strip() for v in str(text).split(",") if v.strip()]


def _parse_which(text: str) -> dict:
    """'z:1,z:3,mu:2' -> {'z': [1, 3], 'mu': [2]}; 'all' selects everything."""
    from .manipulation import all_components_which

    if text.strip() == "all":
        return all_components_which()
    out: dict = {}
    for token in _csv_strs(text):
        if ":" not in token:
            raise ValueError(f"bad swap selector {token!r}; expected component:stage")
        comp, stage = token.split(":", 1)
        out.setdefault(comp, []).append(int(stage))
    return out


def _model_config(r: _Resolver, manifest=None, task: str = "reconstruct") -> ModelConfig:
    default_res = manifest.config.get("resolution", 128) if manifest else 128
    return ModelConfig(
        n_points=r.get("points", 2048),
        channels=_csv_ints(r.get("channels", "32,64,128")),
        code_dim=r.get("code_dim", 18),
        feature_dim=r.get("feature_dim", 256),
        image_resolution=r.get("image_resolution", default_res),
        knn_k=r.get("knn_k", 8),
        prior_seed=r.get("prior_seed", 71),
        task=task,
        partial_points=r.get("partial_points", 512),
    )


def _train_config(r: _Resolver) -> TrainConfig:
    return TrainConfig(
        alpha=r.get("alpha", 100.0),
        epochs=r.get("epochs", 50),
        batch_size=r.get("batch_size", 16),
        lr=r.get("lr", 1e-3),
        seed=r.get("seed", 0),
        variant=r.get("variant", "full"),
        code_dim=r.get("code_dim", 18),
        orth_form=r.get("orth_form", "gram_identity"),
        keep_fraction=r.get("keep_fraction", 0.5),
    )


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    from .synthgen import FAMILIES, GenerationConfig, build_dataset

    r = _Resolver(args, _load_file_config(args))
    config = GenerationConfig(
        out_dir=args.out,
        train=r.get("train", 512),
        val=r.get("val", 64),
        test=r.get("test", 128),
        seed=r.get("seed", 0),
        resolution=r.get("resolution", 128),
        dense_points=r.get("dense_points", 4096),
        families=tuple(r.get("families", ",".join(FAMILIES)).split(",")),
    )
    manifest = build_dataset(config)
    _write_snapshot(args.out, "synth", r.resolved | {"out": args.out})
    counts = {s: len(recs) for s, recs in manifest.splits.items()}
    print(f"dataset written to {args.out}: {counts}")
    return 0


def cmd_train(args) -> int:
    from .synthgen import load_manifest
    from .training import metric_table_text, evaluate, train

    r = _Resolver(args, _load_file_config(args))
    manifest = load_manifest(args.data)
    task = r.get("task", "reconstruct")
    model_config = _model_config(r, manifest, task)
    tc = _train_config(r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out, "train", r.resolved | {"data": args.data, "out": args.out})

    ckpt = out / "model.ckpt"
    model, history = train(manifest, model_config, tc, out_path=ckpt, log=print)
    (out / "training_history.json").write_text(json.dumps(history, indent=1))
    rows = evaluate(model, manifest, "test", "l1", tc)
    print(metric_table_text(rows))
    print(f"checkpoint: {ckpt}")
    return 0


def cmd_eval(args) -> int:
    from .synthgen import load_manifest
    from .training import evaluate, load_checkpoint, metric_table_csv, metric_table_text

    r = _Resolver(args, _load_file_config(args))
    metric = r.get("metric", "l1")
    split = r.get("split", "test")
    model, meta = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    rows = evaluate(model, manifest, split, metric, meta["train_config"])
    print(metric_table_text(rows, metric))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"eval_{split}_{metric}.csv").write_text(metric_table_csv(rows, metric))
        _write_snapshot(out, "eval", r.resolved | {"ckpt": args.ckpt, "data": args.data})
    return 0


def cmd_ablate(args) -> int:
    from .synthgen import load_manifest
    from .training import run_ablation

    r = _Resolver(args, _load_file_config(args))
    manifest = load_manifest(args.data)
    variants = _csv_strs(r.get("variants", "full,only_mlp"))
    for v in variants:
        if v not in VARIANTS:
            raise ValueError(f"unknown variant {v!r}; expected one of {VARIANTS}")
    seeds = [int(s) for s in _csv_strs(str(r.get("seeds", "0,1,2")))]
    model_config = _model_config(r, manifest)
    tc = _train_config(r)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_snapshot(out, "ablate", r.resolved | {"data": args.data, "out": args.out})

    results = run_ablation(manifest, model_config, tc, variants, seeds, out, log=print)
    lines = ["variant,seed,test_l1_cd"]
    for row in results:
        lines.append(f"{row['variant']},{row['seed']},{row['test_l1_cd']:.8f}")
    lines.append("")
    lines.append("variant,mean_test_l1_cd")
    for v in variants:
        vals = [row["test_l1_cd"] for row in results if row["variant"] == v]
        lines.append(f"{v},{np.mean(vals):.8f}")
    table = "\n".join(lines) + "\n"
    (out / "ablation_results.csv").write_text(table)
    print(table)
    return 0


def cmd_sweep(args) -> int:
    from .manipulation import export_sweep, sweep_dimension
    from .synthgen import load_image, load_manifest
    from .training import load_checkpoint

    r = _Resolver(args, _load_file_config(args))
    model, _ = load_checkpoint(args.ckpt)
    image = load_image(args.image)
    steps = r.get("steps", 7)
    values = _csv_floats(args.values) if args.values else None
    manifest = load_manifest(args.data) if args.data else None
    clouds, used = sweep_dimension(
        model, image, args.stage, args.dim, values=values, steps=steps, manifest=manifest
    )
    index = export_sweep(clouds, used, args.out, args.stage, args.dim)
    _write_snapshot(args.out, "sweep", r.resolved | {
        "ckpt": args.ckpt, "image": args.image, "stage": args.stage, "dim": args.dim,
        "values": used,
    })
    print(f"{len(clouds)} clouds exported; index: {index}")
    return 0


def cmd_swap(args) -> int:
    from .manipulation import swap_codes
    from .synthgen import load_image
    from .training import load_checkpoint

    r = _Resolver(args, _load_file_config(args))
    model, _ = load_checkpoint(args.ckpt)
    which = _parse_which(args.which)
    cloud = swap_codes(model, load_image(args.image_a), load_image(args.image_b), which)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_cloud(out / "swap.apc", cloud)
    _write_snapshot(out, "swap", r.resolved | {
        "ckpt": args.ckpt, "image_a": args.image_a, "image_b": args.image_b, "which": which,
    })
    print(f"swapped cloud: {out / 'swap.apc'}")
    return 0


def cmd_report(args) -> int:
    from .manipulation import disentanglement_report, report_to_csv
    from .synthgen import load_manifest
    from .training import load_checkpoint

    r = _Resolver(args, _load_file_config(args))
    model, _ = load_checkpoint(args.ckpt)
    manifest = load_manifest(args.data)
    report = disentanglement_report(
        model,
        manifest,
        split=r.get("split", "test"),
        permutations=r.get("permutations", 200),
        seed=r.get("seed", 0),
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report_to_csv(report))
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _write_snapshot(out, "report", r.resolved | {"ckpt": args.ckpt, "data": args.data})
    best = report["max"]
    print(
        f"strongest pairing: {best['dim']} vs {best['column']} |r|={best['r']:.3f} "
        f"(null 95% {best['null_q95']:.3f})"
    )
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    serve(args.ckpt, host=args.host, port=args.port)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="apc", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", help="JSON config file merged under explicit flags")

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("action", nargs="?", default="build", choices=["build"])
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int)
    p.add_argument("--val", type=int)
    p.add_argument("--test", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resolution", type=int)
    p.add_argument("--dense-points", dest="dense_points", type=int)
    p.add_argument("--families")
    add_config(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--task", choices=["reconstruct", "complete"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--variant", choices=list(VARIANTS))
    p.add_argument("--code-dim", dest="code_dim", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--orth-form", dest="orth_form", choices=["gram_identity", "literal"])
    p.add_argument("--points", type=int)
    p.add_argument("--channels")
    p.add_argument("--feature-dim", dest="feature_dim", type=int)
    p.add_argument("--image-resolution", dest="image_resolution", type=int)
    p.add_argument("--knn-k", dest="knn_k", type=int)
    p.add_argument("--partial-points", dest="partial_points", type=int)
    p.add_argument("--keep-fraction", dest="keep_fraction", type=float)
    add_config(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--metric", choices=["l1", "l2"])
    p.add_argument("--out")
    add_config(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare model variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants")
    p.add_argument("--seeds")
    for flag, dest, typ in [
        ("--epochs", "epochs", int),
        ("--batch-size", "batch_size", int),
        ("--lr", "lr", float),
        ("--alpha", "alpha", float),
        ("--code-dim", "code_dim", int),
        ("--points", "points", int),
        ("--feature-dim", "feature_dim", int),
        ("--image-resolution", "image_resolution", int),
    ]:
        p.add_argument(flag, dest=dest, type=typ)
    p.add_argument("--channels")
    add_config(p)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one code dimension and export clouds")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--stage", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--values", help="explicit comma-separated sweep values")
    p.add_argument("--data", help="manifest for the default +-3 std grid")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("swap", help="swap code components between two images")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image-a", dest="image_a", required=True)
    p.add_argument("--image-b", dest="image_b", required=True)
    p.add_argument("--which", required=True, help="e.g. z:1,mu:2 or all")
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(fn=cmd_swap)

    p = sub.add_parser("report", help="disentanglement diagnostics")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test"])
    p.add_argument("--permutations", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    add_config(p)
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("serve", help="run the inference service")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except Exception as exc:  # surface a diagnostic, exit nonzero
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
