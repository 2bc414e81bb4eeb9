#!/usr/bin/env python3
"""Write a small untrained (randomized-head) checkpoint for service demos
and UI integration tests. The model is architecturally complete, so all
capture/sweep/swap identities hold; it just hasn't learned anything."""
import argparse

import torch

from apc.config import ModelConfig, TrainConfig
from apc.deformation import build_model
from apc.training import save_checkpoint


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("out")
    parser.add_argument("--points", type=int, default=192)
    parser.add_argument("--code-dim", type=int, default=18)
    parser.add_argument("--resolution", type=int, default=64)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    config = ModelConfig(
        n_points=args.points,
        channels=(16, 32, 64),
        code_dim=args.code_dim,
        feature_dim=96,
        image_resolution=args.resolution,
        image_channels=(16, 32, 64, 128),
        knn_k=8,
    )
    model = build_model(config, args.seed)
    with torch.no_grad():
        # non-zero head so sweeps and swaps visibly move points
        model.head.out.weight.normal_(std=0.05)
        model.head.out.bias.normal_(std=0.02)
    model.eval()
    save_checkpoint(args.out, model, TrainConfig(code_dim=args.code_dim), 0, [])
    print(f"demo checkpoint written to {args.out}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
