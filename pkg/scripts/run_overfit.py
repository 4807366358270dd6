"""Overfit both backbones on a small synthetic MTL set and report train metrics."""

import argparse
import time

from affect_forge.data import synthesize
from affect_forge.model import ModelConfig, build_model
from affect_forge.train import StagePlan, TrainConfig, evaluate_model, run_stage


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--n", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--backbone", choices=["resnet_lite", "hrnet_lite", "both"], default="both")
    args = ap.parse_args()

    samples = synthesize(args.n, "MTL", args.seed, args.size)
    backbones = ["resnet_lite", "hrnet_lite"] if args.backbone == "both" else [args.backbone]
    for name in backbones:
        model = build_model(ModelConfig.for_mode("MTL", backbone=name, input_size=args.size), args.seed)
        t0 = time.time()
        report = run_stage(model, StagePlan.default("joint", args.epochs), samples, cfg=TrainConfig(), seed=args.seed)
        m = evaluate_model(model, samples, "MTL")
        losses = report.losses
        print(f"{name}: {time.time() - t0:.1f}s  loss {losses[0]:.4f} -> {losses[-1]:.4f} "
              f"({losses[-1] / losses[0]:.3%})")
        print(m.table())


if __name__ == "__main__":
    main()
