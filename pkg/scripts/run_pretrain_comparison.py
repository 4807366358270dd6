"""Paired-seed comparison: pretrained vs randomly initialised backbone under a frozen-backbone stage."""

import argparse
import time

from affect_forge.data import synthesize
from affect_forge.model import ModelConfig, build_model
from affect_forge.train import StagePlan, TrainConfig, evaluate_model, pretrain_backbone, run_stage


def frozen_stage_f1(backbone: str, pretrain: bool, seed: int, args) -> float:
    size = args.size
    model = build_model(ModelConfig.for_mode("LSD", backbone=backbone, input_size=size), seed)
    if pretrain:
        pretrain_backbone(model, synthesize(args.n_pretrain, "LSD", 100 + seed, size), args.pretrain_epochs, seed)
    train = synthesize(args.n_train, "LSD", 200 + seed, size)
    val = synthesize(args.n_val, "LSD", 300 + seed, size)
    cfg = TrainConfig(mode="LSD")
    run_stage(model, StagePlan.default("frozen_backbone", args.epochs), train, None, cfg, seed)
    return evaluate_model(model, val, "LSD").lsd_f1


def main() -> None:
    ap = argparse.ArgumentParser()
    ap.add_argument("--backbone", default="resnet_lite", choices=["resnet_lite", "hrnet_lite"])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--size", type=int, default=32)
    ap.add_argument("--n-pretrain", type=int, default=500)
    ap.add_argument("--pretrain-epochs", type=int, default=5)
    ap.add_argument("--n-train", type=int, default=256)
    ap.add_argument("--n-val", type=int, default=256)
    ap.add_argument("--epochs", type=int, default=5)
    args = ap.parse_args()

    wins = 0
    for seed in args.seeds:
        t0 = time.time()
        pre = frozen_stage_f1(args.backbone, True, seed, args)
        rand = frozen_stage_f1(args.backbone, False, seed, args)
        wins += pre > rand
        print(f"seed {seed}: pretrained {pre:.4f}  random {rand:.4f}  ({time.time() - t0:.1f}s)", flush=True)
    print(f"pretrained wins {wins}/{len(args.seeds)}")


if __name__ == "__main__":
    main()
