"""``affect-forge`` command line.

Exit codes: 0 ok, 2 usage or config error, 3 I/O or malformed file,
4 non-finite loss, 5 gradient check outside tolerance.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import audit
from . import config as config_mod
from .checkpoint import CheckpointError
from .data import AnnotationError, ImageFormatError, generate_dataset, load_samples, stack_images, stack_labels, \
    synthesize
from .losses import evaluate
from .model import build_model, ensemble, predict_set
from .train import STAGES, NonFiniteLossError, StagePlan, TrainState, load_checkpoint, pretrain_backbone, \
    run_stage, save_checkpoint

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4, 5
MODE_KEY = "run.mode"
PRETRAIN_SEED_OFFSET = 1000

log = logging.getLogger("affect_forge")


class UsageError(Exception):
    pass


def _seed(flag: int | None) -> int:
    if flag is not None:
        return flag
    return config_mod.env_seed(0)


# ------------------------------------------------------------------ gen-data


def cmd_gen_data(args: argparse.Namespace) -> int:
    path = generate_dataset(args.n, args.mode, _seed(args.seed), args.out, args.size)
    print(path)
    return EXIT_OK


# --------------------------------------------------------------------- train


def _parse_sets(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {pair!r}")
        out[key.strip()] = value.strip()
    return out


def _check_size(samples, size: int, what: str) -> None:
    if samples and samples[0].image.shape != (3, size, size):
        raise UsageError(f"{what} images are {samples[0].image.shape[1:]}, model.input_size is {size}")


def _stages_to_run(requested: str, state: TrainState | None) -> list[str]:
    stages = list(STAGES) if requested == "all" else [requested]
    if state is None:
        return stages
    done = STAGES.index(state.stage)
    keep = []
    for s in stages:
        k = STAGES.index(s)
        if k < done or (k == done and s == "pretrain_backbone"):
            log.info("skipping %s: checkpoint is already past it", s)
            continue
        keep.append(s)
    return keep


def cmd_train(args: argparse.Namespace) -> int:
    overrides = _parse_sets(args.set)
    for key, value in (("model.backbone", args.backbone), ("train.seed", args.seed), ("data.train", args.data),
                       ("data.val", args.val), ("data.out", args.out)):
        if value is not None:
            overrides[key] = str(value)
    run = config_mod.load(args.config, overrides)

    state = None
    if args.resume:
        model, state, ckpt_cfg = load_checkpoint(args.resume)
        if model.cfg != run.model:
            raise UsageError(f"checkpoint {args.resume} was built with {model.cfg}, run config asks for {run.model}")
        if ckpt_cfg.get(MODE_KEY, run.mode) != run.mode:
            raise UsageError(f"checkpoint mode {ckpt_cfg[MODE_KEY]} differs from run mode {run.mode}")
    else:
        model = build_model(run.model, run.seed)

    stages = _stages_to_run(args.stage, state)
    needs_data = any(s != "pretrain_backbone" for s in stages)
    train = val = None
    if needs_data:
        if not run.data_train:
            raise UsageError("data.train (or --data) is required for the frozen_backbone and joint stages")
        train = load_samples(run.data_train, run.mode)
        _check_size(train, run.model.input_size, "training")
        if run.data_val:
            val = load_samples(run.data_val, run.mode)
            _check_size(val, run.model.input_size, "validation")

    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    name = run.model.backbone
    log_path = out / f"{name}_log.csv"
    extra = {MODE_KEY: run.mode, "train.seed": str(run.seed)}
    state = state or TrainState("pretrain_backbone", 0, 0, run.train.new_optimizer())
    last = None
    for stage in stages:
        ckpt_path = out / f"{name}_{stage}.ckpt"
        if stage == "pretrain_backbone":
            data = synthesize(run.pretrain_samples, "LSD", run.seed + PRETRAIN_SEED_OFFSET, run.model.input_size)
            pretrain_backbone(model, data, run.epochs[stage], run.seed, run.train, state, log_path)
            save_checkpoint(model, state, ckpt_path, extra)
        else:
            def checkpoint_epoch(st, _record, path=ckpt_path):
                save_checkpoint(model, st, path, extra)

            if state.stage != stage:
                state = TrainState(stage, 0, state.global_step, run.train.new_optimizer())
            run_stage(model, StagePlan.default(stage, run.epochs[stage]), train, val, run.train, run.seed, state,
                      log_path, checkpoint_epoch)
            save_checkpoint(model, state, ckpt_path, extra)
        last = ckpt_path
        print(f"{stage}: step {state.global_step} -> {ckpt_path}")
    if last is None:
        print("nothing to do: checkpoint already covers the requested stage(s)")
    return EXIT_OK


# ---------------------------------------------------------------------- eval


def _mode_of(model, cfg: dict[str, str]) -> str:
    if MODE_KEY in cfg:
        return cfg[MODE_KEY]
    return "LSD" if model.cfg.tasks == ("EXPR",) else "MTL"


def cmd_eval(args: argparse.Namespace) -> int:
    paths = args.checkpoint
    if len(paths) == 2 and not args.ensemble:
        raise UsageError("two checkpoints need --ensemble")
    if args.ensemble and len(paths) != 2:
        raise UsageError("--ensemble takes exactly two checkpoints")
    loaded = [load_checkpoint(p)[::2] for p in paths]
    models = [m for m, _ in loaded]
    modes = {_mode_of(m, c) for m, c in loaded}
    if len(modes) != 1:
        raise UsageError(f"checkpoints disagree on mode: {sorted(modes)}")
    a = models[0].cfg
    for m in models[1:]:
        b = m.cfg
        for attr in ("n_expr_classes", "n_aus", "tasks", "input_size"):
            if getattr(a, attr) != getattr(b, attr):
                raise UsageError(f"incompatible checkpoints: {attr} {getattr(a, attr)} vs {getattr(b, attr)}")
    mode = modes.pop()
    samples = load_samples(args.data, mode)
    _check_size(samples, a.input_size, "evaluation")
    images = stack_images(samples)
    preds = [predict_set(m, images, args.batch_size) for m in models]
    combined = preds[0] if len(preds) == 1 else ensemble(preds[0], preds[1])
    va, expr, aus = stack_labels(samples)
    report = evaluate(combined, va, expr, aus, a.n_expr_classes, mode)
    print(report.to_text().rstrip("\n") if args.quiet else report.table())
    if args.report:
        Path(args.report).write_text(report.to_text().rstrip("\n") + "\n", encoding="utf-8")
    return EXIT_OK


# ----------------------------------------------------------------- gradcheck


def cmd_gradcheck(args: argparse.Namespace) -> int:
    results = audit.run_scope(args.scope, _seed(args.seed))
    print(audit.format_results(results))
    bad = [r for r in results if not r.ok]
    if bad:
        print("outside tolerance: " + ", ".join(r.name for r in bad), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="affect-forge", description="Synthetic multi-task facial affect toolkit.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset and print its manifest path")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--mode", choices=["MTL", "LSD"], required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=64, help="image side in pixels (default 64)")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run training stage(s) and write checkpoints plus a CSV log")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--stage", choices=[*STAGES, "all"], default="all")
    t.add_argument("--backbone", choices=["resnet_lite", "hrnet_lite"])
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", metavar="CKPT")
    t.add_argument("--data", help="training manifest (overrides data.train)")
    t.add_argument("--val", help="validation manifest (overrides data.val)")
    t.add_argument("--out", help="output directory (overrides data.out)")
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override any config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score one checkpoint, or ensemble two")
    e.add_argument("--checkpoint", nargs="+", required=True, metavar="CKPT")
    e.add_argument("--data", required=True, help="annotation manifest to score against")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--quiet", action="store_true", help="print key=value lines only")
    e.add_argument("--report", help="also write the key=value report here")
    e.add_argument("--batch-size", type=int, default=64)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference audit of the gradient code")
    c.add_argument("--scope", choices=audit.SCOPES, required=True)
    c.add_argument("--seed", type=int)
    c.set_defaults(func=cmd_gradcheck)
    return ap


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, config_mod.ConfigError) as exc:
        print(f"affect-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLossError as exc:
        print(f"affect-forge: numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError, AnnotationError, ImageFormatError) as exc:
        print(f"affect-forge: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"affect-forge: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
