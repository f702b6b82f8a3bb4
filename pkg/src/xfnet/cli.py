"""Command-line entry points: train, eval, gradcheck, shapes, synth, ablate.

Every command that reads a model config accepts either a path to a
``key = value`` file or the literal word ``default`` for the stock
architecture.  All file outputs are written to a temporary name and renamed
into place, so an interrupted run never leaves a half-written artifact.
"""

from __future__ import annotations

import argparse
import os
import sys
import tempfile

from . import data as data_mod
from . import gradcheck as gradcheck_mod
from .config import ConfigError, ModelConfig, load_model_config
from .model import build_model, shape_trace
from .train import (TrainConfig, attention_ablation_variants, evaluate,
                    fusion_ablation_variants, run_ablation, train)
from .weights import load_weights, save_weights


def _load_config(spec: str) -> ModelConfig:
    if spec == "default":
        return ModelConfig()
    return load_model_config(spec)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(p) for p in text.lower().split("x"))
        return h, w
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"size must look like 64x64, got {text!r}") from None


def _parse_seeds(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(p) for p in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"seeds must be comma-separated integers, got {text!r}") from None


def _write_text(path: str, content: str) -> None:
    directory = os.path.dirname(path) or "."
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _train_config(args, seed: int) -> TrainConfig:
    base = TrainConfig()
    return TrainConfig(
        batch_size=args.batch_size if args.batch_size else base.batch_size,
        initial_lr=args.lr if args.lr else base.initial_lr,
        epochs=args.epochs if args.epochs else base.epochs,
        seed=seed,
    )


def _load_sets(args, cfg: ModelConfig):
    train_set = data_mod.load_dataset(args.data, target_size=cfg.input_size)
    if args.val:
        val_set = data_mod.load_dataset(args.val, target_size=cfg.input_size)
    else:
        train_set, val_set = data_mod.split_dataset(
            train_set, val_fraction=args.val_fraction, seed=args.seed)
    return train_set, val_set


def _cmd_train(args) -> int:
    cfg = _load_config(args.config)
    train_set, val_set = _load_sets(args, cfg)
    model = build_model(cfg, seed=args.seed)
    tcfg = _train_config(args, args.seed)
    print(f"training on {len(train_set)} samples, validating on {len(val_set)}")
    history = train(model, train_set, val_set, tcfg, log=print)
    os.makedirs(args.out, exist_ok=True)
    weights_path = os.path.join(args.out, "model.xfw")
    save_weights(model, weights_path)
    _write_text(os.path.join(args.out, "history.txt"), history.to_table())
    print(f"best epoch {history.best_epoch} "
          f"(val_acc {history.best_val_acc:.4f}); saved {weights_path}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _load_config(args.config)
    model = build_model(cfg, seed=0)
    load_weights(args.weights, model)
    dataset = data_mod.load_dataset(args.data, target_size=cfg.input_size)
    result = evaluate(model, dataset, batch_size=args.batch_size or 64)
    auc = f"{result.auc:.4f}" if result.auc_defined else f"undefined ({result.note})"
    print(f"accuracy {result.accuracy:.4f}  auc {auc}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = gradcheck_mod.run_gradient_suite(seed=args.seed)
    failed = False
    for name, err in results:
        ok = err < gradcheck_mod.TOLERANCE
        failed |= not ok
        print(f"{name:<26} {err:12.3e}  {'ok' if ok else 'FAIL'}")
    worst = gradcheck_mod.worst_error(results)
    print(f"worst relative error {worst:.3e} "
          f"({'below' if worst < gradcheck_mod.TOLERANCE else 'ABOVE'} "
          f"{gradcheck_mod.TOLERANCE})")
    return 1 if failed else 0


def _cmd_shapes(args) -> int:
    cfg = _load_config(args.config)
    print(str(shape_trace(cfg)))
    return 0


def _cmd_synth(args) -> int:
    spec = data_mod.SynthSpec(per_class=args.per_class, image_size=args.size,
                              kind=args.kind, seed=args.seed)
    dataset = data_mod.synth_dataset(spec)
    data_mod.write_dataset_png(dataset, args.out)
    print(f"wrote {len(dataset)} images ({spec.kind}, {args.size[0]}x{args.size[1]}) "
          f"under {args.out}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    if args.data:
        train_set, val_set = _load_sets(args, cfg)
    else:
        spec = data_mod.SynthSpec(per_class=args.per_class, image_size=cfg.input_size,
                                  seed=args.seed)
        train_set, val_set = data_mod.split_dataset(
            data_mod.synth_dataset(spec), val_fraction=args.val_fraction,
            seed=args.seed)
        print(f"no --data given; using {len(train_set)}+{len(val_set)} "
              f"synthetic samples")
    variants = []
    if args.which in ("attention", "both"):
        variants += attention_ablation_variants(cfg)
    if args.which in ("fusion", "both"):
        variants += fusion_ablation_variants(cfg)
    tcfg = _train_config(args, args.seed)
    rows = run_ablation(variants, train_set, val_set, tcfg, args.seeds,
                        log=print if args.verbose else None)
    print(f"{'variant':<24} {'train_loss':>10} {'train_acc':>10} {'val_acc':>10}")
    for row in rows:
        print(f"{row.label:<24} {row.mean_train_loss:>10.4f} "
              f"{row.mean_train_acc:>10.4f} {row.mean_val_acc:>10.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xfnet",
        description="attention-augmented Xception training and inspection")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config(p):
        p.add_argument("--config", default="default",
                       help="model config file, or 'default'")

    def add_train_knobs(p):
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--batch-size", type=int, default=None)
        p.add_argument("--lr", type=float, default=None)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--val", default=None, help="validation dataset root")
        p.add_argument("--val-fraction", type=float, default=0.2,
                       help="held-out share when --val is absent")

    p = sub.add_parser("train", help="train a model and save weights + history")
    add_config(p)
    p.add_argument("--data", required=True, help="training dataset root")
    p.add_argument("--out", default="run", help="output directory")
    add_train_knobs(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate saved weights on a dataset")
    add_config(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("shapes", help="print the layer-by-layer shape trace")
    add_config(p)
    p.set_defaults(func=_cmd_shapes)

    p = sub.add_parser("synth", help="generate a synthetic two-class image tree")
    p.add_argument("--out", required=True)
    p.add_argument("--kind", default="frequency-texture",
                   choices=["frequency-texture", "blob-vs-stripe"])
    p.add_argument("--per-class", type=int, default=64)
    p.add_argument("--size", type=_parse_size, default=(64, 64))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ablate", help="train architecture variants and compare")
    add_config(p)
    p.add_argument("--data", default=None, help="dataset root (synthetic if absent)")
    p.add_argument("--which", default="both",
                   choices=["attention", "fusion", "both"])
    p.add_argument("--seeds", type=_parse_seeds, default=(0, 1, 2))
    p.add_argument("--per-class", type=int, default=32)
    p.add_argument("--verbose", action="store_true")
    add_train_knobs(p)
    p.set_defaults(func=_cmd_ablate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
