"""Command-line entry point.

Subcommands: gen-data, train, eval, analyze, gradcheck, compare. Every
command is reproducible: (version, config, seed) determine all output bytes.
Timestamps are confined to the run.log sidecar. Exit codes: 0 success,
1 usage or config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import time

import numpy as np

from . import __version__
from .analysis import SelectionReport, cls_attention_grid, export_attention_maps
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_run_config
from .data import generate_depth_selective, load_dataset, save_dataset, split
from .errors import (
    ConfigError,
    FileFormatError,
    GatedPromptError,
    ModeError,
    NumericError,
    TrainingAbort,
)
from .figures import (
    render_attention_figure,
    render_metrics_figure,
    render_selection_figure,
    selection_ratio_svg,
)
from .prompts import gate_bank_from_params, gated_forward, temperature_bank_from_params
from .tensor import Tensor, cross_entropy, finite_diff_check
from .training import (
    ablation_csv,
    build_initial_checkpoint,
    evaluate,
    forward_logits,
    init_backbone_checkpoint,
    run_ablation,
    train,
    train_config_from_checkpoint,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2
EXIT_IO = 3

WORKERS_ENV = "GATEDPROMPT_MAX_WORKERS"


class _NumericFailure(GatedPromptError):
    """Internal: map a failed check to exit code 2."""


def _load_config(args) -> RunConfig:
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = RunConfig(model=cfg.model,
                        train=dataclasses.replace(cfg.train, seed=args.seed),
                        data=cfg.data, compare=cfg.compare, output_dir=cfg.output_dir)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    return cfg


def _prepare_out(cfg: RunConfig) -> str:
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "resolved_config.yaml"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_fingerprint={cfg.fingerprint()}\n")
        fh.write(cfg.resolved_yaml())
    return out


def _log(out_dir: str, message: str) -> None:
    with open(os.path.join(out_dir, "run.log"), "a", encoding="utf-8") as fh:
        fh.write(f"[{time.strftime('%Y-%m-%dT%H:%M:%S')}] {message}\n")


def _require_dataset(path: str):
    if not path:
        raise ConfigError("config has no dataset path (data.path)")
    if not os.path.exists(path):
        raise FileNotFoundError(f"dataset file not found: {path}")
    return load_dataset(path)


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    path = args.out or cfg.data.path
    if not path:
        raise ConfigError("no output path: set data.path in the config or pass --out")
    ds = generate_depth_selective(
        seed=cfg.data.seed, n=cfg.data.n, num_classes=cfg.model.num_classes,
        depth=cfg.data.depth, image_size=cfg.model.image_size,
        channels=cfg.model.channels, patch_size=cfg.model.patch_size,
        noise=cfg.data.noise)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    save_dataset(path, ds)
    print(f"wrote {len(ds)} samples, {ds.num_classes} classes, "
          f"depth {cfg.data.depth} -> {path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_config(args)
    dataset = _require_dataset(cfg.data.path)
    train_ds, val_ds = split(dataset, cfg.data.split_fraction, cfg.data.seed + 1)
    out = _prepare_out(cfg)
    backbone = load_checkpoint(args.backbone, expected_config=cfg.model) \
        if args.backbone else None

    _log(out, f"train start mode={cfg.train.mode} seed={cfg.train.seed}")
    tuned, metrics = train(cfg.model, cfg.train, train_ds, val_ds, backbone=backbone)
    _log(out, f"train done wall_time={metrics.wall_time:.2f}s")

    fp = cfg.fingerprint()
    tuned.extras["config_fingerprint"] = fp
    save_checkpoint(os.path.join(out, "checkpoint.ckpt"), tuned)
    with open(os.path.join(out, "metrics.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(metrics.to_csv(fingerprint=fp))
    acc_points = [(r[0], r[3]) for r in metrics.records if r[1] == "train"]
    render_metrics_figure(range(1, len(metrics.train_losses) + 1),
                          metrics.train_losses, acc_points,
                          os.path.join(out, "metrics.png"))
    final = [r for r in metrics.records if r[1] == "train"]
    if final:
        print(f"final train accuracy {final[-1][3]:.4f}, loss {final[-1][2]:.4f}")
    print(f"artifacts in {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _require_dataset(cfg.data.path)
    ckpt = load_checkpoint(args.checkpoint, expected_config=cfg.model)
    if args.split in ("train", "val"):
        train_ds, val_ds = split(dataset, cfg.data.split_fraction, cfg.data.seed + 1)
        dataset = train_ds if args.split == "train" else val_ds
    acc, loss = evaluate(ckpt, dataset)
    print(f"split={args.split} accuracy={acc!r} loss={loss!r}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "eval.csv"), "w", encoding="utf-8",
                  newline="\n") as fh:
            fh.write(f"# config_fingerprint={cfg.fingerprint()}\n")
            fh.write("split,loss,accuracy\n")
            fh.write(f"{args.split},{loss!r},{acc!r}\n")
    return EXIT_OK


def cmd_analyze(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if ckpt.extras.get("mode") != "gated":
        raise ModeError(
            f"analysis requires a gated-mode checkpoint, got mode "
            f"'{ckpt.extras.get('mode')}'")
    out = args.out or "analysis"
    os.makedirs(out, exist_ok=True)
    fp = ckpt.extras.get("config_fingerprint", "")

    bank = gate_bank_from_params(ckpt.params, ckpt.config)
    report = SelectionReport.from_gates(bank.soft_values(), run_id=fp or "untracked")
    with open(os.path.join(out, "selection_report.txt"), "w", encoding="utf-8") as fh:
        if fp:
            fh.write(f"# config_fingerprint={fp}\n")
        fh.write(report.to_text())
    selection_ratio_svg(report.ratios, os.path.join(out, "selection_ratios.svg"))
    render_selection_figure(report, os.path.join(out, "selection_ratios.png"))

    # Attention export needs an input image: first sample of the dataset if
    # given, otherwise a deterministic synthetic probe.
    if args.config:
        cfg = load_run_config(args.config)
        ds = _require_dataset(cfg.data.path)
        image = ds.images[args.image_index:args.image_index + 1]
    else:
        c = ckpt.config
        rng = np.random.default_rng(ckpt.seed)
        image = rng.uniform(-1, 1, size=(1, c.image_size, c.image_size, c.channels))

    blocks = [int(b) for b in args.blocks.split(",")] if args.blocks \
        else list(range(ckpt.config.num_blocks))
    tcfg = train_config_from_checkpoint(ckpt)
    temps = temperature_bank_from_params(ckpt.params, ckpt.config) \
        if tcfg.with_temps else None
    states: list = []
    gated_forward(Tensor(image), ckpt.params, ckpt.config, bank, temps,
                  training=False, collector=states)
    export_attention_maps(states, ckpt.config, tcfg.n_prompts, blocks, out, fingerprint=fp)
    for state in states:
        if state.block in blocks:
            grid = cls_attention_grid(state.scores, tcfg.n_prompts, ckpt.config.grid_size)
            render_attention_figure(grid, state.block,
                                    os.path.join(out, f"attention_block{state.block}.png"))
    print(f"selection ratios: {np.array2string(report.ratios, precision=4)}")
    print(f"analysis artifacts in {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    ckpt = build_initial_checkpoint(cfg.model, cfg.train)
    trainable_count = sum(ckpt.params[n].size for n in ckpt.trainable)
    if trainable_count > args.max_params:
        raise ConfigError(
            f"config has {trainable_count} trainable values, above the gradcheck cap "
            f"of {args.max_params}; finite differences need two forwards per value, "
            f"so use a smaller toy config or raise --max-params")

    rng = np.random.default_rng(cfg.train.seed)
    images = Tensor(rng.uniform(-1.0, 1.0, size=(args.batch, cfg.model.image_size,
                                                 cfg.model.image_size, cfg.model.channels)))
    labels = rng.integers(0, cfg.model.num_classes, size=args.batch)

    def loss_fn(params):
        return cross_entropy(forward_logits(params, cfg.model, cfg.train, images,
                                            training=False), labels)

    report = finite_diff_check(loss_fn, ckpt.params, h=args.h, tol=args.tolerance)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "gradcheck_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# config_fingerprint={cfg.fingerprint()}\n")
        fh.write(report.format_report())
    print(f"checked {report.num_checked} values, max relative error "
          f"{report.max_rel_err:.3e}, tolerance {args.tolerance:g}")
    if not report.passed:
        print(f"FAIL: {len(report.failures())} values above tolerance", file=sys.stderr)
        raise _NumericFailure("gradient check failed")
    print("PASS")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _load_config(args)
    dataset = _require_dataset(cfg.data.path)
    train_ds, val_ds = split(dataset, cfg.data.split_fraction, cfg.data.seed + 1)
    out = _prepare_out(cfg)
    backbone = load_checkpoint(args.backbone, expected_config=cfg.model) \
        if args.backbone else init_backbone_checkpoint(cfg.model, cfg.train.seed)

    workers = int(os.environ.get(WORKERS_ENV, "1"))
    _log(out, f"compare start cells={cfg.compare}")
    cells = run_ablation(cfg.model, cfg.train, train_ds, val_ds,
                         cfg.compare.modes, cfg.compare.shaping, cfg.compare.gates,
                         backbone, max_workers=max(1, workers))
    _log(out, "compare done")
    csv_text = ablation_csv(cells, cfg.train, fingerprint=cfg.fingerprint())
    with open(os.path.join(out, "ablation.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write(csv_text)
    print(csv_text, end="")
    print(f"ablation table in {out}/ablation.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gatedprompt",
        description="Gated prompt tuning on a small vision transformer: "
                    "train, evaluate, analyze gates, check gradients.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="run config YAML")
        p.add_argument("--seed", type=int, default=None, help="override train.seed")
        p.add_argument("--out", default=None, help="override the output location")

    p = sub.add_parser("gen-data", help="generate a depth-selective synthetic dataset")
    common(p)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("train", help="train prompts against a frozen backbone")
    common(p)
    p.add_argument("--backbone", default=None, help="optional backbone checkpoint")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "full"), default="val")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("analyze", help="selection ratios and attention maps of a gated checkpoint")
    common(p, config_required=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--blocks", default=None, help="comma-separated block indices")
    p.add_argument("--image-index", type=int, default=0)
    p.set_defaults(fn=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model gradient")
    common(p)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--batch", type=int, default=2)
    p.add_argument("--max-params", type=int, default=5000,
                   help="refuse configs with more trainable values than this")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("compare", help="ablation grid over modes, shaping, gate variants")
    common(p)
    p.add_argument("--backbone", default=None, help="optional shared backbone checkpoint")
    p.set_defaults(fn=cmd_compare)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (_NumericFailure, NumericError, TrainingAbort) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, OSError, FileFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except GatedPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
