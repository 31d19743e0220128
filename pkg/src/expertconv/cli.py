"""Command-line entry points.

Verbs: train, eval, gradcheck, ablate, export-data. Reports are written
as structured text plus rendered figures in the same directory. Exit
codes: 0 success, 1 validation failure, 2 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, restore_model
from .config import RunConfig, config_from_dict, config_hash, load_config
from .data import export_dataset, generate
from .evaluate import evaluate_model, report_to_json, report_to_tsv
from .figures import save_ablation_chart, save_accuracy_curve, save_selection_histogram
from .gradcheck import SUITES, THRESHOLD, run_suites
from .model import build_network
from .train import derive_rngs, run_training

__all__ = ["main", "run_ablation", "ABLATION_AXES"]

ABLATION_AXES = (
    "expert_ratio",
    "bank_size",
    "replacement_fraction",
    "diversity_weight",
    "variant",
)

_AXIS_VALUES = {
    "expert_ratio": (0.1, 0.2, 0.4),
    "bank_size": (1, 3, 5),
    "replacement_fraction": (0.25, 0.5, 1.0),
    "diversity_weight": (0.0, 0.1, 0.5),
    "variant": ("extra-channel", "expert-avg", "dynamic"),
}

ABLATION_SEEDS = 3


def _apply_axis(cfg: RunConfig, axis: str, value) -> RunConfig:
    if axis == "expert_ratio":
        backbone = dataclasses.replace(cfg.backbone, expert_fraction=value)
        return dataclasses.replace(cfg, backbone=backbone)
    if axis == "bank_size":
        if value == "baseline":
            backbone = dataclasses.replace(cfg.backbone, variant="baseline")
        else:
            backbone = dataclasses.replace(cfg.backbone, bank_size=value, variant="dynamic")
        # a single-expert bank is static, so the sweep compares plain
        # trajectories; adaptation off keeps every row in the same regime
        return dataclasses.replace(cfg, backbone=backbone, adapt_expert_rates=False)
    if axis == "replacement_fraction":
        backbone = dataclasses.replace(cfg.backbone, replacement_fraction=value)
        return dataclasses.replace(cfg, backbone=backbone)
    if axis == "diversity_weight":
        loss = dataclasses.replace(cfg.loss, diversity_weight=value)
        return dataclasses.replace(cfg, loss=loss)
    if axis == "variant":
        backbone = dataclasses.replace(cfg.backbone, variant=value)
        return dataclasses.replace(cfg, backbone=backbone)
    raise ValueError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")


def run_ablation(cfg: RunConfig, axis: str, out_dir: Path) -> list[dict]:
    """Train/evaluate every setting of one axis over shared seeds."""
    if axis not in ABLATION_AXES:
        raise ValueError(f"unknown ablation axis {axis!r}, expected one of {ABLATION_AXES}")
    values = _AXIS_VALUES[axis]
    if axis == "bank_size":
        values = ("baseline",) + values
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for value in values:
        aucs = []
        for offset in range(ABLATION_SEEDS):
            seed = cfg.seed + offset
            sub = _apply_axis(cfg, axis, value)
            sub = dataclasses.replace(
                sub, seed=seed, out_dir=str(out_dir / f"{value}_seed{seed}")
            )
            result = run_training(sub, render_figures=False)
            report = evaluate_model(result.model, result.dataset, split="test")
            aucs.append(report.auc)
        rows.append({"value": value, "aucs": aucs, "mean_auc": float(np.mean(aucs))})
    return rows


def _ablation_tsv(axis: str, rows: list[dict], base_seed: int) -> str:
    lines = [
        "# schema: ablation/v1",
        f"# axis: {axis}",
        f"# seeds: {list(range(base_seed, base_seed + ABLATION_SEEDS))}",
    ]
    if axis == "bank_size":
        lines.append("# note: rate adaptation disabled for every row of this sweep")
    header = ["value"] + [f"auc_seed{base_seed + k}" for k in range(ABLATION_SEEDS)]
    lines.append("\t".join(header + ["mean_auc"]))
    for row in rows:
        cells = [str(row["value"])] + [f"{a:.4f}" for a in row["aucs"]]
        cells.append(f"{row['mean_auc']:.4f}")
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"


def _cmd_train(args) -> int:
    cfg = load_config(args.config)
    if args.out is not None:
        cfg = dataclasses.replace(cfg, out_dir=args.out)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.variant is not None:
        backbone = dataclasses.replace(cfg.backbone, variant=args.variant)
        cfg = dataclasses.replace(cfg, backbone=backbone)
    result = run_training(cfg, stop_after=args.stop_after, resume=not args.no_resume)
    print(f"trained {result.iterations_run} iteration(s)")
    print(f"log: {result.log_path}")
    if result.checkpoint_path is not None:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    cfg = config_from_dict(ckpt.config)
    expected = config_hash(cfg)
    if expected != ckpt.config_hash:
        raise ValueError(
            f"checkpoint config hash {ckpt.config_hash} does not match its own "
            f"config payload ({expected}); file is corrupt"
        )
    dataset = generate(cfg.task)
    model = build_network(cfg.backbone, derive_rngs(cfg.seed)[0])
    rates = restore_model(model, ckpt, expected)
    out_dir = Path(args.out) if args.out is not None else Path(args.checkpoint).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    report = evaluate_model(
        model,
        dataset,
        split=args.split,
        metadata={
            "config_hash": ckpt.config_hash,
            "seed": cfg.seed,
            "version": __version__,
            "iteration": ckpt.iteration,
            "experts": len(dict(rates.items())),
        },
    )
    tsv_path = out_dir / "eval_report.tsv"
    tsv_path.write_text(report_to_tsv(report), encoding="utf-8")
    (out_dir / "eval_report.json").write_text(report_to_json(report), encoding="utf-8")
    save_accuracy_curve(report, out_dir / "accuracy_curve.png")
    save_selection_histogram(report, out_dir / "selection_histogram.png")
    print(f"split: {args.split}  samples: {report.metadata['n_samples']}")
    for ratio, acc in zip(report.ratios, report.accuracies):
        print(f"ratio {ratio:.2f}: {acc:.2f}%")
    print(f"auc: {report.auc:.2f}")
    print(f"report: {tsv_path}")
    return 0


def _cmd_gradcheck(args) -> int:
    results = run_suites(sabotage=args.sabotage)
    ok = True
    for name in SUITES:
        err = results[name]
        verdict = "PASS" if err < THRESHOLD else "FAIL"
        ok = ok and err < THRESHOLD
        print(f"{name}: max relative error {err:.3e} {verdict}")
    print(f"gradcheck: {'PASS' if ok else 'FAIL'} (threshold {THRESHOLD:.0e})")
    return 0 if ok else 1


def _cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    base = Path(args.out) if args.out is not None else Path(cfg.out_dir)
    out_dir = base / f"ablation_{args.axis}"
    rows = run_ablation(cfg, args.axis, out_dir)
    tsv = _ablation_tsv(args.axis, rows, cfg.seed)
    tsv_path = out_dir / f"ablation_{args.axis}.tsv"
    tsv_path.write_text(tsv, encoding="utf-8")
    save_ablation_chart(args.axis, rows, out_dir / f"ablation_{args.axis}.png")
    print(tsv, end="")
    print(f"table: {tsv_path}")
    return 0


def _cmd_export_data(args) -> int:
    cfg = load_config(args.config)
    task = cfg.task
    if args.seed is not None:
        task = dataclasses.replace(task, seed=args.seed)
    dataset = generate(task)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "dataset.bin"
    export_dataset(dataset, path)
    print(
        f"dataset: {path} ({len(dataset.train)} train / {len(dataset.val)} val / "
        f"{len(dataset.test)} test)"
    )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="expertconv",
        description="Train and evaluate expert-retrieval convolution classifiers "
        "on synthetic early-prediction tasks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train per a run config")
    p_train.add_argument("--config", required=True, help="run config JSON path")
    p_train.add_argument("--out", default=None, help="override the output directory")
    p_train.add_argument("--seed", type=int, default=None, help="override the run seed")
    p_train.add_argument("--variant", default=None, help="override the backbone variant")
    p_train.add_argument(
        "--stop-after", type=int, default=None, help="stop early after N total iterations"
    )
    p_train.add_argument(
        "--no-resume", action="store_true", help="ignore existing checkpoints"
    )
    p_train.set_defaults(fn=_cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint across observation ratios")
    p_eval.add_argument("--checkpoint", required=True, help="checkpoint path")
    p_eval.add_argument("--out", default=None, help="report directory")
    p_eval.add_argument(
        "--split", default="test", choices=("train", "val", "test"), help="dataset split"
    )
    p_eval.set_defaults(fn=_cmd_eval)

    p_grad = sub.add_parser("gradcheck", help="finite-difference verification suites")
    p_grad.add_argument(
        "--sabotage",
        default=None,
        metavar="SUITE",
        help="test hook: inject a failure into the named suite",
    )
    p_grad.set_defaults(fn=_cmd_gradcheck)

    p_abl = sub.add_parser("ablate", help="sweep one axis, training each setting")
    p_abl.add_argument("--config", required=True, help="run config JSON path")
    # validated in run_ablation so an unknown axis maps to exit code 1
    p_abl.add_argument(
        "--axis", required=True, help=f"one of {', '.join(ABLATION_AXES)}")
    p_abl.add_argument("--out", default=None, help="sweep output directory")
    p_abl.add_argument("--seed", type=int, default=None, help="override the base seed")
    p_abl.set_defaults(fn=_cmd_ablate)

    p_exp = sub.add_parser("export-data", help="write the synthetic dataset container")
    p_exp.add_argument("--config", required=True, help="run config JSON path")
    p_exp.add_argument("--out", required=True, help="output directory")
    p_exp.add_argument("--seed", type=int, default=None, help="override the data seed")
    p_exp.set_defaults(fn=_cmd_export_data)

    return parser


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())