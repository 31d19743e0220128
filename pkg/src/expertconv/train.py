"""Training loop: iterate, log, checkpoint, resume.

(config, seed) fully determines the run. Model init, batch drawing and
retrieval noise use three independent streams spawned from the seed, and
checkpoints carry the generator states, so a resumed run continues the
exact trajectory of an uninterrupted one.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, restore_model, save_checkpoint
from .config import RunConfig, config_hash, current_lr, trajectory_dict
from .data import Dataset, generate
from .figures import save_rate_band, save_training_curves
from .model import Network, build_network
from .rate_adapt import ExpertRates, train_iteration

__all__ = [
    "LOG_SCHEMA",
    "TrainResult",
    "derive_rngs",
    "latest_checkpoint",
    "parse_log",
    "run_training",
]

LOG_SCHEMA = "training-log/v1"

_LOG_COLUMNS = (
    "iteration",
    "lr",
    "train_loss",
    "val_loss",
    "grad_norm",
    "kernel_norm_max",
    "rate_min",
    "rate_mean",
    "rate_max",
    "discrepancy",
)


@dataclass
class TrainResult:
    model: Network
    rates: ExpertRates
    dataset: Dataset
    iterations_run: int
    checkpoint_path: Path | None
    log_path: Path
    rows: list[dict]


def derive_rngs(seed: int):
    """Independent streams for model init, batch drawing, retrieval noise."""
    init_ss, batch_ss, noise_ss = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(init_ss),
        np.random.default_rng(batch_ss),
        np.random.default_rng(noise_ss),
    )


def latest_checkpoint(out_dir) -> Path | None:
    best, best_iter = None, -1
    for path in Path(out_dir).glob("checkpoint_*.bin"):
        m = re.fullmatch(r"checkpoint_(\d+)\.bin", path.name)
        if m and int(m.group(1)) > best_iter:
            best, best_iter = path, int(m.group(1))
    return best


def _format_cell(value) -> str:
    return "-" if value is None else f"{value:.10g}"


def _log_row(report, iteration: int, lr: float, kernel_norm_max: float | None) -> dict:
    table = report.rates_after
    return {
        "iteration": iteration,
        "lr": lr,
        "train_loss": report.train_loss,
        "val_loss": report.val_loss,
        "grad_norm": report.grad_norm,
        "kernel_norm_max": kernel_norm_max,
        "rate_min": min(table.values()) if table else None,
        "rate_mean": (sum(table.values()) / len(table)) if table else None,
        "rate_max": max(table.values()) if table else None,
        "discrepancy": report.discrepancy,
    }


def _max_expert_kernel_norm(model: Network) -> float | None:
    """Largest expert-kernel Frobenius norm, the runaway-spread canary.

    The kernel-distance reward is unbounded below, so under a nonzero
    diversity weight the bank kernels can grow exponentially; this column
    makes that visible long before the loss turns non-finite.
    """
    norms = [
        float(np.linalg.norm(e.kernel.data))
        for mod in model.expert_modules
        for bank in mod.banks
        for e in bank.experts
    ]
    return max(norms) if norms else None


def parse_log(path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#") or line.startswith("iteration\t"):
                continue
            cells = line.split("\t")
            row = {}
            for name, cell in zip(_LOG_COLUMNS, cells):
                if cell == "-":
                    row[name] = None
                elif name == "iteration":
                    row[name] = int(cell)
                else:
                    row[name] = float(cell)
            rows.append(row)
    return rows


def run_training(
    cfg: RunConfig,
    *,
    stop_after: int | None = None,
    resume: bool = True,
    render_figures: bool = True,
) -> TrainResult:
    """Train per the config; returns the final state and artifact paths.

    ``stop_after`` ends the run early after that many total iterations
    (simulating an interruption); a later call with the same config and
    ``resume`` picks up from the last checkpoint.
    """
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = generate(cfg.task)
    init_rng, batch_rng, noise_rng = derive_rngs(cfg.seed)
    model = build_network(cfg.backbone, init_rng)
    rates = ExpertRates.for_model(model, cfg.lr)
    expected_hash = config_hash(cfg)

    start = 0
    log_path = out_dir / "training_log.tsv"
    ckpt = latest_checkpoint(out_dir) if resume else None
    if ckpt is not None:
        loaded = load_checkpoint(ckpt)
        rates = restore_model(model, loaded, expected_hash)
        batch_rng.bit_generator.state = loaded.rng_states["batch"]
        noise_rng.bit_generator.state = loaded.rng_states["noise"]
        start = loaded.iteration

    end = cfg.iterations if stop_after is None else min(stop_after, cfg.iterations)
    if start >= end:
        rows = parse_log(log_path) if log_path.exists() else []
        return TrainResult(model, rates, dataset, 0, ckpt, log_path, rows)

    mode = "a" if start > 0 and log_path.exists() else "w"
    rows: list[dict] = []
    last_ckpt: Path | None = ckpt
    with open(log_path, mode, encoding="utf-8") as log:
        if mode == "w":
            log.write(f"# schema: {LOG_SCHEMA}\n")
            log.write(f"# config_hash: {expected_hash}\n")
            log.write("\t".join(_LOG_COLUMNS) + "\n")
        for it in range(start, end):
            lr_now = current_lr(cfg, it)
            try:
                rates, report = train_iteration(
                    model,
                    rates,
                    dataset,
                    batch_rng,
                    noise_rng,
                    lr=lr_now,
                    batch_size=cfg.batch_size,
                    loss_cfg=cfg.loss,
                    weight_decay=cfg.weight_decay,
                    adapt=cfg.adapt_expert_rates,
                    reuse_gradients=cfg.reuse_gradients,
                )
            except ValueError as err:
                hint = ""
                if cfg.loss.diversity_weight > 0:
                    hint = (
                        "; the kernel-distance reward is unbounded, so a nonzero"
                        " diversity weight can spread expert kernels exponentially"
                        " (watch the kernel_norm_max log column, lower the weight"
                        " or the learning rate, or shorten the run)"
                    )
                raise ValueError(f"iteration {it + 1}: {err}{hint}") from err
            row = _log_row(report, it + 1, lr_now, _max_expert_kernel_norm(model))
            rows.append(row)
            log.write("\t".join(_format_cell(row[c]) for c in _LOG_COLUMNS) + "\n")
            done = it + 1
            if done % cfg.checkpoint_every == 0 or done == end:
                states = {
                    "batch": batch_rng.bit_generator.state,
                    "noise": noise_rng.bit_generator.state,
                }
                last_ckpt = out_dir / f"checkpoint_{done:06d}.bin"
                save_checkpoint(
                    last_ckpt,
                    model,
                    rates,
                    done,
                    states,
                    expected_hash,
                    trajectory_dict(cfg),
                )
    if render_figures:
        all_rows = parse_log(log_path)
        save_training_curves(all_rows, out_dir / "training_curves.png")
        save_rate_band(all_rows, out_dir / "expert_rates.png")
    return TrainResult(model, rates, dataset, end - start, last_ckpt, log_path, rows)