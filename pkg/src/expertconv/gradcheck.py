"""Finite-difference verification suites on tiny shapes.

Four suites cover the differentiable surface: raw tensor ops, one
expert-retrieval layer, the full model under the complete loss, and the
closed-form rate derivative. Retrieval noise is frozen before checking
and the relaxed ("soft") forward is used where the hard forward is
piecewise constant, so central differences probe the same function the
backward pass differentiates. Every suite is seeded; repeated runs give
identical numbers.
"""

from __future__ import annotations

import numpy as np

from .data import TaskSpec, batches, generate, pad_partial_batch
from .dynconv import DynConv, DynConvConfig, dynconv_forward, noise_from_records
from .losses import LossConfig, total_loss
from .model import BackboneConfig, build_network
from .rate_adapt import ExpertRates, adapt_rates, expert_param_map, virtual_update
from .tensor import (
    Parameter,
    Tensor,
    conv2d,
    finite_diff_check,
    linear,
    matmul,
    relu,
    tmean,
    tsum,
)

__all__ = [
    "SUITES",
    "THRESHOLD",
    "run_suites",
    "full_model_check",
    "rate_derivative_check",
]

SUITES = ("tensor-core", "dynamic-conv", "loss", "rate-adapt")
THRESHOLD = 1e-4


def _tiny_backbone(**kw) -> BackboneConfig:
    base = dict(
        widths=(6, 8, 8),
        kernel_sizes=(3, 3, 3),
        strides=(1, 2, 1),
        in_channels=5,
        classes=4,
        replacement_fraction=0.25,
        variant="dynamic",
        bank_size=3,
        expert_fraction=0.2,
        key_dim=6,
    )
    base.update(kw)
    return BackboneConfig(**base)


_TINY_TASK = TaskSpec(
    n_classes=4,
    length=16,
    n_segments=4,
    n_features=4,
    div_frame=10,
    train_size=64,
    val_size=16,
    test_size=16,
    seed=3,
)


def check_tensor_core(seed: int = 0) -> float:
    """Composite expression through matmul, conv, linear and reductions."""
    rng = np.random.default_rng(seed)
    a = Parameter("a", rng.standard_normal((3, 4)))
    b = Parameter("b", rng.standard_normal((4, 5)))
    w = Parameter("w", rng.standard_normal((2, 5)))
    bias = Parameter("bias", rng.standard_normal(2))
    kern = Parameter("kern", 0.3 * rng.standard_normal((3, 2, 2, 2)))
    x = Tensor(rng.standard_normal((2, 2, 5, 4)))
    params = [a, b, w, bias, kern]

    def fn():
        z = linear(relu(matmul(a.tensor, b.tensor)), w.tensor, bias.tensor)
        y = conv2d(x, kern.tensor, stride=(1, 1), padding=(1, 1))
        return tsum(z) + tmean(y) + tsum(y * y)

    return finite_diff_check(fn, params, rng=np.random.default_rng(seed + 1))


def check_dynamic_conv(seed: int = 0) -> float:
    """One retrieval layer, relaxed selection, frozen noise."""
    rng = np.random.default_rng(seed)
    cfg = DynConvConfig(
        n_in=3, n_out=6, kernel_h=2, kernel_w=2, n_banks=2, bank_size=3, key_dim=4
    )
    module = DynConv(cfg, rng, "probe")
    x = Tensor(rng.standard_normal((2, 3, 6, 5)))
    _, records = dynconv_forward(module, x, mode="train", rng=np.random.default_rng(seed + 1))
    noise = noise_from_records(records)

    def fn():
        out, _ = dynconv_forward(module, x, mode="soft", noise=noise)
        return tsum(out * out)

    return finite_diff_check(fn, module.parameters(), rng=np.random.default_rng(seed + 2))


def full_model_check(seed: int = 0, loss_cfg: LossConfig | None = None) -> float:
    """Whole network under the complete loss, relaxed retrieval."""
    loss_cfg = loss_cfg or LossConfig(diversity_weight=0.1)
    dataset = generate(_TINY_TASK)
    model = build_network(_tiny_backbone(), np.random.default_rng(seed))
    batch, _ = next(batches(dataset, 4, np.random.default_rng(seed + 10)))
    x = pad_partial_batch(batch.partials, dataset.length)
    _, records = model.forward(x, mode="train", rng=np.random.default_rng(seed + 20))
    noise = {name: noise_from_records(recs) for name, recs in records.items()}

    def fn():
        logits, _ = model.forward(x, mode="soft", noise=noise)
        return total_loss(logits, batch.labels, model, loss_cfg)

    return finite_diff_check(fn, model.parameters(), rng=np.random.default_rng(seed + 30))


def rate_derivative_check(seed: int = 0, step: float = 1e-6) -> float:
    """Closed-form rate derivative against central differences."""
    lr = 0.1
    loss_cfg = LossConfig(diversity_weight=0.1)
    dataset = generate(_TINY_TASK)
    model = build_network(_tiny_backbone(), np.random.default_rng(seed))
    train_b, val_b = next(batches(dataset, 6, np.random.default_rng(seed + 10)))
    experts = expert_param_map(model)
    rates = ExpertRates({eid: lr for eid in experts})
    virtual = virtual_update(
        model, rates, train_b, lr=lr, loss_cfg=loss_cfg, rng=np.random.default_rng(seed + 20)
    )
    _, diag = adapt_rates(model, virtual, rates, val_b, lr=lr, val_loss_cfg=loss_cfg)
    expert_names = {p.name for pair in experts.values() for p in pair}
    x_val = pad_partial_batch(val_b.partials, dataset.length)

    def val_loss_at(rate_values: dict) -> float:
        values = {}
        for p in model.parameters():
            if p.name not in expert_names:
                values[p.name] = Tensor(p.data - lr * virtual.grads[p.name])
        for eid, pair in experts.items():
            for p in pair:
                values[p.name] = Tensor(p.data - rate_values[eid] * virtual.grads[p.name])
        logits, _ = model.forward(x_val, mode="eval", overrides=values)
        return float(total_loss(logits, val_b.labels, model, loss_cfg, overrides=values).data)

    worst = 0.0
    for eid in experts:
        up = {k: (lr + step if k == eid else lr) for k in experts}
        down = {k: (lr - step if k == eid else lr) for k in experts}
        fd = (val_loss_at(up) - val_loss_at(down)) / (2 * step)
        closed = diag["rate_grads"][eid]
        worst = max(worst, abs(fd - closed) / max(abs(fd), abs(closed), 1e-6))
    return worst


def run_suites(sabotage: str | None = None) -> dict[str, float]:
    """Max relative error per suite; ``sabotage`` injects a failure by name."""
    if sabotage is not None and sabotage not in SUITES:
        raise ValueError(f"unknown suite {sabotage!r}, expected one of {SUITES}")
    results = {
        "tensor-core": check_tensor_core(),
        "dynamic-conv": check_dynamic_conv(),
        "loss": full_model_check(),
        "rate-adapt": rate_derivative_check(),
    }
    if sabotage is not None:
        results[sabotage] += 1.0
    return results