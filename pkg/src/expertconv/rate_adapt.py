"""Bilevel adaptation of per-expert learning rates.

Every expert (its kernel together with its key) carries an individual
learning rate, initialized to the base rate. One training iteration uses
two disjoint batches and three steps:

1. ``virtual_update``: forward/backward on the training batch at the
   current parameters. From the gradients, build a lookahead model:
   non-expert parameters step by the base rate, each expert by its own
   rate. The Gumbel draws behind the retrieval decisions are recorded so
   later passes replay exactly the same selections.
2. ``adapt_rates``: evaluate the lookahead model on the validation batch
   and differentiate that loss with respect to each expert's rate. The
   derivative has a closed form, the negative inner product between the
   expert's training gradient and its validation gradient at the
   lookahead point. A second, independent path differentiates through
   the lookahead arithmetic itself; the two must agree tightly on every
   iteration, which is asserted ``tolerance`` wise at runtime. Rates then
   step by the base rate and clamp at zero.

   The validation objective is the task cross entropy alone by default
   (``val_loss_cfg``). Feeding the diversity reward into it as well sets
   up positive feedback: spreading kernels lowers both losses, so every
   rate derivative turns negative, larger rates spread kernels further,
   and the loop diverges within a handful of iterations. Scoring the
   lookahead on held-out task loss instead keeps the adaptation signal
   anchored to generalization.
3. ``apply_updates``: derive gradients at the ORIGINAL parameters on the
   same training batch with the recorded noise, and step for real:
   experts by their adapted rates, everything else by the base rate.
   Reusing the virtual step's gradients instead of recomputing them is an
   optimization flag; both routes produce bitwise-identical parameters.

The validation pass runs in eval mode (noiseless hard retrieval), so the
validation loss is a differentiable function of the lookahead values and
the closed form can also be checked against finite differences over the
rates. Weight decay on flagged parameters is folded into the gradients,
so it passes through the lookahead, the rate derivative, and the real
update consistently.

A model without expert modules degrades to plain SGD: the rate table is
empty and the adaptation step is a no-op.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .data import Batch, Dataset, batches, pad_partial_batch
from .dynconv import noise_from_records
from .losses import LossConfig, total_loss
from .model import Network
from .tensor import Parameter, Tensor, grad_or_zeros, mul, sub

__all__ = [
    "ExpertRates",
    "VirtualUpdate",
    "StepReport",
    "expert_param_map",
    "rate_step",
    "virtual_update",
    "adapt_rates",
    "apply_updates",
    "train_iteration",
]


def rate_step(rate: float, derivative: float, lr: float) -> float:
    """One projected meta step: move against the derivative, clamp at zero."""
    return max(0.0, rate - lr * derivative)


def expert_param_map(model: Network) -> dict[str, tuple[Parameter, Parameter]]:
    """Expert id -> (kernel, key), in stable layer/bank/expert order."""
    out: dict[str, tuple[Parameter, Parameter]] = {}
    for module in model.expert_modules:
        for bank in module.banks:
            for i, expert in enumerate(bank.experts):
                out[f"{module.name}.bank{bank.bank_index}.expert{i}"] = (
                    expert.kernel,
                    expert.key,
                )
    return out


class ExpertRates:
    """Per-expert learning rates, keyed by expert id.

    Rates are non-negative; a fresh table starts every expert at the base
    rate. The table is treated as immutable: the adaptation step returns a
    new one.
    """

    def __init__(self, rates: dict[str, float]):
        for eid, rate in rates.items():
            if not math.isfinite(rate) or rate < 0:
                raise ValueError(f"rate for {eid!r} must be finite and >= 0, got {rate}")
        self._rates = {eid: float(rate) for eid, rate in rates.items()}

    @classmethod
    def for_model(cls, model: Network, base_rate: float) -> "ExpertRates":
        return cls({eid: base_rate for eid in expert_param_map(model)})

    def __getitem__(self, expert_id: str) -> float:
        if expert_id not in self._rates:
            raise KeyError(f"no rate for expert {expert_id!r}")
        return self._rates[expert_id]

    def __contains__(self, expert_id: str) -> bool:
        return expert_id in self._rates

    def __len__(self) -> int:
        return len(self._rates)

    def items(self):
        return self._rates.items()

    def as_dict(self) -> dict[str, float]:
        return dict(self._rates)

    def validate_for(self, model: Network) -> None:
        """Every expert in the model must carry exactly one rate."""
        expected = set(expert_param_map(model))
        have = set(self._rates)
        if expected != have:
            missing = sorted(expected - have)
            extra = sorted(have - expected)
            raise ValueError(
                f"rate table does not cover the model: missing {missing}, extra {extra}"
            )

    def __repr__(self):
        return f"ExpertRates({self._rates!r})"


@dataclass
class VirtualUpdate:
    """Lookahead state for one iteration; derived, never persisted.

    ``values`` maps every trainable parameter name to its lookahead value.
    Expert entries are graph nodes built from the 0-d leaves in
    ``rate_leaves``, so a validation loss evaluated at ``values`` can be
    differentiated with respect to each expert's rate. ``grads`` are the
    effective training gradients (weight decay folded in) at the original
    parameters, and ``noise`` the recorded retrieval draws, both keyed for
    exact replay.
    """

    values: dict[str, Tensor]
    rate_leaves: dict[str, Tensor]
    grads: dict[str, np.ndarray]
    noise: dict[str, list[np.ndarray]]
    train_loss: float
    train_indices: np.ndarray | None = None

    def __post_init__(self):
        if not math.isfinite(self.train_loss):
            raise ValueError(f"non-finite training loss {self.train_loss}")


@dataclass
class StepReport:
    """Diagnostics for one training iteration."""

    train_loss: float
    val_loss: float | None
    rates_before: dict[str, float] = field(default_factory=dict)
    rates_after: dict[str, float] = field(default_factory=dict)
    grad_norm: float = 0.0
    rate_grad_norm: float = 0.0
    discrepancy: float = 0.0

    def __post_init__(self):
        if self.discrepancy < 0:
            raise ValueError("discrepancy is a magnitude, must be >= 0")
        if set(self.rates_before) != set(self.rates_after):
            raise ValueError("rate dictionaries must cover the same experts")


def _batch_input(batch: Batch, length: int | None) -> np.ndarray:
    if len(batch) == 0:
        raise ValueError("empty batch")
    if length is None:
        length = batch.partials[0].source_length
    return pad_partial_batch(batch.partials, length)


def _training_gradients(
    model: Network,
    batch: Batch,
    loss_cfg: LossConfig,
    rng: np.random.Generator | None,
    noise: dict[str, list[np.ndarray]] | None,
    weight_decay: float,
    length: int | None,
):
    """Forward/backward in train mode; effective grads at the current values.

    Returns (loss value, grads by name, recorded noise by layer).
    """
    x = _batch_input(batch, length)
    model.zero_grads()
    logits, records = model.forward(x, mode="train", rng=rng, noise=noise)
    loss = total_loss(logits, batch.labels, model, loss_cfg)
    loss.backward()
    grads: dict[str, np.ndarray] = {}
    for p in model.parameters():
        g = grad_or_zeros(p.tensor)
        if weight_decay != 0.0 and p.decay:
            g = g + weight_decay * p.data
        grads[p.name] = g
    recorded: dict[str, list[np.ndarray]] = {}
    for layer_name, recs in records.items():
        arrays = noise_from_records(recs)
        if arrays is not None:
            recorded[layer_name] = arrays
    return float(loss.data), grads, recorded


def virtual_update(
    model: Network,
    rates: ExpertRates,
    batch: Batch,
    *,
    lr: float,
    loss_cfg: LossConfig,
    rng: np.random.Generator | None = None,
    noise: dict[str, list[np.ndarray]] | None = None,
    weight_decay: float = 0.0,
    length: int | None = None,
) -> VirtualUpdate:
    """Train-batch gradients at the current parameters, plus the lookahead.

    The model itself is left untouched; the lookahead lives entirely in the
    returned override table.
    """
    if lr <= 0:
        raise ValueError(f"base rate must be positive, got {lr}")
    rates.validate_for(model)
    train_loss, grads, recorded = _training_gradients(
        model, batch, loss_cfg, rng, noise, weight_decay, length
    )
    experts = expert_param_map(model)
    expert_names = {p.name for pair in experts.values() for p in pair}
    values: dict[str, Tensor] = {}
    leaves: dict[str, Tensor] = {}
    for p in model.parameters():
        if p.name not in expert_names:
            values[p.name] = Tensor(p.data - lr * grads[p.name])
    for eid, params in experts.items():
        leaf = Tensor(np.float64(rates[eid]))
        leaf.requires_grad = True
        leaves[eid] = leaf
        for p in params:
            values[p.name] = sub(Tensor(p.data), mul(leaf, Tensor(grads[p.name])))
    return VirtualUpdate(
        values=values,
        rate_leaves=leaves,
        grads=grads,
        noise=recorded,
        train_loss=train_loss,
        train_indices=batch.indices,
    )


def _check_disjoint(virtual: VirtualUpdate, val_batch: Batch) -> None:
    if virtual.train_indices is None or val_batch.indices is None:
        raise ValueError(
            "batches must carry sample indices so train/validation disjointness "
            "can be verified"
        )
    overlap = np.intersect1d(virtual.train_indices, val_batch.indices)
    if overlap.size:
        raise ValueError(
            f"training and validation batches share {overlap.size} sample(s); "
            "rate adaptation requires disjoint batches"
        )


def _relative_gap(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def adapt_rates(
    model: Network,
    virtual: VirtualUpdate,
    rates: ExpertRates,
    val_batch: Batch,
    *,
    lr: float,
    val_loss_cfg: LossConfig | None = None,
    length: int | None = None,
    tolerance: float = 1e-8,
    check_agreement: bool = True,
) -> tuple[ExpertRates, dict]:
    """New rate table from the validation loss at the lookahead point.

    Computes the rate derivative twice: in closed form (negative inner
    product of each expert's training gradient with the validation
    gradient at its lookahead value) and by differentiating through the
    lookahead arithmetic. The two are compared on every call; rates step
    by ``lr`` against the closed form, then clamp at zero.

    ``val_loss_cfg`` defaults to plain cross entropy; see the module
    docstring for why the diversity reward stays out of this objective.

    Returns the new table and diagnostics (validation loss, derivative by
    expert, worst path disagreement).
    """
    loss_cfg = val_loss_cfg if val_loss_cfg is not None else LossConfig(diversity_weight=0.0)
    _check_disjoint(virtual, val_batch)
    x = _batch_input(val_batch, length)
    experts = expert_param_map(model)
    expert_names = {p.name for pair in experts.values() for p in pair}

    # Closed form: fresh leaves pinned at the lookahead values pick up the
    # validation gradient h; the derivative is then -<g_train, h>.
    probe: dict[str, Tensor] = {}
    for name, value in virtual.values.items():
        if name in expert_names:
            leaf = Tensor(value.data)
            leaf.requires_grad = True
            probe[name] = leaf
        else:
            probe[name] = value
    logits, _ = model.forward(x, mode="eval", overrides=probe)
    val_loss = total_loss(logits, val_batch.labels, model, loss_cfg, overrides=probe)
    val_loss.backward()
    closed: dict[str, float] = {}
    for eid, params in experts.items():
        acc = 0.0
        for p in params:
            acc += float(np.sum(virtual.grads[p.name] * grad_or_zeros(probe[p.name])))
        closed[eid] = -acc

    # Independent path: differentiate the same loss through the lookahead
    # expressions themselves, reaching the 0-d rate leaves.
    for leaf in virtual.rate_leaves.values():
        leaf.grad = None
    logits2, _ = model.forward(x, mode="eval", overrides=virtual.values)
    val_loss2 = total_loss(logits2, val_batch.labels, model, loss_cfg, overrides=virtual.values)
    val_loss2.backward()
    through: dict[str, float] = {
        eid: float(grad_or_zeros(leaf)) for eid, leaf in virtual.rate_leaves.items()
    }

    discrepancy = 0.0
    for eid in experts:
        discrepancy = max(discrepancy, _relative_gap(closed[eid], through[eid]))
    if check_agreement and discrepancy >= tolerance:
        raise ArithmeticError(
            f"rate-derivative paths disagree: relative gap {discrepancy:.3e} "
            f"(tolerance {tolerance:.1e})"
        )

    new_rates = ExpertRates({eid: rate_step(rates[eid], closed[eid], lr) for eid in experts})
    diagnostics = {
        "val_loss": float(val_loss2.data),
        "rate_grads": closed,
        "discrepancy": discrepancy,
    }
    return new_rates, diagnostics


def apply_updates(
    model: Network,
    rates: ExpertRates,
    batch: Batch,
    noise: dict[str, list[np.ndarray]],
    *,
    lr: float,
    loss_cfg: LossConfig,
    weight_decay: float = 0.0,
    length: int | None = None,
    reuse_gradients: bool = False,
    cached_grads: dict[str, np.ndarray] | None = None,
) -> None:
    """Step the real parameters: the update the lookahead previewed.

    Gradients are taken at the ORIGINAL parameters on the same batch with
    the recorded retrieval noise. ``reuse_gradients`` skips the recompute
    and uses ``cached_grads`` (the virtual step's); because the recompute
    replays selections exactly, both routes give bitwise-identical
    parameters.
    """
    rates.validate_for(model)
    for layer_name, arrays in noise.items():
        for arr in arrays:
            if arr.shape[0] != len(batch):
                raise ValueError(
                    f"stale noise record for {layer_name!r}: drawn for batch size "
                    f"{arr.shape[0]}, applying to {len(batch)}"
                )
    if reuse_gradients:
        if cached_grads is None:
            raise ValueError("reuse_gradients requires the virtual step's gradients")
        grads = cached_grads
    else:
        _, grads, _ = _training_gradients(
            model, batch, loss_cfg, None, noise, weight_decay, length
        )
    expected = {p.name for p in model.parameters()}
    if set(grads) != expected:
        raise ValueError("gradient table does not match the model's parameters")
    rate_of: dict[str, float] = {}
    for eid, params in expert_param_map(model).items():
        for p in params:
            rate_of[p.name] = rates[eid]
    for p in model.parameters():
        step = rate_of.get(p.name, lr)
        p.data = p.data - step * grads[p.name]


def train_iteration(
    model: Network,
    rates: ExpertRates | None,
    dataset: Dataset,
    batch_rng: np.random.Generator,
    noise_rng: np.random.Generator | None = None,
    *,
    lr: float,
    batch_size: int,
    loss_cfg: LossConfig,
    val_loss_cfg: LossConfig | None = None,
    weight_decay: float = 0.0,
    adapt: bool = True,
    reuse_gradients: bool = False,
    tolerance: float = 1e-8,
) -> tuple[ExpertRates | None, StepReport]:
    """One full iteration: draw a disjoint batch pair, then the three steps.

    With ``adapt`` off the iteration is plain SGD at the base rate (the
    rate table is ignored and passed back unchanged); both settings draw
    batches and retrieval noise identically, so enabling adaptation is the
    only difference between the two trajectories. The model updates in
    place; the adapted table is returned.
    """
    if lr <= 0:
        raise ValueError(f"base rate must be positive, got {lr}")
    if noise_rng is None:
        noise_rng = batch_rng
    train_batch, val_batch = next(batches(dataset, batch_size, batch_rng))
    length = dataset.length

    if not adapt:
        train_loss, grads, recorded = _training_gradients(
            model, train_batch, loss_cfg, noise_rng, None, weight_decay, length
        )
        uniform = ExpertRates.for_model(model, lr)
        apply_updates(
            model,
            uniform,
            train_batch,
            recorded,
            lr=lr,
            loss_cfg=loss_cfg,
            weight_decay=weight_decay,
            length=length,
            reuse_gradients=True,
            cached_grads=grads,
        )
        report = StepReport(
            train_loss=train_loss,
            val_loss=None,
            grad_norm=_global_norm(grads),
        )
        return rates, report

    if rates is None:
        rates = ExpertRates.for_model(model, lr)
    virtual = virtual_update(
        model,
        rates,
        train_batch,
        lr=lr,
        loss_cfg=loss_cfg,
        rng=noise_rng,
        weight_decay=weight_decay,
        length=length,
    )
    new_rates, diagnostics = adapt_rates(
        model,
        virtual,
        rates,
        val_batch,
        lr=lr,
        val_loss_cfg=val_loss_cfg,
        length=length,
        tolerance=tolerance,
    )
    apply_updates(
        model,
        new_rates,
        train_batch,
        virtual.noise,
        lr=lr,
        loss_cfg=loss_cfg,
        weight_decay=weight_decay,
        length=length,
        reuse_gradients=reuse_gradients,
        cached_grads=virtual.grads if reuse_gradients else None,
    )
    report = StepReport(
        train_loss=virtual.train_loss,
        val_loss=diagnostics["val_loss"],
        rates_before=rates.as_dict(),
        rates_after=new_rates.as_dict(),
        grad_norm=_global_norm(virtual.grads),
        rate_grad_norm=math.sqrt(
            sum(g * g for g in diagnostics["rate_grads"].values())
        ),
        discrepancy=diagnostics["discrepancy"],
    )
    return new_rates, report


def _global_norm(grads: dict[str, np.ndarray]) -> float:
    return math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
