"""Classification loss and the expert-diversity term.

The training objective is L = L_CE - diversity_weight * L_s: cross entropy minus a
weighted sum of squared distances between expert kernels sharing a bank.
Subtracting L_s pushes the kernels apart; because that term is unbounded
below, the harness pairs it with weight decay on convolution kernels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynconv import DynConv, resolve
from .tensor import Tensor, log_softmax, mul, neg, sub, tmean, tsum

__all__ = ["LossConfig", "cross_entropy", "similarity_loss", "total_loss"]


@dataclass
class LossConfig:
    diversity_weight: float = 0.1

    def __post_init__(self):
        if self.diversity_weight < 0:
            raise ValueError(f"diversity_weight must be non-negative, got {self.diversity_weight}")


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label]."""
    labels = np.asarray(labels)
    if logits.data.ndim != 2:
        raise ValueError(f"logits must be [batch, classes], got {logits.shape}")
    batch, classes = logits.shape
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.min() < 0 or labels.max() >= classes:
        raise ValueError(f"labels must lie in [0, {classes}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    onehot = np.zeros((batch, classes))
    onehot[np.arange(batch), labels] = 1.0
    picked = tsum(mul(log_softmax(logits), Tensor(onehot)), axis=1)
    return neg(tmean(picked))


def _expert_modules(model) -> list[DynConv]:
    if isinstance(model, DynConv):
        return [model]
    if hasattr(model, "expert_modules"):
        return list(model.expert_modules)
    return list(model)


def similarity_loss(model, overrides: dict[str, Tensor] | None = None) -> Tensor:
    """Sum over banks of squared kernel distances, ordered pairs counted twice.

    Keys are excluded; only the kernels spread apart. ``model`` may be a
    network exposing ``expert_modules``, a single module, or an iterable of
    modules.
    """
    modules = _expert_modules(model)
    if not modules:
        raise ValueError("similarity_loss needs at least one expert module")
    total = None
    for module in modules:
        for bank in module.banks:
            kernels = [resolve(e.kernel, overrides) for e in bank.experts]
            for i in range(len(kernels)):
                for j in range(i + 1, len(kernels)):
                    diff = sub(kernels[i], kernels[j])
                    pair = mul(tsum(mul(diff, diff)), 2.0)
                    total = pair if total is None else total + pair
    if total is None:
        return Tensor(0.0)
    return total


def total_loss(
    logits: Tensor,
    labels: np.ndarray,
    model,
    cfg: LossConfig,
    overrides: dict[str, Tensor] | None = None,
) -> Tensor:
    """cross_entropy - diversity_weight * similarity_loss.

    Models without expert modules (or diversity_weight = 0) fall back to plain cross
    entropy.
    """
    ce = cross_entropy(logits, labels)
    if cfg.diversity_weight == 0.0 or not _expert_modules(model):
        return ce
    return sub(ce, mul(similarity_loss(model, overrides), cfg.diversity_weight))
