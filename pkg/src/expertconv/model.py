"""Convolutional sequence classifier with swappable dynamic layers.

A stack of bias-free conv blocks (conv, ReLU) feeds a global mean pool
and a linear head. Depending on the variant, designated layers are
either plain convolutions (baseline) or carry expert banks used three
ways: retrieved per sample (dynamic), averaged into a fixed kernel
(expert-avg), or laid out as extra static channels that a constant
projection folds back down (extra-channel). The three expert-carrying
variants hold identical parameter registries, so their trainable
parameter counts are equal by construction; this is asserted when the
network is built.

Partial sequences are zero-padded to the full length with a binary
observation mask channel, so a single input geometry serves every
observation ratio. Convolutions have no bias, which keeps activations
on fully padded frames exactly zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import PartialSequence, pad_partial_batch
from .dynconv import DynConvConfig, DynConv, dynconv_forward, kernel_init, resolve
from .tensor import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    linear,
    mean_pool_spatial,
    relu,
    reshape,
    stack,
    tmean,
)

__all__ = [
    "BackboneConfig",
    "Network",
    "VARIANTS",
    "build_network",
    "predict",
    "replacement_indices",
    "parameter_count",
]

VARIANTS = ("dynamic", "baseline", "extra-channel", "expert-avg")


@dataclass
class BackboneConfig:
    widths: tuple[int, ...] = (16, 32, 32, 64)
    kernel_sizes: tuple[int, ...] = (3, 3, 3, 3)
    strides: tuple[int, ...] = (1, 2, 1, 2)
    input_kind: str = "1d"
    in_channels: int = 13
    classes: int = 8
    replacement_fraction: float = 0.25
    variant: str = "dynamic"
    bank_size: int = 5
    expert_fraction: float = 0.2
    key_dim: int | None = None
    gumbel_temperature: float = 1.0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.input_kind not in ("1d", "2d"):
            raise ValueError(f"input_kind must be '1d' or '2d', got {self.input_kind!r}")
        if not self.widths:
            raise ValueError("at least one conv layer is required")
        if len(self.kernel_sizes) != len(self.widths) or len(self.strides) != len(self.widths):
            raise ValueError("widths, kernel_sizes and strides must have equal length")
        if not 0.0 <= self.replacement_fraction <= 1.0:
            raise ValueError(
                f"replacement_fraction must lie in [0, 1], got {self.replacement_fraction}"
            )
        if not 0.0 <= self.expert_fraction <= 1.0:
            raise ValueError(f"expert_fraction must lie in [0, 1], got {self.expert_fraction}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        if self.variant == "dynamic" and not replacement_indices(
            len(self.widths), self.replacement_fraction
        ):
            raise ValueError(
                "replacement_fraction yields zero dynamic layers for the dynamic variant; "
                "raise the fraction or add conv layers (replacement starts at the third layer)"
            )

    def expert_channels(self, n_out: int) -> int:
        if self.expert_fraction == 0.0:
            return 0
        return min(n_out, max(1, round(self.expert_fraction * n_out)))


def replacement_indices(n_layers: int, fraction: float) -> list[int]:
    """0-based conv layer indices that become dynamic.

    The first two layers always stay static; from the third onward every
    ceil(1/fraction)-th layer is replaced. fraction = 0 replaces nothing.
    """
    if fraction <= 0.0:
        return []
    step = math.ceil(1.0 / fraction)
    return [i for i in range(n_layers) if i >= 2 and (i - 2) % step == 0]


class _PlainConv:
    def __init__(self, name: str, rng, n_in: int, n_out: int, kh: int, kw: int, stride, padding):
        self.name = name
        self.stride = stride
        self.padding = padding
        self.kernel = Parameter(f"{name}.kernel", kernel_init(rng, (n_out, n_in, kh, kw)), decay=True)

    def parameters(self) -> list[Parameter]:
        return [self.kernel]

    def forward(self, x, mode, rng, noise, overrides):
        out = conv2d(x, resolve(self.kernel, overrides), stride=self.stride, padding=self.padding)
        return out, None


class _DynamicConv:
    """An expert-carrying layer; ``behavior`` picks how the carrier is used."""

    def __init__(self, module: DynConv, behavior: str):
        self.module = module
        self.name = module.name
        self.behavior = behavior
        banks, per_bank = module.config.n_banks, module.config.bank_size
        n_wide = module.config.n_out - banks + banks * per_bank
        proj = np.zeros((module.config.n_out, n_wide))
        for c in range(module.config.n_out - banks):
            proj[c, c] = 1.0
        for p in range(banks):
            start = module.config.n_out - banks + p * per_bank
            proj[module.config.n_out - banks + p, start : start + per_bank] = 1.0 / per_bank
        self._projection = Tensor(proj[:, :, None, None])

    def parameters(self) -> list[Parameter]:
        return self.module.parameters()

    def _averaged_kernel(self, overrides) -> Tensor:
        parts = [resolve(self.module.nonexpert_block, overrides)]
        for bank in self.module.banks:
            kernels = stack([resolve(e.kernel, overrides) for e in bank.experts], axis=0)
            parts.append(reshape(tmean(kernels, axis=0), (1,) + bank.experts[0].kernel.data.shape))
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def _wide_kernel(self, overrides) -> Tensor:
        parts = [resolve(self.module.nonexpert_block, overrides)]
        for bank in self.module.banks:
            for e in bank.experts:
                kern = resolve(e.kernel, overrides)
                parts.append(reshape(kern, (1,) + kern.shape))
        return concat(parts, axis=0)

    def forward(self, x, mode, rng, noise, overrides):
        c = self.module.config
        if self.behavior == "dynamic":
            return dynconv_forward(self.module, x, mode=mode, rng=rng, noise=noise, overrides=overrides)
        if self.behavior == "expert-avg":
            out = conv2d(x, self._averaged_kernel(overrides), stride=c.stride, padding=c.padding)
            return out, None
        wide = conv2d(x, self._wide_kernel(overrides), stride=c.stride, padding=c.padding)
        return conv2d(relu(wide), self._projection), None


class Network:
    def __init__(self, cfg: BackboneConfig, layers, head_weight: Parameter, head_bias: Parameter):
        self.cfg = cfg
        self.layers = layers
        self.head_weight = head_weight
        self.head_bias = head_bias

    @property
    def expert_modules(self) -> list[DynConv]:
        return [layer.module for layer in self.layers if isinstance(layer, _DynamicConv)]

    def parameters(self) -> list[Parameter]:
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.append(self.head_weight)
        out.append(self.head_bias)
        return out

    def zero_grads(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def forward(
        self,
        x,
        mode: str = "train",
        rng: np.random.Generator | None = None,
        noise: dict | None = None,
        overrides: dict[str, Tensor] | None = None,
    ):
        """Run the stack; returns (logits, selection records by layer name)."""
        if not isinstance(x, Tensor):
            x = Tensor(x)
        if self.cfg.input_kind == "1d":
            if x.data.ndim != 3:
                raise ValueError(f"1d input must be [batch, channels, time], got {x.shape}")
            x = reshape(x, (x.shape[0], x.shape[1], 1, x.shape[2]))
        elif x.data.ndim != 4:
            raise ValueError(f"2d input must be [batch, channels, h, w], got {x.shape}")
        if x.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"input has {x.shape[1]} channels, network expects {self.cfg.in_channels}"
            )
        records: dict[str, list] = {}
        for layer in self.layers:
            layer_noise = None if noise is None else noise.get(layer.name)
            x, recs = layer.forward(x, mode, rng, layer_noise, overrides)
            if recs is not None:
                records[layer.name] = recs
            x = relu(x)
        pooled = mean_pool_spatial(x)
        logits = linear(
            pooled, resolve(self.head_weight, overrides), resolve(self.head_bias, overrides)
        )
        return logits, records


def _dynconv_config(cfg: BackboneConfig, index: int) -> DynConvConfig:
    n_in = cfg.in_channels if index == 0 else cfg.widths[index - 1]
    n_out = cfg.widths[index]
    k = cfg.kernel_sizes[index]
    s = cfg.strides[index]
    if cfg.input_kind == "1d":
        kh, kw, stride, padding = 1, k, (1, s), (0, k // 2)
    else:
        kh, kw, stride, padding = k, k, (s, s), (k // 2, k // 2)
    return DynConvConfig(
        n_in=n_in,
        n_out=n_out,
        kernel_h=kh,
        kernel_w=kw,
        n_banks=cfg.expert_channels(n_out),
        bank_size=cfg.bank_size,
        key_dim=cfg.key_dim,
        gumbel_temperature=cfg.gumbel_temperature,
        stride=stride,
        padding=padding,
    )


def parameter_count(cfg: BackboneConfig) -> int:
    """Trainable scalar count, computed from the configuration alone."""
    replaced = set(replacement_indices(len(cfg.widths), cfg.replacement_fraction))
    total = 0
    for i, width in enumerate(cfg.widths):
        n_in = cfg.in_channels if i == 0 else cfg.widths[i - 1]
        k = cfg.kernel_sizes[i]
        window = k if cfg.input_kind == "1d" else k * k
        kernel = width * n_in * window
        if i in replaced and cfg.variant != "baseline":
            dyn = _dynconv_config(cfg, i)
            per_kernel = dyn.n_in * dyn.kernel_h * dyn.kernel_w
            total += (dyn.n_out - dyn.n_banks) * per_kernel
            total += dyn.n_banks * dyn.bank_size * (per_kernel + dyn.key_dim)
            total += dyn.n_banks * (dyn.key_dim * dyn.n_in + dyn.key_dim)
        else:
            total += kernel
    total += cfg.classes * cfg.widths[-1] + cfg.classes
    return total


def build_network(cfg: BackboneConfig, rng: np.random.Generator) -> Network:
    """Assemble the stack; layer parameter draws use per-layer child streams.

    Child streams make initialization independent of sibling layers'
    variant choices: a dynamic layer draws its full static-equivalent
    kernel block first, so the baseline network and any expert-carrying
    variant start from bitwise-identical shared weights.
    """
    n_layers = len(cfg.widths)
    children = rng.spawn(n_layers + 1)
    replaced = set(replacement_indices(n_layers, cfg.replacement_fraction))
    layers = []
    for i, width in enumerate(cfg.widths):
        name = f"layer{i + 1}"
        n_in = cfg.in_channels if i == 0 else cfg.widths[i - 1]
        k = cfg.kernel_sizes[i]
        s = cfg.strides[i]
        if i in replaced and cfg.variant != "baseline":
            module = DynConv(_dynconv_config(cfg, i), children[i], name=f"{name}.dyn")
            behavior = cfg.variant if cfg.variant != "baseline" else "dynamic"
            layers.append(_DynamicConv(module, behavior))
        else:
            if cfg.input_kind == "1d":
                layers.append(
                    _PlainConv(f"{name}.conv", children[i], n_in, width, 1, k, (1, s), (0, k // 2))
                )
            else:
                layers.append(
                    _PlainConv(
                        f"{name}.conv", children[i], n_in, width, k, k, (s, s), (k // 2, k // 2)
                    )
                )
    head_rng = children[n_layers]
    head_weight = Parameter(
        "head.weight",
        head_rng.standard_normal((cfg.classes, cfg.widths[-1])) / math.sqrt(cfg.widths[-1]),
    )
    head_bias = Parameter("head.bias", np.zeros(cfg.classes))
    net = Network(cfg, layers, head_weight, head_bias)
    actual = sum(p.data.size for p in net.parameters())
    expected = parameter_count(cfg)
    if actual != expected:
        raise AssertionError(
            f"parameter registry size {actual} does not match the audit formula {expected}"
        )
    names = [p.name for p in net.parameters()]
    if len(names) != len(set(names)):
        raise AssertionError("duplicate parameter names in registry")
    return net


def predict(net: Network, partials: list[PartialSequence]) -> Tensor:
    """Class logits for a batch of partial views, with noiseless retrieval."""
    if not partials:
        raise ValueError("predict needs at least one sequence")
    x = pad_partial_batch(partials, partials[0].source_length)
    logits, _ = net.forward(x, mode="eval")
    return logits
