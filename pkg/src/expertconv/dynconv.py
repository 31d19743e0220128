"""Expert retrieval and assembly: per-sample dynamic convolution kernels.

A module owns a static block of output channels plus a set of banks,
each holding several candidate experts. Per sample, every bank retrieves one expert by
key-query dot product; the retrieved kernels are concatenated onto the
static block and the sample is convolved with its own assembled kernel.

Selection is a hard argmax in both modes. During training the argmax is
taken over Gumbel-perturbed scores and gradients flow through a tempered
softmax surrogate; the forward value stays exactly one-hot, so kernels of
unselected experts receive exactly zero gradient while keys and query
mappers still train through the relaxation. At evaluation selection is
noiseless and carries no gradient.

All banks and mappers have unshared parameters. Pooling is shared.
Parameters are read-shared across threads during evaluation; training is
single-writer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Parameter,
    Tensor,
    concat,
    conv2d,
    conv2d_per_sample,
    expand_batch,
    linear,
    matmul,
    mean_pool_spatial,
    mul,
    reshape,
    softmax,
    stack,
    straight_through_onehot,
    transpose,
)

__all__ = [
    "DynConvConfig",
    "Expert",
    "ExpertBank",
    "QueryMapper",
    "DynConv",
    "SelectionRecord",
    "kernel_init",
    "resolve",
    "compute_query",
    "match_scores",
    "select_expert",
    "assemble_expert_block",
    "assemble_full_kernel",
    "dynconv_forward",
    "selection_stats",
    "noise_from_records",
]


def default_expert_channels(n_out: int) -> int:
    return max(1, round(0.2 * n_out))


def default_key_dim(n_in: int) -> int:
    return min(64, 4 * n_in)


@dataclass
class DynConvConfig:
    """Geometry and retrieval settings for one dynamic-convolution module.

    ``n_banks`` output channels are expert-assembled, the remaining
    ``n_out - n_banks`` are static. ``n_banks=None`` and ``key_dim=None``
    pick the scaled defaults ``max(1, round(0.2 n_out))`` and
    ``min(64, 4 n_in)``.
    """

    n_in: int
    n_out: int
    kernel_h: int = 1
    kernel_w: int = 3
    n_banks: int | None = None
    bank_size: int = 5
    key_dim: int | None = None
    gumbel_temperature: float = 1.0
    mode: str = "train"
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)

    def __post_init__(self):
        if self.n_banks is None:
            self.n_banks = default_expert_channels(self.n_out)
        if self.key_dim is None:
            self.key_dim = default_key_dim(self.n_in)
        if min(self.n_in, self.n_out, self.kernel_h, self.kernel_w) < 1:
            raise ValueError(f"non-positive geometry in {self}")
        if not 0 <= self.n_banks <= self.n_out:
            raise ValueError(
                f"expert channel count n_banks={self.n_banks} outside [0, {self.n_out}]"
            )
        if self.bank_size < 1:
            raise ValueError(f"bank_size={self.bank_size} must be >= 1")
        if self.key_dim < 1:
            raise ValueError(f"key_dim={self.key_dim} must be >= 1")
        if self.gumbel_temperature <= 0:
            raise ValueError(f"gumbel_temperature must be positive, got {self.gumbel_temperature}")
        if self.mode not in ("train", "eval"):
            raise ValueError(f"mode must be 'train' or 'eval', got {self.mode!r}")

    @property
    def kernel_shape(self) -> tuple[int, int, int]:
        return (self.n_in, self.kernel_h, self.kernel_w)


@dataclass
class Expert:
    """One retrievable unit: a key to match against and a kernel to install."""

    key: Parameter
    kernel: Parameter

    def __post_init__(self):
        if self.key.data.ndim != 1:
            raise ValueError(f"expert key must be a vector, got shape {self.key.data.shape}")
        if self.kernel.data.ndim != 3:
            raise ValueError(f"expert kernel must be C_in x h x w, got {self.kernel.data.shape}")


@dataclass
class ExpertBank:
    """An ordered pool of candidate experts for one dynamic channel.

    ``bank_index`` is 1-based, in [1, n_banks].
    """

    experts: list[Expert]
    bank_index: int

    def __post_init__(self):
        if not self.experts:
            raise ValueError("a bank needs at least one expert")
        if self.bank_index < 1:
            raise ValueError(f"bank_index is 1-based, got {self.bank_index}")
        k0 = self.experts[0].kernel.data.shape
        key0 = self.experts[0].key.data.shape
        for e in self.experts:
            if e.kernel.data.shape != k0 or e.key.data.shape != key0:
                raise ValueError("experts within a bank must share kernel and key shapes")

    @property
    def size(self) -> int:
        return len(self.experts)


@dataclass
class QueryMapper:
    """Affine map from pooled channel statistics to a key_dim query vector."""

    weight: Parameter
    bias: Parameter

    def __post_init__(self):
        if self.weight.data.ndim != 2:
            raise ValueError(f"query weight must be key_dim x C_in, got {self.weight.data.shape}")
        if self.bias.data.shape != (self.weight.data.shape[0],):
            raise ValueError("query bias length must equal key_dim")


@dataclass(frozen=True)
class SelectionRecord:
    """Retrieval outcome for one (sample, bank) pair.

    ``noise`` is the Gumbel draw added to the scores in train mode, None at
    evaluation. Grouping records by (bank_index, selected) recovers the set
    of samples each expert served in a batch.
    """

    sample_index: int
    bank_index: int
    selected: int
    scores: np.ndarray
    weights: np.ndarray
    noise: np.ndarray | None = None

    def __post_init__(self):
        logits = self.scores if self.noise is None else self.scores + self.noise
        if int(np.argmax(logits)) != self.selected:
            raise ValueError("selected index disagrees with argmax of perturbed scores")
        if abs(float(self.weights.sum()) - 1.0) > 1e-9:
            raise ValueError("relaxed weights must sum to 1")


def kernel_init(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """He-normal convolution kernel draw; fan-in is everything past axis 0."""
    fan_in = int(np.prod(shape[1:]))
    return rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)


# std of the query-bias init; keeps initial match scores at the same order
# as the Gumbel noise (std pi/sqrt(6) ~ 1.28) so retrieval is exploratory
# but not a pure coin flip
QUERY_BIAS_SPREAD = 2.0


class DynConv:
    """Static channels plus per-sample expert-assembled channels.

    Construction draws the full n_out-channel kernel block first, exactly
    as a static convolution of the same geometry would, then splits it:
    the first n_out - n_banks channels become the static block and the
    rest seed expert 0 of each bank. With bank_size 1 and untouched
    extras the module
    is therefore bit-identical to the static layer it replaced.
    """

    def __init__(self, config: DynConvConfig, rng: np.random.Generator, name: str):
        self.config = config
        self.name = name
        c = config
        full = kernel_init(rng, (c.n_out, c.n_in, c.kernel_h, c.kernel_w))
        self.nonexpert_block = Parameter(
            f"{name}.nonexpert", full[: c.n_out - c.n_banks], decay=True
        )
        self.banks: list[ExpertBank] = []
        self.mappers: list[QueryMapper] = []
        for p in range(1, c.n_banks + 1):
            seeded = full[c.n_out - c.n_banks + p - 1]
            kernels = [seeded] + [
                kernel_init(rng, (1,) + c.kernel_shape)[0] for _ in range(c.bank_size - 1)
            ]
            experts = []
            for i, kern in enumerate(kernels):
                key = rng.standard_normal(c.key_dim) / math.sqrt(c.key_dim)
                experts.append(
                    Expert(
                        key=Parameter(f"{name}.bank{p}.expert{i}.key", key),
                        kernel=Parameter(f"{name}.bank{p}.expert{i}.kernel", kern, decay=True),
                    )
                )
            self.banks.append(ExpertBank(experts=experts, bank_index=p))
        for p in range(1, c.n_banks + 1):
            weight = rng.standard_normal((c.key_dim, c.n_in)) / math.sqrt(c.n_in)
            # Bias spread 2 puts initial per-expert score offsets at the
            # Gumbel noise scale. With a zero bias the score gaps start two
            # orders below the noise, selection is a coin flip for hundreds
            # of iterations, and every expert under-trains on a random shard.
            bias = rng.standard_normal(c.key_dim) * QUERY_BIAS_SPREAD
            self.mappers.append(
                QueryMapper(
                    weight=Parameter(f"{name}.bank{p}.query.weight", weight),
                    bias=Parameter(f"{name}.bank{p}.query.bias", bias),
                )
            )

    def parameters(self) -> list[Parameter]:
        out = [self.nonexpert_block]
        for bank, mapper in zip(self.banks, self.mappers):
            for e in bank.experts:
                out.append(e.kernel)
                out.append(e.key)
            out.append(mapper.weight)
            out.append(mapper.bias)
        return out

    def expert_ids(self) -> list[str]:
        """Stable identifiers, one per expert, keying the per-expert rate table."""
        return [
            f"{self.name}.bank{bank.bank_index}.expert{i}"
            for bank in self.banks
            for i in range(bank.size)
        ]


def resolve(param: Parameter, overrides: dict[str, Tensor] | None) -> Tensor:
    """The value to compute with: an override tensor if one is bound, else the leaf.

    Overrides let a caller run the forward pass at interim parameter values
    that are themselves graph nodes, so losses can differentiate through a
    virtual update.
    """
    if overrides is not None and param.name in overrides:
        return overrides[param.name]
    return param.tensor


def compute_query(
    module: DynConv, x: Tensor, bank_index: int, overrides: dict[str, Tensor] | None = None
) -> Tensor:
    """Pool x over space and map it through bank ``bank_index``'s affine query head."""
    c = module.config
    if not 1 <= bank_index <= c.n_banks:
        raise ValueError(f"bank_index {bank_index} outside [1, {c.n_banks}]")
    if x.shape[1] != c.n_in:
        raise ValueError(f"input channels {x.shape} do not match module n_in={c.n_in}")
    if not c.key_dim < c.n_in * x.shape[2] * x.shape[3]:
        raise ValueError(
            f"key_dim={c.key_dim} must be smaller than the input volume {x.shape[1:]}"
        )
    mapper = module.mappers[bank_index - 1]
    pooled = mean_pool_spatial(x)
    return linear(pooled, resolve(mapper.weight, overrides), resolve(mapper.bias, overrides))


def match_scores(
    q: Tensor, bank: ExpertBank, overrides: dict[str, Tensor] | None = None
) -> Tensor:
    """Dot product of the query against every key in the bank: [B, bank_size]."""
    keys = stack([resolve(e.key, overrides) for e in bank.experts], axis=0)
    if q.shape[1] != keys.shape[1]:
        raise ValueError(f"query dim {q.shape} does not match key dim {keys.shape}")
    return matmul(q, transpose(keys))


def select_expert(
    s: Tensor,
    mode: str,
    temperature: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> tuple[np.ndarray, Tensor, np.ndarray | None]:
    """Pick one expert per row of s.

    Train mode perturbs the scores with Gumbel(0,1) noise (drawn from rng
    unless a frozen ``noise`` array is supplied for replay) and returns
    straight-through one-hot weights whose gradient is that of
    softmax(perturbed / temperature). Eval mode is a noiseless argmax with
    constant weights and no gradient path. Ties go to the lowest index.

    The extra mode "soft" keeps the perturbed-softmax weights in the
    forward value as well. It exists for gradient verification: the hard
    forward is piecewise constant in the scores, so finite differences can
    only be compared against the relaxation the backward pass actually
    uses. Training never runs in this mode.
    """
    if not np.all(np.isfinite(s.data)):
        raise ValueError("selection scores must be finite")
    if mode in ("train", "soft"):
        if noise is None:
            if rng is None:
                raise ValueError(f"{mode}-mode selection needs an rng or frozen noise")
            noise = rng.gumbel(size=s.shape)
        elif noise.shape != s.shape:
            raise ValueError(f"frozen noise shape {noise.shape} does not match scores {s.shape}")
        logits = s + Tensor(noise)
        indices = np.argmax(logits.data, axis=-1)
        if mode == "train":
            y = straight_through_onehot(logits, temperature=temperature)
        else:
            y = softmax(mul(logits, 1.0 / temperature))
        return indices, y, noise
    if mode == "eval":
        indices = np.argmax(s.data, axis=-1)
        hard = np.zeros_like(s.data)
        np.put_along_axis(hard, indices[..., None], 1.0, axis=-1)
        return indices, Tensor(hard), None
    raise ValueError(f"mode must be 'train', 'eval' or 'soft', got {mode!r}")


def assemble_expert_block(
    banks: list[ExpertBank],
    weights: list[Tensor],
    overrides: dict[str, Tensor] | None = None,
) -> Tensor:
    """Blend each bank's kernels by its selection weights: [B, n_banks, C_in, h, w].

    The weights are exactly one-hot in the forward pass, so each assembled
    channel is bitwise the selected kernel, and kernels the weights zero out
    get an exactly zero gradient.
    """
    if len(banks) != len(weights):
        raise ValueError(f"{len(banks)} banks but {len(weights)} weight tensors")
    blocks = []
    for bank, y in zip(banks, weights):
        if y.shape[1] != bank.size:
            raise ValueError(
                f"bank {bank.bank_index}: weights {y.shape} do not cover {bank.size} experts"
            )
        cin, kh, kw = bank.experts[0].kernel.data.shape
        flat = stack(
            [reshape(resolve(e.kernel, overrides), (cin * kh * kw,)) for e in bank.experts],
            axis=0,
        )
        blocks.append(reshape(matmul(y, flat), (y.shape[0], 1, cin, kh, kw)))
    return concat(blocks, axis=1)


def assemble_full_kernel(
    nonexpert: Tensor, w_expert: Tensor | None, batch: int | None = None
) -> Tensor:
    """Stack static channels over the batch and append per-sample expert channels."""
    if w_expert is None:
        if batch is None:
            raise ValueError("with no expert block the batch size must be given")
        return expand_batch(nonexpert, batch)
    batch = w_expert.shape[0]
    if nonexpert.shape[0] == 0:
        return w_expert
    if nonexpert.shape[1:] != w_expert.shape[2:]:
        raise ValueError(
            f"static block {nonexpert.shape} does not match expert block {w_expert.shape}"
        )
    return concat([expand_batch(nonexpert, batch), w_expert], axis=1)


def _static_assembly(module: DynConv, overrides) -> Tensor:
    parts = [resolve(module.nonexpert_block, overrides)]
    for bank in module.banks:
        kernel = resolve(bank.experts[0].kernel, overrides)
        parts.append(reshape(kernel, (1,) + kernel.shape))
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def _plain_scores(module: DynConv, x: Tensor) -> list[np.ndarray]:
    """Score arrays for record-keeping only, outside the autodiff graph."""
    pooled = x.data.mean(axis=(2, 3))
    out = []
    for bank, mapper in zip(module.banks, module.mappers):
        q = pooled @ mapper.weight.data.T + mapper.bias.data
        keys = np.stack([e.key.data for e in bank.experts])
        out.append(q @ keys.T)
    return out


def dynconv_forward(
    module: DynConv,
    x: Tensor,
    mode: str | None = None,
    rng: np.random.Generator | None = None,
    noise: list[np.ndarray] | None = None,
    overrides: dict[str, Tensor] | None = None,
) -> tuple[Tensor, list[SelectionRecord]]:
    """Convolve each sample with its own assembled kernel.

    Returns the output map and one SelectionRecord per (bank, sample),
    bank-major. ``noise`` replays a frozen Gumbel draw (one [B, bank_size] array per
    bank, as returned by ``noise_from_records``). When nothing can vary per
    sample (n_banks = 0, or every bank holds a single expert) the assembly is
    deterministic and the module runs as one shared static convolution,
    reproducing that convolution bit for bit.
    """
    c = module.config
    if mode is None:
        mode = c.mode
    if x.data.ndim != 4 or x.shape[1] != c.n_in:
        raise ValueError(f"input {x.shape} does not match module n_in={c.n_in}")
    batch = x.shape[0]

    if c.n_banks == 0 or c.bank_size == 1:
        y = conv2d(x, _static_assembly(module, overrides), stride=c.stride, padding=c.padding)
        records = []
        if c.n_banks > 0:
            for p, scores in enumerate(_plain_scores(module, x), start=1):
                weights = np.ones((batch, 1))
                for n in range(batch):
                    records.append(
                        SelectionRecord(
                            sample_index=n,
                            bank_index=p,
                            selected=0,
                            scores=scores[n],
                            weights=weights[n],
                        )
                    )
        return y, records

    selections: list[tuple[np.ndarray, Tensor, np.ndarray | None, np.ndarray]] = []
    weight_tensors: list[Tensor] = []
    for p, bank in enumerate(module.banks, start=1):
        q = compute_query(module, x, p, overrides)
        s = match_scores(q, bank, overrides)
        frozen = noise[p - 1] if noise is not None else None
        idx, y_weights, used_noise = select_expert(
            s, mode, c.gumbel_temperature, rng=rng, noise=frozen
        )
        selections.append((idx, y_weights, used_noise, s.data))
        weight_tensors.append(y_weights)

    w_expert = assemble_expert_block(module.banks, weight_tensors, overrides)
    w_full = assemble_full_kernel(resolve(module.nonexpert_block, overrides), w_expert)
    out = conv2d_per_sample(x, w_full, stride=c.stride, padding=c.padding)

    records = []
    for p, (idx, y_weights, used_noise, scores) in enumerate(selections, start=1):
        for n in range(batch):
            records.append(
                SelectionRecord(
                    sample_index=n,
                    bank_index=p,
                    selected=int(idx[n]),
                    scores=scores[n].copy(),
                    weights=y_weights.data[n].copy(),
                    noise=None if used_noise is None else used_noise[n].copy(),
                )
            )
    return out, records


def noise_from_records(records: list[SelectionRecord]) -> list[np.ndarray] | None:
    """Rebuild the per-bank [B, bank_size] Gumbel arrays a forward pass drew."""
    if not records or records[0].noise is None:
        return None
    d = max(r.bank_index for r in records)
    batch = max(r.sample_index for r in records) + 1
    out = []
    for p in range(1, d + 1):
        rows = sorted((r for r in records if r.bank_index == p), key=lambda r: r.sample_index)
        if len(rows) != batch:
            raise ValueError(f"bank {p}: expected {batch} records, got {len(rows)}")
        out.append(np.stack([r.noise for r in rows]))
    return out


def selection_stats(records: list[SelectionRecord]) -> dict:
    """Selection counts [n_banks, bank_size] and per-bank load entropy over a record stream."""
    if not records:
        raise ValueError("selection_stats needs at least one record")
    d = max(r.bank_index for r in records)
    m = max(len(r.scores) for r in records)
    counts = np.zeros((d, m), dtype=np.int64)
    for r in records:
        counts[r.bank_index - 1, r.selected] += 1
    entropy = np.zeros(d)
    for p in range(d):
        total = counts[p].sum()
        freq = counts[p] / total
        nz = freq[freq > 0]
        entropy[p] = float(-(nz * np.log(nz)).sum())
    return {"counts": counts, "entropy": entropy}
