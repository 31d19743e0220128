"""Synthetic early-prediction sequence task.

Classes come in pairs sharing a cluster: both follow the same smooth
prototype trajectory early on, separated only by a subtle class offset
that ramps up toward the divergence frame, then branch into strongly
divergent continuations. Early observation windows are therefore
genuinely ambiguous within a pair while full sequences are easy.

Everything is deterministic given the task seed. Datasets round-trip
through a flat binary container byte for byte.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np
from scipy.interpolate import CubicSpline

__all__ = [
    "TaskSpec",
    "SequenceSample",
    "PartialSequence",
    "Dataset",
    "Batch",
    "generate",
    "make_partial",
    "batches",
    "pad_partial_batch",
    "export_dataset",
    "import_dataset",
]

MAGIC = b"SQD1"
FORMAT_VERSION = 1


@dataclass
class TaskSpec:
    """Constants of one synthetic task instance.

    ``offset_norm`` is the total early-window norm of the class offset pattern
    and ``noise_std`` the per-coordinate noise level; the pair controls how
    ambiguous partial observations are. ``div_frame`` is the frame where the
    paired classes branch apart.
    """

    n_classes: int = 8
    length: int = 40
    n_segments: int = 10
    n_features: int = 12
    offset_norm: float = 1.0
    noise_std: float = 0.1
    div_frame: int = 36
    train_size: int = 512
    val_size: int = 256
    test_size: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2 or self.n_classes % 2 != 0:
            raise ValueError(f"class count must be even and >= 2, got {self.n_classes}")
        if self.length % self.n_segments != 0:
            raise ValueError(
                f"length={self.length} must be divisible by n_segments={self.n_segments}"
            )
        if self.n_features < 2:
            raise ValueError(f"need at least 2 features for the offset subspace, got {self.n_features}")
        if not 0 < self.div_frame <= self.length:
            raise ValueError(f"div_frame={self.div_frame} outside (0, {self.length}]")
        if self.offset_norm < 0 or self.noise_std < 0:
            raise ValueError("offset_norm and noise_std must be non-negative")
        if min(self.train_size, self.val_size, self.test_size) < 1:
            raise ValueError("split sizes must be positive")

    @property
    def clusters(self) -> int:
        return self.n_classes // 2


@dataclass
class SequenceSample:
    frames: np.ndarray
    label: int
    cluster: int
    div_frame: int | None

    def __post_init__(self):
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be [length, features], got shape {self.frames.shape}")
        if self.cluster != self.label // 2:
            raise ValueError(f"label {self.label} does not belong to cluster {self.cluster}")


@dataclass
class PartialSequence:
    frames: np.ndarray
    observation_frame: int
    source_length: int

    def __post_init__(self):
        if self.frames.shape[0] != self.observation_frame:
            raise ValueError(
                f"observation_frame {self.observation_frame} does not match "
                f"{self.frames.shape[0]} frames"
            )

    @property
    def ratio(self) -> float:
        return self.observation_frame / self.source_length


@dataclass
class Dataset:
    train: list[SequenceSample]
    val: list[SequenceSample]
    test: list[SequenceSample]
    n_classes: int
    length: int
    n_segments: int
    n_features: int
    spec: TaskSpec | None = None


class Batch:
    """A drawn batch: partial views, labels, and source positions.

    ``indices`` identifies each sample in the pool it was drawn from, so
    two batches of one iteration can be checked for overlap.
    """

    def __init__(
        self,
        partials: list[PartialSequence],
        labels: np.ndarray,
        indices: np.ndarray | None = None,
    ):
        self.partials = partials
        self.labels = labels
        self.indices = None if indices is None else np.asarray(indices)

    def __len__(self) -> int:
        return len(self.partials)


def _smooth_paths(rng: np.random.Generator, length: int, features: int, knots: int) -> np.ndarray:
    """A bundle of smooth random curves: [length, features]."""
    grid = np.linspace(0.0, length - 1, knots)
    values = rng.standard_normal((knots, features))
    return CubicSpline(grid, values, axis=0)(np.arange(length))


@dataclass
class _ClusterRecipe:
    prototype: np.ndarray
    offset_pattern: np.ndarray
    continuations: list[np.ndarray]

    def class_mean(self, label_in_pair: int) -> np.ndarray:
        sign = 1.0 if label_in_pair == 0 else -1.0
        return self.prototype + sign * self.offset_pattern + self.continuations[label_in_pair]


def _build_recipes(spec: TaskSpec, rng: np.random.Generator) -> list[_ClusterRecipe]:
    recipes = []
    for _ in range(spec.clusters):
        knots = max(4, spec.length // 8)
        prototype = _smooth_paths(rng, spec.length, spec.n_features, knots)

        # Subtle class offset: confined to a random 2-dimensional feature
        # subspace, ramping up toward the divergence frame so the earliest
        # frames are nearly indistinguishable. Normalized so the pattern's
        # total norm over the shared window is exactly offset_norm.
        basis, _ = np.linalg.qr(rng.standard_normal((spec.n_features, 2)))
        angle = rng.uniform(0.0, 2 * np.pi)
        direction = basis @ np.array([np.cos(angle), np.sin(angle)])
        ramp = np.minimum(np.arange(spec.length), spec.div_frame - 1) / max(spec.div_frame - 1, 1)
        window_norm = np.linalg.norm(ramp[: spec.div_frame])
        if spec.offset_norm > 0 and window_norm > 0:
            pattern = (spec.offset_norm / window_norm) * ramp[:, None] * direction[None, :]
        else:
            pattern = np.zeros((spec.length, spec.n_features))

        # Divergent continuations: independent smooth branches per class,
        # eased in over a few frames, with separation far above noise_std.
        continuations = []
        tail = spec.length - spec.div_frame
        for _ in range(2):
            cont = np.zeros((spec.length, spec.n_features))
            if tail > 0:
                branch = _smooth_paths(rng, tail, spec.n_features, max(4, tail // 6 + 2))
                branch *= 3.0 / np.sqrt(spec.n_features)
                ease = np.minimum(1.0, (np.arange(tail) + 1) / 4.0)
                cont[spec.div_frame :] = ease[:, None] * branch
            continuations.append(cont)
        recipes.append(_ClusterRecipe(prototype, pattern, continuations))
    return recipes


def _balanced_labels(rng: np.random.Generator, size: int, classes: int) -> np.ndarray:
    labels = np.tile(np.arange(classes), size // classes + 1)[:size]
    return rng.permutation(labels)


def generate(spec: TaskSpec) -> Dataset:
    """Draw the full dataset for a task seed, split train/val/test."""
    rng = np.random.default_rng(spec.seed)
    recipes = _build_recipes(spec, rng)
    splits = []
    for size in (spec.train_size, spec.val_size, spec.test_size):
        labels = _balanced_labels(rng, size, spec.n_classes)
        samples = []
        for label in labels:
            label = int(label)
            mean = recipes[label // 2].class_mean(label % 2)
            frames = mean + spec.noise_std * rng.standard_normal((spec.length, spec.n_features))
            samples.append(
                SequenceSample(frames=frames, label=label, cluster=label // 2, div_frame=spec.div_frame)
            )
        splits.append(samples)
    return Dataset(
        train=splits[0],
        val=splits[1],
        test=splits[2],
        n_classes=spec.n_classes,
        length=spec.length,
        n_segments=spec.n_segments,
        n_features=spec.n_features,
        spec=spec,
    )


def make_partial(sample: SequenceSample, i: int, n_segments: int) -> PartialSequence:
    """The first i-th fraction of a sequence, i in {1, ..., n_segments}."""
    if not 1 <= i <= n_segments:
        raise ValueError(f"segment index {i} outside [1, {n_segments}]")
    total = sample.frames.shape[0]
    if total % n_segments != 0:
        raise ValueError(f"length {total} is not divisible into {n_segments} segments")
    tau = i * total // n_segments
    return PartialSequence(
        frames=sample.frames[:tau], observation_frame=tau, source_length=total
    )


def batches(
    dataset: Dataset | list[SequenceSample],
    batch_size: int,
    rng: np.random.Generator,
    disjoint_pairs: bool = True,
    n_segments: int | None = None,
) -> Iterator[tuple[Batch, Batch]]:
    """Endless stream of (train, validation) batch pairs.

    The two batches of a pair are index-disjoint when ``disjoint_pairs``
    is set. Every drawn sample is viewed at a uniformly random observation
    ratio i / n_segments.
    """
    if isinstance(dataset, Dataset):
        pool = dataset.train
        n_segments = dataset.n_segments if n_segments is None else n_segments
    else:
        pool = dataset
        if n_segments is None:
            raise ValueError("n_segments is required when passing a bare sample list")
    if len(pool) < 2 * batch_size:
        raise ValueError(
            f"need at least {2 * batch_size} samples for disjoint batch pairs, have {len(pool)}"
        )

    def draw(indices: np.ndarray) -> Batch:
        segs = rng.integers(1, n_segments + 1, size=len(indices))
        parts = [make_partial(pool[j], int(i), n_segments) for j, i in zip(indices, segs)]
        labels = np.array([pool[j].label for j in indices], dtype=np.int64)
        return Batch(parts, labels, indices)

    while True:
        if disjoint_pairs:
            idx = rng.choice(len(pool), size=2 * batch_size, replace=False)
            yield draw(idx[:batch_size]), draw(idx[batch_size:])
        else:
            yield (
                draw(rng.choice(len(pool), size=batch_size, replace=False)),
                draw(rng.choice(len(pool), size=batch_size, replace=False)),
            )


def pad_partial_batch(partials: list[PartialSequence], total_length: int) -> np.ndarray:
    """Stack partial views as [batch, features + 1, length]: zero-padded
    features plus a mask row.

    The final channel is 1 on observed frames and 0 on padding, so one
    network input shape serves every observation ratio.
    """
    if not partials:
        raise ValueError("cannot pad an empty batch")
    features = partials[0].frames.shape[1]
    out = np.zeros((len(partials), features + 1, total_length))
    for n, part in enumerate(partials):
        tau = part.observation_frame
        if tau > total_length:
            raise ValueError(f"partial of {tau} frames exceeds padded length {total_length}")
        out[n, :features, :tau] = part.frames.T
        out[n, features, :tau] = 1.0
    return out


def export_dataset(dataset: Dataset, path) -> None:
    """Write the container: header then per-sample label + row-major frames.

    Layout, all little-endian: magic "SQD1", u32 version, u32 class count,
    length, segment count and feature count, u64 train/val/test counts,
    then for each sample (train, val, test in order) an i32 label followed
    by length*features float64 frame values.
    """
    header = MAGIC + struct.pack(
        "<IIIIIQQQ",
        FORMAT_VERSION,
        dataset.n_classes,
        dataset.length,
        dataset.n_segments,
        dataset.n_features,
        len(dataset.train),
        len(dataset.val),
        len(dataset.test),
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for split in (dataset.train, dataset.val, dataset.test):
            for sample in split:
                if sample.frames.shape != (dataset.length, dataset.n_features):
                    raise ValueError(
                        f"sample shape {sample.frames.shape} does not match header "
                        f"({dataset.length}, {dataset.n_features})"
                    )
                fh.write(struct.pack("<i", sample.label))
                fh.write(np.ascontiguousarray(sample.frames, dtype="<f8").tobytes())


def import_dataset(path) -> Dataset:
    """Read a container written by export_dataset. Provenance fields are lost."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise ValueError(f"not a dataset container: bad magic {blob[:4]!r}")
    version, c, t, n, f, n_train, n_val, n_test = struct.unpack_from("<IIIIIQQQ", blob, 4)
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported container version {version}")
    if t % n != 0:
        raise ValueError(f"corrupt header: length {t} not divisible into {n} segments")
    offset = 4 + struct.calcsize("<IIIIIQQQ")
    frame_bytes = t * f * 8
    expected = offset + (n_train + n_val + n_test) * (4 + frame_bytes)
    if len(blob) != expected:
        raise ValueError(f"container size {len(blob)} does not match header ({expected} expected)")

    def read_split(count: int, offset: int) -> tuple[list[SequenceSample], int]:
        samples = []
        for _ in range(count):
            (label,) = struct.unpack_from("<i", blob, offset)
            offset += 4
            if not 0 <= label < c:
                raise ValueError(f"label {label} outside [0, {c})")
            frames = np.frombuffer(blob, dtype="<f8", count=t * f, offset=offset)
            offset += frame_bytes
            samples.append(
                SequenceSample(
                    frames=frames.reshape(t, f).astype(np.float64),
                    label=label,
                    cluster=label // 2,
                    div_frame=None,
                )
            )
        return samples, offset

    train, offset = read_split(n_train, offset)
    val, offset = read_split(n_val, offset)
    test, offset = read_split(n_test, offset)
    return Dataset(
        train=train, val=val, test=test,
        n_classes=c, length=t, n_segments=n, n_features=f, spec=None,
    )
