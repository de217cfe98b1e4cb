"""Classical imbalance baselines: re-sampling plans and cost-sensitive cross-entropy."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datagen import AttributeSchema, Dataset
from .errors import ConfigError
from .losses import LossBundle, _cross_entropy

SAMPLER_MODES = ("uniform", "oversample", "downsample")


@dataclass(frozen=True)
class SamplerPlan:
    mode: str
    reference_attr: int
    indices: np.ndarray  # one epoch's index sequence
    weights: np.ndarray  # expected appearances per epoch of each dataset sample
    seed: int

    def __len__(self):
        return len(self.indices)


def most_imbalanced_attr(ds: Dataset) -> int:
    ratios = []
    for j in range(ds.schema.n_attr):
        c = ds.class_counts(j)
        nz = c[c > 0]
        ratios.append(nz.max() / nz.min())
    return int(np.argmax(ratios))


def make_sampler(ds: Dataset, mode: str = "uniform", reference_attr: int | None = None, seed: int = 0) -> SamplerPlan:
    """Build one epoch's index sequence, balanced on a single reference attribute.

    oversample tops every class up to the largest class count by drawing with
    replacement; downsample draws every class down to the smallest class count
    without replacement. The sequence is shuffled with ``seed``.
    """
    if mode not in SAMPLER_MODES:
        raise ConfigError(f"unknown sampler mode {mode!r}")
    if reference_attr is None:
        reference_attr = most_imbalanced_attr(ds)
    if not 0 <= reference_attr < ds.schema.n_attr:
        raise ConfigError(f"reference attribute {reference_attr} out of range")
    rng = np.random.default_rng(seed)
    y = ds.labels[:, reference_attr]
    counts = ds.class_counts(reference_attr)

    if mode == "uniform":
        return SamplerPlan(mode, reference_attr, rng.permutation(ds.n), np.ones(ds.n), seed)

    weights = np.zeros(ds.n)
    parts = []
    if mode == "oversample":
        target = counts.max()
        for c in np.flatnonzero(counts):
            members = np.flatnonzero(y == c)
            extra = rng.choice(members, size=target - len(members), replace=True)
            parts += [members, extra]
            weights[members] = target / len(members)
    else:
        if (counts == 0).any():
            missing = np.flatnonzero(counts == 0).tolist()
            raise ConfigError(f"cannot downsample: classes {missing} of attribute {reference_attr} have no samples")
        target = counts.min()
        for c in range(len(counts)):
            members = np.flatnonzero(y == c)
            parts.append(np.sort(rng.choice(members, size=target, replace=False)))
            weights[members] = target / len(members)
    idx = rng.permutation(np.concatenate(parts))
    return SamplerPlan(mode, reference_attr, idx, weights, seed)


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple  # per attribute, array over classes

    def __getitem__(self, j):
        return self.weights[j]


def cost_weights(ds: Dataset, schema: AttributeSchema | None = None) -> ClassWeights:
    """Inverse-frequency weights n / (|Z_j| * max(count, 1)), rescaled to a per-sample mean of 1."""
    schema = schema or ds.schema
    out = []
    for j, card in enumerate(schema.cardinalities):
        counts = np.bincount(ds.labels[:, j], minlength=card)
        w = ds.n / (card * np.maximum(counts, 1))
        w = w / ((counts * w).sum() / ds.n)
        out.append(w)
    return ClassWeights(tuple(out))


def raw_cost_weights(ds: Dataset, j: int) -> np.ndarray:
    card = ds.schema.cardinalities[j]
    counts = np.bincount(ds.labels[:, j], minlength=card)
    return ds.n / (card * np.maximum(counts, 1))


def weighted_cross_entropy(cache, labels, weights) -> LossBundle:
    """Cross-entropy with every (sample, attribute) term scaled by its class weight."""
    w = weights.weights if isinstance(weights, ClassWeights) else weights
    return _cross_entropy(cache, labels, w)
