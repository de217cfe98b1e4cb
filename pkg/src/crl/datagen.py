"""Synthetic imbalanced multi-attribute data: generation, binary I/O and splitting."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ContractError, DatasetFormatError, SchemaViolationError

MAGIC = b"CRLD"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHQII")  # magic, version, n, d, n_attr


@dataclass(frozen=True)
class AttributeSchema:
    cardinalities: tuple[int, ...]

    def __post_init__(self):
        cards = tuple(int(c) for c in self.cardinalities)
        object.__setattr__(self, "cardinalities", cards)
        if len(cards) < 1:
            raise ConfigError("schema needs at least one attribute")
        if any(c < 2 for c in cards):
            raise ConfigError(f"every attribute needs >= 2 classes, got {cards}")

    @property
    def n_attr(self) -> int:
        return len(self.cardinalities)

    def check_labels(self, labels: np.ndarray) -> None:
        labels = np.asarray(labels)
        if labels.ndim != 2 or labels.shape[1] != self.n_attr:
            raise ContractError(f"labels must have shape (n, {self.n_attr}), got {labels.shape}")
        upper = np.asarray(self.cardinalities)
        bad = (labels < 0) | (labels >= upper)
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise ContractError(
                f"label {labels[i, j]} of sample {i} outside [0, {upper[j]}) for attribute {j}"
            )


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    labels: np.ndarray


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable feature matrix ``(n, d)`` plus label matrix ``(n, n_attr)``."""

    schema: AttributeSchema
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        x = np.array(self.features, dtype=np.float64, order="C")
        y = np.array(self.labels, dtype=np.int64, order="C")
        if x.ndim != 2 or x.shape[0] < 1:
            raise ContractError(f"features must be a non-empty (n, d) array, got {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise ContractError("features and labels disagree on sample count")
        if not np.isfinite(x).all():
            raise ContractError("features contain non-finite values")
        self.schema.check_labels(y)
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def __getitem__(self, i) -> Sample:
        return Sample(self.features[i], self.labels[i])

    def __iter__(self):
        for i in range(self.n):
            yield self[i]

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.features.shape == other.features.shape
            and np.array_equal(self.labels, other.labels)
            # bitwise, so -0.0 != 0.0 and round trips are checked exactly
            and self.features.tobytes() == other.features.tobytes()
        )

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.features[idx], self.labels[idx])

    def class_counts(self, j: int) -> np.ndarray:
        return np.bincount(self.labels[:, j], minlength=self.schema.cardinalities[j])


@dataclass(frozen=True, eq=False)
class GeneratorSpec:
    schema: AttributeSchema
    feature_dim: int
    priors: Sequence[np.ndarray]
    prototypes: Sequence[np.ndarray]  # per attribute: (|Z_j|, feature_dim)
    noise_sigma: float
    n_samples: int
    seed: int = 0

    def validate(self) -> None:
        if len(self.priors) != self.schema.n_attr or len(self.prototypes) != self.schema.n_attr:
            raise ConfigError("need one prior and one prototype block per attribute")
        for j, (card, prior, proto) in enumerate(zip(self.schema.cardinalities, self.priors, self.prototypes)):
            prior = np.asarray(prior, dtype=np.float64)
            if prior.shape != (card,):
                raise ConfigError(f"prior of attribute {j} has shape {prior.shape}, expected ({card},)")
            if (prior < 0).any() or abs(prior.sum() - 1.0) > 1e-9:
                raise ConfigError(f"prior of attribute {j} is not a probability vector: {prior.tolist()}")
            if np.shape(proto) != (card, self.feature_dim):
                raise ConfigError(
                    f"prototypes of attribute {j} have shape {np.shape(proto)}, expected ({card}, {self.feature_dim})"
                )
        if not self.noise_sigma > 0:
            raise ConfigError("noise_sigma must be > 0")
        if self.n_samples < 1 or self.feature_dim < 1:
            raise ConfigError("n_samples and feature_dim must be >= 1")


def imbalance_prior(ratio: float, cardinality: int = 2) -> np.ndarray:
    """Geometric prior whose largest/smallest class ratio is ``ratio``."""
    if ratio < 1:
        raise ConfigError("imbalance ratio must be >= 1")
    if cardinality == 2:
        return np.array([ratio, 1.0]) / (ratio + 1.0)
    w = ratio ** (-np.arange(cardinality) / (cardinality - 1))
    return w / w.sum()


def make_generator_spec(
    schema: AttributeSchema,
    priors,
    feature_dim: int = 32,
    prototype_scale: float = 1.0,
    noise_sigma: float = 1.0,
    n_samples: int = 1000,
    seed: int = 0,
) -> GeneratorSpec:
    """Draw prototype vectors from ``seed`` and bundle everything into a GeneratorSpec.

    Each prototype is Gaussian with per-coordinate scale ``prototype_scale / sqrt(d)``,
    so prototype norms are close to ``prototype_scale`` whatever the dimension.
    """
    rng = np.random.default_rng([seed, 0x9E37])
    protos = [
        rng.standard_normal((card, feature_dim)) * (prototype_scale / np.sqrt(feature_dim))
        for card in schema.cardinalities
    ]
    spec = GeneratorSpec(
        schema=schema,
        feature_dim=feature_dim,
        priors=[np.asarray(p, dtype=np.float64) for p in priors],
        prototypes=protos,
        noise_sigma=noise_sigma,
        n_samples=n_samples,
        seed=seed,
    )
    spec.validate()
    return spec


def generate_synthetic(spec: GeneratorSpec) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n, d = spec.n_samples, spec.feature_dim
    labels = np.empty((n, spec.schema.n_attr), dtype=np.int64)
    for j, prior in enumerate(spec.priors):
        labels[:, j] = rng.choice(len(prior), size=n, p=np.asarray(prior, dtype=np.float64))
    features = np.zeros((n, d))
    for j, proto in enumerate(spec.prototypes):
        features += np.asarray(proto, dtype=np.float64)[labels[:, j]]
    features += spec.noise_sigma * rng.standard_normal((n, d))
    return Dataset(spec.schema, features, labels)


# --- binary file format -------------------------------------------------------

def _record_dtype(d, n_attr):
    return np.dtype([("x", "<f8", (d,)), ("y", "<u4", (n_attr,))])


def save_dataset(ds: Dataset, path) -> None:
    schema = ds.schema
    rec = np.empty(ds.n, dtype=_record_dtype(ds.feature_dim, schema.n_attr))
    rec["x"] = ds.features
    rec["y"] = ds.labels
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, ds.n, ds.feature_dim, schema.n_attr))
        fh.write(struct.pack(f"<{schema.n_attr}I", *schema.cardinalities))
        fh.write(rec.tobytes())


def load_dataset(path) -> Dataset:
    buf = Path(path).read_bytes()
    if len(buf) < _HEADER.size:
        raise DatasetFormatError(f"{path}: malformed header, file has only {len(buf)} bytes", offset=len(buf))
    magic, version, n, d, n_attr = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise DatasetFormatError(f"{path}: malformed header, bad magic {magic!r}", offset=0)
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"{path}: unsupported format version {version}", offset=4)
    if n < 1 or d < 1 or n_attr < 1:
        raise DatasetFormatError(f"{path}: malformed header, n={n} d={d} n_attr={n_attr}", offset=6)
    off = _HEADER.size
    if len(buf) < off + 4 * n_attr:
        raise DatasetFormatError(f"{path}: truncated cardinality table", offset=len(buf))
    cards = struct.unpack_from(f"<{n_attr}I", buf, off)
    off += 4 * n_attr
    try:
        schema = AttributeSchema(cards)
    except ConfigError as exc:
        raise SchemaViolationError(f"{path}: {exc}", offset=_HEADER.size) from None
    dt = _record_dtype(d, n_attr)
    expected = off + n * dt.itemsize
    if len(buf) < expected:
        raise DatasetFormatError(
            f"{path}: truncated, expected {expected} bytes for {n} samples, got {len(buf)}", offset=len(buf)
        )
    if len(buf) > expected:
        raise DatasetFormatError(f"{path}: {len(buf) - expected} trailing bytes", offset=expected)
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
    labels = rec["y"].astype(np.int64)
    bad = labels >= np.asarray(cards)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        at = off + i * dt.itemsize + 8 * d + 4 * j
        raise SchemaViolationError(
            f"{path}: label {labels[i, j]} of sample {i} exceeds cardinality {cards[j]} of attribute {j}",
            offset=at,
        )
    features = rec["x"].copy()
    if not np.isfinite(features).all():
        i = int(np.argwhere(~np.isfinite(features))[0, 0])
        raise DatasetFormatError(f"{path}: non-finite feature in sample {i}", offset=off + i * dt.itemsize)
    return Dataset(schema, features, labels)


# --- splitting ------------------------------------------------------------------

def largest_remainder(fractions, n: int) -> list[int]:
    """Integer sizes proportional to ``fractions`` that sum exactly to ``n``."""
    quotas = np.asarray(fractions, dtype=np.float64) * n
    sizes = np.floor(quotas).astype(np.int64)
    short = n - int(sizes.sum())
    # stable sort: equal remainders go to the earlier split
    order = np.argsort(-(quotas - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes.tolist()


def split(ds: Dataset, fractions, seed: int) -> list[Dataset]:
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must be positive and sum to 1, got {fractions}")
    perm = np.random.default_rng(seed).permutation(ds.n)
    out, start = [], 0
    for size in largest_remainder(fractions, ds.n):
        # keep original order inside each part
        out.append(ds.subset(np.sort(perm[start:start + size])))
        start += size
    return out
