"""Cross-entropy and the three class rectification losses.

Every loss returns a :class:`LossBundle` with analytic gradients. ``grad_logits`` is
a per-attribute list matched to ``cache.logits``; ``grad_features`` is matched to
``cache.embeddings`` (normalised features unless the model runs in raw mode).
Mined index sets are constants for differentiation.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import mining
from .datagen import AttributeSchema
from .errors import ConfigError, ContractError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = math.log(PROB_FLOOR)

CRL_VARIANTS = ("none", "relative", "absolute", "distribution")


@dataclass
class LossBundle:
    value: float
    grad_logits: list | None = None
    grad_features: list | None = None
    diagnostics: dict = field(default_factory=dict)


@dataclass(frozen=True)
class HistogramSpec:
    bins: int = 51
    low: float = 0.0
    high: float = 2.0

    def __post_init__(self):
        if self.bins < 2:
            raise ConfigError("histogram needs at least 2 bins")
        if not self.high > self.low:
            raise ConfigError("histogram range must have high > low")

    @property
    def step(self) -> float:
        return (self.high - self.low) / (self.bins - 1)

    @property
    def centers(self) -> np.ndarray:
        return self.low + self.step * np.arange(self.bins)


@dataclass(frozen=True)
class MarginSpec:
    relative: tuple[float, ...]
    apc: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "relative", tuple(float(m) for m in self.relative))
        if any(m <= 0 for m in self.relative) or self.apc <= 0:
            raise ConfigError("margins must be positive")

    @classmethod
    def for_schema(cls, schema: AttributeSchema, apc: float = 1.0) -> "MarginSpec":
        return cls(tuple(margin(schema, j) for j in range(schema.n_attr)), apc)


def margin(schema: AttributeSchema, j: int) -> float:
    """Per-attribute triplet margin 2*pi / |Z_j|."""
    if not 0 <= j < schema.n_attr:
        raise ContractError(f"attribute index {j} out of range")
    return 2.0 * math.pi / schema.cardinalities[j]


# --- cross-entropy ------------------------------------------------------------

def _check_labels(cache, labels):
    labels = np.asarray(labels)
    if labels.shape != (cache.batch_size, cache.n_attr):
        raise ContractError(f"labels shape {labels.shape} != ({cache.batch_size}, {cache.n_attr})")
    for j, p in enumerate(cache.probs):
        if labels[:, j].min() < 0 or labels[:, j].max() >= p.shape[1]:
            raise ContractError(f"label out of range for attribute {j}")
    return labels


def _cross_entropy(cache, labels, weights=None) -> LossBundle:
    labels = _check_labels(cache, labels)
    n = cache.batch_size
    rows = np.arange(n)
    total = 0.0
    grads = []
    for j in range(cache.n_attr):
        y = labels[:, j]
        nll = -np.maximum(cache.log_probs[j][rows, y], LOG_PROB_FLOOR)
        g = cache.probs[j].copy()
        g[rows, y] -= 1.0
        if weights is not None:
            w = np.asarray(weights[j], dtype=np.float64)[y]
            nll = w * nll
            g *= w[:, None]
        total += nll.sum()
        grads.append(g / n)
    return LossBundle(total / n, grad_logits=grads, diagnostics={"ce": total / n})


def cross_entropy(cache, labels) -> LossBundle:
    """Mean over the batch of the summed per-attribute negative log-likelihoods."""
    return _cross_entropy(cache, labels)


# --- distance helpers ---------------------------------------------------------

def _unique_pairs(n, a, b):
    """Deduplicate (a, b) index pairs; returns unique a, unique b and the inverse map."""
    uniq, inv = np.unique(a * n + b, return_inverse=True)
    return uniq // n, uniq % n, inv.reshape(-1)


def _distances(emb, a, b):
    diff = emb[a] - emb[b]
    return np.sqrt((diff * diff).sum(axis=1))


def _pair_grad(emb, a, b, coef):
    """Gradient where pair (a, b) adds coef * (e_a - e_b) to e_a and the negation to e_b."""
    n = len(emb)
    w = np.bincount(a * n + b, weights=coef, minlength=n * n).reshape(n, n)
    w = w + w.T
    return w.sum(axis=1)[:, None] * emb - w @ emb


def _inv_or_zero(d):
    # subgradient 0 for coincident points
    return np.divide(1.0, d, out=np.zeros_like(d), where=d > 0)


def _empty_grads(cache):
    return [np.zeros_like(e) for e in cache.embeddings]


# --- relative (triplet) ---------------------------------------------------------

def crl_relative(triplets: mining.TripletSet, cache, margins: MarginSpec) -> LossBundle:
    """Hinge triplet loss, averaged per attribute and then over attributes with triplets."""
    grads = _empty_grads(cache)
    attrs = np.unique(triplets.attr)
    per_attr, n_active = {}, 0
    for j in attrs:
        sel = triplets.attr == j
        a, p, q = triplets.anchor[sel], triplets.positive[sel], triplets.negative[sel]
        emb = cache.embeddings[j]
        n, m = len(emb), len(a)
        ua, ub, inv = _unique_pairs(n, np.concatenate([a, a]), np.concatenate([p, q]))
        d = _distances(emb, ua, ub)
        inv_ap, inv_an = inv[:m], inv[m:]
        hinge = margins.relative[j] + d[inv_ap] - d[inv_an]
        active = hinge > 0
        per_attr[int(j)] = float(np.maximum(hinge, 0.0).mean())
        n_active += int(active.sum())
        s = active / (m * len(attrs))
        rd = _inv_or_zero(d)
        coef = (np.bincount(inv_ap, weights=s, minlength=len(d))
                - np.bincount(inv_an, weights=s, minlength=len(d))) * rd
        grads[j] += _pair_grad(emb, ua, ub, coef)
    value = float(np.mean(list(per_attr.values()))) if per_attr else 0.0
    return LossBundle(
        value,
        grad_features=grads,
        diagnostics={"n_triplets": len(triplets), "n_active": n_active, "per_attr": per_attr},
    )


# --- absolute (contrastive) -----------------------------------------------------

def crl_absolute(pairs: mining.PairSet, cache, m_apc: float = 1.0) -> LossBundle:
    """0.5 * (mean positive d^2 + mean negative max(m_apc - d, 0)^2), per attribute then averaged."""
    grads = _empty_grads(cache)
    attrs = np.union1d(pairs.pos_attr, pairs.neg_attr)
    per_attr = {}
    for j in attrs:
        emb = cache.embeddings[j]
        value = 0.0
        sel = pairs.pos_attr == j
        if sel.any():
            a, p = pairs.pos_anchor[sel], pairs.pos_other[sel]
            d = _distances(emb, a, p)
            value += 0.5 * float((d * d).mean())
            # d(0.5 d^2)/de_a = e_a - e_p
            grads[j] += _pair_grad(emb, a, p, np.full(len(a), 1.0 / (len(a) * len(attrs))))
        sel = pairs.neg_attr == j
        if sel.any():
            a, q = pairs.neg_anchor[sel], pairs.neg_other[sel]
            d = _distances(emb, a, q)
            slack = np.maximum(m_apc - d, 0.0)
            value += 0.5 * float((slack * slack).mean())
            coef = -slack * _inv_or_zero(d) / (len(a) * len(attrs))
            grads[j] += _pair_grad(emb, a, q, coef)
        per_attr[int(j)] = value
    value = float(np.mean(list(per_attr.values()))) if per_attr else 0.0
    return LossBundle(
        value,
        grad_features=grads,
        diagnostics={"n_pos": pairs.n_pos, "n_neg": pairs.n_neg, "per_attr": per_attr},
    )


# --- distribution (histogram overlap) -------------------------------------------

def soft_bin(d: np.ndarray, hist: HistogramSpec):
    """Triangular-kernel binning.

    Returns (lower bin index, weight on lower bin, clamped mask). Weight on the upper
    bin is ``1 - lower weight``. A distance exactly on an interior bin centre puts all
    of its mass on that bin.
    """
    lo, hi, step = hist.low, hist.high, hist.step
    clamped = (d < lo) | (d > hi)
    dc = np.clip(d, lo, hi)
    pos = (dc - lo) / step
    # snap values within rounding noise of a centre onto it (0.12 / 0.04 -> 2.999...)
    snapped = np.round(pos)
    pos = np.where(np.abs(pos - snapped) < 1e-9, snapped, pos)
    idx = np.minimum(np.floor(pos).astype(np.int64), hist.bins - 2)
    w_lo = 1.0 - (pos - idx)
    return idx, w_lo, clamped


def histogram(d: np.ndarray, hist: HistogramSpec) -> np.ndarray:
    idx, w_lo, _ = soft_bin(d, hist)
    h = np.bincount(idx, weights=w_lo, minlength=hist.bins)
    h += np.bincount(idx + 1, weights=1.0 - w_lo, minlength=hist.bins)
    return h / max(len(d), 1)


def histogram_overlap(d_pos: np.ndarray, d_neg: np.ndarray, hist: HistogramSpec):
    """Value sum_t h+_t * sum_{k<=t} h-_k and its derivatives w.r.t. each distance."""
    h_pos = histogram(d_pos, hist)
    h_neg = histogram(d_neg, hist)
    cum_neg = np.cumsum(h_neg)
    value = float(h_pos @ cum_neg)
    tail_pos = np.cumsum(h_pos[::-1])[::-1]  # sum_{t>=k} h+_t
    step = hist.step

    def grad(d, coeff, n):
        idx, _, clamped = soft_bin(d, hist)
        g = (coeff[idx + 1] - coeff[idx]) / (step * n)
        g[clamped] = 0.0
        return g

    return value, grad(d_pos, cum_neg, len(d_pos)), grad(d_neg, tail_pos, len(d_neg)), h_pos, h_neg


def crl_distribution(pairs: mining.PairSet, cache, hist: HistogramSpec | None = None) -> LossBundle:
    """Histogram overlap of positive and negative pair distances, per attribute then averaged.

    Attributes lacking either positive or negative pairs contribute nothing; if no
    attribute has both, the loss is 0 and ``diagnostics["empty"]`` is set.
    """
    hist = hist or HistogramSpec()
    grads = _empty_grads(cache)
    attrs = np.intersect1d(pairs.pos_attr, pairs.neg_attr)
    per_attr, n_clamped = {}, 0
    for j in attrs:
        emb = cache.embeddings[j]
        sp, sn = pairs.pos_attr == j, pairs.neg_attr == j
        ap, p = pairs.pos_anchor[sp], pairs.pos_other[sp]
        an, q = pairs.neg_anchor[sn], pairs.neg_other[sn]
        d_pos = _distances(emb, ap, p)
        d_neg = _distances(emb, an, q)
        value, g_pos, g_neg, _, _ = histogram_overlap(d_pos, d_neg, hist)
        n_clamped += int(((d_pos < hist.low) | (d_pos > hist.high)).sum())
        n_clamped += int(((d_neg < hist.low) | (d_neg > hist.high)).sum())
        per_attr[int(j)] = value
        scale = 1.0 / len(attrs)
        grads[j] += _pair_grad(emb, np.concatenate([ap, an]), np.concatenate([p, q]),
                               scale * np.concatenate([g_pos * _inv_or_zero(d_pos), g_neg * _inv_or_zero(d_neg)]))
    if n_clamped:
        log.debug("crl_distribution: %d distances clamped into [%g, %g]", n_clamped, hist.low, hist.high)
    value = float(np.mean(list(per_attr.values()))) if per_attr else 0.0
    return LossBundle(
        value,
        grad_features=grads,
        diagnostics={
            "n_pos": pairs.n_pos,
            "n_neg": pairs.n_neg,
            "n_clamped": n_clamped,
            "empty": len(attrs) == 0,
            "per_attr": per_attr,
        },
    )


# --- l_bln = l_crl + l_ce -------------------------------------------------------

def combined_loss(
    cache,
    labels,
    schema: AttributeSchema,
    crl_variant: str = "relative",
    mining_mode: str = mining.INSTANCE_LEVEL,
    k: int = 5,
    margins: MarginSpec | None = None,
    hist: HistogramSpec | None = None,
    crl_weight: float = 1.0,
    class_weights=None,
) -> LossBundle:
    """Cross-entropy (optionally class-weighted) plus the selected rectification term.

    With ``crl_variant="none"`` no profiling or mining is performed at all.
    """
    if crl_variant not in CRL_VARIANTS:
        raise ContractError(f"unknown crl variant {crl_variant!r}")
    ce = _cross_entropy(cache, labels, class_weights)
    if crl_variant == "none":
        ce.diagnostics.update(crl=0.0, bln=ce.value)
        return ce

    margins = margins or MarginSpec.for_schema(schema)
    profile = mining.profile_batch(labels, schema)
    hard = mining.mine(profile, cache, k, mining_mode)
    anc = mining.anchors(profile)
    if crl_variant == "relative":
        crl = crl_relative(mining.build_triplets(hard, anc), cache, margins)
    elif crl_variant == "absolute":
        crl = crl_absolute(mining.build_pairs(hard, anc), cache, margins.apc)
    else:
        crl = crl_distribution(mining.build_pairs(hard, anc), cache, hist)

    value = ce.value + crl_weight * crl.value
    grad_features = crl.grad_features
    if crl_weight != 1.0:
        grad_features = [crl_weight * g for g in grad_features]
    diag = dict(crl.diagnostics)
    diag.update(ce=ce.value, crl=crl.value, bln=value, n_anchors=len(anc), profile=profile, hard=hard)
    return LossBundle(value, grad_logits=ce.grad_logits, grad_features=grad_features, diagnostics=diag)
