"""Per-batch minority profiling and hard-sample mining.

All selections are by rank only: bottom-K / top-K with ties resolved towards the
lower batch index (stable argsort on the sort key).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import AttributeSchema
from .errors import ContractError

CLASS_LEVEL = "class"
INSTANCE_LEVEL = "instance"


@dataclass
class BatchProfile:
    labels: np.ndarray  # (n_bs, n_attr)
    histograms: list  # per attribute, counts over |Z_j|
    minority: list  # per attribute, sorted tuple of minority class ids
    majority: list

    @property
    def n_bs(self) -> int:
        return self.labels.shape[0]

    def to_json(self) -> dict:
        return {
            "n_bs": self.n_bs,
            "histograms": [h.tolist() for h in self.histograms],
            "minority": [list(m) for m in self.minority],
        }


@dataclass
class HardSets:
    """Mined index lists.

    Class level: ``sets[(j, c)] = (positives, negatives)``.
    Instance level: ``sets[(i, j)] = (positives, negatives)`` for anchor sample i,
    whose class is ``labels[i, j]``. Lists are in selection order.
    """

    mode: str
    k: int
    labels: np.ndarray
    sets: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "mode": self.mode,
            "k": self.k,
            "sets": [
                {"key": list(key), "pos": p.tolist(), "neg": q.tolist()}
                for key, (p, q) in self.sets.items()
            ],
        }


@dataclass
class TripletSet:
    anchor: np.ndarray
    positive: np.ndarray
    negative: np.ndarray
    attr: np.ndarray

    def __len__(self):
        return len(self.anchor)


@dataclass
class PairSet:
    pos_anchor: np.ndarray
    pos_other: np.ndarray
    pos_attr: np.ndarray
    neg_anchor: np.ndarray
    neg_other: np.ndarray
    neg_attr: np.ndarray

    @property
    def n_pos(self):
        return len(self.pos_anchor)

    @property
    def n_neg(self):
        return len(self.neg_anchor)


def minority_classes(hist, n_bs: int) -> tuple[int, ...]:
    """Greedy smallest-first accumulation while the total stays below n_bs / 2."""
    order = sorted(range(len(hist)), key=lambda c: (hist[c], c))
    chosen, total = [], 0
    for c in order:
        if total + hist[c] >= 0.5 * n_bs:
            break
        total += hist[c]
        chosen.append(c)
    return tuple(sorted(chosen))


def profile_batch(labels, schema: AttributeSchema, n_bs: int | None = None) -> BatchProfile:
    labels = np.asarray(labels, dtype=np.int64)
    if n_bs is None:
        n_bs = labels.shape[0] if labels.ndim == 2 else 0
    if n_bs < 1:
        raise ContractError("n_bs must be >= 1")
    if labels.ndim != 2 or labels.shape[0] != n_bs:
        raise ContractError(f"labels shape {labels.shape} does not match n_bs={n_bs}")
    schema.check_labels(labels)
    hists, mins, majs = [], [], []
    for j, card in enumerate(schema.cardinalities):
        h = np.bincount(labels[:, j], minlength=card)
        m = minority_classes(h.tolist(), n_bs)
        hists.append(h)
        mins.append(m)
        majs.append(tuple(c for c in range(card) if c not in m))
    return BatchProfile(labels, hists, mins, majs)


def eligible_classes(profile: BatchProfile, j: int) -> list[int]:
    """Minority classes of attribute j with at least two samples in the batch."""
    return [c for c in profile.minority[j] if profile.histograms[j][c] >= 2]


def anchors(profile: BatchProfile, labels=None) -> np.ndarray:
    """(sample, attribute) pairs of minority anchors, ordered by attribute then sample."""
    labels = profile.labels if labels is None else np.asarray(labels)
    out = []
    for j in range(labels.shape[1]):
        ok = eligible_classes(profile, j)
        if not ok:
            continue
        idx = np.flatnonzero(np.isin(labels[:, j], ok))
        out.append(np.column_stack([idx, np.full(len(idx), j)]))
    if not out:
        return np.zeros((0, 2), dtype=np.int64)
    return np.concatenate(out).astype(np.int64)


def _take_first(order: np.ndarray, valid: np.ndarray, k: int) -> np.ndarray:
    return order[valid[order]][:k]


def mine_class_level(profile: BatchProfile, cache, k: int) -> HardSets:
    if k < 1:
        raise ContractError("K must be >= 1")
    labels = profile.labels
    hard = HardSets(CLASS_LEVEL, k, labels)
    for j in range(labels.shape[1]):
        for c in eligible_classes(profile, j):
            score = cache.probs[j][:, c]
            in_class = labels[:, j] == c
            pos = _take_first(np.argsort(score, kind="stable"), in_class, k)
            neg = _take_first(np.argsort(-score, kind="stable"), ~in_class, k)
            hard.sets[(j, c)] = (pos, neg)
    return hard


def pairwise_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """L2 distance matrix from explicit differences.

    Slower than the Gram expansion but each entry depends only on its own pair, so
    duplicate embeddings give bit-identical distances and ties break by index.
    """
    diff = a[:, None, :] - b[None, :, :]
    return np.sqrt((diff * diff).sum(axis=2))


def mine_instance_level(profile: BatchProfile, cache, k: int) -> HardSets:
    if k < 1:
        raise ContractError("K must be >= 1")
    labels = profile.labels
    hard = HardSets(INSTANCE_LEVEL, k, labels)
    anc = anchors(profile)
    for j in range(labels.shape[1]):
        rows = anc[anc[:, 1] == j, 0]
        if len(rows) == 0:
            continue
        emb = cache.embeddings[j]
        pred = cache.predictions(j)
        dist = pairwise_distances(emb[rows], emb)
        cls = labels[rows, j]
        same = labels[None, :, j] == cls[:, None]
        pos_ok = same & (pred[None, :] != cls[:, None])
        pos_ok[np.arange(len(rows)), rows] = False
        neg_ok = ~same
        # invalid candidates sort last; stable sort keeps lower batch index first on ties
        pos_order = np.argsort(np.where(pos_ok, -dist, np.inf), axis=1, kind="stable")[:, :k]
        neg_order = np.argsort(np.where(neg_ok, dist, np.inf), axis=1, kind="stable")[:, :k]
        pos_valid = np.take_along_axis(pos_ok, pos_order, axis=1)
        neg_valid = np.take_along_axis(neg_ok, neg_order, axis=1)
        for r, i in enumerate(rows):
            hard.sets[(int(i), j)] = (pos_order[r][pos_valid[r]], neg_order[r][neg_valid[r]])
    return hard


def mine(profile: BatchProfile, cache, k: int, mode: str) -> HardSets:
    if mode == CLASS_LEVEL:
        return mine_class_level(profile, cache, k)
    if mode == INSTANCE_LEVEL:
        return mine_instance_level(profile, cache, k)
    raise ContractError(f"unknown mining mode {mode!r}")


def _padded_sets(hard: HardSets, anchor_list):
    """Per anchor, K-wide positive/negative index arrays padded with -1.

    The anchor itself is dropped from its own positives.
    """
    anchor_list = np.asarray(anchor_list, dtype=np.int64).reshape(-1, 2)
    m, k = len(anchor_list), hard.k
    pos = np.full((m, k), -1, dtype=np.int64)
    neg = np.full((m, k), -1, dtype=np.int64)
    keep = np.zeros(m, dtype=bool)
    labels = hard.labels
    for r, (i, j) in enumerate(anchor_list):
        if hard.mode == CLASS_LEVEL:
            key = (int(j), int(labels[i, j]))
        else:
            key = (int(i), int(j))
        found = hard.sets.get(key)
        if found is None:
            continue
        p, q = found
        p = p[p != i]
        pos[r, :len(p)] = p
        neg[r, :len(q)] = q
        keep[r] = True
    return anchor_list, pos, neg, keep


def build_triplets(hard: HardSets, anchor_list) -> TripletSet:
    """Per anchor, every (hard positive, hard negative) combination."""
    anc, pos, neg, _ = _padded_sets(hard, anchor_list)
    m, k = pos.shape
    ok = (pos[:, :, None] >= 0) & (neg[:, None, :] >= 0)
    r, s, t = np.nonzero(ok)
    return TripletSet(anc[r, 0], pos[r, s], neg[r, t], anc[r, 1])


def build_pairs(hard: HardSets, anchor_list) -> PairSet:
    """Anchor paired with each of its hard positives (P+) and hard negatives (P-)."""
    anc, pos, neg, _ = _padded_sets(hard, anchor_list)
    rp, sp = np.nonzero(pos >= 0)
    rn, sn = np.nonzero(neg >= 0)
    return PairSet(anc[rp, 0], pos[rp, sp], anc[rp, 1], anc[rn, 0], neg[rn, sn], anc[rn, 1])
