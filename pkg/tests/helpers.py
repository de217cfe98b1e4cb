"""Independent oracles shared by several test modules."""

import itertools
import math

import numpy as np

from crl.network import forward


def central_difference(loss_of_params, params, step=1e-5):
    """Central differences of a scalar (or vector) loss w.r.t. every parameter entry."""
    out = {}
    for name, w in params.tensors.items():
        g = None
        for idx in np.ndindex(w.shape):
            old = w[idx]
            w[idx] = old + step
            up = loss_of_params(params)
            w[idx] = old - step
            down = loss_of_params(params)
            w[idx] = old
            d = (np.asarray(up) - np.asarray(down)) / (2 * step)
            if g is None:
                g = np.zeros(w.shape + d.shape)
            g[idx] = d
        out[name] = g
    return out


def relative_error(analytic, numeric):
    """Max abs difference over all tensors, relative to the largest gradient magnitude."""
    diff = max(np.abs(analytic[k] - numeric[k]).max() for k in numeric)
    scale = max(max(np.abs(analytic[k]).max(), np.abs(numeric[k]).max()) for k in numeric)
    # below 1e-6 a gradient is indistinguishable from central-difference roundoff
    # (~1e-11 at step 1e-5); the floor keeps a vanishing gradient from dividing noise by noise
    return diff / max(scale, 1e-6)


def fake_cache(probs=None, embeddings=None):
    """Minimal stand-in for a ForwardCache with only what mining and losses read."""
    from crl.network import ForwardCache
    probs = [np.asarray(p, dtype=float) for p in (probs or [])]
    embeddings = [np.asarray(e, dtype=float) for e in (embeddings or [])]
    n = len(probs[0]) if probs else len(embeddings[0])
    if not probs:
        probs = [np.full((n, 2), 0.5) for _ in embeddings]
    if not embeddings:
        embeddings = [np.zeros((n, 1)) for _ in probs]
    cache = ForwardCache(inputs=np.zeros((n, 1)))
    cache.probs = probs
    cache.log_probs = [np.log(np.maximum(p, 1e-300)) for p in probs]
    cache.logits = [np.log(np.maximum(p, 1e-300)) for p in probs]
    cache.embeddings = embeddings
    cache.features = embeddings
    return cache


COMPONENTS = ("ce", "relative", "absolute", "distribution", "bln-relative", "bln-absolute", "bln-distribution")


def gradcheck_case(seed, mode, k=3, normalize=True, step=1e-6, n=None, n_attr=None,
                   feature_dim=5, widths=(4, 9), branch=(3, 6)):
    """Analytic vs central-difference gradients of every loss through one small network.

    Mined index sets are frozen at the unperturbed point, matching how the losses
    treat them as constants. Each perturbed forward pass is shared by all losses.
    Returns {component: (relative error, gradient scale, number of CRL terms)}.
    """
    from crl import losses, mining
    from crl.datagen import AttributeSchema
    from crl.network import ModelConfig, backward, init_params

    rng = np.random.default_rng(seed)
    cards = tuple(int(c) for c in rng.integers(2, 5, size=n_attr or int(rng.integers(1, 4))))
    schema = AttributeSchema(cards)
    cfg = ModelConfig(feature_dim=feature_dim, schema=schema, trunk_layer_sizes=(int(rng.integers(*widths)),),
                      branch_dim=int(rng.integers(*branch)), init_seed=seed, normalize_features=normalize)
    params = init_params(cfg)
    for name in params.names():
        if name.endswith(".b"):
            # zero biases put dead-trunk samples exactly on a ReLU kink
            params.tensors[name][:] = rng.normal(0.0, 0.1, size=params[name].shape)
    n = n or int(rng.integers(12, 28))
    x = rng.standard_normal((n, feature_dim))
    labels = np.column_stack([rng.choice(c, size=n, p=np.r_[0.75, np.full(c - 1, 0.25 / (c - 1))]) for c in cards])
    margins = losses.MarginSpec.for_schema(schema)
    hist = losses.HistogramSpec()

    cache = forward(params, x)
    profile = mining.profile_batch(labels, schema)
    anc = mining.anchors(profile)
    hard = mining.mine(profile, cache, k, mode)
    triplets, pairs = mining.build_triplets(hard, anc), mining.build_pairs(hard, anc)
    n_terms = {"ce": 0, "relative": len(triplets), "absolute": pairs.n_pos + pairs.n_neg,
               "distribution": min(pairs.n_pos, pairs.n_neg)}

    def bundles(c):
        return [losses.cross_entropy(c, labels), losses.crl_relative(triplets, c, margins),
                losses.crl_absolute(pairs, c, margins.apc), losses.crl_distribution(pairs, c, hist)]

    base = bundles(cache)
    analytic = [backward(params, cache, grad_logits=base[0].grad_logits)]
    analytic += [backward(params, cache, grad_features=b.grad_features) for b in base[1:]]
    analytic += [{key: analytic[0][key] + a[key] for key in a} for a in analytic[1:4]]

    numeric = central_difference(lambda p: np.array([b.value for b in bundles(forward(p, x))]), params, step)
    numeric = [{key: g[..., i] for key, g in numeric.items()} for i in range(4)]
    numeric += [{key: numeric[0][key] + nu[key] for key in nu} for nu in numeric[1:4]]

    out = {}
    for name, a, nu in zip(COMPONENTS, analytic, numeric):
        scale = max(np.abs(g).max() for g in nu.values())
        out[name] = (relative_error(a, nu), scale, n_terms[name.split("-")[-1]])
    return out


# brute-force mining reference: full Python sorts on (key, index) tuples

def ref_profile(labels, cards):
    n = len(labels)
    out = []
    for j, card in enumerate(cards):
        hist = [sum(1 for row in labels if row[j] == c) for c in range(card)]
        order = sorted(range(card), key=lambda c: (hist[c], c))
        prefix = list(itertools.accumulate(hist[c] for c in order))
        out.append((hist, sorted(c for c, s in zip(order, prefix) if s < 0.5 * n)))
    return out


def ref_predict(prob_row):
    best = 0
    for c, p in enumerate(prob_row):
        if p > prob_row[best]:
            best = c
    return best


def ref_class_level(labels, probs, cards, k):
    out = {}
    for j, (hist, mins) in enumerate(ref_profile(labels, cards)):
        for c in mins:
            if hist[c] < 2:
                continue
            inside = [(probs[j][i][c], i) for i in range(len(labels)) if labels[i][j] == c]
            outside = [(-probs[j][i][c], i) for i in range(len(labels)) if labels[i][j] != c]
            out[(j, c)] = ([i for _, i in sorted(inside)[:k]], [i for _, i in sorted(outside)[:k]])
    return out


def ref_instance_level(labels, probs, emb, cards, k):
    out = {}
    for j, (hist, mins) in enumerate(ref_profile(labels, cards)):
        for i in range(len(labels)):
            c = labels[i][j]
            if c not in mins or hist[c] < 2:
                continue
            pos, neg = [], []
            for q in range(len(labels)):
                d = math.dist(emb[j][i], emb[j][q])
                if labels[q][j] == c and q != i and ref_predict(probs[j][q]) != c:
                    pos.append((-d, q))
                elif labels[q][j] != c:
                    neg.append((d, q))
            out[(i, j)] = ([q for _, q in sorted(pos)[:k]], [q for _, q in sorted(neg)[:k]])
    return out


def random_batch(rng, n, cards, tie_heavy=False):
    labels = np.column_stack([rng.choice(c, size=n, p=rng.dirichlet(np.full(c, 0.3))) for c in cards])
    probs, emb = [], []
    for c in cards:
        p = rng.dirichlet(np.ones(c), size=n)
        if tie_heavy:
            p = np.round(p, 1) + 1e-3
            p /= p.sum(axis=1, keepdims=True)
        e = rng.standard_normal((n, 4))
        e /= np.linalg.norm(e, axis=1, keepdims=True)
        if tie_heavy:
            dup = rng.integers(0, n, size=n // 3)
            e[rng.integers(0, n, size=n // 3)] = e[dup]
        probs.append(p)
        emb.append(e)
    return labels, probs, emb


def as_lists(hard):
    return {key: (p.tolist(), q.tolist()) for key, (p, q) in hard.sets.items()}
