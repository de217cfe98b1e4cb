import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from crl import losses
from crl.datagen import AttributeSchema
from crl.errors import ConfigError, ContractError, NumericInputError
from crl.network import (ModelConfig, OptimState, backward, forward, init_params, log_softmax,
                         predict, sgd_step)
from helpers import central_difference, relative_error


def small_model(cards=(2, 3), d=6, widths=(10,), branch=5, seed=0, normalize=True):
    cfg = ModelConfig(feature_dim=d, schema=AttributeSchema(cards), trunk_layer_sizes=widths,
                      branch_dim=branch, init_seed=seed, normalize_features=normalize)
    return init_params(cfg)


def test_init_is_seeded():
    a, b = small_model(seed=3), small_model(seed=3)
    assert all(np.array_equal(a[k], b[k]) for k in a.names())
    c = small_model(seed=4)
    assert not np.array_equal(a["trunk.0.W"], c["trunk.0.W"])


def test_head_shape_contract():
    p = init_params(ModelConfig(feature_dim=8, schema=AttributeSchema((2,)), branch_dim=64))
    assert p["head.0.W"].shape == (2, 64)
    assert p["branch.0.W"].shape == (64, 128)
    assert not p["head.0.b"].any() and not p["trunk.0.b"].any()


@pytest.mark.parametrize("kwargs", [dict(trunk_layer_sizes=(0,)), dict(trunk_layer_sizes=()), dict(branch_dim=0)])
def test_bad_config_rejected(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(feature_dim=4, schema=AttributeSchema((2,)), **kwargs)


def test_zero_head_gives_uniform_probabilities():
    p = small_model(cards=(2, 5))
    for j in range(2):
        p.tensors[f"head.{j}.W"][:] = 0
    cache = forward(p, np.random.default_rng(0).standard_normal((4, 6)))
    assert np.allclose(cache.probs[0], 0.5)
    assert np.allclose(cache.probs[1], 0.2)


def test_softmax_of_log3_logits():
    p = log_softmax(np.array([[math.log(3.0), 0.0]]))
    assert np.allclose(np.exp(p), [[0.75, 0.25]], atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(shift=st.floats(-50, 50), seed=st.integers(0, 1000))
def test_softmax_shift_invariance(shift, seed):
    z = np.random.default_rng(seed).standard_normal((3, 4)) * 5
    assert np.allclose(np.exp(log_softmax(z)), np.exp(log_softmax(z + shift)), atol=1e-12)


def test_probabilities_valid_and_embeddings_unit():
    p = small_model()
    cache = forward(p, np.random.default_rng(1).standard_normal((7, 6)) * 10)
    for j in range(2):
        assert np.allclose(cache.probs[j].sum(axis=1), 1.0, atol=1e-9)
        assert (cache.probs[j] >= 0).all() and (cache.probs[j] <= 1).all()
        norms = np.linalg.norm(cache.embeddings[j], axis=1)
        live = np.linalg.norm(cache.features[j], axis=1) > 0
        assert np.allclose(norms[live], 1.0)


def test_forward_input_checks():
    p = small_model()
    with pytest.raises(NumericInputError):
        forward(p, np.array([[np.nan] * 6]))
    with pytest.raises(ContractError):
        forward(p, np.zeros((2, 5)))
    with pytest.raises(ContractError):
        forward(p, np.zeros((0, 6)))


def test_zero_upstream_gives_zero_gradients():
    p = small_model()
    cache = forward(p, np.random.default_rng(2).standard_normal((5, 6)))
    grads = backward(p, cache)
    assert all(not g.any() for g in grads.values())


def test_ce_grad_at_uniform_binary():
    p = small_model(cards=(2,))
    p.tensors["head.0.W"][:] = 0
    cache = forward(p, np.ones((1, 6)))
    bundle = losses.cross_entropy(cache, np.array([[0]]))
    assert np.allclose(bundle.grad_logits[0], [[-0.5, 0.5]])


def test_backward_shape_mismatch():
    p = small_model()
    cache = forward(p, np.zeros((3, 6)))
    with pytest.raises(ContractError):
        backward(p, cache, grad_logits=[np.zeros((3, 3)), None])


@pytest.mark.parametrize("normalize", [True, False])
def test_backward_matches_finite_differences(normalize):
    rng = np.random.default_rng(5)
    p = small_model(widths=(9, 7), normalize=normalize, seed=5)
    x = rng.standard_normal((6, 6))
    gl = [rng.standard_normal((6, 2)), rng.standard_normal((6, 3))]
    gf = [rng.standard_normal((6, 5)), rng.standard_normal((6, 5))]

    def surrogate(pp):
        c = forward(pp, x)
        return sum((c.logits[j] * gl[j]).sum() + (c.embeddings[j] * gf[j]).sum() for j in range(2))

    analytic = backward(p, forward(p, x), gl, gf)
    assert relative_error(analytic, central_difference(surrogate, p)) < 1e-6


def test_sgd_plain_step():
    p = small_model()
    w0 = p.copy()
    grads = {k: np.full_like(v, 0.5) for k, v in p.tensors.items()}
    sgd_step(p, grads, OptimState.zeros_like(p, lr=1.0, momentum=0.0, weight_decay=0.0))
    assert all(np.allclose(p[k], w0[k] - 0.5) for k in p.names())


def test_sgd_momentum_recurrence():
    p = small_model()
    w0 = p.copy()
    zero = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    state = OptimState({k: np.full_like(v, 0.1) for k, v in p.tensors.items()}, lr=0.01, momentum=0.9, weight_decay=0.0)
    sgd_step(p, zero, state)
    sgd_step(p, zero, state)
    assert all(np.allclose(p[k], w0[k] + 0.1 * (0.9 + 0.81)) for k in p.names())


def test_sgd_weight_decay_shrinks():
    p = small_model()
    w0 = p.copy()
    zero = {k: np.zeros_like(v) for k, v in p.tensors.items()}
    state = OptimState.zeros_like(p, lr=0.1, momentum=0.0, weight_decay=0.5)
    for _ in range(3):
        sgd_step(p, zero, state)
    assert all(np.allclose(p[k], w0[k] * 0.95 ** 3) for k in p.names())


def test_predict_tie_break_and_argmax():
    p = small_model(cards=(2,))
    p.tensors["head.0.W"][:] = 0
    assert (predict(p, np.ones((3, 6))) == 0).all()
    p.tensors["head.0.b"][:] = [math.log(3.0), 0.0]
    assert (predict(p, np.ones((3, 6))) == 0).all()
    p.tensors["head.0.b"][:] = [0.0, 0.1]
    assert (predict(p, np.ones((3, 6))) == 1).all()


def test_predict_invariant_to_monotone_logit_transform():
    p = small_model(cards=(4,))
    x = np.random.default_rng(3).standard_normal((20, 6))
    cache = forward(p, x)
    transformed = np.argmax(np.tanh(cache.logits[0]) * 3 + 1, axis=1)
    assert np.array_equal(predict(p, x)[:, 0], transformed)


def test_training_is_bit_deterministic():
    def run():
        p = small_model(seed=9)
        st_ = OptimState.zeros_like(p)
        rng = np.random.default_rng(0)
        x = rng.standard_normal((16, 6))
        y = np.column_stack([rng.integers(0, 2, 16), rng.integers(0, 3, 16)])
        for _ in range(5):
            c = forward(p, x)
            b = losses.combined_loss(c, y, p.config.schema, "relative", "instance", 3)
            sgd_step(p, backward(p, c, b.grad_logits, b.grad_features), st_)
        return b"".join(v.tobytes() for v in p.tensors.values())

    assert run() == run()
