import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from noisematch.enhancer import FEFormer, PositionalEncodingSpec, encoding_field, linear_attention, npe, positional_encoding
from noisematch.errors import ParameterError
from noisematch.matcher import score_matrix
from noisematch.tensor import init_parameters
from conftest import t


def test_encoding_at_origin():
    pe = positional_encoding(0.0, 0.0, 16).numpy()
    np.testing.assert_array_equal(pe, np.tile([0.0, 1.0, 0.0, 1.0], 4))


def test_encoding_lowest_frequency_direct():
    pe = positional_encoding(math.pi / 2, 0.0, 4).numpy()
    np.testing.assert_allclose(pe, [1.0, math.cos(math.pi / 2), 0.0, 1.0], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1e4, 1e4), st.floats(-1e4, 1e4))
def test_encoding_bounded(x, y):
    pe = positional_encoding(x, y, 32)
    assert pe.abs().max() <= 1.0


def test_npe_identity_when_extents_agree(rng):
    f = t(rng.normal(size=(3, 5, 8)))
    spec = PositionalEncodingSpec(8, 64, 32, 64, 32)
    assert torch.equal(npe(f, spec), f + encoding_field(3, 5, 8))


def test_npe_rescales_test_positions():
    spec = PositionalEncodingSpec(8, train_w=512, test_w=1024)
    assert spec.mu == 0.5
    field = encoding_field(1, 4, 8, spec.mu, spec.nu)
    np.testing.assert_allclose(field[0, 2].numpy(), positional_encoding(1.0, 0.0, 8).numpy(), atol=1e-15)


def test_npe_of_zero_map_is_the_field():
    spec = PositionalEncodingSpec(8, 128, 128, 256, 64)
    out = npe(torch.zeros(4, 6, 8, dtype=torch.float64), spec)
    assert torch.equal(out, encoding_field(4, 6, 8, spec.mu, spec.nu))


def test_encoding_dimension_validation():
    with pytest.raises(ParameterError):
        PositionalEncodingSpec(6)


def test_attention_single_key_returns_value(rng):
    q = t(rng.normal(size=(5, 4)))
    k = t(rng.normal(size=(1, 4)))
    v = t(rng.normal(size=(1, 3)))
    np.testing.assert_allclose(linear_attention(q, k, v).numpy(), np.repeat(v.numpy(), 5, axis=0), atol=1e-15)


def test_attention_identical_keys_average(rng):
    q = t(rng.normal(size=(4, 3)))
    k = t(np.repeat(rng.normal(size=(1, 3)), 6, axis=0))
    v = t(rng.normal(size=(6, 2)))
    out = linear_attention(q, k, v).numpy()
    np.testing.assert_allclose(out, np.repeat(v.numpy().mean(0, keepdims=True), 4, axis=0), atol=1e-12)


def test_attention_associativity(rng):
    q, k, v = (t(rng.normal(size=s)) for s in [(6, 4), (5, 4), (5, 4)])
    phi = lambda x: torch.nn.functional.elu(x) + 1
    a = phi(q) @ phi(k).T
    quadratic = (a @ v) / a.sum(dim=1, keepdim=True)
    np.testing.assert_allclose(linear_attention(q, k, v).numpy(), quadratic.numpy(), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_attention_convex_combination(n, m, seed):
    r = np.random.default_rng(seed)
    q, k, v = t(r.normal(size=(n, 4))), t(r.normal(size=(m, 4))), t(r.normal(size=(m, 3)))
    out = linear_attention(q, k, v).numpy()
    assert np.all(out >= v.numpy().min(0) - 1e-12) and np.all(out <= v.numpy().max(0) + 1e-12)


@pytest.fixture(scope="module")
def former():
    f = FEFormer(16, 2, heads=8)
    init_parameters(f, 3, "feformer")
    return f


def test_feformer_zero_layers_rejected():
    with pytest.raises(ParameterError):
        FEFormer(16, 0)


def test_feformer_shapes(former, rng):
    a, b = former(t(rng.normal(size=(64, 16))), t(rng.normal(size=(49, 16))))
    assert a.shape == (64, 16) and b.shape == (49, 16)


def test_feformer_swap_symmetry(former, rng):
    fa, fb = t(rng.normal(size=(10, 16))), t(rng.normal(size=(7, 16)))
    a1, b1 = former(fa, fb)
    b2, a2 = former(fb, fa)
    assert torch.equal(a1, a2) and torch.equal(b1, b2)


def test_feformer_large_inputs_finite(former, rng):
    a, b = former(t(rng.uniform(-1e3, 1e3, size=(20, 16))), t(rng.uniform(-1e3, 1e3, size=(20, 16))))
    assert torch.isfinite(a).all() and torch.isfinite(b).all()


def test_enhanced_self_similarity_symmetric(former, rng):
    f = t(rng.normal(size=(12, 16)))
    a, b = former(f, f.clone())
    s = score_matrix(a, b).detach().numpy()
    np.testing.assert_allclose(s, s.T, atol=1e-9)
