import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ctom import tensor as T
from ctom.errors import ShapeError
from ctom.gradcheck import network_check
from ctom.network import (
    coarse_forward,
    init_coarse,
    init_refine,
    init_weights,
    refine_forward,
)


@pytest.fixture(scope="module")
def coarse():
    return init_coarse(0)


@pytest.fixture(scope="module")
def image():
    return np.random.default_rng(0).uniform(size=(3, 64, 64)).astype(np.float32)


def test_coarse_shapes(coarse, image):
    p = coarse_forward(coarse, image)
    assert p.mask_logits.shape == (2, 64, 64)
    assert p.filter.shape == (3, 64, 64)
    assert p.flow.shape == (2, 64, 64)


def test_zero_heads(coarse, image):
    p = coarse_forward(coarse, image)
    assert np.all(p.flow.data == 0)
    assert np.all(p.filter.data == 0.5)
    assert np.all(p.mask_logits.data == 0)


def test_batched(coarse, image):
    p = coarse_forward(coarse, np.stack([image, image[:, ::-1]]))
    assert p.flow.shape == (2, 2, 64, 64)


def test_indivisible(coarse):
    with pytest.raises(ShapeError):
        coarse_forward(coarse, np.zeros((3, 40, 64), np.float32))


def test_parameter_budget():
    c, r = init_weights(0)
    assert c.n_parameters() < 500_000
    assert r.n_parameters() < 500_000


def test_all_kernels_3x3(coarse):
    for name, arr in coarse.state_dict().items():
        if name.endswith(".w"):
            assert arr.shape[-2:] == (3, 3), name


def test_same_seed_same_weights():
    a, b = init_coarse(5), init_coarse(5)
    assert all(np.array_equal(a.state_dict()[k], b.state_dict()[k]) for k in a.state_dict())


def test_he_variance():
    # a 3x3 layer reading 16 channels
    var = np.mean([init_coarse(s).weights["enc1.w"].data.var() for s in range(10)])
    target = 2 / (9 * 16)
    assert abs(var - target) / target < 0.2


@given(st.integers(0, 2**31), st.floats(0.1, 20.0))
def test_ranges_for_any_weights(seed, scale):
    rng = np.random.default_rng(seed)
    p = init_coarse(seed, depth=2, base_features=4)
    for t in p.tensors():
        t.data = (rng.normal(size=t.shape) * scale).astype(np.float32)
    out = coarse_forward(p, rng.uniform(size=(3, 8, 12)))
    assert np.abs(out.flow.data[0]).max() <= 12 and np.abs(out.flow.data[1]).max() <= 8
    assert out.filter.data.min() >= 0 and out.filter.data.max() <= 1
    np.testing.assert_allclose(out.mask_prob().data + T.channel_softmax(out.mask_logits).data[0:1], 1.0, atol=1e-6)

    r = init_refine(seed, blocks=1, features=4)
    for t in r.tensors():
        t.data = (rng.normal(size=t.shape) * scale).astype(np.float32)
    filt, flow = refine_forward(r, rng.uniform(size=(3, 8, 12)), out)
    assert filt.data.min() >= 0 and filt.data.max() <= 1
    assert np.abs(flow.data[0]).max() <= 12 and np.abs(flow.data[1]).max() <= 8


def test_refine_identity_at_init(coarse, image):
    rng = np.random.default_rng(1)
    p = init_coarse(1)
    for k, t in p.weights.items():
        if ".out." in k:
            t.data = rng.normal(0, 0.1, size=t.shape).astype(np.float32)
    pred = coarse_forward(p, image)
    filt, flow = refine_forward(init_refine(0), image, pred)
    assert filt.shape == (3, 64, 64) and flow.shape == (2, 64, 64)
    assert np.array_equal(filt.data, pred.filter.data)
    assert np.array_equal(flow.data, pred.flow.data)


def test_refine_size_mismatch(coarse, image):
    pred = coarse_forward(coarse, image)
    with pytest.raises(ShapeError):
        refine_forward(init_refine(0), np.zeros((3, 32, 32), np.float32), pred)


def test_state_dict_mismatch(coarse):
    other = init_coarse(0, base_features=8)
    with pytest.raises(ShapeError):
        other.load_state_dict(coarse.state_dict())


def test_end_to_end_gradient():
    assert network_check(0).passed
