import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sernas import ops
from sernas.autodiff import Tensor, backward, precision, tsum
from sernas.checks import OP_CASES, ZERO_GRAD, gradient_errors, zero_gradient_residual


@pytest.fixture(autouse=True)
def f64():
    with precision(64):
        yield


@pytest.mark.parametrize("name", sorted(OP_CASES))
def test_gradients_match_finite_differences(name):
    assert max(gradient_errors(name, trials=20)) < 1e-4


@pytest.mark.parametrize("name", sorted(ZERO_GRAD))
def test_structurally_zero_gradients(name):
    assert zero_gradient_residual(name, trials=5) < 1e-8


def test_conv_output_shape():
    x = np.zeros((2, 1, 10, 20))
    w = np.zeros((8, 1, 2, 8))
    assert ops.conv2d(x, w).shape == (2, 8, 9, 13)


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 2, 5, 4))
    w = rng.normal(size=(3, 2, 2, 3))
    b = rng.normal(size=3)
    ref = np.zeros((1, 3, 4, 2))
    for o in range(3):
        for t in range(4):
            for f in range(2):
                ref[0, o, t, f] = np.sum(x[0, :, t : t + 2, f : f + 3] * w[o]) + b[o]
    np.testing.assert_allclose(ops.conv2d(x, w, b).data, np.maximum(ref, 0), atol=1e-12)


def test_conv_kernel_too_large():
    with pytest.raises(ValueError, match="larger than input"):
        ops.conv2d(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 4, 1)))


def test_conv_channel_mismatch():
    with pytest.raises(ValueError, match="channel mismatch"):
        ops.conv2d(np.zeros((1, 2, 5, 5)), np.zeros((1, 3, 2, 2)))


def test_maxpool_truncates():
    assert ops.maxpool2d(np.zeros((1, 1, 9, 7)), 2, 2).shape == (1, 1, 4, 3)


def test_maxpool_gradient_routes_to_argmax():
    x = Tensor(np.array([[[[1.0, 5.0], [3.0, 2.0]]]]), requires_grad=True)
    backward(tsum(ops.maxpool2d(x, 2, 2)))
    np.testing.assert_array_equal(x.grad, [[[[0, 1], [0, 0]]]])


def test_maxpool_window_too_large():
    with pytest.raises(ValueError):
        ops.maxpool2d(np.zeros((1, 1, 1, 4)), 2, 1)


def test_dense_shape_mismatch():
    with pytest.raises(ValueError):
        ops.dense(np.zeros((2, 3)), np.zeros((4, 5)))


def test_bigru_shapes_and_final_states():
    rng = np.random.default_rng(1)
    D, H = 3, 2
    p = {}
    for d in ("fw", "bw"):
        p[f"{d}_w_in"] = Tensor(rng.normal(size=(D, 3 * H)))
        p[f"{d}_w_hid"] = Tensor(rng.normal(size=(H, 3 * H)))
        p[f"{d}_b_in"] = Tensor(np.zeros(3 * H))
        p[f"{d}_b_hid"] = Tensor(np.zeros(3 * H))
    x = rng.normal(size=(2, 5, D))
    out, fw, bw = ops.bigru(x, p, lengths=np.array([5, 3]))
    assert out.shape == (2, 5, 2 * H)
    np.testing.assert_array_equal(fw.data[1], out.data[1, 2, :H])
    np.testing.assert_array_equal(bw.data, out.data[:, 0, H:])


def test_bigru_rejects_empty_sequence():
    with pytest.raises(ValueError):
        ops.bigru(np.zeros((1, 0, 3)), {})


def _attn_params(rng, D=3, C=4, K=2):
    return {
        "w_proj": Tensor(rng.normal(size=(D, C))), "b_proj": Tensor(np.zeros(C)),
        "w_bu": Tensor(rng.normal(size=(C, 1))), "b_bu": Tensor(np.zeros(1)),
        "w_td": Tensor(rng.normal(size=(C, K))), "b_td": Tensor(np.zeros(K)),
    }


def test_attention_weights_sum_to_one_over_valid_steps():
    rng = np.random.default_rng(2)
    _, attn = ops.attention_pool(rng.normal(size=(3, 6, 3)), _attn_params(rng), np.array([6, 2, 4]))
    np.testing.assert_allclose(attn.data.sum(axis=1), 1.0)
    assert np.all(attn.data[1, 2:] == 0) and np.all(attn.data[2, 4:] == 0)


def test_attention_fully_masked_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(ValueError):
        ops.attention_pool(rng.normal(size=(1, 3, 3)), _attn_params(rng), np.array([0]))


def test_squash_zero_is_zero():
    np.testing.assert_array_equal(ops.squash(np.zeros((1, 4))).data, np.zeros((1, 4)))


@pytest.mark.parametrize("vec,expected", [([3.0, 4.0], 25 / 26), ([1.0, 0.0], 0.5)])
def test_squash_norm(vec, expected):
    assert math.isclose(np.linalg.norm(ops.squash(np.array([vec])).data), expected, rel_tol=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
def test_squash_norm_below_one(vals):
    assert np.linalg.norm(ops.squash(np.array([vals])).data) < 1.0


def test_routing_couplings_sum_to_one():
    u = np.random.default_rng(3).normal(size=(2, 5, 3, 4))
    v, cs = ops.dynamic_routing(u, 3, return_coupling=True)
    assert len(cs) == 3
    for c in cs:
        np.testing.assert_allclose(c.sum(axis=2), 1.0)
    assert np.all(np.linalg.norm(v.data, axis=-1) < 1)


def test_routing_rejects_zero_iterations():
    with pytest.raises(ValueError):
        ops.dynamic_routing(np.zeros((1, 2, 2, 2)), 0)


def test_window_starts():
    assert ops.window_starts(100, 40, 20) == [0, 20, 40, 60]
    assert ops.window_starts(30, 40, 20) == [0]


def test_capsule_stage_output_shape():
    rng = np.random.default_rng(4)
    C, F, nh, P = 2, 3, 4, 2
    params = {
        "w_heads": Tensor(rng.normal(size=(nh, C, P))), "b_heads": Tensor(np.zeros(nh * P)),
        "w_window": Tensor(rng.normal(size=(P * F, 3, 5, nh))),
        "w_utt": Tensor(rng.normal(size=(3, 4, 6, 5))),
    }
    v = ops.capsule_stage(rng.normal(size=(2, C, 12, F)), params, window=5, shift=3)
    assert v.shape == (2, 4, 6)
    assert np.all(np.linalg.norm(v.data, axis=-1) < 1)


def test_xent_uniform():
    loss = ops.softmax_xent(np.zeros((1, 4)), np.array([2]))
    assert math.isclose(float(loss.data), math.log(4), rel_tol=1e-12)


def test_xent_confident():
    loss = float(ops.softmax_xent(np.array([[10.0, -10.0]]), np.array([0])).data)
    assert math.isclose(loss, math.log1p(math.exp(-20.0)), rel_tol=1e-9)
    assert abs(loss - 2.06e-9) < 1e-11


def test_xent_label_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        ops.softmax_xent(np.zeros((1, 4)), np.array([4]))
