import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from bidganet.check import grad_check
from bidganet.errors import GraphError, NumericError, ShapeError
from bidganet.oracles import matmul_loops
from bidganet.tensor import (GradTape, Tensor, add, concat_channels, flatten_pixels,
                             l1_normalize_axis, load_tensor, matmul, mean_all, mul, reshape,
                             save_tensor, slice_channels, softmax_axis, sub, sum_all,
                             tensor_from_bytes, tensor_to_bytes, transpose, unflatten_pixels)


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2)).dtype == np.float64


def test_zero_sized_shape_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 0)))


def test_matmul_matches_loops():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((4, 5)), rng.standard_normal((5, 3))
    np.testing.assert_allclose(matmul(Tensor(a), Tensor(b)).data, matmul_loops(a, b), atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


def test_operators_and_broadcast_gradient():
    a = Tensor(np.ones((2, 3)), requires_grad=True)
    b = Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
    with GradTape() as tape:
        loss = sum_all(mul(add(a, b), b))
    tape.backward(loss)
    np.testing.assert_allclose(a.grad, np.tile([1.0, 2.0, 3.0], (2, 1)))
    # d/db sum((a+b)*b) = sum over rows of (a + 2b)
    np.testing.assert_allclose(b.grad, 2 * (1 + 2 * np.array([1.0, 2.0, 3.0])))


def test_shared_input_accumulates():
    x = Tensor(np.array([3.0]), requires_grad=True)
    with GradTape() as tape:
        y = sum_all(mul(x, x))
    tape.backward(y)
    assert x.grad[0] == pytest.approx(6.0)


def test_no_recording_outside_tape():
    x = Tensor(np.ones(3), requires_grad=True)
    y = sum_all(x)
    with pytest.raises(GraphError):
        GradTape().backward(y)


def test_backward_twice_is_an_error():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = sum_all(x)
    tape.backward(y)
    with pytest.raises(GraphError):
        tape.backward(y)


def test_non_scalar_loss_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with GradTape() as tape:
        y = mul(x, 2.0)
    with pytest.raises(GraphError):
        tape.backward(y)


def test_tape_visits_each_node_once():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    with GradTape() as tape:
        y = sum_all(sub(mul(x, 3.0), x))
    assert len(tape) == 3
    tape.backward(y)
    np.testing.assert_allclose(x.grad, 2.0)
    assert len(tape) == 0


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        softmax_axis(Tensor(np.array([[np.nan, 1.0]])), -1)


def test_l1_zero_row_raises_with_index():
    with pytest.raises(NumericError, match="1"):
        l1_normalize_axis(Tensor(np.array([[1.0, 1.0], [0.0, 0.0]])), -1)


def test_l1_negative_input_rejected():
    with pytest.raises(ShapeError):
        l1_normalize_axis(Tensor(np.array([[1.0, -1.0]])), -1)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
              elements=st.floats(-30, 30)))
def test_softmax_columns_sum_to_one(a):
    s = softmax_axis(Tensor(a), -2).data
    np.testing.assert_allclose(s.sum(axis=-2), 1.0, atol=1e-12)
    assert (s >= 0).all()


def test_concat_slice_roundtrip():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.standard_normal((1, 2, 3, 3))), Tensor(rng.standard_normal((1, 4, 3, 3)))
    c = concat_channels([a, b])
    assert c.shape == (1, 6, 3, 3)
    np.testing.assert_array_equal(slice_channels(c, 2, 6).data, b.data)


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels([Tensor(np.ones((1, 1, 2, 2))), Tensor(np.ones((1, 1, 4, 4)))])


def test_flatten_unflatten_roundtrip():
    x = Tensor(np.arange(2 * 3 * 4 * 5, dtype=np.float64).reshape(2, 3, 4, 5))
    f = flatten_pixels(x)
    assert f.shape == (2, 20, 3)
    np.testing.assert_array_equal(unflatten_pixels(f, 4, 5).data, x.data)


def test_small_op_gradients():
    rng = np.random.default_rng(2)
    assert grad_check(lambda a: transpose(reshape(a, (3, 4)), (1, 0)), [rng.standard_normal(12)]) < 1e-6
    assert grad_check(lambda a: mean_all(a), [rng.standard_normal((3, 4))]) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5),
       st.sampled_from([np.float32, np.float64]))
def test_serialization_roundtrip(n, c, h, w, dtype):
    arr = np.random.default_rng(n * 100 + c).standard_normal((n, c, h, w)).astype(dtype)
    t, off = tensor_from_bytes(tensor_to_bytes(Tensor(arr)))
    assert t.dtype == dtype
    np.testing.assert_array_equal(t.data, arr)


def test_serialization_file(tmp_path):
    arr = np.arange(6, dtype=np.float32).reshape(1, 1, 2, 3)
    save_tensor(tmp_path / "t.bin", Tensor(arr))
    np.testing.assert_array_equal(load_tensor(tmp_path / "t.bin").data, arr)


def test_serialization_rejects_bad_magic():
    buf = bytearray(tensor_to_bytes(Tensor(np.ones((1, 1, 1, 1)))))
    buf[0:4] = b"XXXX"
    with pytest.raises(ValueError):
        tensor_from_bytes(bytes(buf))


def test_branch_log_records_and_replays():
    from bidganet.nn import maxpool2
    from bidganet.tensor import BranchLog, relu
    x = Tensor(np.array([[[[-1.0, 2.0], [3.0, -4.0]]]]))
    with BranchLog() as base:
        maxpool2(relu(x))
    assert len(base.choices) == 2
    # flipping signs would change both choices; replay keeps the base ones
    with BranchLog(replay=base.choices) as again:
        y = maxpool2(relu(Tensor(-x.data)))
    assert again.same_as(base)
    assert y.data.item() == -3.0  # pinned mask keeps -2, -3; pinned winner is slot 2
