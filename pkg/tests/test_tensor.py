import numpy as np
import pytest

from coattseg import tensor as tt
from coattseg.errors import DataError, DimensionError, NumericError, UsageError
from coattseg.tensor import Tensor


def test_matmul_identity_bitwise():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    out = tt.matmul(Tensor(np.eye(2)), Tensor(x))
    assert np.array_equal(out.data, x)


def test_matmul_hand_oracle():
    out = tt.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
    assert np.array_equal(out.data, np.array([[17.0], [39.0]]))


def test_matmul_feature_scale_shape():
    # 60 x 60 spatial positions at 512 channels gives a 3600 x 3600 affinity
    a = Tensor(np.zeros((3600, 512)))
    b = Tensor(np.zeros((512, 3600)))
    assert tt.matmul(a, b).shape == (3600, 3600)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(DimensionError) as err:
        tt.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))
    assert "(2, 3)" in str(err.value)


def test_matmul_gradients():
    a = Tensor(np.random.default_rng(0).normal(size=(3, 4)), requires_grad=True)
    b = Tensor(np.random.default_rng(1).normal(size=(4, 2)), requires_grad=True)
    tt.tensor_sum(tt.matmul(a, b)).backward()
    g = np.ones((3, 2))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


def test_softmax_uniform():
    out = tt.softmax_columns(Tensor(np.zeros((3, 3))))
    assert np.allclose(out.data, 1.0 / 3.0, atol=1e-15)


def test_softmax_hand_oracle():
    out = tt.softmax_columns(Tensor(np.array([[0.0], [np.log(3.0)]])))
    assert np.allclose(out.data, np.array([[0.25], [0.75]]), atol=1e-15)


def test_softmax_shift_invariance():
    rng = np.random.default_rng(2)
    m = rng.normal(size=(5, 4))
    base = tt.softmax_columns(Tensor(m)).data
    shifted = m.copy()
    shifted[:, 2] += 7.5
    out = tt.softmax_columns(Tensor(shifted)).data
    assert np.allclose(out[:, 2], base[:, 2], atol=1e-14)


@pytest.mark.parametrize("seed", range(20))
def test_softmax_columns_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    m = rng.normal(scale=5.0, size=(7, 6))
    out = tt.softmax_columns(Tensor(m))
    assert np.all(np.abs(out.data.sum(axis=0) - 1.0) <= 1e-12)


def test_conv2d_one_by_one_identity():
    out = tt.conv2d(Tensor(np.full((1, 1, 1), 3.5)), Tensor(np.ones((1, 1, 1, 1))))
    assert out.data.reshape(()) == 3.5


def test_conv2d_ones_hand_oracle():
    out = tt.conv2d(Tensor(np.ones((3, 3, 1))), Tensor(np.ones((3, 3, 1, 1))), stride=1, pad=1)
    vals = out.data[:, :, 0]
    assert vals[1, 1] == 9.0
    for corner in ((0, 0), (0, 2), (2, 0), (2, 2)):
        assert vals[corner] == 4.0


def test_conv2d_stride_chain_shape():
    x = Tensor(np.zeros((96, 96, 3)))
    k1 = Tensor(np.zeros((3, 3, 3, 4)))
    k2 = Tensor(np.zeros((3, 3, 4, 4)))
    k3 = Tensor(np.zeros((3, 3, 4, 4)))
    out = tt.conv2d(tt.conv2d(tt.conv2d(x, k1, 2, 1), k2, 2, 1), k3, 2, 1)
    assert out.shape == (12, 12, 4)


def test_conv2d_nonpositive_output_rejected():
    with pytest.raises(DimensionError):
        tt.conv2d(Tensor(np.zeros((2, 2, 1))), Tensor(np.zeros((5, 5, 1, 1))))


def test_conv2d_even_kernel_rejected():
    with pytest.raises(DimensionError):
        tt.conv2d(Tensor(np.zeros((4, 4, 1))), Tensor(np.zeros((2, 2, 1, 1))))


def test_sigmoid_at_zero():
    assert tt.sigmoid(Tensor(np.zeros(1))).data[0] == 0.5


def test_sigmoid_extreme_values_finite():
    out = tt.sigmoid(Tensor(np.array([-800.0, 800.0])))
    assert np.all(np.isfinite(out.data))


def test_concat_channels_shape():
    out = tt.concat_channels(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((4, 4, 3))))
    assert out.shape == (4, 4, 5)


def test_concat_channels_spatial_mismatch():
    with pytest.raises(DimensionError):
        tt.concat_channels(Tensor(np.zeros((4, 4, 2))), Tensor(np.zeros((4, 5, 2))))


def test_bilinear_upsample_constant():
    out = tt.bilinear_upsample(Tensor(np.full((3, 4, 2), 1.25)), 4)
    assert out.shape == (12, 16, 2)
    assert np.all(out.data == 1.25)


def test_add_channel_bias_broadcast():
    x = np.zeros((2, 2, 3))
    out = tt.add(Tensor(x), Tensor(np.array([1.0, 2.0, 3.0])))
    assert np.array_equal(out.data[0, 0], np.array([1.0, 2.0, 3.0]))


def test_mul_gate_broadcast():
    z = np.ones((3, 4))
    gates = np.array([0.0, 0.5, 1.0, 2.0])
    out = tt.mul(Tensor(z), Tensor(gates))
    assert np.array_equal(out.data[0], gates)
    assert np.array_equal(out.data[1], gates)


def test_mul_broadcast_gradient_reduces():
    z = Tensor(np.ones((3, 4)), requires_grad=True)
    gates = Tensor(np.full(4, 0.5), requires_grad=True)
    tt.tensor_sum(tt.mul(z, gates)).backward()
    assert np.allclose(z.grad, 0.5)
    assert np.allclose(gates.grad, 3.0)


def test_nan_input_rejected():
    with pytest.raises(NumericError):
        Tensor(np.array([1.0, np.nan]))


def test_log_nonpositive_rejected():
    with pytest.raises(NumericError):
        tt.log(Tensor(np.array([1.0, 0.0])))


def test_forward_determinism_bitwise():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(6, 5)), rng.normal(size=(5, 3))
    one = tt.softmax_columns(tt.matmul(Tensor(a), Tensor(b)))
    two = tt.softmax_columns(tt.matmul(Tensor(a), Tensor(b)))
    assert np.array_equal(one.data, two.data)


def test_grad_check_sigmoid_known_derivative():
    report = tt.grad_check(
        lambda ts: tt.tensor_sum(tt.sigmoid(ts[0])), [Tensor(np.zeros(1))], eps=1e-5, tol=1e-8, name="sigmoid0"
    )
    assert report.passed
    assert report.max_rel_error < 1e-8


def test_grad_check_matmul_random():
    rng = np.random.default_rng(3)
    report = tt.grad_check(
        lambda ts: tt.tensor_sum(tt.matmul(ts[0], ts[1])),
        [Tensor(rng.normal(size=(3, 3))), Tensor(rng.normal(size=(3, 3)))],
        eps=1e-5,
        tol=1e-6,
        name="matmul",
    )
    assert report.passed


def test_grad_check_report_consistency():
    report = tt.grad_check(lambda ts: tt.tensor_sum(ts[0]), [Tensor(np.ones(3))], name="sum")
    assert report.passed == (report.max_rel_error <= report.tolerance)


def test_grad_check_requires_positive_eps():
    with pytest.raises(UsageError):
        tt.grad_check(lambda ts: tt.tensor_sum(ts[0]), [Tensor(np.ones(2))], eps=0.0)


def test_backward_accumulates_shared_input():
    x = Tensor(np.array([2.0]), requires_grad=True)
    tt.tensor_sum(tt.add(x, x)).backward()
    assert np.allclose(x.grad, 2.0)


def test_backward_requires_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        tt.add(x, x).backward()


def test_no_grad_suppresses_tape():
    x = Tensor(np.ones(2), requires_grad=True)
    with tt.no_grad():
        out = tt.add(x, x)
    assert not out.requires_grad


def test_mean_and_sum():
    x = Tensor(np.arange(6, dtype=np.float64).reshape(2, 3))
    assert tt.mean(x).item() == 2.5
    assert tt.tensor_sum(x).item() == 15.0
    assert np.allclose(tt.mean(x, axis=1).data, np.array([[1.0], [4.0]]))


def test_save_load_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    t = Tensor(rng.normal(size=(3, 4, 2)))
    tt.save_tensor(t, tmp_path / "blob")
    back = tt.load_tensor(tmp_path / "blob")
    assert back.shape == t.shape
    assert np.array_equal(back.data, t.data)


def test_load_rejects_bad_dtype_tag(tmp_path):
    tt.save_tensor(Tensor(np.ones(2)), tmp_path / "blob")
    manifest = (tmp_path / "blob.json").read_text().replace("f64", "f32")
    (tmp_path / "blob.json").write_text(manifest)
    with pytest.raises(DataError):
        tt.load_tensor(tmp_path / "blob")


def test_load_rejects_truncated_payload(tmp_path):
    tt.save_tensor(Tensor(np.ones(4)), tmp_path / "blob")
    raw = (tmp_path / "blob.bin").read_bytes()
    (tmp_path / "blob.bin").write_bytes(raw[:-8])
    with pytest.raises(DataError):
        tt.load_tensor(tmp_path / "blob")
