import numpy as np
import pytest

from coattseg import coattention as ca
from coattseg import tensor as tt
from coattseg.errors import DimensionError, UsageError
from coattseg.tensor import Tensor


def fmap(arr) -> ca.FeatureMap:
    return ca.FeatureMap(Tensor(np.asarray(arr, dtype=np.float64)))


def vanilla_params(c, weight=None, rng_seed=0):
    params = ca.init_coattention_params(np.random.default_rng(rng_seed), c, variant="vanilla")
    if weight is not None:
        params.weight = Tensor(np.asarray(weight, dtype=np.float64), requires_grad=True)
    return params


def static_params(c, d_a, d_b, rng_seed=0):
    params = ca.init_coattention_params(
        np.random.default_rng(rng_seed), c, variant="channelwise", channel_mode="static"
    )
    params.d_a = Tensor(np.reshape(d_a, (c, 1)), requires_grad=True)
    params.d_b = Tensor(np.reshape(d_b, (c, 1)), requires_grad=True)
    return params


def random_fmap(rng, h=2, w=3, c=4):
    return fmap(rng.normal(size=(h, w, c)))


def test_feature_map_flat_layout():
    v = fmap(np.arange(12.0).reshape(2, 2, 3))
    # column i of the flat view is the feature vector at row-major position i
    assert v.flat.shape == (3, 4)
    assert np.array_equal(v.flat.data[:, 0], np.array([0.0, 1.0, 2.0]))
    assert np.array_equal(v.flat.data[:, 3], np.array([9.0, 10.0, 11.0]))


def test_affinity_all_ones():
    v = fmap(np.ones((1, 2, 1)))
    s = ca.compute_affinity(vanilla_params(1, weight=[[1.0]]), v, v)
    assert np.array_equal(s.data, np.ones((2, 2)))


def test_affinity_orthonormal_columns():
    v = fmap(np.array([[[1.0, 0.0], [0.0, 1.0]]]))  # 1 x 2 positions, C = 2
    s = ca.compute_affinity(vanilla_params(2, weight=np.eye(2)), v, v)
    assert np.array_equal(s.data, np.eye(2))


def test_affinity_channel_mismatch():
    with pytest.raises(DimensionError):
        ca.compute_affinity(vanilla_params(2, weight=np.eye(2)), fmap(np.ones((1, 2, 2))), fmap(np.ones((1, 2, 3))))


def test_channelwise_unit_weights_equals_vanilla_identity():
    rng = np.random.default_rng(3)
    va, vb = random_fmap(rng), random_fmap(rng)
    s_vanilla = ca.compute_affinity(vanilla_params(4, weight=np.eye(4)), va, vb)
    s_static = ca.compute_affinity(static_params(4, np.ones(4), np.ones(4)), va, vb)
    assert np.array_equal(s_vanilla.data, s_static.data)


@pytest.mark.parametrize("seed", range(10))
def test_channelwise_static_matches_vanilla_diagonal(seed):
    rng = np.random.default_rng(seed)
    va, vb = random_fmap(rng), random_fmap(rng)
    d_a = rng.uniform(0.5, 1.5, size=4)
    d_b = rng.uniform(0.5, 1.5, size=4)
    s_static = ca.compute_affinity(static_params(4, d_a, d_b), va, vb)
    s_vanilla = ca.compute_affinity(vanilla_params(4, weight=np.diag(d_a * d_b)), va, vb)
    assert np.max(np.abs(s_static.data - s_vanilla.data)) <= 1e-12


def test_normalize_zeros_uniform():
    pair = ca.normalize_affinity(Tensor(np.zeros((4, 4))))
    assert np.allclose(pair.s_c.data, 0.25, atol=1e-15)
    assert np.allclose(pair.s_r.data, 0.25, atol=1e-15)


def test_normalize_saturating_column():
    s = np.zeros((5, 5))
    s[2, 1] = 20.0
    pair = ca.normalize_affinity(Tensor(s))
    expected = np.zeros(5)
    expected[2] = 1.0
    assert np.max(np.abs(pair.s_c.data[:, 1] - expected)) < 1e-8


def test_normalize_transpose_definition_bitwise():
    rng = np.random.default_rng(4)
    s = Tensor(rng.normal(size=(6, 6)))
    pair = ca.normalize_affinity(s)
    direct = tt.softmax_columns(tt.transpose(s))
    assert np.array_equal(pair.s_r.data, direct.data)


def test_attention_summary_identity_weights():
    rng = np.random.default_rng(5)
    vref = random_fmap(rng, h=2, w=2, c=3)
    z = ca.attention_summary(vref, Tensor(np.eye(4)))
    assert np.array_equal(z.data, vref.flat.data)


def test_attention_summary_uniform_weights_mean_feature():
    rng = np.random.default_rng(6)
    vref = random_fmap(rng, h=2, w=2, c=3)
    z = ca.attention_summary(vref, Tensor(np.full((4, 4), 0.25)))
    mean_feature = vref.flat.data.mean(axis=1)
    for i in range(4):
        assert np.allclose(z.data[:, i], mean_feature, atol=1e-15)


def test_attention_summary_brute_force_oracle():
    rng = np.random.default_rng(7)
    vref = random_fmap(rng, h=1, w=2, c=3)
    s_norm = tt.softmax_columns(Tensor(rng.normal(size=(2, 2))))
    z = ca.attention_summary(vref, s_norm)
    expected = np.zeros((3, 2))
    for i in range(2):
        for j in range(2):
            expected[:, i] += vref.flat.data[:, j] * s_norm.data[j, i]
    assert np.max(np.abs(z.data - expected)) <= 1e-12


def test_gate_zero_parameters():
    params = vanilla_params(3)
    params.gate_weight = Tensor(np.zeros((1, 3)), requires_grad=True)
    params.gate_bias = Tensor(np.zeros((1, 1)), requires_grad=True)
    gates = ca.gate(params, Tensor(np.random.default_rng(0).normal(size=(3, 5))))
    assert np.all(gates.data == 0.5)


def test_gate_saturated_bias():
    params = vanilla_params(3)
    params.gate_bias = Tensor(np.full((1, 1), 20.0), requires_grad=True)
    gates = ca.gate(params, Tensor(np.zeros((3, 5))))
    assert np.all(np.abs(gates.data - 1.0) < 1e-8)


def test_gate_dot_product_oracle():
    rng = np.random.default_rng(8)
    params = vanilla_params(4)
    z = rng.normal(size=(4, 6))
    gates = ca.gate(params, Tensor(z))
    w = params.gate_weight.data[0]
    b = params.gate_bias.data[0, 0]
    for i in range(6):
        logit = sum(w[c] * z[c, i] for c in range(4)) + b
        assert abs(gates.data[i] - 1.0 / (1.0 + np.exp(-logit))) <= 1e-12


def test_gate_values_strictly_inside_unit_interval():
    rng = np.random.default_rng(9)
    params = vanilla_params(4)
    gates = ca.gate(params, Tensor(rng.normal(scale=10.0, size=(4, 50))))
    assert np.all(gates.data > 0.0)
    assert np.all(gates.data < 1.0)


def test_apply_gate_endpoints_and_half():
    rng = np.random.default_rng(10)
    z = Tensor(rng.normal(size=(3, 4)))
    assert np.array_equal(ca.apply_gate(z, Tensor(np.ones(4))).z.data, z.data)
    assert np.all(ca.apply_gate(z, Tensor(np.zeros(4))).z.data == 0.0)
    halved = ca.apply_gate(z, Tensor(np.full(4, 0.5)))
    assert np.array_equal(halved.z.data, z.data * 0.5)


def test_fuse_single_summary_bitwise():
    rng = np.random.default_rng(11)
    summary = ca.apply_gate(Tensor(rng.normal(size=(3, 4))), Tensor(rng.uniform(0.1, 0.9, size=4)))
    fused = ca.fuse_summaries([summary])
    assert np.array_equal(fused.z.data, summary.z.data)
    assert np.array_equal(fused.gate_values.data, summary.gate_values.data)


def test_fuse_cancellation():
    rng = np.random.default_rng(12)
    z = rng.normal(size=(3, 4))
    gates = Tensor(rng.uniform(0.2, 0.8, size=4))
    fused = ca.fuse_summaries([ca.apply_gate(Tensor(z), gates), ca.apply_gate(Tensor(-z), gates)])
    assert np.all(fused.z.data == 0.0)


def test_fuse_three_against_loop_average():
    rng = np.random.default_rng(13)
    summaries = [
        ca.apply_gate(Tensor(rng.normal(size=(3, 4))), Tensor(rng.uniform(0.1, 0.9, size=4)))
        for _ in range(3)
    ]
    fused = ca.fuse_summaries(summaries)
    expected = sum(s.z.data for s in summaries) / 3.0
    assert np.max(np.abs(fused.z.data - expected)) <= 1e-12


def test_fuse_empty_rejected():
    with pytest.raises(UsageError):
        ca.fuse_summaries([])


def test_concat_features_layout():
    rng = np.random.default_rng(14)
    v = random_fmap(rng, h=2, w=3, c=4)
    z = rng.normal(size=(4, 6))
    summary = ca.AttentionSummary(z=Tensor(z), gate_values=Tensor(np.full(6, 0.5)))
    x = ca.concat_features(summary, v)
    assert x.shape == (2, 3, 8)
    # first C channels carry the summary, position layout matches the map
    for c in range(4):
        assert np.array_equal(x.data[:, :, c].reshape(-1), z[c])
    assert np.array_equal(x.data[:, :, 4:], v.tensor.data)


def test_concat_features_zero_original():
    v = fmap(np.zeros((2, 2, 3)))
    z = np.random.default_rng(15).normal(size=(3, 4))
    summary = ca.AttentionSummary(z=Tensor(z), gate_values=Tensor(np.full(4, 0.5)))
    x = ca.concat_features(summary, v)
    assert np.all(x.data[:, :, 3:] == 0.0)


def test_ortho_penalty_identity_zero():
    params = ca.init_coattention_params(np.random.default_rng(0), 3, variant="symmetric", ortho_lambda=1.0)
    params.weight = Tensor(np.eye(3), requires_grad=True)
    assert ca.ortho_penalty(params).item() == 0.0


def test_ortho_penalty_hand_oracle():
    params = ca.init_coattention_params(np.random.default_rng(0), 2, variant="symmetric", ortho_lambda=1.0)
    params.weight = Tensor(2.0 * np.eye(2), requires_grad=True)
    assert ca.ortho_penalty(params).item() == 6.0


def test_ortho_penalty_permutation_zero():
    params = ca.init_coattention_params(np.random.default_rng(0), 3, variant="symmetric", ortho_lambda=1.0)
    params.weight = Tensor(np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]]), requires_grad=True)
    assert ca.ortho_penalty(params).item() == 0.0


def test_ortho_penalty_wrong_variant_rejected():
    with pytest.raises(UsageError):
        ca.ortho_penalty(vanilla_params(2))


def test_reference_permutation_invariance():
    rng = np.random.default_rng(16)
    params = vanilla_params(4, weight=rng.normal(size=(4, 4)))
    vq = random_fmap(rng, h=2, w=2, c=4)
    vref = random_fmap(rng, h=2, w=2, c=4)
    s = ca.compute_affinity(params, vq, vref)
    z = ca.attention_summary(vref, tt.softmax_columns(s))

    perm = np.random.default_rng(17).permutation(4)
    ref_positions = vref.tensor.data.reshape(4, 4)[perm].reshape(2, 2, 4)
    vref_perm = fmap(ref_positions)
    s_perm = ca.compute_affinity(params, vq, vref_perm)
    # permuting reference positions permutes affinity rows the same way
    assert np.max(np.abs(s_perm.data - s.data[perm])) <= 1e-12
    z_perm = ca.attention_summary(vref_perm, tt.softmax_columns(s_perm))
    assert np.max(np.abs(z_perm.data - z.data)) <= 1e-12


def test_swap_equivariance_symmetric_weight():
    rng = np.random.default_rng(18)
    w = rng.normal(size=(4, 4))
    params = vanilla_params(4, weight=(w + w.T) / 2.0)
    va, vb = random_fmap(rng), random_fmap(rng)
    s_ab = ca.compute_affinity(params, va, vb)
    s_ba = ca.compute_affinity(params, vb, va)
    assert np.max(np.abs(s_ba.data - s_ab.data.T)) <= 1e-12
    # exchanged summaries: the swapped run's query summary equals the
    # original run's reference-side summary
    z_a = ca.attention_summary(vb, tt.softmax_columns(s_ab))
    z_b_swapped = ca.attention_summary(vb, ca.normalize_affinity(s_ba).s_r)
    assert np.max(np.abs(z_a.data - z_b_swapped.data)) <= 1e-10


@pytest.mark.parametrize("seed", range(10))
def test_summary_convexity_bounds(seed):
    rng = np.random.default_rng(seed)
    vref = random_fmap(rng, h=2, w=3, c=4)
    s_norm = tt.softmax_columns(Tensor(rng.normal(scale=3.0, size=(6, 6))))
    z = ca.attention_summary(vref, s_norm)
    lo = vref.flat.data.min(axis=1, keepdims=True) - 1e-12
    hi = vref.flat.data.max(axis=1, keepdims=True) + 1e-12
    assert np.all(z.data >= lo)
    assert np.all(z.data <= hi)


def test_se_mode_uses_other_branch():
    rng = np.random.default_rng(19)
    params = ca.init_coattention_params(rng, 4, variant="channelwise", channel_mode="se")
    va, vb = random_fmap(rng), random_fmap(rng)
    base = ca.compute_affinity(params, va, vb).data
    # perturbing branch-a squeeze weights changes the scaling applied to Vb
    params.se_a_weight = Tensor(params.se_a_weight.data + 0.5, requires_grad=True)
    changed = ca.compute_affinity(params, va, vb).data
    assert not np.allclose(base, changed)
