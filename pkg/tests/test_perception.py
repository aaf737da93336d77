import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from voxnav.perception import (
    ActorCritic, Conv2dLayer, Conv3dLayer, DenseLayer, LayerNormParams, NetworkSpec, PolicyNet,
    RunningNormalizer, ShapeError, conv2d_forward, conv3d_forward, count_flops, count_params,
    encode_voxel, forward_policy, layer_macs, load_actor_critic, load_weights, macs_per_site, mish,
    network_forward, normalizer_apply, normalizer_update, save_actor_critic, save_weights,
)
from voxnav.voxel import VoxelGrid
from oracles import conv2d_loops, conv3d_loops


def test_mish_values():
    assert mish(0.0) == 0.0
    x = np.array([-30.0, -1.0, 1.0, 30.0, 800.0])
    ref = x * np.tanh(np.log1p(np.exp(np.minimum(x, 700))))
    ref[-1] = 800.0
    assert np.allclose(mish(x), ref, rtol=1e-12)
    assert np.isfinite(mish(-1e4))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv2d_matches_loops(seed):
    rng = np.random.default_rng(seed)
    C, O = rng.integers(1, 5, size=2)
    k = int(rng.choice([1, 3, 5]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    H, W = rng.integers(k, 10, size=2)
    x = rng.normal(size=(C, H, W))
    w, b = rng.normal(size=(O, C, k, k)), rng.normal(size=O)
    got = conv2d_forward(x, Conv2dLayer(w, b, s, p))
    assert np.allclose(got, conv2d_loops(x, w, b, s, p), atol=1e-5)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_conv3d_matches_loops(seed):
    rng = np.random.default_rng(seed)
    C, O = rng.integers(1, 4, size=2)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    D, H, W = rng.integers(k, 7, size=3)
    x = rng.normal(size=(C, D, H, W))
    w, b = rng.normal(size=(O, C, k, k, k)), rng.normal(size=O)
    got = conv3d_forward(x, Conv3dLayer(w, b, s, p))
    assert np.allclose(got, conv3d_loops(x, w, b, s, p), atol=1e-5)


def test_conv_activation_applied():
    x = np.random.default_rng(0).normal(size=(2, 5, 5))
    w, b = np.ones((1, 2, 3, 3)), np.zeros(1)
    lin = conv2d_forward(x, Conv2dLayer(w, b, 1, 1))
    assert np.allclose(conv2d_forward(x, Conv2dLayer(w, b, 1, 1, "mish")), mish(lin))


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        Conv2dLayer(np.ones((1, 1, 2, 2)), np.zeros(1))
    with pytest.raises(ShapeError):
        conv2d_forward(np.ones((3, 5, 5)), Conv2dLayer(np.ones((1, 2, 3, 3)), np.zeros(1)))
    with pytest.raises(ShapeError):
        DenseLayer(np.ones((3, 4)), np.zeros(2))


def test_default_shape_chain():
    spec = NetworkSpec()
    assert spec.shape_chain() == [(40, 32, 32), (8, 16, 16), (8, 8, 8), (8, 4, 4), 128, 64]
    net = PolicyNet.init(spec)
    assert encode_voxel(VoxelGrid.empty(), net).shape == (64,)


def test_3d_shape_chain():
    spec = NetworkSpec(variant="3d")
    assert spec.shape_chain() == [(1, 40, 32, 32), (8, 20, 16, 16), (8, 10, 8, 8), (8, 5, 4, 4), 640, 64]


def test_construction_checks_chain():
    net = PolicyNet.init(NetworkSpec())
    bad = Conv2dLayer(np.ones((8, 40, 3, 3)), np.zeros(8), 1, 1)
    with pytest.raises(ShapeError):
        PolicyNet(net.spec, net.mlp1, net.ln_mlp, net.mlp2, (bad,) + net.convs[1:], net.cnn1, net.ln_cnn,
                  net.cnn2, net.fusion, net.head)


def test_wrong_grid_shape_rejected():
    net = PolicyNet.init(NetworkSpec())
    with pytest.raises(ShapeError):
        encode_voxel(np.zeros((40, 32, 30)), net)


def test_mac_counts():
    spec2, spec3 = NetworkSpec(), NetworkSpec(variant="3d")
    rows = dict(layer_macs(spec2))
    assert rows["conv0"] == 8 * 16 * 16 * 40 * 9
    assert count_flops(spec2) == 795648
    assert count_flops(spec3) == 2395136
    net = PolicyNet.init(spec2)
    assert count_flops(net.convs[0], (40, 32, 32)) == rows["conv0"]
    assert count_flops(net.cnn1) == 128 * 64


def test_factor_k_per_site():
    for C in (1, 8, 40):
        for k in (1, 3, 5):
            c2 = Conv2dLayer(np.zeros((8, C, k, k)), np.zeros(8))
            c3 = Conv3dLayer(np.zeros((8, C, k, k, k)), np.zeros(8))
            assert macs_per_site(c3) == k * macs_per_site(c2)


def test_sparse_density_scales_conv_macs():
    spec = NetworkSpec()
    full = dict(layer_macs(spec))
    half = dict(layer_macs(spec, density=0.5))
    assert half["conv0"] == full["conv0"] // 2
    assert half["cnn1"] == full["cnn1"]


def test_param_count_2d_vs_3d():
    assert count_params(PolicyNet.init(NetworkSpec())) == 16600
    assert count_params(PolicyNet.init(NetworkSpec(variant="3d"))) == 49008


def test_actor_critic_forward_shapes():
    ac = ActorCritic.init(seed=3)

    class Obs:
        actor_scalars = np.zeros(506)
        critic_scalars = np.zeros(1598)

    action, value = forward_policy(Obs, VoxelGrid.empty(), ac)
    assert action.shape == (29,)
    assert isinstance(value, float)


def test_height_only_network_has_no_cnn():
    spec = NetworkSpec(obs_dim=506 + 1089, use_voxels=False)
    net = PolicyNet.init(spec)
    assert net.cnn1 is None and net.convs == ()
    assert network_forward(np.zeros(spec.obs_dim), None, net).shape == (29,)


def test_forward_is_deterministic():
    net = PolicyNet.init(NetworkSpec(), seed=5)
    grid = (np.random.default_rng(0).random((40, 32, 32)) < 0.05).astype(np.uint8)
    a = network_forward(np.ones(506), grid, net)
    b = network_forward(np.ones(506), grid, net)
    assert np.array_equal(a, b)


def test_weights_roundtrip(tmp_path):
    ac = ActorCritic.init(seed=1)
    save_actor_critic(tmp_path / "w.bin", ac)
    back = load_actor_critic(tmp_path / "w.bin", ac.actor.spec, ac.critic.spec)
    for k, v in ac.actor.named_arrays().items():
        assert np.array_equal(back.actor.named_arrays()[k], v)
    grid = (np.random.default_rng(2).random((40, 32, 32)) < 0.05).astype(np.uint8)
    x = np.random.default_rng(3).normal(size=506)
    assert np.array_equal(network_forward(x, grid, ac.actor), network_forward(x, grid, back.actor))


def test_weights_bad_magic(tmp_path):
    (tmp_path / "w.bin").write_bytes(b"XXXXXXXXX")
    with pytest.raises(ValueError):
        load_weights(tmp_path / "w.bin")
    save_weights(tmp_path / "s.bin", {"scalar": np.array(2.5)})
    assert load_weights(tmp_path / "s.bin")["scalar"] == 2.5


def test_layer_norm():
    ln = LayerNormParams.default(4)
    y = ln(np.array([1.0, 2.0, 3.0, 4.0]))
    assert abs(y.mean()) < 1e-12
    assert y.var() == pytest.approx(1.25 / (1.25 + 1e-5))


def test_normalizer_matches_batch_statistics():
    rng = np.random.default_rng(0)
    data = rng.normal(3.0, 2.0, size=(1000, 5))
    n = RunningNormalizer(5)
    for chunk in np.array_split(data, 7):
        normalizer_update(n, chunk)
    assert np.allclose(n.mean, data.mean(axis=0))
    assert np.allclose(n.var, data.var(axis=0))
    assert np.allclose(n.invert(normalizer_apply(n, data[0])), data[0])


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 30), min_size=1, max_size=6), st.integers(0, 1000))
def test_normalizer_order_independent(sizes, seed):
    rng = np.random.default_rng(seed)
    chunks = [rng.normal(size=(s, 3)) for s in sizes]
    a, b = RunningNormalizer(3), RunningNormalizer(3)
    for c in chunks:
        a.update(c)
    b.update(np.concatenate(chunks))
    assert np.allclose(a.mean, b.mean) and np.allclose(a.var, b.var)


def test_identity_normalizer_passes_through():
    n = RunningNormalizer.identity(4)
    x = np.array([1.0, -2.0, 0.5, 0.0])
    assert np.array_equal(n.apply(x), x)


def test_flipped_normalizer_commutes_with_mirror():
    rng = np.random.default_rng(1)
    data = rng.normal(size=(200, 4))
    perm, sign = np.array([1, 0, 2, 3]), np.array([1.0, 1.0, -1.0, 1.0])
    n = RunningNormalizer(4)
    n.update(data)
    m = n.flipped(perm, sign)
    x = data[0]
    assert np.allclose(m.apply(sign * x[perm]), sign * n.apply(x)[perm])


def test_stride_one_conv_is_flip_equivariant():
    # mirroring rows of the input and of the kernel mirrors the output rows
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 8, 8))
    w, b = rng.normal(size=(2, 4, 3, 3)), rng.normal(size=2)
    y = conv2d_forward(x, Conv2dLayer(w, b, 1, 1))
    yf = conv2d_forward(x[:, ::-1], Conv2dLayer(w[:, :, ::-1], b, 1, 1))
    assert np.allclose(yf, y[:, ::-1])
