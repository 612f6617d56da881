import numpy as np
import pytest

from dilo import diffcore as dc
from dilo.gradcheck import toy_config, toy_network
from dilo.nets import DiLONetwork, NetConfig, adain, is_trainable


@pytest.fixture(scope="module")
def net():
    return DiLONetwork(toy_config(), seed=3)


def test_adain_examples():
    np.testing.assert_allclose(adain(dc.Tensor([[1.0, 3.0]]), dc.Tensor([[2.0, 2.0]]),
                                     dc.Tensor([[1.0, 1.0]]), eps_norm=0.0).data, [[-1.0, 3.0]])
    out = adain(dc.Tensor([[5.0, 5.0]]), dc.Tensor([[3.0, 3.0]]), dc.Tensor([[0.5, -0.5]]))
    np.testing.assert_array_equal(out.data, [[0.5, -0.5]])


def test_adain_unit_modulation_standardises():
    h = np.random.default_rng(0).normal(3.0, 2.0, size=(2, 50))
    out = adain(dc.Tensor(h), dc.Tensor(np.ones((2, 50))), dc.Tensor(np.zeros((2, 50)))).data
    np.testing.assert_allclose(out.mean(axis=1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.std(axis=1), 1.0, atol=1e-5)


def test_fresh_modulator_is_neutral(net):
    s = np.random.default_rng(1).normal(size=(3, net.cfg.d_s))
    for gamma, beta in net.modulate(s):
        np.testing.assert_array_equal(gamma.data, 1.0)
        np.testing.assert_array_equal(beta.data, 0.0)
    z = np.ones((1, net.cfg.d_z))
    np.testing.assert_array_equal(net.generate(z, s[:1]).data, net.generate(z, s[1:2]).data)


def test_reference_widths():
    cfg = NetConfig.reference()
    mod = DiLONetwork(cfg, seed=0).modulate(np.zeros((1, cfg.d_s)))
    assert mod[0][0].shape[-1] == 16 and mod[-1][0].shape[-1] == 4096


def test_generator_output_shape(net):
    out = net.generate(np.zeros((4, net.cfg.d_z)), np.zeros((4, net.cfg.d_s)))
    assert out.shape == (4, net.cfg.n_points, 3)


def test_encoder_shapes_and_single_point(net):
    x = np.random.default_rng(2).normal(size=(5, net.cfg.n_points, 3))
    assert net.encode_s(x).shape == (5, net.cfg.d_s)
    assert net.encode_z(x[0]).shape == (1, net.cfg.d_z)
    one = net.encode_s(np.ones((1, 3))).data
    assert np.all(np.isfinite(one))


def test_encoder_accepts_variable_point_counts(net):
    rng = np.random.default_rng(3)
    for V in (3, 17, 40):
        assert net.encode_z(rng.normal(size=(V, 3))).shape == (1, net.cfg.d_z)


def test_encoder_permutation_invariance():
    toy = toy_network(seed=4)
    x = np.random.default_rng(5).normal(size=(toy.cfg.n_points, 3))
    perm = np.random.default_rng(6).permutation(len(x))
    np.testing.assert_allclose(toy.encode_s(x[perm]).data, toy.encode_s(x).data, atol=1e-9)
    np.testing.assert_allclose(toy.encode_z(x[perm]).data, toy.encode_z(x).data, atol=1e-9)


def test_fresh_transform_nets_are_identity(net):
    enc = net.enc_s
    h = dc.Tensor(np.random.default_rng(7).normal(size=(2, 6, 3)))
    np.testing.assert_allclose(enc._apply_tnet(h, "enc_s.tin").data, h.data)


def test_output_affine_maps_onto_targets(net):
    targets = np.random.default_rng(8).normal(5.0, 0.01, size=(20, net.cfg.d_z))
    fresh = DiLONetwork(net.cfg, seed=3)
    fresh.enc_z.set_output_affine(targets)
    np.testing.assert_allclose(fresh.enc_z.params["enc_z.out.shift"].data, targets.mean(0))
    assert not is_trainable("enc_z.out.scale") and is_trainable("enc_z.head0.W")


def test_same_seed_same_parameters():
    a, b = DiLONetwork(toy_config(), seed=11), DiLONetwork(toy_config(), seed=11)
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb
        np.testing.assert_array_equal(pa.data, pb.data)


def test_state_round_trip_and_shape_check(net):
    other = DiLONetwork(net.cfg, seed=99)
    other.load_arrays(net.state_arrays())
    x = np.random.default_rng(9).normal(size=(2, net.cfg.n_points, 3))
    np.testing.assert_array_equal(other.encode_s(x).data, net.encode_s(x).data)
    bad = dict(net.state_arrays())
    bad["enc_s.head0.W"] = np.zeros((1, 1))
    with pytest.raises(dc.DimensionError):
        other.load_arrays(bad)


def test_config_validation_and_round_trip():
    with pytest.raises(dc.DimensionError):
        NetConfig(d_s=0)
    with pytest.raises(dc.DimensionError):
        NetConfig(enc_point_widths=(8, 8))
    cfg = toy_config()
    assert NetConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.expansion_width == cfg.n_points * cfg.point_channels
