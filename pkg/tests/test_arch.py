import dataclasses

import numpy as np
import pytest

from cropseg import arch
from cropseg.nn import layers as L
from cropseg.nn.functional import ShapeError
from oracles import hand_parameter_tally, receptive_field_recurrence


@pytest.fixture(scope="module")
def net():
    return arch.build_network(seed=0)


def test_per_position_costs_of_the_block_variants():
    plain = L.ConvBNReLU(16, 16, 5)
    non_separated = L.Bottleneck(16, separable=False, residual=False)
    separable = L.Bottleneck(16)
    assert arch.count_flops(plain, 1, 1)[0] == 6400
    assert arch.count_flops(non_separated, 1, 1)[0] == 1856
    assert arch.count_flops(separable, 1, 1)[0] == 896
    assert arch.conv_weight_count(plain) == 6400
    assert arch.conv_weight_count(separable) == 896


def test_parameter_total_matches_hand_tally(net):
    total, per_layer = arch.count_parameters(net)
    assert total == hand_parameter_tally() == 29107
    assert total < arch.PARAM_BUDGET
    assert total == net.spec.analytic_parameter_count()
    assert sum(n for _, n in per_layer) == total
    assert sum(p.size for _, p in net.named_parameters()) == total


def test_rgb_variant_parameter_count():
    rgb = arch.build_network(arch.NetworkSpec(input_channels=3))
    assert arch.count_parameters(rgb)[0] == hand_parameter_tally(in_ch=3)


def test_receptive_field(net):
    # one spatial axis: the 5x1 and 1x5 taps each widen only their own axis
    ops = [(5, 1)] + ([(1, 1), (5, 1), (1, 1), (1, 1)] * 3 + [(2, 2)]) * 4
    assert receptive_field_recurrence(ops) == 200
    assert arch.receptive_field(net) == (200, 200)


def test_receptive_field_of_simple_chains():
    assert arch.receptive_field_of([(3, 3, 1), (3, 3, 1)]) == (5, 5)
    assert arch.receptive_field_of([(2, 2, 2), (3, 3, 1)]) == (6, 6)
    assert arch.receptive_field_of([(5, 1, 1), (1, 5, 1)]) == (5, 5)


def test_layout_counts(net):
    assert net.spec.encoder_convs() == 13
    assert net.spec.decoder_convs() == 12
    assert len(net.bottlenecks()) == 24
    assert net.levels == 4


def test_mac_total_at_full_resolution(net):
    total, per_layer = arch.count_flops(net, 384, 512)
    assert total == 2_514_223_104
    assert total == sum(m for _, _, m in per_layer)
    rgb = arch.build_network(arch.NetworkSpec(input_channels=3))
    assert arch.count_flops(rgb, 384, 512)[0] < total


def test_layer_table_is_symmetric(net):
    rows = arch.layer_table(net, 96, 128)
    enc = [r.out_shape for r in rows if r.name.startswith("pool")]
    dec = [r.out_shape for r in rows if r.name.startswith("unpool")]
    assert [s[:2] for s in enc] == [(48, 64), (24, 32), (12, 16), (6, 8)]
    assert [s[:2] for s in dec] == [(12, 16), (24, 32), (48, 64), (96, 128)]
    assert rows[-1].out_shape == (96, 128, 3)


def test_forward_shapes_and_probabilities(net, rng):
    x = rng.standard_normal((2, 14, 32, 48)).astype(np.float32)
    feats = net.features(x)
    assert feats.shape == (2, 16, 32, 48)
    for idx, size in zip(net._indices, [(32, 48), (16, 24), (8, 12), (4, 6)]):
        assert idx.input_hw == size
    probs = net.predict(x)
    assert probs.shape == (2, 3, 32, 48)
    assert np.allclose(probs.sum(axis=1), 1, atol=1e-5)


def test_input_checks(net):
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ShapeError):
        net.forward(np.zeros((1, 14, 40, 32), np.float32))


def test_backward_fills_every_gradient(rng):
    net = arch.build_network(seed=2)
    x = rng.standard_normal((1, 14, 16, 16)).astype(np.float32)
    probs = net.forward(x, train=True)
    net.backward(probs - 0.3)
    params = dict(net.named_parameters())
    grads = dict(net.named_grads())
    assert set(grads) == set(params)
    for k in params:
        assert grads[k].shape == params[k].shape and np.all(np.isfinite(grads[k]))


def test_whole_network_gradient_spot_check():
    """Finite differences on a few weights of a small float64 network."""
    rng = np.random.default_rng(5)
    spec = arch.NetworkSpec(input_channels=3, encoder_stages=(1, 1), decoder_stages=(1, 1))
    net = arch.build_network(spec, seed=5, dtype=np.float64, strict=False)
    x = rng.standard_normal((2, 3, 8, 8))
    g = rng.standard_normal((2, 3, 8, 8))
    net.logits(x, train=True)
    net.backward(g)
    grads = {k: v.copy() for k, v in net.named_grads()}
    params = dict(net.named_parameters())
    eps = 1e-6
    for name in ["first.conv.weight", "enc0.0.vertical.conv.weight", "dec1.0.expand.bn.gamma",
                 "head.bias"]:
        p = params[name].reshape(-1)
        for i in rng.choice(p.size, size=min(4, p.size), replace=False):
            orig = p[i]
            p[i] = orig + eps
            up = np.sum(net.logits(x, train=True) * g)
            p[i] = orig - eps
            down = np.sum(net.logits(x, train=True) * g)
            p[i] = orig
            num = (up - down) / (2 * eps)
            assert abs(num - grads[name].reshape(-1)[i]) <= 1e-5 * max(1.0, abs(num)), name


def test_spec_validation():
    arch.NetworkSpec().validate()
    with pytest.raises(arch.SpecError):
        arch.NetworkSpec(encoder_stages=(3, 3, 3)).validate()
    with pytest.raises(arch.SpecError):
        arch.NetworkSpec(bottleneck=arch.BottleneckSpec(kernel=4)).validate()
    big = arch.NetworkSpec(bottleneck=arch.BottleneckSpec(depth_in=64, depth_mid=32))
    with pytest.raises(arch.SpecError):
        big.validate()
    big.validate(strict=False)  # ablation variants may exceed the budget


def test_residual_toggle_changes_output(rng):
    net = arch.build_network(seed=1)
    x = rng.standard_normal((1, 14, 16, 16)).astype(np.float32)
    a = net.predict(x)
    net.set_residual(False)
    assert not np.allclose(a, net.predict(x))


def test_save_and_load_round_trip(tmp_path, net, rng):
    x = rng.standard_normal((1, 14, 16, 32)).astype(np.float32)
    for _, buf in net.named_buffers():
        buf += 0.01  # make the running statistics non-default
    arch.save_network(tmp_path / "m.cswt", net)
    other = arch.load_network(tmp_path / "m.cswt")
    assert other.spec == net.spec
    assert np.array_equal(other.predict(x), net.predict(x))
    for _, buf in net.named_buffers():
        buf -= 0.01


def test_rgb_spec_recovered_from_weights(tmp_path):
    rgb = arch.build_network(arch.NetworkSpec(input_channels=3), seed=4)
    arch.save_network(tmp_path / "rgb.cswt", rgb)
    assert arch.load_network(tmp_path / "rgb.cswt").spec == dataclasses.replace(
        arch.NetworkSpec(), input_channels=3)


def test_load_state_rejects_mismatch(net):
    state = net.state_dict()
    state.pop("head.bias")
    with pytest.raises(KeyError):
        arch.build_network().load_state_dict(state)
