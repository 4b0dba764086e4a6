import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cact import tensor as T
from cact.context_net import (DEFAULT_WIDTHS, Architecture, AttentionGate, BlockB1, Cascade, ContextModel,
                              ContextNet, block_out_depth, cascade_depths, context_forward, load_model, save_model)
from cact.errors import ConfigurationError, ContractError, DimensionError
from cact.gradcheck import check_gradients
from cact.local_repr import ExtractorSpec
from cact.tensor import Tensor, no_grad


def cube(rng, B=2, d=4, M=4, N=5):
    return Tensor(rng.standard_normal((B, d, M, N)), requires_grad=True)


# -- attention gate --------------------------------------------------------------------

def test_zero_gate_is_uniform_scaling():
    rng = np.random.default_rng(0)
    gate = AttentionGate(4, rng)
    gate.conv.weight.data[:] = 0
    F = cube(rng)
    np.testing.assert_allclose(gate(F).data, F.data / 20, rtol=0, atol=1e-15)


def test_zero_cube_stays_zero():
    gate = AttentionGate(3, np.random.default_rng(1))
    assert np.all(gate(Tensor(np.zeros((1, 3, 4, 4)))).data == 0)


@pytest.mark.parametrize("axis,sum_axes", [("spatial", (2, 3)), ("channel", (1,))])
def test_gate_weights_are_distributions(axis, sum_axes):
    rng = np.random.default_rng(2)
    gate = AttentionGate(4, rng, axis)
    w = gate.weights(cube(rng)).data
    assert np.all((w > 0) & (w < 1))
    np.testing.assert_allclose(w.sum(axis=sum_axes), 1.0, atol=1e-9)


def test_gate_depth_mismatch():
    with pytest.raises(DimensionError):
        AttentionGate(4, np.random.default_rng(0))(Tensor(np.zeros((1, 3, 2, 2))))


def test_gate_gradient():
    rng = np.random.default_rng(3)
    gate = AttentionGate(3, rng)
    F = cube(rng, d=3, M=2, N=2)
    errs = check_gradients(lambda: T.tsum(T.mul(gate(F), F)), [("w", gate.conv.weight), ("F", F)])
    assert max(errs.values()) < 1e-4
    assert gate.conv.bias is None


def test_channel_gate_gradient_includes_bias():
    rng = np.random.default_rng(4)
    gate = AttentionGate(3, rng, "channel")
    F = cube(rng, d=3, M=2, N=2)
    errs = check_gradients(lambda: T.tsum(T.mul(gate(F), F)), [("w", gate.conv.weight), ("b", gate.conv.bias)])
    assert max(errs.values()) < 1e-4


def test_unknown_attention_axis():
    with pytest.raises(ConfigurationError):
        AttentionGate(3, np.random.default_rng(0), "depthwise")


# -- blocks and cascade -------------------------------------------------------------------

def test_b2_depths():
    assert cascade_depths("B2", 64, (16, 32)) == [64, 96, 128, 160]
    casc = Cascade(["B2"] * 3, 64, (16, 32), np.random.default_rng(0))
    out = context_forward(Tensor(np.random.default_rng(1).standard_normal((2, 64, 3, 3))), casc)
    assert out.shape == (2, 160, 3, 3)


def test_b3_single_block_depth():
    assert block_out_depth("B3", 17, (8, 8, 8, 8)) == 32


def test_b1_delta_kernel_passes_input():
    block = BlockB1(1, (1,), np.random.default_rng(0))
    block.conv.weight.data[:] = 0
    block.conv.weight.data[0, 0, 1, 1] = 1.0
    x = np.random.default_rng(1).uniform(size=(1, 1, 5, 6))
    np.testing.assert_array_equal(block.conv(Tensor(x)).data, x)


def test_mixed_kinds_rejected():
    with pytest.raises(ConfigurationError):
        Cascade(["B1", "B3", "B1"], 4, (8,), np.random.default_rng(0))


def test_wrong_width_count_rejected():
    with pytest.raises(ConfigurationError):
        ContextNet(4, 4, "B3", (8, 8))


@settings(max_examples=25, deadline=None)
@given(st.sampled_from(["B1", "B2", "B3"]), st.integers(1, 6), st.data())
def test_depth_bookkeeping(kind, d, data):
    widths = tuple(data.draw(st.integers(1, 5)) for _ in DEFAULT_WIDTHS[kind])
    net = ContextNet(d, 3, kind, widths, norm=False)
    net.eval()
    with no_grad():
        h = context_forward(Tensor(np.ones((1, d, 3, 3))), net.cascade)
    assert h.shape == (1, cascade_depths(kind, d, widths)[-1], 3, 3)
    assert net.cascade.out_ch == cascade_depths(kind, d, widths)[-1]


@pytest.mark.parametrize("kind", ["B1", "B2", "B3"])
def test_grid_preserved(kind):
    net = ContextNet(4, 4, kind)
    out = context_forward(cube(np.random.default_rng(0), M=5, N=7), net.cascade)
    assert out.shape[2:] == (5, 7)


def test_receptive_field_of_three_b1_blocks():
    rng = np.random.default_rng(4)
    net = ContextNet(3, 4, "B1", (6,))
    net.train()
    with no_grad():
        net(Tensor(rng.standard_normal((4, 3, 9, 9))))  # populate running statistics
    net.eval()
    x = rng.standard_normal((1, 3, 9, 9))
    x2 = x.copy()
    x2[0, :, 0, 0] += 5.0
    with no_grad():
        a = context_forward(Tensor(x), net.cascade).data[0]
        b = context_forward(Tensor(x2), net.cascade).data[0]
    changed = np.any(a != b, axis=0)
    rows, cols = np.nonzero(changed)
    assert changed[0, 0]
    assert max(rows.max(), cols.max()) <= 3


# -- heads -----------------------------------------------------------------------------------

def test_zero_dense_gives_uniform_prediction():
    net = ContextNet(4, 4, "B3")
    net.head.weight.data[:] = 0
    probs = net.classify(cube(np.random.default_rng(0))).data
    np.testing.assert_allclose(probs, 0.25, atol=1e-15)


@pytest.mark.parametrize("kind", ["B1", "B2", "B3"])
def test_probabilities_sum_to_one(kind):
    net = ContextNet(4, 4, kind, auxiliary=True)
    out = net(cube(np.random.default_rng(1)))
    np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(out.seg.data.sum(axis=1), 1.0, atol=1e-9)


def test_pooling_permutation_invariance():
    rng = np.random.default_rng(5)
    net = ContextNet(4, 4, "B1", (5,))
    for block in net.cascade.blocks:
        centre = block.conv.weight.data[:, :, 1, 1].copy()
        block.conv.weight.data[:] = 0
        block.conv.weight.data[:, :, 1, 1] = centre
    net.eval()
    F = rng.standard_normal((1, 4, 4, 4))
    perm = rng.permutation(16)
    Fp = F.reshape(1, 4, 16)[:, :, perm].reshape(1, 4, 4, 4)
    with no_grad():
        np.testing.assert_allclose(net.classify(Tensor(F)).data, net.classify(Tensor(Fp)).data, atol=1e-14)


def test_zero_aux_head_uniform_map():
    net = ContextNet(4, 4, "B3", auxiliary=True)
    net.aux.weight.data[:] = 0
    seg = net.segment(cube(np.random.default_rng(0), B=1, M=8, N=8)).data
    assert seg.shape == (1, 4, 8, 8)
    np.testing.assert_allclose(seg, 0.25, atol=1e-15)


def test_disabled_aux_head():
    net = ContextNet(4, 4, "B3")
    with pytest.raises(ContractError):
        net.segment(cube(np.random.default_rng(0)))
    assert net(cube(np.random.default_rng(0))).seg is None


def test_heads_share_one_cascade_pass():
    net = ContextNet(4, 4, "B2", auxiliary=True, attention=True)
    net(cube(np.random.default_rng(0)))
    assert net.cascade.calls == 1 and net.gate.calls == 1


def test_uniform_gate_matches_rescaled_input():
    rng = np.random.default_rng(6)
    gated = ContextNet(4, 4, "B1", attention=True, norm=False, seed=3)
    plain = ContextNet(4, 4, "B1", attention=False, norm=False, seed=3)
    gated.gate.conv.weight.data[:] = 0
    F = rng.standard_normal((2, 4, 4, 4))
    a = gated.classify(Tensor(F)).data
    b = plain.classify(Tensor(F / 16)).data
    np.testing.assert_allclose(a, b, atol=1e-14)
    # the cascade and head carry no bias offsets at init, so relu homogeneity keeps the ranking
    np.testing.assert_array_equal(a.argmax(1), plain.classify(Tensor(F)).data.argmax(1))


def test_cube_shape_checked():
    with pytest.raises(DimensionError):
        ContextNet(4, 4)(Tensor(np.zeros((1, 5, 3, 3))))


@pytest.mark.parametrize("kind", ["B1", "B2", "B3"])
def test_joint_gradient_through_shared_cascade(kind):
    from cact.losses import loss_joint, one_hot

    rng = np.random.default_rng(7)
    net = ContextNet(3, 4, kind, (2,) * len(DEFAULT_WIDTHS[kind]), attention=True, auxiliary=True)
    F = cube(rng, B=2, d=3, M=2, N=2)
    Y = one_hot([1, 3], 4)
    S = one_hot(rng.integers(0, 4, (2, 2, 2)), 4, axis=1)

    def loss():
        out = net(F)
        return loss_joint(Y, out.probs, S, out.seg, 0.5)

    first_conv = next(p for n, p in net.named_parameters() if n.startswith("cascade") and n.endswith("weight"))
    errs = check_gradients(loss, [("F", F), ("cascade", first_conv), ("aux", net.aux.weight)])
    assert max(errs.values()) < 1e-4


# -- full model and serialization ---------------------------------------------------------------

def small_arch(**kw):
    return Architecture(extractor=ExtractorSpec(feature_depth=4, patch_size=32, width=2), **kw)


def test_architecture_json_round_trip():
    arch = small_arch(block_kind="B2", attention=True, auxiliary=True, attention_axis="channel")
    assert Architecture.from_json(arch.to_json()) == arch


def test_save_and_load_model(tmp_path):
    model = ContextModel(small_arch(block_kind="B1", auxiliary=True))
    save_model(tmp_path / "m.ckpt", model)
    back = load_model(tmp_path / "m.ckpt")
    assert back.arch == model.arch
    for (n1, a), (n2, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert n1 == n2
        np.testing.assert_array_equal(a, b)
    imgs = np.random.default_rng(0).uniform(size=(1, 1, 64, 64))
    model.eval()
    with no_grad():
        np.testing.assert_array_equal(model(imgs).probs.data, back(imgs).probs.data)


def test_component_seeds_are_independent():
    a = ContextModel(small_arch(block_kind="B3"))
    b = ContextModel(small_arch(block_kind="B3", attention=True))
    np.testing.assert_array_equal(a.context.head.weight.data, b.context.head.weight.data)
    np.testing.assert_array_equal(a.encoder.extractor.convs[0].weight.data, b.encoder.extractor.convs[0].weight.data)
