import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fcdrn.autodiff import Tensor, check_gradients
from fcdrn.blocks import (
    Context,
    Conv2d,
    FinalUpsamplingBlock,
    InitialDownsamplingBlock,
    MixingBlock,
    ResidualBasicBlock,
    ResNetStage,
    TransformBlock,
    multigrid_rates,
)
from fcdrn.receptive_field import as_layers, impulse_support, layer_list_rf


def rand(shape, seed=0, dtype=np.float32):
    return Tensor(np.random.default_rng(seed).standard_normal(shape).astype(dtype))


def test_zero_residual_block_is_identity():
    blk = ResidualBasicBlock(6, 6, rng=np.random.default_rng(0))
    blk.zero_residual()
    x = rand((2, 6, 8, 8))
    np.testing.assert_array_equal(blk.forward(x).data, x.data)
    # also in train mode, where BN and dropout are active upstream of the zeroed conv
    out = blk.forward(x, Context(True, np.random.default_rng(1)))
    np.testing.assert_array_equal(out.data, x.data)


def test_channel_changing_block_shape():
    blk = ResidualBasicBlock(8, 16, rng=np.random.default_rng(0))
    assert blk.proj is not None
    assert blk.forward(rand((1, 8, 10, 12))).shape == (1, 16, 10, 12)
    with pytest.raises(ValueError):
        blk.forward(rand((1, 4, 10, 12)))


@pytest.mark.parametrize("cin,cout", [(3, 3), (2, 4)])
def test_block_gradient(cin, cout):
    blk = ResidualBasicBlock(cin, cout, dropout=0.0, rng=np.random.default_rng(2), dtype=np.float64)
    x = Tensor(np.random.default_rng(3).standard_normal((2, cin, 5, 5)), requires_grad=True)
    ctx = Context(True, np.random.default_rng(0))
    assert check_gradients(lambda t: blk.forward(t, ctx), [x]) < 1e-4


def test_stage_is_block_composition():
    st_ = ResNetStage(4, 6, 3, rng=np.random.default_rng(0))
    assert [b.in_ch for b in st_.blocks] == [4, 6, 6]
    assert all(b.proj is None for b in st_.blocks[1:])
    x = rand((1, 4, 8, 8))
    y = x
    for b in st_.blocks:
        y = b.forward(y)
    np.testing.assert_array_equal(st_.forward(x).data, y.data)


def test_multigrid_identity_and_size():
    tf = TransformBlock("multigrid", 3, multigrid_rates(2), rng=np.random.default_rng(0))
    for c in tf.dil:
        c.set_identity()
    x = rand((1, 3, 9, 9))
    np.testing.assert_array_equal(tf.forward(x).data, x.data)
    one = TransformBlock("multigrid", 1, (2, 2, 2), rng=np.random.default_rng(0))
    assert one.forward(rand((1, 1, 9, 9))).shape == (1, 1, 9, 9)


def test_multigrid_rates():
    assert multigrid_rates(4) == (4, 4, 4)
    assert multigrid_rates(4, "doubling") == (4, 8, 16)
    with pytest.raises(ValueError):
        multigrid_rates(3)
    with pytest.raises(ValueError):
        multigrid_rates(-2)
    with pytest.raises(ValueError):
        TransformBlock("multigrid", 2, (2, 3, 2))


@pytest.mark.parametrize("r", [2, 4, 8, 16, 32])
def test_multigrid_receptive_field_matches_impulse(r):
    tf = TransformBlock("multigrid", 1, multigrid_rates(r), rng=np.random.default_rng(0))
    rf, jump = layer_list_rf(as_layers(tf))
    assert rf == 6 * r + 1 and jump == 1
    assert impulse_support(as_layers(tf)) == rf


def test_transform_sizes():
    rng = np.random.default_rng(0)
    assert TransformBlock("pool", 1, rng=rng).forward(rand((1, 1, 180, 240))).shape[2:] == (90, 120)
    up = TransformBlock("upsample", 1, rng=rng)
    assert up.forward(rand((1, 1, 22, 30)), target_size=(45, 60)).shape[2:] == (45, 60)
    assert TransformBlock("strided", 1, rng=rng).forward(rand((1, 1, 81, 81))).shape[2:] == (41, 41)
    for kind, rates in [("conv1x1", ()), ("conv3x3", ()), ("dilated", (4,)), ("dilated_conv", (8,))]:
        assert TransformBlock(kind, 2, rates, rng=rng).forward(rand((1, 2, 13, 17))).shape == (1, 2, 13, 17)


def test_transform_errors():
    with pytest.raises(ValueError):
        TransformBlock("upsample", 1).forward(rand((1, 1, 4, 4)))
    with pytest.raises(ValueError):
        TransformBlock("pool", 1).forward(rand((1, 1, 1, 8)))
    with pytest.raises(ValueError):
        TransformBlock("strided", 1).forward(rand((1, 1, 8, 1)))
    with pytest.raises(ValueError):
        TransformBlock("warp", 1)


@given(h=st.integers(2, 40), w=st.integers(2, 40), kind=st.sampled_from(["pool", "strided"]))
def test_down_then_up_restores_size(h, w, kind):
    down = TransformBlock(kind, 1, rng=np.random.default_rng(0))
    up = TransformBlock("upsample", 1, rng=np.random.default_rng(1))
    y = down.forward(rand((1, 1, h, w)))
    assert y.shape[2:] == down.output_size(h, w)
    assert up.forward(y, target_size=(h, w)).shape[2:] == (h, w)


def test_idb_fub_mixing_shapes():
    rng = np.random.default_rng(0)
    idb = InitialDownsamplingBlock(3, 5, rng)
    y = idb.forward(rand((1, 3, 36, 50)))
    assert y.shape == (1, 5, 18, 25)
    fub = FinalUpsamplingBlock(5, 7, rng)
    assert fub.forward(y, (36, 50)).shape == (1, 7, 36, 50)
    mix = MixingBlock(80, 80, rng)
    assert mix.conv.num_parameters() == 6480


def test_conv_constraints_and_init():
    with pytest.raises(ValueError):
        Conv2d(1, 1, 2)
    with pytest.raises(ValueError):
        Conv2d(1, 1, 3, stride=2, dilation=2)
    c = Conv2d(16, 8, 3, rng=np.random.default_rng(0))
    limit = np.sqrt(6.0 / (16 * 9))
    assert np.abs(c.weight.data).max() <= limit
    assert np.abs(c.weight.data).max() > 0.9 * limit
    assert (c.bias.data == 0).all()
