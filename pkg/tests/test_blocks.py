import numpy as np
import pytest

from modconn import tensor as T
from modconn.blocks import (
    BlockSpec,
    basic_block_forward,
    bottleneck_block_forward,
    bottleneck_branch_forward,
    init_block,
    param_count,
    shortcut,
)
from modconn.errors import ConfigError, ShapeError
from modconn.gradcheck import block_suite
from modconn.tensor import Tensor


@pytest.mark.parametrize("result", block_suite(), ids=lambda r: r.name)
def test_block_gradients_match_finite_differences(result):
    assert result.passed, str(result)


def test_param_count_formula():
    # two 3x3 convs plus BN scale/shift per conv output channel
    assert param_count(BlockSpec("basic", 16, 32, stride=2)) == 32 * 16 * 9 + 32 * 32 * 9 + 4 * 32
    # 1x1 reduce, 3x3, 1x1 expand
    assert param_count(BlockSpec("bottleneck", 64, 64, width=8)) == 8 * 64 + 8 * 8 * 9 + 64 * 8 + 2 * (8 + 8 + 64)


@pytest.mark.parametrize("spec,expected", [
    (BlockSpec("basic", 4, 4), (4, 8, 8)),
    (BlockSpec("basic", 4, 8, stride=2), (8, 4, 4)),
    (BlockSpec("bottleneck", 4, 16, width=2, stride=2), (16, 4, 4)),
])
def test_output_shapes(rng, spec, expected):
    p = init_block(spec, rng)
    fwd = basic_block_forward if spec.kind == "basic" else bottleneck_branch_forward
    out = fwd(Tensor(rng.standard_normal((2, 4, 8, 8)).astype(np.float32)), p)
    assert out.shape[1:] == expected == spec.output_shape((4, 8, 8))
    assert p.num_parameters() == param_count(spec)


def test_zero_conv_weights_reduce_block_to_its_shortcut(rng):
    spec = BlockSpec("basic", 4, 8, stride=2)
    p = init_block(spec, rng, np.float64).zero_weights()
    x = Tensor(rng.standard_normal((3, 4, 8, 8)))
    expected = np.maximum(shortcut(x, spec).data, 0)
    np.testing.assert_allclose(basic_block_forward(x, p, training=False).data, expected, atol=1e-12)


def test_bottleneck_block_is_branch_plus_shortcut(rng):
    spec = BlockSpec("bottleneck", 4, 4, width=2)
    p = init_block(spec, rng, np.float64)
    x = Tensor(rng.standard_normal((2, 4, 8, 8)))
    branch = bottleneck_branch_forward(x, p, training=False).data
    np.testing.assert_allclose(bottleneck_block_forward(x, p, training=False).data, np.maximum(branch + x.data, 0))


def test_invalid_specs():
    with pytest.raises(ConfigError):
        BlockSpec("dense", 4, 4)
    with pytest.raises(ConfigError):
        BlockSpec("bottleneck", 4, 4)
    with pytest.raises(ConfigError):
        BlockSpec("basic", 0, 4)


def test_wrong_input_channels(rng):
    p = init_block(BlockSpec("basic", 4, 4), rng)
    with pytest.raises(ShapeError):
        basic_block_forward(Tensor(np.zeros((2, 3, 8, 8), dtype=np.float32)), p)
    with pytest.raises(ConfigError):
        bottleneck_branch_forward(Tensor(np.zeros((2, 4, 8, 8), dtype=np.float32)), p)
