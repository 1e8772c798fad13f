# Licensed under the GPL. See License.txt in the project root for license information.

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import ndimage

from taylorsr.conv_ops import (ChannelAttention, Gdfn, channel_attention, channel_layer_norm, conv2d_3x3,
                               depthwise_conv2d, gdfn_forward, pixel_shuffle, pixel_unshuffle, pointwise_conv)
from taylorsr.errors import ConfigurationError, ShapeError
from taylorsr.flop_counter import counting


def _dilate(kernel, dilation):
  size = (kernel.shape[-1] - 1) * dilation + 1
  out = np.zeros(kernel.shape[:-2] + (size, size))
  out[..., ::dilation, ::dilation] = kernel
  return out


@pytest.mark.parametrize("size,dilation", [(3, 1), (5, 1), (7, 1), (3, 2), (3, 3)])
def test_depthwise_matches_correlate(rng, size, dilation):
  x = rng.standard_normal((3, 9, 7))
  w = rng.standard_normal((3, size, size))
  expected = np.stack([ndimage.correlate(x[c], _dilate(w[c], dilation), mode="constant", cval=0.0)
                       for c in range(3)])
  assert_allclose(depthwise_conv2d(x, w, dilation), expected, atol=1e-12)


def test_depthwise_flops_and_validation(rng):
  x = rng.standard_normal((4, 5, 6))
  with counting() as counter:
    depthwise_conv2d(x, rng.standard_normal((4, 3, 3)), 2)
  assert counter.multiply_adds == 4 * 5 * 6 * 9
  with pytest.raises(ConfigurationError):
    depthwise_conv2d(x, np.ones((4, 2, 2)))
  with pytest.raises(ConfigurationError):
    depthwise_conv2d(x, np.ones((4, 3, 3)), 0)
  with pytest.raises(ShapeError):
    depthwise_conv2d(x, np.ones((3, 3, 3)))


def test_conv3x3_matches_correlate(rng):
  x = rng.standard_normal((2, 7, 5))
  w = rng.standard_normal((3, 2, 3, 3))
  expected = np.stack([sum(ndimage.correlate(x[c], w[o, c], mode="constant") for c in range(2))
                       for o in range(3)])
  assert_allclose(conv2d_3x3(x, w), expected, atol=1e-12)
  strided = conv2d_3x3(x, w, stride=2)
  assert strided.shape == (3, 4, 3)
  assert_allclose(strided, expected[:, ::2, ::2], atol=1e-12)


def test_pointwise_is_channel_mixing(rng):
  x = rng.standard_normal((3, 4, 4))
  w = rng.standard_normal((5, 3))
  b = rng.standard_normal(5)
  out = pointwise_conv(x, w, b)
  assert_allclose(out[:, 2, 1], w @ x[:, 2, 1] + b)
  with pytest.raises(ShapeError):
    pointwise_conv(x, np.ones((5, 4)))


def test_pixel_shuffle_layout():
  x = np.arange(2 * 4 * 2 * 3, dtype=float).reshape(8, 2, 3)
  out = pixel_shuffle(x, 2)
  assert out.shape == (2, 4, 6)
  for c in range(2):
    for i in range(2):
      for j in range(2):
        assert_array_equal(out[c, i::2, j::2], x[c * 4 + i * 2 + j])
  assert_array_equal(pixel_unshuffle(out, 2), x)
  with pytest.raises(ShapeError):
    pixel_shuffle(np.ones((6, 2, 2)), 2)


def test_layer_norm_normalizes_channels(rng):
  x = 3.0 + 2.0 * rng.standard_normal((6, 4, 4))
  out = channel_layer_norm(x, np.ones(6), np.zeros(6))
  assert_allclose(out.mean(axis=0), 0.0, atol=1e-12)
  assert_allclose(out.var(axis=0), 1.0, atol=1e-4)


def test_channel_attention_gates_are_bounded(rng):
  x = rng.uniform(0.5, 1.0, (8, 3, 3))
  out = ChannelAttention(8, rng).forward(x)
  ratio = out / x
  assert np.all((ratio > 0.0) & (ratio < 1.0))
  assert_allclose(ratio, ratio[:, :1, :1] * np.ones_like(ratio))


def test_gdfn_shapes_and_width(rng):
  block = Gdfn(4, rng=rng)
  assert block.hidden == 8
  assert block.forward(rng.standard_normal((4, 5, 5))).shape == (4, 5, 5)
  with pytest.raises(ConfigurationError):
    Gdfn(4, expanded_width=7)


def test_dilated_kernel_impulse_support(rng):
  size = 99
  impulse = np.zeros((1, size, size))
  impulse[0, size // 2, size // 2] = 1.0
  out = depthwise_conv2d(impulse, rng.uniform(0.5, 1.0, (1, 9, 9)), dilation=6)
  rows, cols = np.nonzero(out[0])
  assert rows.size == 81
  assert rows.max() - rows.min() + 1 == 49
  assert cols.max() - cols.min() + 1 == 49
  grid = size // 2 + 6 * np.arange(-4, 5)
  assert_array_equal(np.unique(rows), grid)
  assert_array_equal(np.unique(cols), grid)


@pytest.mark.parametrize("seed", range(20))
def test_spatial_shapes(seed):
  rng = np.random.default_rng(seed)
  channels, height, width = rng.integers(1, 5), rng.integers(1, 13), rng.integers(1, 13)
  size, dilation = rng.choice([1, 3, 5, 7, 9]), rng.integers(1, 4)
  x = rng.standard_normal((channels, height, width))
  assert depthwise_conv2d(x, rng.standard_normal((channels, size, size)), dilation).shape == x.shape
  w = rng.standard_normal((3, channels, 3, 3))
  assert conv2d_3x3(x, w).shape == (3, height, width)
  assert conv2d_3x3(x, w, stride=2).shape == (3, -(-height // 2), -(-width // 2))
  shuffled = pixel_shuffle(np.tile(x, (4, 1, 1)), 2)
  assert shuffled.shape == (channels, 2 * height, 2 * width)
  assert pixel_unshuffle(shuffled, 2).shape == (4 * channels, height, width)


def test_channel_attention_zero_weights_halve(rng):
  x = rng.standard_normal((8, 3, 4))
  block = ChannelAttention(8, rng)
  for param in block.params():
    param.value[...] = 0.0
  assert_allclose(block.forward(x), x / 2)
  assert_allclose(channel_attention(x, np.zeros((8, 2)), np.zeros((2, 8))), x / 2)


def test_channel_attention_functional_matches_module(rng):
  x = rng.standard_normal((8, 5, 5))
  block = ChannelAttention(8, rng)
  assert_allclose(channel_attention(x, block.reduce.value, block.expand.value), block.forward(x), atol=1e-14)


def test_gdfn_forward_matches_module(rng):
  x = rng.standard_normal((4, 6, 5))
  block = Gdfn(4, rng=rng)
  expected = block.forward(x)
  cache = block._cache
  assert_allclose(gdfn_forward(x, block), expected, atol=1e-13)
  assert block._cache is cache
