# Licensed under the GPL. See License.txt in the project root for license information.

"""
Spatial building blocks on (C, H, W) feature maps. Convolutions are correlations with zero
same-padding and carry no bias unless stated.
"""

import math
from typing import Iterator, Tuple

import numpy as np

from .errors import ConfigurationError, ShapeError
from .flop_counter import record_flops
from .tensor_util import (Module, Tensor, gelu, gelu_backward, glorot_uniform, lift_preactivations, matmul,
                          matmul_backward, relu, relu_backward, sigmoid, sigmoid_backward, split_channels)

LAYER_NORM_EPS = 1e-6
CHANNEL_ATTENTION_REDUCTION = 4
GDFN_EXPANSION = 2


def _check_map(x : Tensor) -> None:
  if x.ndim != 3:
    raise ShapeError(f"Expected a (C, H, W) feature map, got shape {x.shape}.")


def _check_kernel_size(size : int) -> None:
  if size < 1 or size % 2 == 0:
    raise ConfigurationError(f"Kernel size must be odd and positive, got {size}.")


def _overlaps(height : int,
              width : int,
              size : int,
              dilation : int) -> Iterator[Tuple[int, int, slice, slice, slice, slice]]:
  """
  Yields, for every tap (u, v) that touches the map, the output window and the matching input window.
  Taps falling entirely into the zero padding are skipped.
  """
  pad = (size - 1) * dilation // 2
  for u in range(size):
    dy = u * dilation - pad
    y0, y1 = max(0, -dy), min(height, height - dy)
    if y0 >= y1:
      continue
    for v in range(size):
      dx = v * dilation - pad
      x0, x1 = max(0, -dx), min(width, width - dx)
      if x0 >= x1:
        continue
      yield u, v, slice(y0, y1), slice(x0, x1), slice(y0 + dy, y1 + dy), slice(x0 + dx, x1 + dx)


  ################################################################
  ####################  Functional operations  ###################
  ################################################################

def depthwise_conv2d(x : Tensor,
                     w : Tensor,
                     dilation : int = 1) -> Tensor:
  """
  Per-channel 2D correlation with zero same-padding of (k - 1) * dilation / 2 on every side.

  :param x: Feature map (C, H, W).
  :param w: Kernel (C, k, k) with odd k.
  :param dilation: Spacing between taps, at least 1.
  :raises ConfigurationError: If k is even or dilation < 1.
  :raises ShapeError: If the kernel does not match the channel count.
  """
  _check_map(x)
  size = w.shape[-1]
  _check_kernel_size(size)
  if dilation < 1:
    raise ConfigurationError(f"Dilation must be >= 1, got {dilation}.")
  if w.shape != (x.shape[0], size, size):
    raise ShapeError(f"Depthwise kernel {w.shape} does not fit feature map {x.shape}.")
  channels, height, width = x.shape
  record_flops(channels * height * width * size * size)

  out = np.zeros_like(x)
  for u, v, oy, ox, iy, ix in _overlaps(height, width, size, dilation):
    out[:, oy, ox] += w[:, u, v, None, None] * x[:, iy, ix]
  return out


def depthwise_conv2d_backward(x : Tensor,
                              w : Tensor,
                              dilation : int,
                              d_out : Tensor) -> Tuple[Tensor, Tensor]:
  size = w.shape[-1]
  dx = np.zeros_like(x)
  dw = np.zeros_like(w)
  for u, v, oy, ox, iy, ix in _overlaps(x.shape[1], x.shape[2], size, dilation):
    dx[:, iy, ix] += w[:, u, v, None, None] * d_out[:, oy, ox]
    dw[:, u, v] = np.sum(d_out[:, oy, ox] * x[:, iy, ix], axis=(1, 2))
  return dx, dw


def pointwise_conv(x : Tensor,
                   w : Tensor,
                   bias : Tensor = None) -> Tensor:
  """
  1x1 convolution, a per-position linear map (C_out x C_in) across channels.

  :raises ShapeError: If w does not take C_in input channels.
  """
  _check_map(x)
  if w.ndim != 2 or w.shape[1] != x.shape[0]:
    raise ShapeError(f"Pointwise kernel {w.shape} does not fit feature map {x.shape}.")
  _, height, width = x.shape
  out = matmul(w, x.reshape(x.shape[0], -1)).reshape(w.shape[0], height, width)
  if bias is not None:
    out += bias[:, None, None]
  return out


def pointwise_conv_backward(x : Tensor,
                            w : Tensor,
                            d_out : Tensor) -> Tuple[Tensor, Tensor, Tensor]:
  d_flat = d_out.reshape(d_out.shape[0], -1)
  dw, dx = matmul_backward(w, x.reshape(x.shape[0], -1), d_flat)
  return dx.reshape(x.shape), dw, d_flat.sum(axis=1)


def conv2d_3x3(x : Tensor,
               w : Tensor,
               stride : int = 1) -> Tensor:
  """
  Full (non-depthwise) correlation with zero same-padding. A stride of 2 keeps every second
  row and column of the stride-1 result, giving ceil(H / 2) x ceil(W / 2) outputs.

  :param x: Feature map (C_in, H, W).
  :param w: Kernel (C_out, C_in, 3, 3).
  :raises ShapeError: If the kernel does not match C_in.
  """
  _check_map(x)
  if w.ndim != 4 or w.shape[1] != x.shape[0] or w.shape[2] != w.shape[3]:
    raise ShapeError(f"Convolution kernel {w.shape} does not fit feature map {x.shape}.")
  size = w.shape[-1]
  _check_kernel_size(size)
  if stride not in (1, 2):
    raise ConfigurationError(f"Stride must be 1 or 2, got {stride}.")
  c_in, height, width = x.shape
  record_flops(w.shape[0] * c_in * height * width * size * size)

  out = np.zeros((w.shape[0], height, width))
  for u, v, oy, ox, iy, ix in _overlaps(height, width, size, 1):
    out[:, oy, ox] += np.tensordot(w[:, :, u, v], x[:, iy, ix], axes=1)
  return out[:, ::stride, ::stride] if stride > 1 else out


def conv2d_3x3_backward(x : Tensor,
                        w : Tensor,
                        stride : int,
                        d_out : Tensor) -> Tuple[Tensor, Tensor]:
  height, width = x.shape[1:]
  if stride > 1:
    full = np.zeros((w.shape[0], height, width))
    full[:, ::stride, ::stride] = d_out
    d_out = full
  dx = np.zeros_like(x)
  dw = np.zeros_like(w)
  for u, v, oy, ox, iy, ix in _overlaps(height, width, w.shape[-1], 1):
    dx[:, iy, ix] += np.tensordot(w[:, :, u, v].T, d_out[:, oy, ox], axes=1)
    dw[:, :, u, v] = np.tensordot(d_out[:, oy, ox], x[:, iy, ix], axes=([1, 2], [1, 2]))
  return dx, dw


def pixel_shuffle(x : Tensor,
                  scale : int) -> Tensor:
  """
  Depth-to-space: channel c * s^2 + i * s + j moves to sub-pixel (i, j) of output channel c.

  :raises ShapeError: If the channel count is not divisible by scale^2.
  """
  _check_map(x)
  channels, height, width = x.shape
  if channels % (scale * scale):
    raise ShapeError(f"Cannot pixel shuffle {channels} channels by scale {scale}.")
  out_channels = channels // (scale * scale)
  return np.ascontiguousarray(x.reshape(out_channels, scale, scale, height, width)
                              .transpose(0, 3, 1, 4, 2)
                              .reshape(out_channels, height * scale, width * scale))


def pixel_unshuffle(x : Tensor,
                    scale : int) -> Tensor:
  _check_map(x)
  channels, height, width = x.shape
  if height % scale or width % scale:
    raise ShapeError(f"Cannot pixel unshuffle a {height}x{width} map by scale {scale}.")
  h, w = height // scale, width // scale
  return np.ascontiguousarray(x.reshape(channels, h, scale, w, scale)
                              .transpose(0, 2, 4, 1, 3)
                              .reshape(channels * scale * scale, h, w))


def channel_layer_norm(x : Tensor,
                       gain : Tensor,
                       bias : Tensor,
                       eps : float = LAYER_NORM_EPS) -> Tensor:
  _check_map(x)
  centered = x - x.mean(axis=0, keepdims=True)
  inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
  return gain[:, None, None] * centered * inv_std + bias[:, None, None]


def channel_layer_norm_backward(x : Tensor,
                                gain : Tensor,
                                d_out : Tensor,
                                eps : float = LAYER_NORM_EPS) -> Tuple[Tensor, Tensor, Tensor]:
  channels = x.shape[0]
  centered = x - x.mean(axis=0, keepdims=True)
  inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=0, keepdims=True) + eps)
  x_hat = centered * inv_std
  d_hat = d_out * gain[:, None, None]
  dx = inv_std / channels * (channels * d_hat
                             - d_hat.sum(axis=0, keepdims=True)
                             - x_hat * (d_hat * x_hat).sum(axis=0, keepdims=True))
  return dx, (d_out * x_hat).sum(axis=(1, 2)), d_out.sum(axis=(1, 2))


def channel_attention(x : Tensor,
                      reduce : Tensor,
                      expand : Tensor) -> Tensor:
  """
  Squeeze-and-excitation: per-channel gates sigmoid(relu(mean(x) reduce) expand) rescale x.
  """
  pooled = x.mean(axis=(1, 2))[None, :]
  gates = sigmoid(matmul(relu(matmul(pooled, reduce)), expand))[0]
  return x * gates[:, None, None]


  ################################################################
  #######################  Module wrappers  ######################
  ################################################################

class DepthwiseConv(Module):
  def __init__(self,
               channels : int,
               kernel_size : int,
               dilation : int = 1,
               rng : np.random.Generator = None):
    super().__init__()
    _check_kernel_size(kernel_size)
    if dilation < 1:
      raise ConfigurationError(f"Dilation must be >= 1, got {dilation}.")
    rng = rng if rng is not None else np.random.default_rng(0)
    self.dilation = dilation
    self.kernel_size = kernel_size
    taps = kernel_size * kernel_size
    self.weight = self.add_param("weight", glorot_uniform(rng, (channels, kernel_size, kernel_size), taps, taps))
    self._x = None

  def forward(self,
              x : Tensor) -> Tensor:
    self._x = x
    return depthwise_conv2d(x, self.weight.value, self.dilation)

  def backward(self,
               d_out : Tensor) -> Tensor:
    dx, dw = depthwise_conv2d_backward(self._x, self.weight.value, self.dilation, d_out)
    self.weight.accumulate(dw)
    return dx


class PointwiseConv(Module):
  def __init__(self,
               c_in : int,
               c_out : int,
               bias : bool = False,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.weight = self.add_param("weight", glorot_uniform(rng, (c_out, c_in), c_in, c_out))
    self.bias = self.add_param("bias", np.zeros(c_out)) if bias else None
    self._x = None

  def forward(self,
              x : Tensor) -> Tensor:
    self._x = x
    return pointwise_conv(x, self.weight.value, None if self.bias is None else self.bias.value)

  def backward(self,
               d_out : Tensor) -> Tensor:
    dx, dw, db = pointwise_conv_backward(self._x, self.weight.value, d_out)
    self.weight.accumulate(dw)
    if self.bias is not None:
      self.bias.accumulate(db)
    return dx


class Conv3x3(Module):
  def __init__(self,
               c_in : int,
               c_out : int,
               stride : int = 1,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.stride = stride
    self.weight = self.add_param("weight", glorot_uniform(rng, (c_out, c_in, 3, 3), 9 * c_in, 9 * c_out))
    self._x = None

  def forward(self,
              x : Tensor) -> Tensor:
    self._x = x
    return conv2d_3x3(x, self.weight.value, self.stride)

  def backward(self,
               d_out : Tensor) -> Tensor:
    dx, dw = conv2d_3x3_backward(self._x, self.weight.value, self.stride, d_out)
    self.weight.accumulate(dw)
    return dx


class ChannelLayerNorm(Module):
  def __init__(self,
               channels : int):
    super().__init__()
    self.gain = self.add_param("gain", np.ones(channels))
    self.bias = self.add_param("bias", np.zeros(channels))
    self._x = None

  def forward(self,
              x : Tensor) -> Tensor:
    self._x = x
    return channel_layer_norm(x, self.gain.value, self.bias.value)

  def backward(self,
               d_out : Tensor) -> Tensor:
    dx, d_gain, d_bias = channel_layer_norm_backward(self._x, self.gain.value, d_out)
    self.gain.accumulate(d_gain)
    self.bias.accumulate(d_bias)
    return dx


class ChannelAttention(Module):
  """
  Squeeze-and-excitation gate with reduction 4 and no biases.
  """
  def __init__(self,
               channels : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    inner = math.ceil(channels / CHANNEL_ATTENTION_REDUCTION)
    self.reduce = self.add_param("reduce", glorot_uniform(rng, (channels, inner), channels, inner))
    self.expand = self.add_param("expand", glorot_uniform(rng, (inner, channels), inner, channels))
    self._cache = None

  def forward(self,
              x : Tensor) -> Tensor:
    pooled = x.mean(axis=(1, 2))[None, :]
    hidden_pre = matmul(pooled, self.reduce.value)
    hidden = relu(hidden_pre)
    gates = sigmoid(matmul(hidden, self.expand.value))
    self._cache = (x, pooled, hidden_pre, hidden, gates)
    return x * gates[0][:, None, None]

  def backward(self,
               d_out : Tensor) -> Tensor:
    x, pooled, hidden_pre, hidden, gates = self._cache
    d_gates = (d_out * x).sum(axis=(1, 2))[None, :]
    d_logits = sigmoid_backward(gates, d_gates)
    d_hidden, d_expand = matmul_backward(hidden, self.expand.value, d_logits)
    d_hidden_pre = relu_backward(hidden_pre, d_hidden)
    d_pooled, d_reduce = matmul_backward(pooled, self.reduce.value, d_hidden_pre)
    self.reduce.accumulate(d_reduce)
    self.expand.accumulate(d_expand)
    spatial = x.shape[1] * x.shape[2]
    return d_out * gates[0][:, None, None] + d_pooled[0][:, None, None] / spatial

  def open_gates(self,
                 floor : float) -> bool:
    if self._cache is None:
      return False
    return lift_preactivations(self.reduce, self._cache[1], self._cache[2], floor)


class Gdfn(Module):
  """
  Gated feed-forward block: expand to 2 * gamma * C channels, split into halves (a, b),
  return project(GELU(DWC(a)) * DWC(b)). The residual is added by the caller.

  :raises ConfigurationError: If the expanded width is odd.
  """
  def __init__(self,
               channels : int,
               expanded_width : int = None,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    expanded_width = expanded_width if expanded_width is not None else 2 * GDFN_EXPANSION * channels
    if expanded_width % 2:
      raise ConfigurationError(f"GDFN expanded width must be even, got {expanded_width}.")
    self.hidden = expanded_width // 2
    self.expand = self.add_module("expand", PointwiseConv(channels, expanded_width, rng=rng))
    self.dwc_a = self.add_module("dwc_a", DepthwiseConv(self.hidden, 3, rng=rng))
    self.dwc_b = self.add_module("dwc_b", DepthwiseConv(self.hidden, 3, rng=rng))
    self.project = self.add_module("project", PointwiseConv(self.hidden, channels, rng=rng))
    self._cache = None

  def forward(self,
              x : Tensor) -> Tensor:
    a, b = split_channels(self.expand(x), [self.hidden, self.hidden])
    conv_a = self.dwc_a(a)
    conv_b = self.dwc_b(b)
    gated = gelu(conv_a)
    self._cache = (conv_a, conv_b, gated)
    return self.project(gated * conv_b)

  def backward(self,
               d_out : Tensor) -> Tensor:
    conv_a, conv_b, gated = self._cache
    d_product = self.project.backward(d_out)
    d_a = self.dwc_a.backward(gelu_backward(conv_a, d_product * conv_b))
    d_b = self.dwc_b.backward(d_product * gated)
    return self.expand.backward(np.concatenate([d_a, d_b], axis=0))


def gdfn_forward(x : Tensor,
                 w : Gdfn) -> Tensor:
  """
  Evaluates a Gdfn block from its weights alone, leaving the block's backward cache untouched.
  """
  a, b = split_channels(pointwise_conv(x, w.expand.weight.value), [w.hidden, w.hidden])
  gated = gelu(depthwise_conv2d(a, w.dwc_a.weight.value)) * depthwise_conv2d(b, w.dwc_b.weight.value)
  return pointwise_conv(gated, w.project.weight.value)
