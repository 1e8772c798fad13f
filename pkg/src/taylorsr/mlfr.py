# Licensed under the GPL. See License.txt in the project root for license information.

"""
Multi-scale large field reception block.

Each branch pairs a 9x9 depthwise convolution dilated by dr with a plain ks x ks depthwise convolution
covering the dilation gaps, concatenates them (dilated first) and fuses back to C channels with a 1x1.
The branch outputs, in (6, 4, 2) dilation order, and a 1x1 bypass are concatenated and fused again.
"""

from typing import List, Tuple

import numpy as np

from .conv_ops import DepthwiseConv, PointwiseConv
from .errors import ConfigurationError
from .tensor_util import Module, Tensor, concat_channels, split_channels

DILATED_KERNEL_SIZE = 9
BRANCH_CONFIGS : Tuple[Tuple[int, int], ...] = ((6, 7), (4, 5), (2, 3))
VARIANTS = { "v1" : 1, "v2" : 2, "v3" : 3 }
DEFAULT_VARIANT = "v3"


def variant_branches(variant : str) -> Tuple[Tuple[int, int], ...]:
  if variant not in VARIANTS:
    raise ConfigurationError(f"Unknown MLFR variant {variant!r}, expected one of {sorted(VARIANTS)}.")
  return BRANCH_CONFIGS[:VARIANTS[variant]]


def mlfr_receptive_field(variant : str) -> int:
  return max(max((DILATED_KERNEL_SIZE - 1) * dilation + 1, size) for dilation, size in variant_branches(variant))


class BranchPair(Module):
  def __init__(self,
               channels : int,
               dilation : int,
               kernel_size : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.channels = channels
    self.ddwc = self.add_module("ddwc", DepthwiseConv(channels, DILATED_KERNEL_SIZE, dilation, rng))
    self.dwc = self.add_module("dwc", DepthwiseConv(channels, kernel_size, 1, rng))
    self.fuse = self.add_module("fuse", PointwiseConv(2 * channels, channels, rng=rng))

  def forward(self,
              x : Tensor) -> Tensor:
    return self.fuse(concat_channels([self.ddwc(x), self.dwc(x)]))

  def backward(self,
               d_out : Tensor) -> Tensor:
    d_dilated, d_plain = split_channels(self.fuse.backward(d_out), [self.channels, self.channels])
    return self.ddwc.backward(d_dilated) + self.dwc.backward(d_plain)


class MlfrBlock(Module):
  """
  :param channels: Channel width C of input and output.
  :param variant: v1 keeps the dilation-6 branch, v2 adds dilation 4, v3 adds dilation 2.
  """
  def __init__(self,
               channels : int,
               variant : str = DEFAULT_VARIANT,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.channels = channels
    self.variant = variant
    self.branches : List[BranchPair] = [self.add_module(f"branch{i}", BranchPair(channels, dilation, size, rng))
                                        for i, (dilation, size) in enumerate(variant_branches(variant))]
    self.bypass = self.add_module("bypass", PointwiseConv(channels, channels, rng=rng))
    self.final_fuse = self.add_module("final_fuse",
                                      PointwiseConv((len(self.branches) + 1) * channels, channels, rng=rng))

  @property
  def receptive_field(self) -> int:
    return mlfr_receptive_field(self.variant)

  def forward(self,
              x : Tensor) -> Tensor:
    outputs = [branch(x) for branch in self.branches]
    outputs.append(self.bypass(x))
    return self.final_fuse(concat_channels(outputs))

  def backward(self,
               d_out : Tensor) -> Tensor:
    pieces = split_channels(self.final_fuse.backward(d_out), [self.channels] * (len(self.branches) + 1))
    dx = self.bypass.backward(pieces[-1])
    for branch, d_branch in zip(self.branches, pieces):
      dx = dx + branch.backward(d_branch)
    return dx


def mlfr_forward(x : Tensor,
                 w : MlfrBlock) -> Tensor:
  return w.forward(x)
