# Licensed under the GPL. See License.txt in the project root for license information.

"""
Super-resolution networks assembled from LSTEA blocks.

LabNet is a three level U-Net of six LSTEA stages for bicubic/blur degradations. RealNet runs a
denoising and a deblurring branch side by side, cross-mixing them after every stage through
Adapters and merging them in a Fusion module; the user knobs alpha and beta set how much of the
denoising and deblurring content each mix keeps.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .attention import NlaUnit, SteaUnit, TaylorOrder
from .conv_ops import ChannelAttention, ChannelLayerNorm, Conv3x3, DepthwiseConv, Gdfn, PointwiseConv, pixel_shuffle, pixel_unshuffle
from .degradation import bicubic_resize
from .errors import ConfigurationError, SizeError
from .flop_counter import counting
from .mlfr import DEFAULT_VARIANT, VARIANTS, MlfrBlock
from .tensor_util import Module, Tensor, concat_channels, split_channels

logger = logging.getLogger(__name__)

ATTENTION_KINDS = ("stea", "nla", "none")
VALID_SCALES = (2, 3, 4)
MIN_INPUT_SIZE = 4
UNET_MULTIPLE = 4


  ################################################################
  ######################  Configurations  ########################
  ################################################################

@dataclass
class BlockOptions:
  """
  Ablation switches of the global branch of every LSTEA block.
  """
  attention : str = "stea"
  taylor_order : int = 2
  use_dwc : bool = True
  use_mlfr : bool = True
  mlfr_variant : str = DEFAULT_VARIANT

  def validate(self) -> "BlockOptions":
    if self.attention not in ATTENTION_KINDS:
      raise ConfigurationError(f"Attention must be one of {ATTENTION_KINDS}, got {self.attention!r}.")
    if self.taylor_order not in (1, 2, 3):
      raise ConfigurationError(f"Taylor order must be 1, 2 or 3, got {self.taylor_order}.")
    if self.mlfr_variant not in VARIANTS:
      raise ConfigurationError(f"Unknown MLFR variant {self.mlfr_variant!r}.")
    return self


@dataclass
class LabNetConfig:
  channels : int = 16
  scale : int = 2
  blocks : Tuple[int, ...] = (1, 1, 1, 1, 1, 1)
  patch : int = 32
  global_skip : bool = True
  options : BlockOptions = field(default_factory=BlockOptions)

  def validate(self) -> "LabNetConfig":
    if len(self.blocks) != 6:
      raise ConfigurationError(f"LabNet needs exactly 6 block counts, got {len(self.blocks)}.")
    if any(b < 1 for b in self.blocks):
      raise ConfigurationError(f"Block counts must be >= 1, got {self.blocks}.")
    if self.scale not in VALID_SCALES:
      raise ConfigurationError(f"Scale must be one of {VALID_SCALES}, got {self.scale}.")
    if self.channels < 1:
      raise ConfigurationError(f"Channel width must be >= 1, got {self.channels}.")
    self.options.validate()
    return self


@dataclass
class RealNetConfig:
  channels : int = 16
  scale : int = 2
  modules : int = 4
  blocks : int = 1
  alpha : Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
  beta : Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0)
  patch : int = 32
  global_skip : bool = True
  options : BlockOptions = field(default_factory=BlockOptions)

  def validate(self) -> "RealNetConfig":
    if self.modules < 1 or self.blocks < 1:
      raise ConfigurationError(f"RealNet needs >= 1 module and block, got {self.modules} and {self.blocks}.")
    if len(self.alpha) != self.modules or len(self.beta) != self.modules:
      raise ConfigurationError(f"RealNet with {self.modules} modules needs {self.modules} alpha and beta values, "
                               f"got {len(self.alpha)} and {len(self.beta)}.")
    if self.scale not in VALID_SCALES:
      raise ConfigurationError(f"Scale must be one of {VALID_SCALES}, got {self.scale}.")
    if self.channels < 1:
      raise ConfigurationError(f"Channel width must be >= 1, got {self.channels}.")
    self.options.validate()
    return self


  ################################################################
  ########################  LSTEA block  #########################
  ################################################################

class LsteaBlock(Module):
  """
  y = x + CA(merge(concat(Local(LN(x)), MLFR(STEA(LN(x))))))
  out = y + GDFN(LN2(y))
  The local branch is a 3x3 then a 5x5 depthwise convolution.
  """
  def __init__(self,
               channels : int,
               tokens : int = 1,
               options : BlockOptions = None,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    options = (options if options is not None else BlockOptions()).validate()
    self.channels = channels
    self.norm = self.add_module("norm", ChannelLayerNorm(channels))
    self.local1 = self.add_module("local1", DepthwiseConv(channels, 3, rng=rng))
    self.local2 = self.add_module("local2", DepthwiseConv(channels, 5, rng=rng))
    self.attention = None
    if options.attention == "stea":
      self.attention = self.add_module("stea", SteaUnit(channels, tokens, TaylorOrder(options.taylor_order),
                                                        options.use_dwc, rng))
    elif options.attention == "nla":
      self.attention = self.add_module("nla", NlaUnit(channels, rng))
    self.mlfr = self.add_module("mlfr", MlfrBlock(channels, options.mlfr_variant, rng)) if options.use_mlfr else None
    self.merge = self.add_module("merge", PointwiseConv(2 * channels, channels, rng=rng))
    self.ca = self.add_module("ca", ChannelAttention(channels, rng))
    self.second_norm = self.add_module("second_norm", ChannelLayerNorm(channels))
    self.gdfn = self.add_module("gdfn", Gdfn(channels, rng=rng))

  def forward(self,
              x : Tensor) -> Tensor:
    normed = self.norm(x)
    local = self.local2(self.local1(normed))
    glob = normed
    if self.attention is not None:
      glob = self.attention(glob)
    if self.mlfr is not None:
      glob = self.mlfr(glob)
    y = x + self.ca(self.merge(concat_channels([local, glob])))
    return y + self.gdfn(self.second_norm(y))

  def backward(self,
               d_out : Tensor) -> Tensor:
    d_y = d_out + self.second_norm.backward(self.gdfn.backward(d_out))
    d_local, d_glob = split_channels(self.merge.backward(self.ca.backward(d_y)), [self.channels, self.channels])
    if self.mlfr is not None:
      d_glob = self.mlfr.backward(d_glob)
    if self.attention is not None:
      d_glob = self.attention.backward(d_glob)
    d_normed = self.local1.backward(self.local2.backward(d_local)) + d_glob
    return d_y + self.norm.backward(d_normed)


def lstea_block_forward(x : Tensor,
                        w : LsteaBlock) -> Tensor:
  return w.forward(x)


class LsteaStage(Module):
  def __init__(self,
               channels : int,
               blocks : int,
               tokens : int = 1,
               options : BlockOptions = None,
               rng : np.random.Generator = None):
    super().__init__()
    self.blocks : List[LsteaBlock] = [self.add_module(f"block{i}", LsteaBlock(channels, tokens, options, rng))
                                      for i in range(blocks)]

  def forward(self,
              x : Tensor) -> Tensor:
    for block in self.blocks:
      x = block(x)
    return x

  def backward(self,
               d_out : Tensor) -> Tensor:
    for block in reversed(self.blocks):
      d_out = block.backward(d_out)
    return d_out


def _check_input(lr : Tensor) -> None:
  if lr.ndim != 3 or lr.shape[0] != 3:
    raise SizeError(f"Expected a (3, H, W) LR image, got shape {lr.shape}.")
  if min(lr.shape[1:]) < MIN_INPUT_SIZE:
    raise SizeError(f"LR image must be at least {MIN_INPUT_SIZE}x{MIN_INPUT_SIZE}, got {lr.shape[1:]}.")


  ################################################################
  ##########################  LabNet  ############################
  ################################################################

class LabNet(Module):
  """
  head conv -> S1 -> down -> S2 -> down -> S3 -> S4 -> up + skip(S2) -> S5 -> up + skip(S1) -> S6
  -> + head features -> conv to 3 s^2 channels -> pixel shuffle s -> refinement conv.
  Downsampling is a stride-2 3x3 conv, upsampling a 3x3 conv to 4C channels and a pixel shuffle by 2,
  skips are concatenated and fused with a 1x1. Inputs are reflection padded to a multiple of 4.
  """
  def __init__(self,
               cfg : LabNetConfig,
               rng : np.random.Generator = None):
    super().__init__()
    self.cfg = cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    c, opts = cfg.channels, cfg.options
    tokens = max(1, cfg.patch // cfg.scale) ** 2
    self.head = self.add_module("head", Conv3x3(3, c, rng=rng))
    self.stage1 = self.add_module("stage1", LsteaStage(c, cfg.blocks[0], tokens, opts, rng))
    self.down1 = self.add_module("down1", Conv3x3(c, c, stride=2, rng=rng))
    self.stage2 = self.add_module("stage2", LsteaStage(c, cfg.blocks[1], max(1, tokens // 4), opts, rng))
    self.down2 = self.add_module("down2", Conv3x3(c, c, stride=2, rng=rng))
    self.stage3 = self.add_module("stage3", LsteaStage(c, cfg.blocks[2], max(1, tokens // 16), opts, rng))
    self.stage4 = self.add_module("stage4", LsteaStage(c, cfg.blocks[3], max(1, tokens // 16), opts, rng))
    self.up1 = self.add_module("up1", Conv3x3(c, 4 * c, rng=rng))
    self.fuse1 = self.add_module("fuse1", PointwiseConv(2 * c, c, rng=rng))
    self.stage5 = self.add_module("stage5", LsteaStage(c, cfg.blocks[4], max(1, tokens // 4), opts, rng))
    self.up2 = self.add_module("up2", Conv3x3(c, 4 * c, rng=rng))
    self.fuse2 = self.add_module("fuse2", PointwiseConv(2 * c, c, rng=rng))
    self.stage6 = self.add_module("stage6", LsteaStage(c, cfg.blocks[5], tokens, opts, rng))
    self.tail = self.add_module("tail", Conv3x3(c, 3 * cfg.scale * cfg.scale, rng=rng))
    self.refine = self.add_module("refine", Conv3x3(3, 3, rng=rng))
    self._out_size = None

  def forward(self,
              lr : Tensor) -> Tensor:
    _check_input(lr)
    s = self.cfg.scale
    _, height, width = lr.shape
    pad_h, pad_w = -height % UNET_MULTIPLE, -width % UNET_MULTIPLE
    padded = np.pad(lr, ((0, 0), (0, pad_h), (0, pad_w)), mode="reflect")

    h0 = self.head(padded)
    e1 = self.stage1(h0)
    e2 = self.stage2(self.down1(e1))
    d3 = self.stage4(self.stage3(self.down2(e2)))
    d2 = self.stage5(self.fuse1(concat_channels([pixel_shuffle(self.up1(d3), 2), e2])))
    d1 = self.stage6(self.fuse2(concat_channels([pixel_shuffle(self.up2(d2), 2), e1])))
    sr = self.refine(pixel_shuffle(self.tail(d1 + h0), s))

    self._out_size = (s * height, s * width, sr.shape)
    sr = sr[:, :s * height, :s * width]
    if self.cfg.global_skip:
      sr = sr + bicubic_resize(lr, s * height, s * width)
    return sr

  def backward(self,
               d_out : Tensor) -> None:
    out_h, out_w, full_shape = self._out_size
    c = self.cfg.channels
    d_full = np.zeros(full_shape)
    d_full[:, :out_h, :out_w] = d_out

    d_h0 = self.tail.backward(pixel_unshuffle(self.refine.backward(d_full), self.cfg.scale))
    d_u1, d_e1 = split_channels(self.fuse2.backward(self.stage6.backward(d_h0)), [c, c])
    d_u2, d_e2 = split_channels(self.fuse1.backward(self.stage5.backward(self.up2.backward(pixel_unshuffle(d_u1, 2)))),
                                [c, c])
    d_e3 = self.stage3.backward(self.stage4.backward(self.up1.backward(pixel_unshuffle(d_u2, 2))))
    d_e2 = d_e2 + self.down2.backward(d_e3)
    d_e1 = d_e1 + self.down1.backward(self.stage2.backward(d_e2))
    self.head.backward(d_h0 + self.stage1.backward(d_e1))


def labnet_forward(lr : Tensor,
                   net : LabNet) -> Tensor:
  return net.forward(lr)


  ################################################################
  ##########################  RealNet  ###########################
  ################################################################

class Adapter(Module):
  """
  den' = CA(1x1(concat(alpha f_den, beta Conv3x3(f_deb))))
  deb' = CA(1x1(concat(beta f_deb, alpha Conv3x3(f_den))))
  Scaling happens before any weight touches the other branch, so beta = 0 cuts the deblurring
  content out of den' exactly.
  """
  def __init__(self,
               channels : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.channels = channels
    self.conv_den = self.add_module("conv_den", Conv3x3(channels, channels, rng=rng))
    self.fuse_den = self.add_module("fuse_den", PointwiseConv(2 * channels, channels, rng=rng))
    self.ca_den = self.add_module("ca_den", ChannelAttention(channels, rng))
    self.conv_deb = self.add_module("conv_deb", Conv3x3(channels, channels, rng=rng))
    self.fuse_deb = self.add_module("fuse_deb", PointwiseConv(2 * channels, channels, rng=rng))
    self.ca_deb = self.add_module("ca_deb", ChannelAttention(channels, rng))
    self._knobs = (1.0, 1.0)

  def forward(self,
              f_den : Tensor,
              f_deb : Tensor,
              alpha : float = 1.0,
              beta : float = 1.0) -> Tuple[Tensor, Tensor]:
    if f_den.shape != f_deb.shape:
      raise SizeError(f"Adapter inputs differ in shape: {f_den.shape} and {f_deb.shape}.")
    self._knobs = (alpha, beta)
    den = self.ca_den(self.fuse_den(concat_channels([alpha * f_den, beta * self.conv_den(f_deb)])))
    deb = self.ca_deb(self.fuse_deb(concat_channels([beta * f_deb, alpha * self.conv_deb(f_den)])))
    return den, deb

  def backward(self,
               d_den : Tensor,
               d_deb : Tensor) -> Tuple[Tensor, Tensor]:
    alpha, beta = self._knobs
    c = self.channels
    d_own, d_cross = split_channels(self.fuse_den.backward(self.ca_den.backward(d_den)), [c, c])
    d_f_den = alpha * d_own
    d_f_deb = self.conv_den.backward(beta * d_cross)
    d_own, d_cross = split_channels(self.fuse_deb.backward(self.ca_deb.backward(d_deb)), [c, c])
    return d_f_den + self.conv_deb.backward(alpha * d_cross), d_f_deb + beta * d_own


def adapter_forward(f_den : Tensor,
                    f_deb : Tensor,
                    alpha : float,
                    beta : float,
                    w : Adapter) -> Tuple[Tensor, Tensor]:
  return w.forward(f_den, f_deb, alpha, beta)


class Fusion(Module):
  """
  Refine(PixelShuffle_s(1x1(concat(alpha f_den, beta f_deb)))). ``features`` keeps the
  shuffled map before refinement.
  """
  def __init__(self,
               channels : int,
               scale : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.channels = channels
    self.scale = scale
    self.fuse = self.add_module("fuse", PointwiseConv(2 * channels, 3 * scale * scale, rng=rng))
    self.refine = self.add_module("refine", Conv3x3(3, 3, rng=rng))
    self.features : Optional[Tensor] = None
    self._knobs = (1.0, 1.0)

  def forward(self,
              f_den : Tensor,
              f_deb : Tensor,
              alpha : float = 1.0,
              beta : float = 1.0) -> Tensor:
    if f_den.shape != f_deb.shape:
      raise SizeError(f"Fusion inputs differ in shape: {f_den.shape} and {f_deb.shape}.")
    self._knobs = (alpha, beta)
    self.features = pixel_shuffle(self.fuse(concat_channels([alpha * f_den, beta * f_deb])), self.scale)
    return self.refine(self.features)

  def backward(self,
               d_out : Tensor) -> Tuple[Tensor, Tensor]:
    alpha, beta = self._knobs
    d_cat = self.fuse.backward(pixel_unshuffle(self.refine.backward(d_out), self.scale))
    d_den, d_deb = split_channels(d_cat, [self.channels, self.channels])
    return alpha * d_den, beta * d_deb


def fusion_forward(f_den : Tensor,
                   f_deb : Tensor,
                   alpha : float,
                   beta : float,
                   w : Fusion) -> Tensor:
  return w.forward(f_den, f_deb, alpha, beta)


class RealNet(Module):
  """
  Two shallow 3x3 heads feed a denoising and a deblurring branch of ``modules`` LSTEA stages each.
  Adapter i mixes the branches after stage i with (alpha_i, beta_i); the last pair drives the Fusion.
  """
  def __init__(self,
               cfg : RealNetConfig,
               rng : np.random.Generator = None):
    super().__init__()
    self.cfg = cfg.validate()
    rng = rng if rng is not None else np.random.default_rng(0)
    c, opts = cfg.channels, cfg.options
    tokens = max(1, cfg.patch // cfg.scale) ** 2
    self.alpha = list(cfg.alpha)
    self.beta = list(cfg.beta)
    self.head_den = self.add_module("head_den", Conv3x3(3, c, rng=rng))
    self.head_deb = self.add_module("head_deb", Conv3x3(3, c, rng=rng))
    self.den_stages = [self.add_module(f"den{i}", LsteaStage(c, cfg.blocks, tokens, opts, rng))
                       for i in range(cfg.modules)]
    self.deb_stages = [self.add_module(f"deb{i}", LsteaStage(c, cfg.blocks, tokens, opts, rng))
                       for i in range(cfg.modules)]
    self.adapters = [self.add_module(f"adapter{i}", Adapter(c, rng)) for i in range(cfg.modules - 1)]
    self.fusion = self.add_module("fusion", Fusion(c, cfg.scale, rng))

  def set_knobs(self,
                alpha : Sequence[float],
                beta : Sequence[float]) -> None:
    if len(alpha) != self.cfg.modules or len(beta) != self.cfg.modules:
      raise ConfigurationError(f"Expected {self.cfg.modules} alpha and beta values, got {len(alpha)} and {len(beta)}.")
    self.alpha, self.beta = [float(a) for a in alpha], [float(b) for b in beta]

  def forward(self,
              lr : Tensor,
              lr_deblur : Tensor = None) -> Tensor:
    _check_input(lr)
    if lr_deblur is not None and lr_deblur.shape != lr.shape:
      raise SizeError(f"Deblur input shape {lr_deblur.shape} differs from {lr.shape}.")
    den = self.head_den(lr)
    deb = self.head_deb(lr if lr_deblur is None else lr_deblur)
    for i in range(self.cfg.modules):
      den = self.den_stages[i](den)
      deb = self.deb_stages[i](deb)
      if i < len(self.adapters):
        den, deb = self.adapters[i](den, deb, self.alpha[i], self.beta[i])
    sr = self.fusion(den, deb, self.alpha[-1], self.beta[-1])
    if self.cfg.global_skip:
      s = self.cfg.scale
      sr = sr + bicubic_resize(lr, s * lr.shape[1], s * lr.shape[2])
    return sr

  def backward(self,
               d_out : Tensor) -> None:
    d_den, d_deb = self.fusion.backward(d_out)
    for i in reversed(range(self.cfg.modules)):
      if i < len(self.adapters):
        d_den, d_deb = self.adapters[i].backward(d_den, d_deb)
      d_den = self.den_stages[i].backward(d_den)
      d_deb = self.deb_stages[i].backward(d_deb)
    self.head_den.backward(d_den)
    self.head_deb.backward(d_deb)


def realnet_forward(lr : Tensor,
                    net : RealNet,
                    lr_deblur : Tensor = None) -> Tensor:
  return net.forward(lr, lr_deblur)


  ################################################################
  #########################  Profiling  ##########################
  ################################################################

Network = Union[LabNet, RealNet]


def build_network(cfg : Union[LabNetConfig, RealNetConfig],
                  seed : int = 0) -> Network:
  rng = np.random.default_rng(seed)
  if isinstance(cfg, LabNetConfig):
    return LabNet(cfg, rng)
  if isinstance(cfg, RealNetConfig):
    return RealNet(cfg, rng)
  raise ConfigurationError(f"No network for configuration type {type(cfg).__name__}.")


def profile_model(model : Module,
                  input_shape : Tuple[int, ...],
                  seed : int = 0) -> Tuple[int, int]:
  """
  Parameter count and multiply-adds of one forward pass on a random input.

  :return: (params, flops)
  """
  x = np.random.default_rng(seed).uniform(0.0, 1.0, size=input_shape)
  with counting() as counter:
    model.forward(x)
  params = sum(param.size for param in model.params())
  logger.debug("%s on %s: %d params, %d multiply-adds", type(model).__name__, input_shape, params, counter.multiply_adds)
  return params, counter.multiply_adds
