# Licensed under the GPL. See License.txt in the project root for license information.

"""
Dense tensor helpers, learnable parameters and the forward/backward contract shared by every block.
Tensors are float64 numpy arrays; every differentiable operation has a matching ``*_backward``
returning the vector-Jacobian product.
"""

from collections import OrderedDict
from typing import Iterator, List, Sequence, Tuple

import numpy as np
from scipy.special import erf, expit

from .errors import NumericError, ShapeError
from .flop_counter import record_flops

Tensor = np.ndarray
DTYPE = np.float64

_SQRT_2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def as_tensor(data,
              shape : Sequence[int] = None) -> Tensor:
  """
  Converts data into a contiguous float64 tensor.

  :param data: Anything numpy can turn into an array.
  :param shape: Optional shape to reshape the data into.
  :raises ShapeError: If the data cannot take the shape or a dimension is smaller than 1.
  :return: Contiguous float64 array.
  """
  tensor = np.ascontiguousarray(data, dtype=DTYPE)
  if shape is not None:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != tensor.size:
      raise ShapeError(f"Cannot view {tensor.size} values as shape {shape}.")
    tensor = tensor.reshape(shape)
  if any(s < 1 for s in tensor.shape):
    raise ShapeError(f"Tensor dimensions must be >= 1, got shape {tensor.shape}.")
  return tensor


def glorot_uniform(rng : np.random.Generator,
                   shape : Sequence[int],
                   fan_in : int,
                   fan_out : int) -> Tensor:
  limit = np.sqrt(6.0 / (fan_in + fan_out))
  return rng.uniform(-limit, limit, size=tuple(shape))


  ################################################################
  ##################  Param and Module classes  ##################
  ################################################################

class Param:
  """
  A learnable tensor together with its accumulated gradient.
  The value is updated in place by the optimiser and by gradient checking, so blocks must
  read ``value`` on every forward call instead of caching derived quantities.
  """
  def __init__(self,
               value,
               name : str = ""):
    self.value = np.array(value, dtype=DTYPE, order="C")
    self.grad = np.zeros_like(self.value)
    self.name = name

  @property
  def shape(self) -> Tuple[int, ...]:
    return self.value.shape

  @property
  def size(self) -> int:
    return self.value.size

  def zero_grad(self) -> None:
    self.grad[...] = 0.0

  def accumulate(self,
                 grad : Tensor) -> None:
    if grad.shape != self.value.shape:
      raise ShapeError(f"Gradient of shape {grad.shape} does not match parameter {self.name} of shape {self.value.shape}.")
    self.grad += grad


class Module:
  """
  Base class of every block holding parameters.
  Derived classes register parameters and child blocks in construction order, which fixes
  the deterministic order used by serialisation, optimisation and parameter counting.
  forward caches what backward needs, so a module serves one forward/backward pair at a time.
  """
  def __init__(self):
    self._params = OrderedDict()
    self._modules = OrderedDict()

  def add_param(self,
                name : str,
                value) -> Param:
    if name in self._params or name in self._modules:
      raise ValueError(f"Name {name} already registered in {self.__class__.__name__}.")
    param = Param(value, name)
    self._params[name] = param
    return param

  def add_module(self,
                 name : str,
                 module : "Module") -> "Module":
    if name in self._params or name in self._modules:
      raise ValueError(f"Name {name} already registered in {self.__class__.__name__}.")
    self._modules[name] = module
    return module

  def named_params(self,
                   prefix : str = "") -> Iterator[Tuple[str, Param]]:
    for name, param in self._params.items():
      yield prefix + name, param
    for name, module in self._modules.items():
      yield from module.named_params(prefix + name + ".")

  def params(self) -> List[Param]:
    return [param for _, param in self.named_params()]

  def modules(self) -> Iterator["Module"]:
    """
    This module followed by every registered descendant, depth first in registration order.
    """
    yield self
    for module in self._modules.values():
      yield from module.modules()

  def zero_grad(self) -> None:
    for param in self.params():
      param.zero_grad()

  def forward(self, *args, **kwargs):
    raise NotImplementedError(f"forward has not been implemented for {self.__class__.__name__}.")

  def backward(self, *args, **kwargs):
    raise NotImplementedError(f"backward has not been implemented for {self.__class__.__name__}.")

  def __call__(self, *args, **kwargs):
    return self.forward(*args, **kwargs)


  ################################################################
  ###################  Differentiable primitives  ################
  ################################################################

def matmul(a : Tensor,
           b : Tensor) -> Tensor:
  """
  Matrix product of an (m x p) and a (p x n) matrix. Records m*n*p multiply-adds.

  :raises ShapeError: If either operand is not a matrix or the inner dimensions differ.
  """
  if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
    raise ShapeError(f"Cannot multiply matrices of shape {a.shape} and {b.shape}.")
  record_flops(a.shape[0] * a.shape[1] * b.shape[1])
  return a @ b


def matmul_backward(a : Tensor,
                    b : Tensor,
                    d_out : Tensor) -> Tuple[Tensor, Tensor]:
  return matmul(d_out, b.T), matmul(a.T, d_out)


def row_softmax(a : Tensor) -> Tensor:
  """
  Numerically stable softmax over every row.

  :raises NumericError: If the input holds non-finite values.
  """
  if not np.all(np.isfinite(a)):
    raise NumericError("row_softmax received non-finite input.")
  record_flops(a.size)
  shifted = np.exp(a - np.max(a, axis=1, keepdims=True))
  return shifted / np.sum(shifted, axis=1, keepdims=True)


def row_softmax_backward(out : Tensor,
                         d_out : Tensor) -> Tensor:
  return out * (d_out - np.sum(d_out * out, axis=1, keepdims=True))


def relu(x : Tensor) -> Tensor:
  return np.maximum(x, 0.0)


def relu_backward(x : Tensor,
                  d_out : Tensor) -> Tensor:
  return d_out * (x > 0.0)


def lift_preactivations(weight : Param,
                        pooled : Tensor,
                        hidden_pre : Tensor,
                        floor : float) -> bool:
  """
  Moves every column of weight whose cached ReLU input pooled @ weight lies below floor along
  pooled, so that the same pooled row now gives 2 * floor there. Used to open the ReLU gates of
  pooled squeeze layers before finite-difference checks.

  :param weight: (C x inner) first layer of the gate, updated in place.
  :param pooled: (1 x C) pooled row of the last forward call.
  :param hidden_pre: (1 x inner) ReLU input of the last forward call.
  :return: True if any column moved.
  """
  low = hidden_pre[0] < floor
  norm = float(np.sum(pooled * pooled))
  if not np.any(low) or norm == 0.0:
    return False
  weight.value[:, low] += pooled[0][:, None] * ((2.0 * floor - hidden_pre[0, low]) / norm)[None, :]
  return True


def gelu(x : Tensor) -> Tensor:
  return 0.5 * x * (1.0 + erf(x / _SQRT_2))


def gelu_backward(x : Tensor,
                  d_out : Tensor) -> Tensor:
  cdf = 0.5 * (1.0 + erf(x / _SQRT_2))
  pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
  return d_out * (cdf + x * pdf)


def sigmoid(x : Tensor) -> Tensor:
  return expit(x)


def sigmoid_backward(out : Tensor,
                     d_out : Tensor) -> Tensor:
  return d_out * out * (1.0 - out)


  ################################################################
  ####################  Feature map layouts  #####################
  ################################################################

def flatten_map(feature_map : Tensor) -> Tensor:
  """
  Views a (C, H, W) feature map as the (N = H*W, d = C) matrix used by the attention algebra.
  """
  if feature_map.ndim != 3:
    raise ShapeError(f"Expected a (C, H, W) feature map, got shape {feature_map.shape}.")
  channels = feature_map.shape[0]
  return np.ascontiguousarray(feature_map.reshape(channels, -1).T)


def unflatten_map(x : Tensor,
                  height : int,
                  width : int) -> Tensor:
  return np.ascontiguousarray(x.T.reshape(x.shape[1], height, width))


def concat_channels(maps : Sequence[Tensor]) -> Tensor:
  spatial = {m.shape[1:] for m in maps}
  if len(spatial) != 1:
    raise ShapeError(f"Cannot concatenate feature maps of shapes {[m.shape for m in maps]}.")
  return np.concatenate(maps, axis=0)


def split_channels(feature_map : Tensor,
                   widths : Sequence[int]) -> List[Tensor]:
  return np.split(feature_map, np.cumsum(widths)[:-1], axis=0)
