# Licensed under the GPL. See License.txt in the project root for license information.

"""
Attention kernels on the flattened (N x d) view of a feature map.

Exact non-local attention softmax((X W_q)(X W_k)^T)(X W_v) costs O(N^2 d). Relaxing the softmax to
exp(A) / k with A = X W_qk X^T and truncating exp after the first, second or third power gives
T(A) V, which re-associates into X (W_v + W_qk G W_v + ...) with the d x d Gram matrix G = X^T X,
so the cost drops to O(N d^2). The learnable units below replace W_qk and the eigen-decomposition
of G by small trainable factors.
"""

import math
from dataclasses import dataclass, fields, is_dataclass
from enum import IntEnum
from typing import Union

import numpy as np

from .conv_ops import DepthwiseConv
from .eigen_util import symmetric_eigendecompose
from .errors import EmptyInputError, OverflowGuardError, ShapeError
from .tensor_util import (Module, Param, Tensor, flatten_map, glorot_uniform, lift_preactivations, matmul,
                          matmul_backward, relu, relu_backward, row_softmax, row_softmax_backward, unflatten_map)

EXP_OVERFLOW_LIMIT = 30.0
FACTOR_REDUCTION = 4
DWC_KERNEL_SIZE = 3


class TaylorOrder(IntEnum):
  FTEA = 1
  STEA = 2
  TTEA = 3


@dataclass
class QkvWeights:
  w_q : Tensor
  w_k : Tensor
  w_v : Tensor

  def __post_init__(self):
    shapes = {self.w_q.shape, self.w_k.shape, self.w_v.shape}
    if len(shapes) != 1 or self.w_q.ndim != 2 or self.w_q.shape[0] != self.w_q.shape[1]:
      raise ShapeError(f"Q, K and V projections must be square with equal size, got {sorted(shapes)}.")

  @property
  def d(self) -> int:
    return self.w_q.shape[0]

  @property
  def w_qk(self) -> Tensor:
    # Weight-only fold, kept out of the per-input multiply-add count.
    return self.w_q @ self.w_k.T

  @classmethod
  def random(cls,
             d : int,
             rng : np.random.Generator,
             scale : float = 1.0) -> "QkvWeights":
    return cls(*(scale * rng.standard_normal((d, d)) for _ in range(3)))


def _check_tokens(x : Tensor,
                  w : QkvWeights) -> None:
  if x.ndim != 2 or x.shape[1] != w.d:
    raise ShapeError(f"Token matrix of shape {x.shape} does not match projections of size {w.d}.")


def _check_normalizer(k,
                      tokens : int) -> np.ndarray:
  k = np.asarray(k, dtype=np.float64)
  if np.any(k <= 0.0):
    raise ValueError("Normalizer k must be positive.")
  if k.ndim == 1:
    if k.shape[0] != tokens:
      raise ShapeError(f"Per-row normalizer has {k.shape[0]} entries for {tokens} rows.")
    return k[:, None]
  return k


  ################################################################
  #####################  Reference kernels  ######################
  ################################################################

def nla_forward(x : Tensor,
                w : QkvWeights) -> Tensor:
  """
  Exact non-local attention, row_softmax((X W_q)(X W_k)^T)(X W_v).
  Records 3 N d^2 + 2 N^2 d + N^2 multiply-adds.
  """
  _check_tokens(x, w)
  q = matmul(x, w.w_q)
  key = matmul(x, w.w_k)
  v = matmul(x, w.w_v)
  return matmul(row_softmax(matmul(q, key.T)), v)


def attention_logits(x : Tensor,
                     w : QkvWeights) -> Tensor:
  _check_tokens(x, w)
  return matmul(matmul(x, w.w_q), matmul(x, w.w_k).T)


def row_normalizer(x : Tensor,
                   w : QkvWeights) -> Tensor:
  """
  Row sums of exp(Q K^T); passing them as k to exp_kernel_forward reproduces nla_forward.
  """
  return np.exp(attention_logits(x, w)).sum(axis=1)


def exp_kernel_forward(x : Tensor,
                       w : QkvWeights,
                       k : Union[float, Tensor]) -> Tensor:
  """
  Exponential kernel exp(Q K^T) V / k without max subtraction.

  :param k: Positive scalar, or one positive value per row.
  :raises OverflowGuardError: If any logit exceeds 30 in magnitude.
  """
  logits = attention_logits(x, w)
  if np.any(np.abs(logits) > EXP_OVERFLOW_LIMIT):
    raise OverflowGuardError(f"Attention logits reach {np.max(np.abs(logits)):.3g}, rescale the input below {EXP_OVERFLOW_LIMIT}.")
  k = _check_normalizer(k, x.shape[0])
  return matmul(np.exp(logits), matmul(x, w.w_v)) / k


def taylor_attention_reference(x : Tensor,
                               w : QkvWeights,
                               order : TaylorOrder,
                               k : float) -> Tensor:
  """
  Truncated expansion T(A) V / k with T(A) = I + A + A^2/2! (+ A^3/3!) built on the explicit
  N x N matrix A = X W_qk X^T. Powers are applied as A (A V) so the cost stays O(N^2 d).
  """
  _check_tokens(x, w)
  order = TaylorOrder(order)
  k = _check_normalizer(k, x.shape[0])
  a = matmul(matmul(x, w.w_qk), x.T)
  term = matmul(x, w.w_v)
  out = term.copy()
  for j in range(1, order + 1):
    term = matmul(a, term) / j
    out += term
  return out / k


def taylor_attention_linear(x : Tensor,
                            w : QkvWeights,
                            order : TaylorOrder,
                            k : float) -> Tensor:
  """
  Same truncation as taylor_attention_reference, re-associated so that only (N x d)(d x d) and
  (d x d)(d x d) products occur: (X W_v + X (M W_v + M^2 W_v / 2! + ...)) / k with M = W_qk X^T X.
  Records 3 N d^2 + (order + 1) d^3 multiply-adds.
  """
  _check_tokens(x, w)
  order = TaylorOrder(order)
  k = _check_normalizer(k, x.shape[0])
  value = matmul(x, w.w_v)
  mixer = matmul(w.w_qk, matmul(x.T, x))
  term = w.w_v
  higher = np.zeros_like(term)
  for j in range(1, order + 1):
    term = matmul(mixer, term) / j
    higher += term
  return (value + matmul(x, higher)) / k


def diagonalized_form(x : Tensor,
                      w : QkvWeights,
                      k : float,
                      second_order_scale : float = 1.0) -> Tensor:
  """
  Second-order expansion with the Gram matrix replaced by its eigendecomposition Z B Z^T:
  (X W_v + X W_qk Z B Z^T W_v + X W_qk Z B Z^T W_qk Z B Z^T W_v) / k.
  The second-order term carries no 1/2! here; second_order_scale=0.5 aligns it with the truncation.
  """
  _check_tokens(x, w)
  z, b = symmetric_eigendecompose(matmul(x.T, x))
  zbz = matmul(z * b[None, :], z.T)
  w_qk = w.w_qk
  first = matmul(w_qk, matmul(zbz, w.w_v))
  second = matmul(w_qk, matmul(zbz, first))
  return matmul(x, w.w_v + first + second_order_scale * second) / _check_normalizer(k, x.shape[0])


  ################################################################
  ######################  Learnable units  #######################
  ################################################################

class EigenExtractor(Module):
  """
  Predicts a length-d diagonal from the mean token: relu(mean(X) m1) m2, no biases.
  """
  def __init__(self,
               d : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    inner = math.ceil(d / FACTOR_REDUCTION)
    self.m1 = self.add_param("m1", glorot_uniform(rng, (d, inner), d, inner))
    self.m2 = self.add_param("m2", glorot_uniform(rng, (inner, d), inner, d))
    self._cache = None

  def forward(self,
              x : Tensor) -> Tensor:
    pooled = x.mean(axis=0, keepdims=True)
    hidden_pre = matmul(pooled, self.m1.value)
    hidden = relu(hidden_pre)
    self._cache = (x.shape[0], pooled, hidden_pre, hidden)
    return matmul(hidden, self.m2.value)[0]

  def backward(self,
               d_out : Tensor) -> Tensor:
    tokens, pooled, hidden_pre, hidden = self._cache
    d_hidden, d_m2 = matmul_backward(hidden, self.m2.value, d_out[None, :])
    d_pooled, d_m1 = matmul_backward(pooled, self.m1.value, relu_backward(hidden_pre, d_hidden))
    self.m1.accumulate(d_m1)
    self.m2.accumulate(d_m2)
    return np.repeat(d_pooled / tokens, tokens, axis=0)

  def open_gates(self,
                 floor : float) -> bool:
    if self._cache is None:
      return False
    _, pooled, hidden_pre, _ = self._cache
    return lift_preactivations(self.m1, pooled, hidden_pre, floor)


def extract_eigens(x : Tensor,
                   e : EigenExtractor) -> Tensor:
  return e.forward(x)


class FactorizedBlock(Module):
  """
  Linear map d -> ceil(d / 4) -> d, applied to token rows.
  """
  def __init__(self,
               d : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    inner = math.ceil(d / FACTOR_REDUCTION)
    self.down = self.add_param("down", glorot_uniform(rng, (d, inner), d, inner))
    self.up = self.add_param("up", glorot_uniform(rng, (inner, d), inner, d))
    self._cache = None

  def forward(self,
              x : Tensor) -> Tensor:
    reduced = matmul(x, self.down.value)
    self._cache = (x, reduced)
    return matmul(reduced, self.up.value)

  def backward(self,
               d_out : Tensor) -> Tensor:
    x, reduced = self._cache
    d_reduced, d_up = matmul_backward(reduced, self.up.value, d_out)
    dx, d_down = matmul_backward(x, self.down.value, d_reduced)
    self.down.accumulate(d_down)
    self.up.accumulate(d_up)
    return dx


class SteaUnit(Module):
  """
  Learnable Taylor attention on a (d, H, W) feature map.

  With X the flattened map and B_i = diag(eig_i(X)) the unit returns
    order 1: (V' + X W1 B1 W3) / k
    order 2: (V' + X W1 B1 W3 + X W1 B1 W2 B2 W3) / k
    order 3: order 2 + X W1 B1 W2 B2 W4 B3 W3 / k
  where V' = DWC(X W_v) when use_dwc is set and X W_v otherwise. Every W_i is a FactorizedBlock and
  the products are evaluated from the token side so the cost is linear in N.

  :param d: Channel width.
  :param tokens: Number of positions the normaliser k is initialised to.
  :param order: Taylor order, 1 to 3.
  :param use_dwc: Apply the 3x3 depthwise compensation to the value path.
  """
  def __init__(self,
               d : int,
               tokens : int = 1,
               order : TaylorOrder = TaylorOrder.STEA,
               use_dwc : bool = True,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.d = d
    self.order = TaylorOrder(order)
    self.w_v = self.add_param("w_v", glorot_uniform(rng, (d, d), d, d))
    self.log_k = self.add_param("log_k", [math.log(max(1, tokens))])
    self.dwc = self.add_module("dwc", DepthwiseConv(d, DWC_KERNEL_SIZE, rng=rng)) if use_dwc else None
    self.w1 = self.add_module("w1", FactorizedBlock(d, rng))
    self.w2 = self.add_module("w2", FactorizedBlock(d, rng)) if self.order >= TaylorOrder.STEA else None
    self.w4 = self.add_module("w4", FactorizedBlock(d, rng)) if self.order >= TaylorOrder.TTEA else None
    self.w3 = self.add_module("w3", FactorizedBlock(d, rng))
    self.eig1 = self.add_module("eig1", EigenExtractor(d, rng))
    self.eig2 = self.add_module("eig2", EigenExtractor(d, rng)) if self.order >= TaylorOrder.STEA else None
    self.eig3 = self.add_module("eig3", EigenExtractor(d, rng)) if self.order >= TaylorOrder.TTEA else None
    self._cache = None

  @property
  def k(self) -> float:
    return float(np.exp(self.log_k.value[0]))

  def forward(self,
              feature_map : Tensor) -> Tensor:
    if feature_map.size == 0:
      raise EmptyInputError(f"STEA received an empty feature map of shape {feature_map.shape}.")
    if feature_map.ndim != 3 or feature_map.shape[0] != self.d:
      raise ShapeError(f"STEA of width {self.d} cannot take feature map of shape {feature_map.shape}.")
    _, height, width = feature_map.shape
    x = flatten_map(feature_map)

    value = matmul(x, self.w_v.value)
    if self.dwc is not None:
      value = flatten_map(self.dwc(unflatten_map(value, height, width)))

    b1 = self.eig1(x)
    p1 = self.w1(x)
    summed = p1 * b1
    w2_out = w4_out = b2 = b3 = None
    if self.w2 is not None:
      b2 = self.eig2(x)
      w2_out = self.w2(p1 * b1)
      q2 = w2_out * b2
      summed = summed + q2
      if self.w4 is not None:
        b3 = self.eig3(x)
        w4_out = self.w4(q2)
        summed = summed + w4_out * b3

    out = (value + self.w3(summed)) / self.k
    self._cache = (x, height, width, p1, b1, w2_out, b2, w4_out, b3, out)
    return unflatten_map(out, height, width)

  def backward(self,
               d_out_map : Tensor) -> Tensor:
    x, height, width, p1, b1, w2_out, b2, w4_out, b3, out = self._cache
    d_out = flatten_map(d_out_map)
    self.log_k.accumulate(np.array([-np.sum(d_out * out)]))
    d_sum = d_out / self.k

    d_value = d_sum
    if self.dwc is not None:
      d_value = flatten_map(self.dwc.backward(unflatten_map(d_sum, height, width)))
    dx, d_wv = matmul_backward(x, self.w_v.value, d_value)
    self.w_v.accumulate(d_wv)

    d_summed = self.w3.backward(d_sum)
    d_p1b = d_summed
    if self.w2 is not None:
      d_q2 = d_summed
      if self.w4 is not None:
        dx += self.eig3.backward(np.sum(d_summed * w4_out, axis=0))
        d_q2 = d_q2 + self.w4.backward(d_summed * b3)
      dx += self.eig2.backward(np.sum(d_q2 * w2_out, axis=0))
      d_p1b = d_p1b + self.w2.backward(d_q2 * b2)
    dx += self.eig1.backward(np.sum(d_p1b * p1, axis=0))
    dx += self.w1.backward(d_p1b * b1)
    return unflatten_map(dx, height, width)


def stea_forward(x : Tensor,
                 w : SteaUnit) -> Tensor:
  return w.forward(x)


class NlaUnit(Module):
  """
  Learnable exact non-local attention on a (d, H, W) feature map, the quadratic-cost global branch.
  """
  def __init__(self,
               d : int,
               rng : np.random.Generator = None):
    super().__init__()
    rng = rng if rng is not None else np.random.default_rng(0)
    self.d = d
    self.w_q = self.add_param("w_q", glorot_uniform(rng, (d, d), d, d))
    self.w_k = self.add_param("w_k", glorot_uniform(rng, (d, d), d, d))
    self.w_v = self.add_param("w_v", glorot_uniform(rng, (d, d), d, d))
    self._cache = None

  def forward(self,
              feature_map : Tensor) -> Tensor:
    if feature_map.size == 0:
      raise EmptyInputError(f"NLA received an empty feature map of shape {feature_map.shape}.")
    _, height, width = feature_map.shape
    x = flatten_map(feature_map)
    q = matmul(x, self.w_q.value)
    key = matmul(x, self.w_k.value)
    v = matmul(x, self.w_v.value)
    attn = row_softmax(matmul(q, key.T))
    self._cache = (x, height, width, q, key, v, attn)
    return unflatten_map(matmul(attn, v), height, width)

  def backward(self,
               d_out_map : Tensor) -> Tensor:
    x, height, width, q, key, v, attn = self._cache
    d_out = flatten_map(d_out_map)
    d_attn, d_v = matmul_backward(attn, v, d_out)
    d_logits = row_softmax_backward(attn, d_attn)
    d_q, d_key_t = matmul_backward(q, key.T, d_logits)
    dx = np.zeros_like(x)
    for param, d_proj in ((self.w_q, d_q), (self.w_k, d_key_t.T), (self.w_v, d_v)):
      d_x, d_w = matmul_backward(x, param.value, d_proj)
      param.accumulate(d_w)
      dx += d_x
    return unflatten_map(dx, height, width)


def count_params(w) -> int:
  """
  Total number of scalar parameters held by a module, parameter, array, dataclass or container.
  """
  if isinstance(w, Module):
    return sum(param.size for param in w.params())
  if isinstance(w, Param):
    return w.size
  if isinstance(w, np.ndarray):
    return w.size
  if is_dataclass(w) and not isinstance(w, type):
    return sum(count_params(getattr(w, f.name)) for f in fields(w))
  if isinstance(w, dict):
    return sum(count_params(v) for v in w.values())
  if isinstance(w, (list, tuple)):
    return sum(count_params(v) for v in w)
  return 0
