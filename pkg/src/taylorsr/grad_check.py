# Licensed under the GPL. See License.txt in the project root for license information.

"""
Central finite-difference verification of analytic gradients.

An objective is any callable ``f(backward : bool) -> float``. When ``backward`` is True the
objective must also accumulate d f / d p into ``p.grad`` of every checked parameter.
"""

import logging
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import DeterminismError
from .tensor_util import Param, Tensor

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-6
DEFAULT_TOLERANCE = 1e-4

Objective = Callable[[bool], float]


def _coordinates(size : int,
                 coords : Optional[int],
                 rng : np.random.Generator) -> np.ndarray:
  if coords is not None and coords < 1:
    raise ValueError(f"Need at least one coordinate per parameter, got {coords}.")
  if coords is None or coords >= size:
    return np.arange(size)
  return np.sort(rng.choice(size, size=coords, replace=False))


def grad_check(f : Objective,
               params : Sequence[Param],
               epsilon : float = DEFAULT_EPSILON,
               coords : int = None,
               seed : int = 0) -> float:
  """
  Compares the analytic gradient of f with central differences (f(p+e) - f(p-e)) / 2e.

  :param f: Deterministic scalar objective, see module docstring.
  :param params: Parameters whose every (or a sampled subset of) coordinate is checked.
  :param epsilon: Finite difference step, must be positive.
  :param coords: When set, at most this many randomly chosen coordinates are checked per parameter.
  :param seed: Seed used to sample coordinates.
  :raises ValueError: If epsilon is not positive.
  :raises DeterminismError: If repeated evaluations at the same point disagree.
  :return: Max over checked coordinates of |analytic - numeric| / max(1, |numeric|).
  """
  if epsilon <= 0.0:
    raise ValueError(f"Finite difference step must be positive, got {epsilon}.")
  rng = np.random.default_rng(seed)

  for param in params:
    param.zero_grad()
  baseline = f(True)
  analytic = [param.grad.copy() for param in params]
  for recheck in (f(False), f(False)):
    if recheck != baseline:
      raise DeterminismError(f"Objective is not deterministic: {baseline!r} then {recheck!r}.")

  worst, worst_at = 0.0, None
  for param, grad in zip(params, analytic):
    flat = param.value.reshape(-1)
    if not np.shares_memory(flat, param.value):
      raise ValueError(f"Parameter {param.name} is not stored contiguously.")
    flat_grad = grad.reshape(-1)
    for i in _coordinates(flat.size, coords, rng):
      original = flat[i]
      flat[i] = original + epsilon
      f_plus = f(False)
      flat[i] = original - epsilon
      f_minus = f(False)
      flat[i] = original
      numeric = (f_plus - f_minus) / (2.0 * epsilon)
      error = abs(flat_grad[i] - numeric) / max(1.0, abs(numeric))
      if error > worst:
        worst, worst_at = error, (param.name, int(i), float(flat_grad[i]), float(numeric))

  if worst_at is not None:
    logger.debug("Worst gradient mismatch %.3e at %s[%d]: analytic %.6e, numeric %.6e",
                 worst, *worst_at)
  return worst


class ProjectedObjective:
  """
  Reduces a block to a scalar through a fixed random projection, loss = sum_i <out_i, R_i>.
  The projection makes every output coordinate contribute with a distinct weight.

  :param forward: Callable evaluating the block, returning one tensor or a tuple of tensors.
  :param backward: Callable receiving d loss / d out (same structure as the output) and
      accumulating parameter gradients. Inputs checked as parameters are the callable's business.
  :param seed: Seed of the projection.
  """
  def __init__(self,
               forward : Callable[[], Union[Tensor, Tuple[Tensor, ...]]],
               backward : Callable[[Union[Tensor, Tuple[Tensor, ...]]], None],
               seed : int = 0):
    self._forward = forward
    self._backward = backward
    self._rng = np.random.default_rng(seed)
    self._projections : Optional[List[Tensor]] = None

  def __call__(self,
               backward : bool = False) -> float:
    out = self._forward()
    is_tuple = isinstance(out, tuple)
    outputs = out if is_tuple else (out,)
    if self._projections is None:
      self._projections = [self._rng.standard_normal(o.shape) for o in outputs]
    loss = float(sum(np.sum(o * r) for o, r in zip(outputs, self._projections)))
    if backward:
      self._backward(tuple(self._projections) if is_tuple else self._projections[0])
    return loss
