# Licensed under the GPL. See License.txt in the project root for license information.

import numpy as np
import pytest

from taylorsr.attention import SteaUnit
from taylorsr.errors import DeterminismError
from taylorsr.grad_check import ProjectedObjective, grad_check
from taylorsr.tensor_util import Param, matmul, matmul_backward, row_softmax, row_softmax_backward


def test_quadratic():
  theta = Param([1.0, 2.0, 3.0], "theta")

  def f(backward):
    if backward:
      theta.accumulate(2.0 * theta.value)
    return float(np.sum(theta.value ** 2))

  assert grad_check(f, [theta]) < 1e-9
  theta.zero_grad()
  f(True)
  np.testing.assert_allclose(theta.grad, [2.0, 4.0, 6.0])


def test_softmax_of_product(rng):
  w = Param(rng.standard_normal((4, 4)), "w")
  x = rng.standard_normal((4, 4))

  def f(backward):
    logits = matmul(w.value, x)
    out = row_softmax(logits)
    if backward:
      d_logits = row_softmax_backward(out, np.ones_like(out) * np.arange(4))
      w.accumulate(matmul_backward(w.value, x, d_logits)[0])
    return float(np.sum(out * np.arange(4)))

  assert grad_check(f, [w]) < 1e-5


def test_wrong_gradient_is_reported():
  theta = Param([1.0, -2.0], "theta")

  def f(backward):
    if backward:
      theta.accumulate(3.0 * theta.value)
    return float(np.sum(theta.value ** 2))

  assert grad_check(f, [theta]) > 0.4


def test_non_deterministic_objective(rng):
  theta = Param([1.0], "theta")
  with pytest.raises(DeterminismError):
    grad_check(lambda backward: float(rng.random()), [theta])


def test_epsilon_must_be_positive():
  with pytest.raises(ValueError):
    grad_check(lambda backward: 0.0, [], epsilon=0.0)


def test_full_stea_unit(rng):
  unit = SteaUnit(4, 16, rng=rng)
  x = Param(rng.uniform(-1, 1, (4, 4, 4)), "x")

  def backward(d_out):
    x.accumulate(unit.backward(d_out))

  objective = ProjectedObjective(lambda: unit.forward(x.value), backward, seed=3)
  assert grad_check(objective, [x] + unit.params()) < 1e-4


def test_coordinate_sampling_is_seeded(rng):
  w = Param(rng.standard_normal(50), "w")

  def f(backward):
    if backward:
      w.accumulate(np.cos(w.value))
    return float(np.sum(np.sin(w.value)))

  assert grad_check(f, [w], coords=5, seed=1) == grad_check(f, [w], coords=5, seed=1)


def test_coordinate_count_must_be_positive(rng):
  w = Param(rng.standard_normal(4), "w")

  def f(backward):
    if backward:
      w.accumulate(2 * w.value)
    return float(np.sum(w.value ** 2))

  with pytest.raises(ValueError):
    grad_check(f, [w], coords=0)
