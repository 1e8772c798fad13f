# Licensed under the GPL. See License.txt in the project root for license information.

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.linalg import expm

from taylorsr.attention import (EigenExtractor, NlaUnit, QkvWeights, SteaUnit, TaylorOrder, attention_logits,
                                count_params, diagonalized_form, exp_kernel_forward, extract_eigens, nla_forward,
                                row_normalizer, stea_forward, taylor_attention_linear, taylor_attention_reference)
from taylorsr.errors import EmptyInputError, OverflowGuardError, ShapeError
from taylorsr.flop_counter import counting
from taylorsr.tensor_util import row_softmax


def _relative(a, b):
  return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def _instance(rng, n, d, x_scale=0.3):
  return x_scale * rng.uniform(-1.0, 1.0, (n, d)), QkvWeights.random(d, rng, scale=1.0 / math.sqrt(d))


def _small_logits(rng, n, d, bound=0.1):
  """Instance rescaled so that the max row sum of |X W_qk X^T| is at most bound."""
  x, w = _instance(rng, n, d, 1.0)
  a = x @ w.w_qk @ x.T
  x *= math.sqrt(bound / np.abs(a).sum(axis=1).max())
  return x, w


  ################################################################
  #####################  Reference kernels  ######################
  ################################################################

def test_nla_trivial_cases(rng):
  w = QkvWeights.random(4, rng)
  assert_allclose(nla_forward(np.zeros((5, 4)), w), 0.0)
  x = rng.standard_normal((1, 4))
  assert_allclose(nla_forward(x, w), x @ w.w_v, atol=1e-14)


def test_nla_rows_are_convex_combinations(rng):
  x = rng.standard_normal((16, 4))
  eye = np.eye(4)
  out = nla_forward(x, QkvWeights(eye, eye.copy(), eye.copy()))
  assert np.all(out >= x.min(axis=0) - 1e-12)
  assert np.all(out <= x.max(axis=0) + 1e-12)


def test_nla_flop_audit(rng):
  n, d = 256, 16
  x, w = _instance(rng, n, d)
  with counting() as counter:
    nla_forward(x, w)
  assert counter.multiply_adds == 3 * n * d * d + 2 * n * n * d + n * n


def test_shape_mismatch(rng):
  with pytest.raises(ShapeError):
    nla_forward(np.ones((4, 3)), QkvWeights.random(4, rng))
  with pytest.raises(ShapeError):
    QkvWeights(np.eye(3), np.eye(3), np.eye(4))


def test_exp_kernel_with_row_normalizer_is_nla(rng):
  x, w = _instance(rng, 24, 8, 1.0)
  assert_allclose(exp_kernel_forward(x, w, row_normalizer(x, w)), nla_forward(x, w), atol=1e-12, rtol=0)


def test_exp_kernel_scalar_normalizer_deviation(rng):
  x, w = _instance(rng, 20, 4, 0.1)
  sums = row_normalizer(x, w)
  k = sums.mean()
  exact = nla_forward(x, w)
  spread = np.max(np.abs(sums / k - 1.0))
  deviation = np.linalg.norm(exp_kernel_forward(x, w, k) - exact, axis=1)
  assert np.all(deviation <= spread * np.linalg.norm(exact, axis=1) + 1e-14)


def test_exp_kernel_guards(rng):
  w = QkvWeights.random(4, rng)
  assert_allclose(exp_kernel_forward(np.zeros((3, 4)), w, 2.0), 0.0)
  with pytest.raises(OverflowGuardError):
    exp_kernel_forward(np.full((3, 4), 10.0), QkvWeights(np.eye(4), np.eye(4), np.eye(4)), 1.0)
  with pytest.raises(ValueError):
    exp_kernel_forward(np.zeros((3, 4)), w, 0.0)
  with pytest.raises(ShapeError):
    exp_kernel_forward(np.zeros((3, 4)), w, np.ones(2))


def test_reference_truncation_terms(rng):
  x, w = _instance(rng, 6, 3)
  zero = QkvWeights(np.zeros((3, 3)), np.zeros((3, 3)), w.w_v)
  assert_allclose(taylor_attention_reference(x, zero, TaylorOrder.FTEA, 4.0), x @ w.w_v / 4.0)
  a = x @ w.w_qk @ x.T
  v = x @ w.w_v
  first = taylor_attention_reference(x, w, TaylorOrder.FTEA, 2.0)
  second = taylor_attention_reference(x, w, TaylorOrder.STEA, 2.0)
  assert_allclose(second, first + a @ a @ v / 2.0 / 2.0, atol=1e-14)


def test_truncation_error_shrinks_with_order(rng):
  x, w = _small_logits(rng, 12, 4)
  target = expm(x @ w.w_qk @ x.T) @ x @ w.w_v / 3.0
  errors = [np.linalg.norm(target - taylor_attention_reference(x, w, order, 3.0)) for order in TaylorOrder]
  assert errors[2] <= errors[1] <= errors[0]


def test_taylor_remainder_bound(rng):
  for _ in range(100):
    x, w = _small_logits(rng, 10, 4)
    a = x @ w.w_qk @ x.T
    norm = np.abs(a).sum(axis=1).max()
    remainder = expm(a) - (np.eye(10) + a + a @ a / 2.0)
    assert np.max(np.abs(remainder)) <= norm ** 3 / 6.0 * math.exp(norm)


  ################################################################
  ######################  Linear Taylor form  ####################
  ################################################################

@pytest.mark.parametrize("order", list(TaylorOrder))
@pytest.mark.parametrize("n", [1, 2, 8, 32, 64])
@pytest.mark.parametrize("d", [1, 4, 8])
def test_linear_form_matches_reference(order, n, d):
  for seed in range(20):
    rng = np.random.default_rng(seed)
    x, w = _instance(rng, n, d)
    k = float(n)
    assert _relative(taylor_attention_linear(x, w, order, k), taylor_attention_reference(x, w, order, k)) <= 1e-10


def test_linear_form_zero_input(rng):
  w = QkvWeights.random(4, rng)
  assert_allclose(taylor_attention_linear(np.zeros((7, 4)), w, TaylorOrder.TTEA, 3.0), 0.0)


def test_linear_form_flops(rng):
  n, d = 1024, 16
  x, w = _instance(rng, n, d, 0.1)
  with counting() as linear:
    taylor_attention_linear(x, w, TaylorOrder.STEA, float(n))
  with counting() as reference:
    taylor_attention_reference(x, w, TaylorOrder.STEA, float(n))
  assert linear.multiply_adds == 3 * n * d * d + 3 * d ** 3
  assert reference.multiply_adds == 2 * n * d * d + 3 * n * n * d
  assert reference.multiply_adds >= 50 * linear.multiply_adds


@pytest.mark.parametrize("order", list(TaylorOrder))
def test_linear_form_flops_per_order(rng, order):
  n, d = 64, 8
  x, w = _instance(rng, n, d)
  with counting() as counter:
    taylor_attention_linear(x, w, order, float(n))
  assert counter.multiply_adds == 3 * n * d * d + (order + 1) * d ** 3


def test_diagonalized_form_matches_linear(rng):
  x, w = _instance(rng, 16, 8)
  linear = taylor_attention_linear(x, w, TaylorOrder.STEA, 5.0)
  assert _relative(diagonalized_form(x, w, 5.0, second_order_scale=0.5), linear) <= 1e-8


def test_diagonalized_form_orthonormal_columns(rng):
  x, _ = np.linalg.qr(rng.standard_normal((16, 4)))
  w = QkvWeights.random(4, rng)
  expected = (x @ w.w_v + x @ w.w_qk @ w.w_v + x @ w.w_qk @ w.w_qk @ w.w_v) / 2.0
  assert_allclose(diagonalized_form(x, w, 2.0), expected, atol=1e-10)


def test_diagonalized_form_scalar_channel(rng):
  x = rng.standard_normal((9, 1))
  w = QkvWeights(np.array([[0.7]]), np.array([[0.4]]), np.array([[1.5]]))
  g = float(x[:, 0] @ x[:, 0])
  qk = 0.7 * 0.4
  expected = x * 1.5 * (1.0 + qk * g + (qk * g) ** 2) / 3.0
  assert_allclose(diagonalized_form(x, w, 3.0), expected, rtol=1e-10)


def test_rank_of_logits_and_softmax():
  rng = np.random.default_rng(7)
  x, w = _instance(rng, 32, 8, 1.0)
  logits = attention_logits(x, w)
  for matrix, check in ((logits, lambda r: r <= 8), (row_softmax(logits), lambda r: r >= 9)):
    sv = np.linalg.svd(matrix, compute_uv=False)
    assert check(int(np.sum(sv > 1e-10 * sv[0])))


  ################################################################
  ######################  Learnable units  #######################
  ################################################################

def test_extract_eigens_degenerate_inputs(rng):
  e = EigenExtractor(8, rng)
  assert_allclose(extract_eigens(np.zeros((5, 8)), e), 0.0)
  row = rng.standard_normal((1, 8))
  expected = np.maximum(row @ e.m1.value, 0.0) @ e.m2.value
  assert_allclose(extract_eigens(row, e), expected[0])
  assert_allclose(extract_eigens(np.repeat(row, 4, axis=0), e), expected[0])


def test_stea_collapses_to_value_path(rng):
  unit = SteaUnit(4, 16, TaylorOrder.STEA, True, rng)
  for block in (unit.w1, unit.w2, unit.w3):
    block.down.value[...] = 0.0
    block.up.value[...] = 0.0
  unit.dwc.weight.value[...] = 0.0
  unit.dwc.weight.value[:, 1, 1] = 1.0
  feature_map = rng.standard_normal((4, 4, 4))
  x = feature_map.reshape(4, -1).T
  expected = (x @ unit.w_v.value / 16.0).T.reshape(4, 4, 4)
  assert unit.k == pytest.approx(16.0)
  assert_allclose(stea_forward(feature_map, unit), expected, atol=1e-14)


@pytest.mark.parametrize("shape", [(8, 4, 4), (16, 7, 5)])
@pytest.mark.parametrize("order", list(TaylorOrder))
def test_stea_shape_contract(rng, shape, order):
  unit = SteaUnit(shape[0], shape[1] * shape[2], order, True, rng)
  assert unit.forward(rng.standard_normal(shape)).shape == shape


def test_stea_input_errors(rng):
  unit = SteaUnit(4)
  with pytest.raises(EmptyInputError):
    unit.forward(np.zeros((4, 0, 3)))
  with pytest.raises(ShapeError):
    unit.forward(np.zeros((3, 2, 2)))
  with pytest.raises(EmptyInputError):
    NlaUnit(4).forward(np.zeros((4, 2, 0)))


def test_stea_flops_are_linear_in_tokens(rng):
  counts = []
  for side in (8, 16):
    unit = SteaUnit(8, side * side, rng=rng)
    with counting() as counter:
      unit.forward(rng.standard_normal((8, side, side)))
    counts.append(counter.multiply_adds)
  assert counts[1] == pytest.approx(4 * counts[0], rel=0.02)


def test_count_params():
  rng = np.random.default_rng(0)
  assert count_params(QkvWeights.random(8, rng)) == 192
  assert count_params([np.ones(3), {"a" : np.ones((2, 2))}]) == 7
  units = [SteaUnit(16, 64, TaylorOrder.FTEA, False),
           SteaUnit(16, 64, TaylorOrder.FTEA, True),
           SteaUnit(16, 64, TaylorOrder.STEA, True),
           SteaUnit(16, 64, TaylorOrder.TTEA, True)]
  counts = [count_params(unit) for unit in units]
  assert counts == sorted(set(counts))
  assert counts[0] == 256 + 1 + 3 * 128
