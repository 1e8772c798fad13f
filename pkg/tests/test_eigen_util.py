# Licensed under the GPL. See License.txt in the project root for license information.

import numpy as np
import pytest
from numpy.testing import assert_allclose

from taylorsr.eigen_util import symmetric_eigendecompose
from taylorsr.errors import ConvergenceError, NumericError, SymmetryError


def _reconstruct(z, b):
  return z @ np.diag(b) @ z.T


def test_diagonal_input():
  z, b = symmetric_eigendecompose(np.diag([3.0, 1.0]))
  assert_allclose(b, [3.0, 1.0])
  assert_allclose(np.abs(z), np.eye(2))


def test_textbook_two_by_two():
  z, b = symmetric_eigendecompose(np.array([[2.0, 1.0], [1.0, 2.0]]))
  assert_allclose(b, [3.0, 1.0], atol=1e-14)
  assert_allclose(np.abs(z[:, 0]), [1 / np.sqrt(2)] * 2, atol=1e-14)
  assert_allclose(z[0, 1] * z[1, 1], -0.5, atol=1e-14)


@pytest.mark.parametrize("seed", range(5))
def test_gram_matrix_reconstruction(seed):
  x = np.random.default_rng(seed).standard_normal((16, 8))
  s = x.T @ x
  z, b = symmetric_eigendecompose(s)
  assert np.linalg.norm(z.T @ z - np.eye(8)) <= 1e-8 * 8
  assert np.linalg.norm(_reconstruct(z, b) - s) <= 1e-10 * np.linalg.norm(s)
  assert np.all(np.diff(b) <= 0.0)


def test_random_symmetric_reconstruction(rng):
  a = rng.standard_normal((12, 12))
  s = a + a.T
  z, b = symmetric_eigendecompose(s)
  assert np.linalg.norm(_reconstruct(z, b) - s) <= 1e-8 * np.linalg.norm(s)
  assert_allclose(b, np.sort(np.linalg.eigvalsh(s))[::-1], atol=1e-10)


def test_asymmetric_input_rejected():
  with pytest.raises(SymmetryError):
    symmetric_eigendecompose(np.array([[1.0, 2.0], [0.0, 1.0]]))
  with pytest.raises(SymmetryError):
    symmetric_eigendecompose(np.ones((2, 3)))


def test_sweep_limit():
  with pytest.raises(ConvergenceError):
    symmetric_eigendecompose(np.array([[2.0, 1.0, 0.5], [1.0, 2.0, 0.3], [0.5, 0.3, 1.0]]), max_sweeps=0)


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_input_rejected(bad):
  s = np.eye(3)
  s[0, 1] = s[1, 0] = bad
  with pytest.raises(NumericError):
    symmetric_eigendecompose(s)
