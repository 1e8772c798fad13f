# Licensed under the GPL. See License.txt in the project root for license information.

from typing import Tuple

import numpy as np

from .errors import ConvergenceError, NumericError, SymmetryError
from .tensor_util import DTYPE, Tensor

DEFAULT_SYMMETRY_TOLERANCE = 1e-9
DEFAULT_MAX_SWEEPS = 100


def _off_diagonal_norm(a : Tensor) -> float:
  off = a - np.diag(np.diag(a))
  return float(np.sqrt(np.sum(off * off)))


def _rotate(a : Tensor,
            z : Tensor,
            p : int,
            q : int) -> None:
  """
  Applies one Jacobi rotation annihilating a[p, q] and a[q, p] in place.
  """
  a_pq = a[p, q]
  if a_pq == 0.0:
    return
  theta = (a[q, q] - a[p, p]) / (2.0 * a_pq)
  t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0)) if theta != 0.0 else 1.0
  c = 1.0 / np.sqrt(t * t + 1.0)
  s = t * c

  col_p = a[:, p].copy()
  col_q = a[:, q].copy()
  a[:, p] = c * col_p - s * col_q
  a[:, q] = s * col_p + c * col_q
  row_p = a[p, :].copy()
  row_q = a[q, :].copy()
  a[p, :] = c * row_p - s * row_q
  a[q, :] = s * row_p + c * row_q
  a[p, q] = 0.0
  a[q, p] = 0.0

  z_p = z[:, p].copy()
  z_q = z[:, q].copy()
  z[:, p] = c * z_p - s * z_q
  z[:, q] = s * z_p + c * z_q


def symmetric_eigendecompose(s : Tensor,
                             max_sweeps : int = DEFAULT_MAX_SWEEPS,
                             symmetry_tolerance : float = DEFAULT_SYMMETRY_TOLERANCE) -> Tuple[Tensor, Tensor]:
  """
  Diagonalises a real symmetric matrix with cyclic Jacobi rotations so that s = Z diag(b) Z^T.

  :param s: Square symmetric matrix.
  :param max_sweeps: Number of full off-diagonal sweeps allowed before giving up.
  :param symmetry_tolerance: Largest accepted entry of |s - s^T|.
  :raises NumericError: If s holds a NaN or infinite entry.
  :raises SymmetryError: If s is not square or not symmetric within tolerance.
  :raises ConvergenceError: If the off-diagonal mass has not vanished after max_sweeps sweeps.
  :return: (Z, b) with orthogonal Z columns as eigenvectors and b sorted in descending order.
  """
  if s.ndim != 2 or s.shape[0] != s.shape[1]:
    raise SymmetryError(f"Eigendecomposition needs a square matrix, got shape {s.shape}.")
  if not np.all(np.isfinite(s)):
    raise NumericError("Eigendecomposition input holds non-finite entries.")
  asymmetry = np.max(np.abs(s - s.T)) if s.size else 0.0
  if asymmetry > symmetry_tolerance:
    raise SymmetryError(f"Matrix is not symmetric, max |S - S^T| = {asymmetry:.3e}.")

  d = s.shape[0]
  a = np.array(0.5 * (s + s.T), dtype=DTYPE)
  z = np.eye(d, dtype=DTYPE)
  threshold = 1e-15 * np.linalg.norm(a)

  sweeps = 0
  while _off_diagonal_norm(a) > threshold:
    if sweeps >= max_sweeps:
      raise ConvergenceError(f"Jacobi eigensolver did not converge within {max_sweeps} sweeps.")
    for p in range(d - 1):
      for q in range(p + 1, d):
        _rotate(a, z, p, q)
    sweeps += 1

  b = np.diag(a).copy()
  # stable sort keeps rotation order between equal eigenvalues
  order = np.argsort(-b, kind="stable")
  return np.ascontiguousarray(z[:, order]), b[order]
