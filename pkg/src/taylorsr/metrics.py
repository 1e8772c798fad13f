# Licensed under the GPL. See License.txt in the project root for license information.

import numpy as np
from skimage.metrics import structural_similarity

from .errors import ShapeError, SizeError
from .tensor_util import Tensor

PSNR_IDENTICAL = float("inf")
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
BT601_LUMA = np.array([0.299, 0.587, 0.114])


def _check_pair(a : Tensor,
                b : Tensor) -> None:
  if a.shape != b.shape:
    raise ShapeError(f"Cannot compare images of shapes {a.shape} and {b.shape}.")


def psnr(a : Tensor,
         b : Tensor) -> float:
  """
  Peak signal-to-noise ratio in dB for data on the [0, 1] scale, over all channels and pixels jointly.

  :return: 10 log10(1 / MSE), or PSNR_IDENTICAL when the images are equal.
  """
  _check_pair(a, b)
  mse = float(np.mean((a - b) ** 2))
  if mse == 0.0:
    return PSNR_IDENTICAL
  return 10.0 * np.log10(1.0 / mse)


def luma(image : Tensor) -> Tensor:
  if image.ndim != 3 or image.shape[0] != 3:
    raise ShapeError(f"Expected a (3, H, W) image, got shape {image.shape}.")
  return np.tensordot(BT601_LUMA, image, axes=1)


def ssim(a : Tensor,
         b : Tensor) -> float:
  """
  Mean structural similarity of the BT.601 luma channels, 11x11 Gaussian window with sigma 1.5,
  C1 = 0.01^2 and C2 = 0.03^2, averaged over positions the window fully covers.

  :raises SizeError: If the image is smaller than the window.
  """
  _check_pair(a, b)
  if min(a.shape[-2:]) < SSIM_WINDOW:
    raise SizeError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {a.shape[-2:]}.")
  return float(structural_similarity(luma(a), luma(b),
                                     data_range=1.0,
                                     gaussian_weights=True,
                                     sigma=SSIM_SIGMA,
                                     use_sample_covariance=False))
