# Licensed under the GPL. See License.txt in the project root for license information.

import glob
import os
from typing import List

import numpy as np
from PIL import Image as PilImage

from .errors import ShapeError
from .tensor_util import Tensor

PPM_EXTENSION = ".ppm"


def to_uint8(image : Tensor) -> np.ndarray:
  """
  Maps a (3, H, W) image in [0, 1] to an (H, W, 3) 8-bit array, clamping and rounding.
  """
  if image.ndim != 3 or image.shape[0] != 3:
    raise ShapeError(f"Expected a (3, H, W) image, got shape {image.shape}.")
  return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def from_uint8(pixels : np.ndarray) -> Tensor:
  return np.ascontiguousarray(pixels.transpose(2, 0, 1), dtype=np.float64) / 255.0


def read_ppm(path : str) -> Tensor:
  with PilImage.open(path) as image:
    return from_uint8(np.asarray(image.convert("RGB")))


def write_ppm(path : str,
              image : Tensor) -> None:
  directory = os.path.dirname(path)
  if directory:
    os.makedirs(directory, exist_ok=True)
  PilImage.fromarray(to_uint8(image)).save(path, format="PPM")


def list_images(directory : str) -> List[str]:
  if not os.path.isdir(directory):
    raise FileNotFoundError(f"Image folder {directory} does not exist.")
  return sorted(glob.glob(os.path.join(directory, "*" + PPM_EXTENSION)))
