# Licensed under the GPL. See License.txt in the project root for license information.

"""
Synthesis of low resolution images from high resolution ones:
blur with an isotropic Gaussian, bicubic downsampling, additive Gaussian noise, clamping after each step.
Images are (3, H, W) float arrays in [0, 1].
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from .errors import ConfigurationError, ShapeError, SizeError
from .image_io import list_images, read_ppm, write_ppm
from .tensor_util import Tensor

logger = logging.getLogger(__name__)

DEFAULT_KERNEL_SIZE = 21
TEST_SIGMA_COUNT = 8
TRAIN_SIGMA_RANGES : Dict[int, Tuple[float, float]] = { 1 : (0.2, 2.0), 2 : (0.2, 2.0), 3 : (0.2, 3.0), 4 : (0.2, 4.0) }
TEST_SIGMA_RANGES : Dict[int, Tuple[float, float]] = { 2 : (0.80, 1.60), 3 : (1.35, 2.40), 4 : (1.8, 3.2) }


@dataclass
class DegradationSpec:
  """
  :param scale: Downsampling factor, 1 to 4.
  :param sigma_range: Range blur sigmas are drawn from uniformly, the training range of the scale when None.
  :param sigma: Fixed blur sigma overriding sigma_range, used by evaluation.
  :param noise_sigma: Standard deviation of the additive noise on the 0-255 scale.
  :param order: 2 repeats the blur and noise stages around the single resize.
  :param kernel_size: Odd side length of the blur kernel.
  """
  scale : int = 2
  sigma_range : Optional[Tuple[float, float]] = None
  sigma : Optional[float] = None
  noise_sigma : float = 0.0
  order : int = 1
  kernel_size : int = DEFAULT_KERNEL_SIZE

  def __post_init__(self):
    if self.sigma_range is None and self.scale in TRAIN_SIGMA_RANGES:
      self.sigma_range = TRAIN_SIGMA_RANGES[self.scale]

  def validate(self) -> "DegradationSpec":
    if self.scale not in TRAIN_SIGMA_RANGES:
      raise ConfigurationError(f"Scale must be one of {sorted(TRAIN_SIGMA_RANGES)}, got {self.scale}.")
    lo, hi = self.sigma_range
    if not 0.0 < lo <= hi:
      raise ConfigurationError(f"Invalid sigma range [{lo}, {hi}].")
    if self.sigma is not None and self.sigma <= 0.0:
      raise ConfigurationError(f"Blur sigma must be positive, got {self.sigma}.")
    if self.noise_sigma < 0.0:
      raise ConfigurationError(f"Noise sigma must be non-negative, got {self.noise_sigma}.")
    if self.order not in (1, 2):
      raise ConfigurationError(f"Degradation order must be 1 or 2, got {self.order}.")
    if self.kernel_size % 2 == 0:
      raise ConfigurationError(f"Blur kernel size must be odd, got {self.kernel_size}.")
    return self

  def sample_sigma(self,
                   rng : np.random.Generator) -> float:
    if self.sigma is not None:
      return self.sigma
    return float(rng.uniform(*self.sigma_range))


def eval_sigmas(scale : int) -> np.ndarray:
  if scale not in TEST_SIGMA_RANGES:
    raise ConfigurationError(f"No test sigma range for scale {scale}.")
  return np.linspace(*TEST_SIGMA_RANGES[scale], TEST_SIGMA_COUNT)


  ################################################################
  ########################  Primitives  ##########################
  ################################################################

def gaussian_kernel(sigma : float,
                    size : int = DEFAULT_KERNEL_SIZE) -> Tensor:
  """
  Isotropic Gaussian on the centred size x size grid, normalised to sum 1.

  :raises ConfigurationError: If size is even or sigma is not positive.
  """
  if size < 1 or size % 2 == 0:
    raise ConfigurationError(f"Blur kernel size must be odd, got {size}.")
  if sigma <= 0.0:
    raise ConfigurationError(f"Blur sigma must be positive, got {sigma}.")
  offsets = np.arange(size) - size // 2
  profile = np.exp(-(offsets * offsets) / (2.0 * sigma * sigma))
  profile /= profile.sum()
  return np.outer(profile, profile)


def blur(image : Tensor,
         kernel : Tensor) -> Tensor:
  return ndimage.correlate(image, kernel[None, :, :], mode="reflect")


def _cubic(x : np.ndarray) -> np.ndarray:
  absx = np.abs(x)
  absx2 = absx * absx
  absx3 = absx2 * absx
  return ((1.5 * absx3 - 2.5 * absx2 + 1.0) * (absx <= 1.0)
          + (-0.5 * absx3 + 2.5 * absx2 - 4.0 * absx + 2.0) * ((absx > 1.0) & (absx <= 2.0)))


def bicubic_weights(in_size : int,
                    out_size : int) -> Tensor:
  """
  Dense (out_size x in_size) resampling matrix of the Keys cubic (a = -0.5).
  Downsampling widens the kernel by the inverse scale; border samples are replicated.
  """
  scale = out_size / in_size
  kernel_width = 4.0 / scale if scale < 1.0 else 4.0
  centres = np.arange(1, out_size + 1) / scale + 0.5 * (1.0 - 1.0 / scale)
  left = np.floor(centres - kernel_width / 2.0)
  taps = int(np.ceil(kernel_width)) + 2
  indices = left[:, None] + np.arange(taps)[None, :]
  distance = centres[:, None] - indices
  weights = scale * _cubic(distance * scale) if scale < 1.0 else _cubic(distance)
  weights /= weights.sum(axis=1, keepdims=True)
  columns = np.clip(indices, 1, in_size).astype(int) - 1
  matrix = np.zeros((out_size, in_size))
  np.add.at(matrix, (np.repeat(np.arange(out_size), taps), columns.ravel()), weights.ravel())
  return matrix


def bicubic_resize(image : Tensor,
                   out_height : int,
                   out_width : int) -> Tensor:
  if image.ndim != 3:
    raise ShapeError(f"Expected a (C, H, W) image, got shape {image.shape}.")
  rows = bicubic_weights(image.shape[1], out_height)
  cols = bicubic_weights(image.shape[2], out_width)
  return np.einsum("oh,chw,pw->cop", rows, image, cols)


def add_noise(image : Tensor,
              noise_sigma : float,
              rng : np.random.Generator) -> Tensor:
  if noise_sigma <= 0.0:
    return image
  return image + rng.normal(0.0, noise_sigma / 255.0, size=image.shape)


def crop_to_multiple(image : Tensor,
                     scale : int) -> Tensor:
  _, height, width = image.shape
  return image[:, :height - height % scale, :width - width % scale]


  ################################################################
  #######################  Pipelines  ############################
  ################################################################

def _downsample(image : Tensor,
                scale : int) -> Tensor:
  _, height, width = image.shape
  if height % scale or width % scale:
    raise SizeError(f"Image of size {height}x{width} is not divisible by scale {scale}.")
  if scale == 1:
    return image
  return np.clip(bicubic_resize(image, height // scale, width // scale), 0.0, 1.0)


def _blur_stage(image : Tensor,
                spec : DegradationSpec,
                rng : np.random.Generator) -> Tensor:
  return np.clip(blur(image, gaussian_kernel(spec.sample_sigma(rng), spec.kernel_size)), 0.0, 1.0)


def _noise_stage(image : Tensor,
                 spec : DegradationSpec,
                 rng : np.random.Generator) -> Tensor:
  return np.clip(add_noise(image, spec.noise_sigma, rng), 0.0, 1.0)


def degrade(hr : Tensor,
            spec : DegradationSpec,
            rng : np.random.Generator) -> Tensor:
  """
  LR = clamp((HR * kernel) downsampled by s + noise). With order 2 a second blur and noise stage
  with freshly drawn parameters follows the first one.

  :raises SizeError: If H or W is not divisible by the scale.
  """
  spec.validate()
  lr = _downsample(_blur_stage(hr, spec, rng), spec.scale)
  lr = _noise_stage(lr, spec, rng)
  if spec.order == 2:
    lr = _noise_stage(_blur_stage(lr, spec, rng), spec, rng)
  return lr


def degrade_pair(hr : Tensor,
                 spec : DegradationSpec,
                 rng : np.random.Generator) -> Tuple[Tensor, Tensor]:
  """
  Two LR views of one HR image sharing the first blur: a noise-heavy view (two noise injections)
  for the denoising branch and a blur-heavy view (two blurs, no noise) for the deblurring branch.
  """
  spec.validate()
  base = _downsample(_blur_stage(hr, spec, rng), spec.scale)
  lr_noise = _noise_stage(_noise_stage(base, spec, rng), spec, rng)
  lr_blur = _blur_stage(base, spec, rng)
  return lr_noise, lr_blur


def synthesize_hr_corpus(count : int,
                         size : int,
                         rng : np.random.Generator) -> List[Tensor]:
  """
  Procedural HR patches mixing an oriented sinusoid grating, a smooth colour gradient and a few
  flat rectangles, so the corpus carries both edges and texture.
  """
  rows, cols = np.mgrid[0:size, 0:size] / float(size)
  images = []
  for _ in range(count):
    angle = rng.uniform(0.0, np.pi)
    frequency = rng.uniform(2.0, 0.35 * size)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    grating = 0.5 + 0.5 * np.sin(2.0 * np.pi * frequency * (np.cos(angle) * cols + np.sin(angle) * rows) + phase)
    colour = rng.uniform(0.2, 1.0, size=3)
    gradient = rng.uniform(0.0, 1.0, size=(3, 1, 1)) * (rows if rng.random() < 0.5 else cols)[None]
    image = 0.6 * colour[:, None, None] * grating[None] + 0.4 * gradient
    for _ in range(int(rng.integers(1, 4))):
      y0, x0 = rng.integers(0, size - 2, size=2)
      h, w = rng.integers(2, max(3, size // 2), size=2)
      image[:, y0:y0 + h, x0:x0 + w] = rng.uniform(0.0, 1.0, size=(3, 1, 1))
    images.append(np.clip(image, 0.0, 1.0))
  return images


def item_rng(seed : int,
             index : int) -> np.random.Generator:
  return np.random.default_rng(seed ^ index)


def build_lr_folder(hr_dir : str,
                    out_dir : str,
                    spec : DegradationSpec,
                    seed : int = 0,
                    workers : int = 1) -> int:
  """
  Degrades every ``*.ppm`` of hr_dir into out_dir/lr, copying the cropped HR to out_dir/hr.
  Item i uses the seed ``seed ^ i`` so the result does not depend on the worker count.

  :return: Number of image pairs written.
  """
  paths = list_images(hr_dir)
  if not paths:
    raise FileNotFoundError(f"No {os.path.basename(hr_dir)}/*.ppm images found in {hr_dir}.")
  spec.validate()

  def work(index : int) -> None:
    name = os.path.basename(paths[index])
    hr = crop_to_multiple(read_ppm(paths[index]), spec.scale)
    write_ppm(os.path.join(out_dir, "hr", name), hr)
    write_ppm(os.path.join(out_dir, "lr", name), degrade(hr, spec, item_rng(seed, index)))

  with ThreadPoolExecutor(max_workers=max(1, workers)) as threads:
    list(threads.map(work, range(len(paths))))
  logger.info("Wrote %d LR/HR pairs to %s", len(paths), out_dir)
  return len(paths)
