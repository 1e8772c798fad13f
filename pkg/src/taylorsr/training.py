# Licensed under the GPL. See License.txt in the project root for license information.

"""
l1 loss, Adam with a halving learning rate schedule and the seeded training loop.
"""

import csv
import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from .degradation import DegradationSpec, degrade, degrade_pair, item_rng
from .errors import ConfigurationError, ShapeError, TrainingError
from .networks import Network, RealNet
from .tensor_util import Param, Tensor
from .tnsr_io import save_checkpoint

logger = logging.getLogger(__name__)

LOSS_FILE = "loss.csv"
LOSS_HEADER = ("iter", "loss", "lr")


def l1_loss(pred : Tensor,
            target : Tensor) -> float:
  if pred.shape != target.shape:
    raise ShapeError(f"Cannot compare prediction {pred.shape} with target {target.shape}.")
  return float(np.mean(np.abs(pred - target)))


def l1_loss_backward(pred : Tensor,
                     target : Tensor) -> Tensor:
  # np.sign is 0 at ties, the subgradient chosen there
  return np.sign(pred - target) / pred.size


@dataclass
class TrainConfig:
  """
  :param lr: Initial learning rate.
  :param halve_every: The learning rate halves every this many iterations.
  :param loss_weights: (l1, perceptual, adversarial) weights, only l1 can be active.
  """
  lr : float = 4e-4
  halve_every : int = 500
  iters : int = 2000
  batch : int = 4
  loss_weights : Tuple[float, float, float] = (1.0, 1.0, 0.1)
  loss_active : Tuple[str, ...] = ("l1",)
  adam_beta1 : float = 0.9
  adam_beta2 : float = 0.99
  adam_eps : float = 1e-8
  checkpoint_every : int = 500
  log_every : int = 10

  def validate(self) -> "TrainConfig":
    if self.lr <= 0.0:
      raise ConfigurationError(f"Learning rate must be positive, got {self.lr}.")
    if self.iters < 1 or self.batch < 1 or self.halve_every < 1:
      raise ConfigurationError("iters, batch and halve_every must all be >= 1.")
    for name in self.loss_active:
      if name != "l1":
        raise ConfigurationError(f"Loss term {name!r} is out of scope, only l1 can be trained.")
    return self

  def learning_rate(self,
                    step : int) -> float:
    return self.lr * 2.0 ** (-(step // self.halve_every))


class AdamOptimizer:
  """
  Bias corrected Adam over a fixed list of parameters.
  """
  def __init__(self,
               params : Sequence[Param],
               config : TrainConfig):
    self.params = list(params)
    self.config = config
    self._m = [np.zeros_like(p.value) for p in self.params]
    self._v = [np.zeros_like(p.value) for p in self.params]
    self.step_count = 0

  def step(self) -> float:
    """
    Applies one update from the accumulated gradients.

    :return: The learning rate used.
    """
    cfg = self.config
    lr = cfg.learning_rate(self.step_count)
    self.step_count += 1
    t = self.step_count
    correction1 = 1.0 - cfg.adam_beta1 ** t
    correction2 = 1.0 - cfg.adam_beta2 ** t
    for param, m, v in zip(self.params, self._m, self._v):
      m *= cfg.adam_beta1
      m += (1.0 - cfg.adam_beta1) * param.grad
      v *= cfg.adam_beta2
      v += (1.0 - cfg.adam_beta2) * param.grad * param.grad
      param.value -= lr * (m / correction1) / (np.sqrt(v / correction2) + cfg.adam_eps)
    return lr


def adam_step(optimizer : AdamOptimizer) -> float:
  return optimizer.step()


  ################################################################
  ########################  Training loop  #######################
  ################################################################

@dataclass
class TrainingSample:
  hr : Tensor
  lr : Tensor
  lr_deblur : Optional[Tensor] = None


def random_crop(image : Tensor,
                size : int,
                scale : int,
                rng : np.random.Generator) -> Tensor:
  _, height, width = image.shape
  size = min(size, height - height % scale, width - width % scale)
  size -= size % scale
  y = int(rng.integers(0, height - size + 1))
  x = int(rng.integers(0, width - size + 1))
  return image[:, y:y + size, x:x + size]


def make_sample(hr : Tensor,
                spec : DegradationSpec,
                patch : int,
                pair : bool,
                rng : np.random.Generator) -> TrainingSample:
  hr = random_crop(hr, patch, spec.scale, rng)
  if pair:
    lr_noise, lr_blur = degrade_pair(hr, spec, rng)
    return TrainingSample(hr, lr_noise, lr_blur)
  return TrainingSample(hr, degrade(hr, spec, rng))


class Trainer:
  """
  Trains a network with l1 loss and Adam on LR/HR pairs synthesised on the fly from a corpus.
  Every draw comes from generators seeded by (seed, iteration), so two runs with the same seed
  write identical checkpoints.

  :param network: LabNet or RealNet; RealNet receives a noise-heavy and a blur-heavy LR view.
  :param corpus: HR images, each at least one patch in size.
  :param out_dir: Folder for loss.csv and checkpoint folders ``iter_<n>`` and ``final``.
  :param config_text: Configuration stored next to every checkpoint.
  """
  def __init__(self,
               network : Network,
               corpus : List[Tensor],
               spec : DegradationSpec,
               config : TrainConfig,
               patch : int,
               out_dir : str,
               seed : int = 0,
               config_text : str = "",
               progress : bool = True):
    if not corpus:
      raise TrainingError("Training corpus is empty.")
    self.network = network
    self.corpus = corpus
    self.spec = spec.validate()
    self.config = config.validate()
    self.patch = patch
    self.out_dir = out_dir
    self.seed = seed
    self.config_text = config_text
    self.progress = progress
    self.optimizer = AdamOptimizer(network.params(), config)
    self.losses : List[float] = []

  def _batch(self,
             step : int) -> List[TrainingSample]:
    rng = item_rng(self.seed, step)
    pair = isinstance(self.network, RealNet)
    picks = rng.integers(0, len(self.corpus), size=self.config.batch)
    return [make_sample(self.corpus[i], self.spec, self.patch, pair, rng) for i in picks]

  def train_step(self,
                 step : int) -> Tuple[float, float]:
    """
    One optimisation step on a fresh batch.

    :raises TrainingError: If the loss is not finite.
    :return: (mean batch loss, learning rate)
    """
    self.network.zero_grad()
    total = 0.0
    batch = self._batch(step)
    for sample in batch:
      if sample.lr_deblur is not None:
        pred = self.network.forward(sample.lr, sample.lr_deblur)
      else:
        pred = self.network.forward(sample.lr)
      total += l1_loss(pred, sample.hr)
      self.network.backward(l1_loss_backward(pred, sample.hr) / len(batch))
    loss = total / len(batch)
    lr = self.config.learning_rate(self.optimizer.step_count)
    if not np.isfinite(loss):
      logger.error("Non-finite loss at iteration %d with learning rate %g", step + 1, lr)
      raise TrainingError(f"Loss became {loss} at iteration {step + 1} (lr {lr:g}).")
    self.optimizer.step()
    return loss, lr

  def run(self,
          iters : int = None) -> List[float]:
    iters = iters if iters is not None else self.config.iters
    os.makedirs(self.out_dir, exist_ok=True)
    with open(os.path.join(self.out_dir, LOSS_FILE), "w", newline="") as f:
      writer = csv.writer(f, lineterminator="\n")
      writer.writerow(LOSS_HEADER)
      for step in tqdm(range(iters), desc="train", disable=not self.progress):
        loss, lr = self.train_step(step)
        self.losses.append(loss)
        writer.writerow((step + 1, repr(loss), repr(lr)))
        if (step + 1) % self.config.log_every == 0:
          logger.info("iter %d loss %.6f lr %g", step + 1, loss, lr)
        if (step + 1) % self.config.checkpoint_every == 0:
          self.save(f"iter_{step + 1}")
    self.save("final")
    return self.losses

  def save(self,
           name : str) -> str:
    path = os.path.join(self.out_dir, name)
    save_checkpoint(path, self.network, self.config_text)
    return path


def smoothed(values : Sequence[float],
             window : int = 10) -> np.ndarray:
  values = np.asarray(values, dtype=np.float64)
  window = max(1, min(window, values.size))
  return np.convolve(values, np.ones(window) / window, mode="valid")


def super_resolve(network : Network,
                  lr : Tensor) -> Tensor:
  return np.clip(network.forward(lr), 0.0, 1.0)


