# Licensed under the GPL. See License.txt in the project root for license information.

import csv
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from typing import Dict, List, Sequence, TextIO, Tuple

import numpy as np
from tqdm import tqdm

from .attention import SteaUnit, TaylorOrder
from .bench import DEFAULT_SWEEP, fit_slopes, parse_kernels, parse_sweep, run_sweep, write_bench_csv
from .config import RunConfig, load_config, parse_config, resolve_seed
from .degradation import (DegradationSpec, bicubic_resize, build_lr_folder, crop_to_multiple, degrade, eval_sigmas,
                          item_rng, synthesize_hr_corpus)
from .errors import UsageError
from .gradcheck_suite import default_suite, verify, write_report
from .image_io import list_images, read_ppm, write_ppm
from .metrics import psnr, ssim
from .mlfr import VARIANTS, MlfrBlock
from .networks import BlockOptions, LsteaBlock, Network, RealNet, build_network, profile_model
from .tensor_util import Tensor
from .tnsr_io import load_checkpoint, read_checkpoint_config
from .training import Trainer, super_resolve

logger = logging.getLogger(__name__)

DEFAULT_TRAIN_OUT = os.path.join("runs", "train")
SYNTHETIC_CORPUS_SIZE = 200
EVAL_HEADER = ("image", "sigma", "psnr", "ssim")
ABLATION_HEADER = ("config", "params", "flops")
KNOB_COUNT = 4


  ################################################################
  ##########  TaylorCommand base Class implementation  ###########
  ################################################################

class TaylorCommand:
  """
  Base command, derived classes overload ._execute.
  Data products (CSV) are written to ``stdout``; progress goes through the logger.
  """
  def __init__(self,
               key : str = None,
               seed : int = None,
               stdout : TextIO = None,
               progress : bool = True):
    self._key = key
    self._seed = seed
    self._stdout = stdout if stdout is not None else sys.stdout
    self._progress = progress

  @classmethod
  def execute(cls,
              seed : int = None,
              stdout : TextIO = None,
              progress : bool = True,
              **kwargs):
    """
    Intended method for initialisation and calling of TaylorCommand derived classes.

    :param seed: Value of the --seed flag, None when not given.
    :param stdout: Stream receiving the command's data product.
    :param progress: Show tqdm progress bars.
    :param kwargs: Arguments passed on to _execute.
    :return: Return value of _execute.
    """
    cmd = cls(seed=seed, stdout=stdout, progress=progress)
    return cmd._execute(**kwargs)

  def _execute(self, **kwargs):
    """
    :raises NotImplementedError: If the derived class does not overload this method.
    """
    raise NotImplementedError(f"Use of \"{self._key}\" has not been implemented yet.")

  @property
  def seed(self) -> int:
    return resolve_seed(self._seed)

  def _csv(self):
    return csv.writer(self._stdout, lineterminator="\n")

  @classmethod
  def func_signature(cls) -> str:
    annot_str = "Arguments:\n"
    for ak, av in cls._execute.__annotations__.items():
      if ak != "return":
        annot_str += f"\t{ak} - {av}\n"
    annot_str += f"Returns:\n\t{cls._execute.__annotations__.get('return')}"
    return annot_str


def load_network(checkpoint : str,
                 seed : int = 0) -> Tuple[Network, RunConfig]:
  """
  Rebuilds the network described by a checkpoint's stored configuration and loads its weights.
  """
  cfg = parse_config(read_checkpoint_config(checkpoint))
  network = build_network(cfg.network, seed)
  load_checkpoint(checkpoint, network)
  return network, cfg


def load_corpus(directory : str) -> List[Tensor]:
  """
  HR images of a folder, or of its ``hr`` subfolder when it is a make-data output.
  """
  if os.path.isdir(os.path.join(directory, "hr")):
    directory = os.path.join(directory, "hr")
  paths = list_images(directory)
  if not paths:
    raise FileNotFoundError(f"No *.ppm images found in {directory}.")
  return [read_ppm(path) for path in paths]


def _format(value : float) -> str:
  return "inf" if np.isinf(value) else f"{value:.4f}"


  ################################################################
  ##################  Derived Class implementations  #############
  ################################################################

class Bench(TaylorCommand):
  """
  Seeded FLOP and wall time sweep over sequence lengths, CSV ``kernel,n,d,flops,wall_ns,seed``.
  """
  def __init__(self, **kwargs):
    super().__init__(key="bench", **kwargs)

  def _execute(self,
               kernels : str = "nla,exp,taylor-linear,stea,mlfr",
               d : int = 16,
               sweep : str = DEFAULT_SWEEP,
               fit : bool = False,
               repeats : int = 1) -> Dict[str, float]:
    names = parse_kernels(kernels)
    sizes = parse_sweep(sweep)
    if d < 1:
      raise UsageError(f"Channel width must be >= 1, got {d}.")
    records = run_sweep(names, sizes, d, self.seed, repeats)
    slopes = fit_slopes(records) if fit else None
    write_bench_csv(records, self._stdout, slopes)
    return slopes or {}

  ################################################################

class GradCheck(TaylorCommand):
  """
  Runs the gradient-check suite and prints the per-operation maximum relative error.
  """
  def __init__(self, **kwargs):
    super().__init__(key="gradcheck", **kwargs)

  def _execute(self,
               only : Sequence[str] = None,
               coords : int = None) -> List:
    if coords is not None and coords < 1:
      raise UsageError(f"--coords must be >= 1, got {coords}.")
    suite = default_suite(coords=coords, seed=self.seed)
    unknown = [name for name in (only or []) if name not in suite.names]
    if unknown:
      raise UsageError(f"Unknown gradient check(s) {unknown}. Registered checks include:\n{suite.names}")
    results = suite.run(only)
    write_report(results, self._stdout)
    verify(results)
    return results

  ################################################################

class Train(TaylorCommand):
  """
  Trains the configured network on LR/HR pairs synthesised from the ``data`` folder
  (or a seeded procedural corpus when no folder is configured).
  """
  def __init__(self, **kwargs):
    super().__init__(key="train", **kwargs)

  def _execute(self,
               config : str,
               iters : int = None,
               out : str = None) -> Dict[str, object]:
    cfg = load_config(config)
    seed = resolve_seed(self._seed, cfg.seed)
    out = out or cfg.out or DEFAULT_TRAIN_OUT
    if cfg.data:
      corpus = load_corpus(cfg.data)
    else:
      logger.info("No data folder configured, synthesising %d HR patches", SYNTHETIC_CORPUS_SIZE)
      corpus = synthesize_hr_corpus(SYNTHETIC_CORPUS_SIZE, cfg.network.patch, np.random.default_rng(seed))
    network = build_network(cfg.network, seed)
    trainer = Trainer(network, corpus, cfg.degradation, cfg.train, cfg.network.patch, out,
                      seed=seed, config_text=cfg.text, progress=self._progress)
    losses = trainer.run(iters)
    logger.info("Finished %d iterations, final loss %.6f, checkpoints in %s", len(losses), losses[-1], out)
    return { "losses" : losses, "out" : out }

  ################################################################

class Eval(TaylorCommand):
  """
  Degrades every HR image with each test sigma of the scale, super-resolves it and scores it
  against the HR image next to the bicubic upsampling baseline. CSV ``image,sigma,psnr,ssim``
  with ``<name>@bicubic`` baseline rows, closed by ``mean`` and ``mean@bicubic``.
  """
  def __init__(self, **kwargs):
    super().__init__(key="eval", **kwargs)

  def _execute(self,
               checkpoint : str,
               hr_dir : str,
               noise : float = 0.0,
               workers : int = 1) -> Dict[str, Tuple[float, float]]:
    seed = self.seed
    network, cfg = load_network(checkpoint, seed)
    scale = cfg.network.scale
    paths = list_images(hr_dir)
    if not paths:
      raise FileNotFoundError(f"No *.ppm images found in {hr_dir}.")
    jobs = [(path, float(sigma)) for path in paths for sigma in eval_sigmas(scale)]

    def work(index : int) -> Tuple[Tensor, Tensor]:
      path, sigma = jobs[index]
      hr = crop_to_multiple(read_ppm(path), scale)
      spec = DegradationSpec(scale=scale, sigma=sigma, noise_sigma=noise)
      return hr, degrade(hr, spec, item_rng(seed, index))

    with ThreadPoolExecutor(max_workers=max(1, workers)) as threads:
      pairs = list(threads.map(work, range(len(jobs))))

    writer = self._csv()
    writer.writerow(EVAL_HEADER)
    scores : Dict[str, List[Tuple[float, float]]] = { "mean" : [], "mean@bicubic" : [] }
    for (path, sigma), (hr, lr) in tqdm(list(zip(jobs, pairs)), desc="eval", disable=not self._progress):
      name = os.path.splitext(os.path.basename(path))[0]
      baseline = np.clip(bicubic_resize(lr, hr.shape[1], hr.shape[2]), 0.0, 1.0)
      sr = super_resolve(network, lr)
      for label, image, key in ((name, sr, "mean"), (f"{name}@bicubic", baseline, "mean@bicubic")):
        score = (psnr(image, hr), ssim(image, hr))
        scores[key].append(score)
        writer.writerow((label, f"{sigma:.4f}", _format(score[0]), f"{score[1]:.4f}"))
    means = { key : (float(np.mean([s[0] for s in rows])), float(np.mean([s[1] for s in rows])))
              for key, rows in scores.items() }
    for key, (mean_psnr, mean_ssim) in means.items():
      writer.writerow((key, "all", _format(mean_psnr), f"{mean_ssim:.4f}"))
    logger.info("Mean PSNR %.4f dB against %.4f dB for bicubic", means["mean"][0], means["mean@bicubic"][0])
    return means

  ################################################################

class Sr(TaylorCommand):
  """
  Super-resolves one image; RealNet checkpoints accept 4 alpha and 4 beta knobs.
  """
  def __init__(self, **kwargs):
    super().__init__(key="sr", **kwargs)

  def _execute(self,
               checkpoint : str,
               image : str,
               out : str,
               alpha : Sequence[float] = None,
               beta : Sequence[float] = None) -> Tensor:
    knobs_given = alpha is not None or beta is not None
    if knobs_given and (alpha is None or beta is None or len(alpha) != KNOB_COUNT or len(beta) != KNOB_COUNT):
      raise UsageError(f"sr takes exactly {KNOB_COUNT} alpha and {KNOB_COUNT} beta values, "
                       f"got {0 if alpha is None else len(alpha)} and {0 if beta is None else len(beta)}.")
    network, _ = load_network(checkpoint, self.seed)
    if knobs_given:
      if not isinstance(network, RealNet):
        raise UsageError("alpha and beta knobs need a RealNet checkpoint.")
      network.set_knobs(alpha, beta)
    sr = super_resolve(network, read_ppm(image))
    write_ppm(out, sr)
    logger.info("Wrote %dx%d image to %s", sr.shape[2], sr.shape[1], out)
    return sr

  ################################################################

class MakeData(TaylorCommand):
  """
  Writes ``out_dir/hr`` and ``out_dir/lr`` PPM pairs, from an HR folder or a procedural corpus.
  """
  def __init__(self, **kwargs):
    super().__init__(key="make-data", **kwargs)

  def _execute(self,
               out_dir : str,
               from_dir : str = None,
               synthetic : int = None,
               size : int = 32,
               scale : int = 2,
               sigma : float = None,
               noise : float = 0.0,
               workers : int = 1) -> int:
    if (from_dir is None) == (synthetic is None):
      raise UsageError("make-data needs exactly one of --from HR_DIR and --synthetic COUNT.")
    seed = self.seed
    if synthetic is not None:
      if synthetic < 1 or size < 1:
        raise UsageError(f"--synthetic and --size must be positive, got {synthetic} and {size}.")
      from_dir = os.path.join(out_dir, "source")
      for index, hr in enumerate(synthesize_hr_corpus(synthetic, size, np.random.default_rng(seed))):
        write_ppm(os.path.join(from_dir, f"{index:04d}.ppm"), hr)
    spec = DegradationSpec(scale=scale, sigma=sigma, noise_sigma=noise)
    return build_lr_folder(from_dir, out_dir, spec, seed, workers)

  ################################################################

class Ablation(TaylorCommand):
  """
  Parameter and FLOP counts of the Taylor order, MLFR variant and global branch ablations,
  CSV ``config,params,flops``.
  """
  def __init__(self, **kwargs):
    super().__init__(key="ablation", **kwargs)

  def _execute(self,
               channels : int = 16,
               size : int = 16) -> List[Tuple[str, int, int]]:
    if channels < 1 or size < 1:
      raise UsageError(f"--channels and --size must be positive, got {channels} and {size}.")
    rng = np.random.default_rng(self.seed)
    tokens = size * size
    models = [("ftea", SteaUnit(channels, tokens, TaylorOrder.FTEA, False, rng)),
              ("ftea+dwc", SteaUnit(channels, tokens, TaylorOrder.FTEA, True, rng)),
              ("stea", SteaUnit(channels, tokens, TaylorOrder.STEA, True, rng)),
              ("ttea", SteaUnit(channels, tokens, TaylorOrder.TTEA, True, rng))]
    models += [(f"mlfr-{variant}", MlfrBlock(channels, variant, rng)) for variant in VARIANTS]
    for label, options in (("global-none", BlockOptions(attention="none", use_mlfr=False)),
                           ("global-nla", BlockOptions(attention="nla", use_mlfr=False)),
                           ("global-stea", BlockOptions(attention="stea", use_mlfr=False)),
                           ("global-stea+mlfr", BlockOptions(attention="stea", use_mlfr=True))):
      models.append((label, LsteaBlock(channels, tokens, options, rng)))

    writer = self._csv()
    writer.writerow(ABLATION_HEADER)
    rows = []
    for label, model in models:
      params, flops = profile_model(model, (channels, size, size), self.seed)
      rows.append((label, params, flops))
      writer.writerow((label, params, flops))
    return rows
