# Licensed under the GPL. See License.txt in the project root for license information.

import argparse
import logging
import sys
from threading import RLock
from typing import Dict, List, Sequence, TextIO, Type

from .bench import DEFAULT_SWEEP
from .command_util import Ablation, Bench, Eval, GradCheck, MakeData, Sr, TaylorCommand, Train
from .errors import (CheckFailure, ConfigurationError, ConvergenceError, DeterminismError, EmptyInputError, LoadError,
                     NumericError, OverflowGuardError, ShapeError, SizeError, SymmetryError, TrainingError, UsageError)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

LOG_FORMAT = "%(levelname)s %(name)s: %(message)s"

_FAILURES = (OSError, LoadError, TrainingError, ConfigurationError, ShapeError, SizeError, EmptyInputError,
             NumericError, OverflowGuardError, DeterminismError, SymmetryError, ConvergenceError)


class TaylorRunner:
  """
  Registry of the command line commands, keyed by subcommand name.
  One command runs at a time.
  """
  def __init__(self,
               seed : int = None,
               stdout : TextIO = None,
               progress : bool = True):
    self._seed = seed
    self._stdout = stdout
    self._progress = progress
    self._lock = RLock()
    self._commands : Dict[str, Type[TaylorCommand]] = {}
    self._register_commands()

  def _register_commands(self) -> None:
    self._commands = { "bench" : Bench,
                       "gradcheck" : GradCheck,
                       "train" : Train,
                       "eval" : Eval,
                       "sr" : Sr,
                       "make-data" : MakeData,
                       "ablation" : Ablation }

  @property
  def command_names(self) -> List[str]:
    return list(self._commands.keys())

  def register_command(self,
                       name : str,
                       command : Type[TaylorCommand]) -> None:
    """
    :raises ValueError: If name or command is None, or the name is already registered.
    """
    with self._lock:
      if not name or command is None:
        raise ValueError("Command name and command cannot be None.")
      if name in self._commands:
        raise ValueError(f"Command {name!r} already exists.")
      self._commands[name] = command

  def run_command(self,
                  name : str,
                  **kwargs):
    """
    :raises UsageError: If the command is not registered.
    :return: Return value of the command.
    """
    with self._lock:
      if name not in self._commands:
        raise UsageError(f"Command {name!r} not recognised. Registered commands include:\n{self.command_names}")
      return self._commands[name].execute(seed=self._seed, stdout=self._stdout, progress=self._progress, **kwargs)

  def get_command_args(self,
                       name : str) -> str:
    with self._lock:
      if name not in self._commands:
        raise KeyError(f"Command {name!r} not recognised.")
      return self._commands[name].func_signature()


  ################################################################
  ########################  Command line  ########################
  ################################################################

def _float_list(text : str) -> List[float]:
  try:
    return [float(v) for v in text.split(",") if v.strip()]
  except ValueError:
    raise argparse.ArgumentTypeError(f"Expected comma separated numbers, got {text!r}.")


def _positive_int(text : str) -> int:
  try:
    value = int(text)
  except ValueError:
    raise argparse.ArgumentTypeError(f"Expected an integer, got {text!r}.")
  if value < 1:
    raise argparse.ArgumentTypeError(f"Expected a positive integer, got {value}.")
  return value


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(prog="taylor-sr",
                                   description="Taylor expansion attention for image super-resolution: "
                                               "complexity benchmarks, gradient checks, training and evaluation.")
  verbosity = parser.add_mutually_exclusive_group()
  verbosity.add_argument("--verbose", action="store_true", help="Log debug messages.")
  verbosity.add_argument("--quiet", action="store_true", help="Log warnings only and hide progress bars.")
  parser.add_argument("--seed", type=int, default=None,
                      help="Seed of every random draw; falls back to the config seed, then TAYLOR_ATTN_SEED, then 0.")
  commands = parser.add_subparsers(dest="command", required=True)

  bench = commands.add_parser("bench", help="FLOP and wall time sweep of the attention kernels.")
  bench.add_argument("--kernel", dest="kernels", default="nla,exp,taylor-linear,stea,mlfr",
                     help="Comma separated kernels among nla, exp, taylor-linear, stea, mlfr.")
  bench.add_argument("--d", type=_positive_int, default=16, help="Channel width.")
  bench.add_argument("--n", dest="sweep", default=DEFAULT_SWEEP, help="Sequence lengths, A..BxF or a list.")
  bench.add_argument("--fit", action="store_true", help="Append the log-log FLOP slope per kernel.")
  bench.add_argument("--repeats", type=_positive_int, default=1, help="Timed runs per point, the fastest is kept.")

  gradcheck = commands.add_parser("gradcheck", help="Finite difference checks of every backward pass.")
  gradcheck.add_argument("--only", type=lambda s: [v for v in s.split(",") if v], default=None,
                         help="Comma separated subset of checks.")
  gradcheck.add_argument("--coords", type=_positive_int, default=None, help="Sampled coordinates per parameter.")

  train = commands.add_parser("train", help="Train a network from a key = value config file.")
  train.add_argument("config")
  train.add_argument("--iters", type=_positive_int, default=None)
  train.add_argument("--out", default=None)

  evaluate = commands.add_parser("eval", help="PSNR/SSIM of a checkpoint over the test blur sigmas.")
  evaluate.add_argument("checkpoint")
  evaluate.add_argument("hr_dir")
  evaluate.add_argument("--noise", type=float, default=0.0)
  evaluate.add_argument("--workers", type=_positive_int, default=1)

  sr = commands.add_parser("sr", help="Super-resolve a single PPM image.")
  sr.add_argument("checkpoint")
  sr.add_argument("image")
  sr.add_argument("out")
  sr.add_argument("--alpha", type=_float_list, default=None, help="4 comma separated denoising knobs.")
  sr.add_argument("--beta", type=_float_list, default=None, help="4 comma separated deblurring knobs.")

  make_data = commands.add_parser("make-data", help="Write degraded LR/HR PPM pairs.")
  make_data.add_argument("out_dir")
  source = make_data.add_mutually_exclusive_group()
  source.add_argument("--from", dest="from_dir", default=None)
  source.add_argument("--synthetic", type=_positive_int, default=None)
  make_data.add_argument("--size", type=_positive_int, default=32)
  make_data.add_argument("--scale", type=int, default=2)
  make_data.add_argument("--sigma", type=float, default=None)
  make_data.add_argument("--noise", type=float, default=0.0)
  make_data.add_argument("--workers", type=_positive_int, default=1)

  ablation = commands.add_parser("ablation", help="Parameter and FLOP counts of the ablation configurations.")
  ablation.add_argument("--channels", type=_positive_int, default=16)
  ablation.add_argument("--size", type=_positive_int, default=16)
  return parser


def configure_logging(verbose : bool = False,
                      quiet : bool = False) -> None:
  level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
  logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


def main(argv : Sequence[str] = None,
         stdout : TextIO = None) -> int:
  """
  Command line entry point.

  :return: 0 on success, 1 when a check, load, training or I/O step fails, 2 on a usage error.
  """
  parser = build_parser()
  try:
    args = parser.parse_args(argv)
  except SystemExit as e:
    return EXIT_OK if e.code == 0 else EXIT_USAGE
  configure_logging(args.verbose, args.quiet)
  kwargs = { key : value for key, value in vars(args).items()
             if key not in ("command", "verbose", "quiet", "seed") }
  runner = TaylorRunner(seed=args.seed, stdout=stdout, progress=not args.quiet)
  try:
    runner.run_command(args.command, **kwargs)
  except UsageError as e:
    logger.error("%s", e)
    return EXIT_USAGE
  except CheckFailure as e:
    logger.error("%s", e)
    return EXIT_FAILURE
  except _FAILURES as e:
    logger.error("%s: %s", type(e).__name__, e)
    return EXIT_FAILURE
  except ValueError as e:
    logger.error("Invalid argument: %s", e)
    return EXIT_USAGE
  return EXIT_OK
