# Licensed under the GPL. See License.txt in the project root for license information.

"""
Complexity benchmark: runs each kernel once per sequence length on seeded inputs, records the
multiply-adds seen by a FlopCounter and the wall time, and fits log(flops) against log(N).
The flops column is exact and deterministic; wall_ns depends on the machine.
"""

import csv
import logging
import math
import time
from dataclasses import astuple, dataclass
from typing import Dict, Iterable, List, Sequence, TextIO, Tuple

import numpy as np

from .attention import QkvWeights, SteaUnit, TaylorOrder, exp_kernel_forward, nla_forward, taylor_attention_linear
from .errors import UsageError
from .flop_counter import counting
from .mlfr import MlfrBlock

logger = logging.getLogger(__name__)

KERNELS = ("nla", "exp", "taylor-linear", "stea", "mlfr")
BENCH_HEADER = ("kernel", "n", "d", "flops", "wall_ns", "seed")
SLOPE_HEADER = ("kernel", "slope")
DEFAULT_SWEEP = "256..4096x2"
INPUT_SCALE = 0.1


@dataclass
class BenchRecord:
  kernel : str
  n : int
  d : int
  flops : int
  wall_ns : int
  seed : int


def parse_kernels(spec : str) -> List[str]:
  names = [name.strip() for name in spec.split(",") if name.strip()]
  unknown = [name for name in names if name not in KERNELS]
  if unknown or not names:
    raise UsageError(f"Unknown kernel(s) {unknown}, expected a comma separated subset of {list(KERNELS)}.")
  return names


def parse_sweep(spec : str) -> List[int]:
  """
  Parses ``A..BxF`` (A, A*F, A*F^2, ... up to B) or a comma separated list of sizes.

  :raises UsageError: If the text is malformed or a size is not positive.
  """
  try:
    if ".." in spec:
      start, rest = spec.split("..")
      stop, factor = rest.split("x") if "x" in rest else (rest, "2")
      start, stop, factor = int(start), int(stop), int(factor)
      if start < 1 or factor < 2 or stop < start:
        raise ValueError(spec)
      sizes = []
      n = start
      while n <= stop:
        sizes.append(n)
        n *= factor
    else:
      sizes = [int(s) for s in spec.split(",")]
  except ValueError as e:
    raise UsageError(f"Cannot parse sweep {spec!r}, expected A..BxF or a comma separated list.") from e
  if not sizes or min(sizes) < 1:
    raise UsageError(f"Sweep {spec!r} holds no positive sizes.")
  return sizes


def grid_shape(n : int) -> Tuple[int, int]:
  """
  (H, W) with H * W = n and H the largest divisor of n not above sqrt(n).
  """
  height = max(h for h in range(1, math.isqrt(n) + 1) if n % h == 0)
  return height, n // height


def _prepare(kernel : str,
             n : int,
             d : int,
             rng : np.random.Generator):
  x = INPUT_SCALE * rng.uniform(-1.0, 1.0, size=(n, d))
  if kernel in ("nla", "exp", "taylor-linear"):
    w = QkvWeights.random(d, rng, scale=1.0 / math.sqrt(d))
    if kernel == "nla":
      return lambda: nla_forward(x, w)
    if kernel == "exp":
      return lambda: exp_kernel_forward(x, w, float(n))
    return lambda: taylor_attention_linear(x, w, TaylorOrder.STEA, float(n))
  height, width = grid_shape(n)
  feature_map = np.ascontiguousarray(x.T.reshape(d, height, width))
  unit = SteaUnit(d, n, rng=rng) if kernel == "stea" else MlfrBlock(d, rng=rng)
  return lambda: unit.forward(feature_map)


def run_kernel(kernel : str,
               n : int,
               d : int,
               seed : int = 0,
               repeats : int = 1) -> BenchRecord:
  """
  Builds seeded inputs (and weights) outside the measured region, then runs the kernel.
  flops comes from the first run, wall_ns is the fastest of ``repeats`` runs.
  """
  if kernel not in KERNELS:
    raise UsageError(f"Unknown kernel {kernel!r}.")
  run = _prepare(kernel, n, d, np.random.default_rng(seed))
  flops, wall = None, None
  for _ in range(max(1, repeats)):
    with counting() as counter:
      start = time.perf_counter_ns()
      run()
      elapsed = time.perf_counter_ns() - start
    flops = counter.multiply_adds if flops is None else flops
    wall = elapsed if wall is None else min(wall, elapsed)
  return BenchRecord(kernel, n, d, flops, max(1, wall), seed)


def run_sweep(kernels : Sequence[str],
              sizes : Sequence[int],
              d : int,
              seed : int = 0,
              repeats : int = 1) -> List[BenchRecord]:
  records = []
  for kernel in kernels:
    for n in sizes:
      record = run_kernel(kernel, n, d, seed, repeats)
      logger.debug("%s n=%d d=%d: %d multiply-adds in %d ns", kernel, n, d, record.flops, record.wall_ns)
      records.append(record)
  return records


def fit_slopes(records : Iterable[BenchRecord]) -> Dict[str, float]:
  """
  Least-squares slope of log(flops) against log(n) per kernel; kernels with a single size are skipped.
  """
  by_kernel : Dict[str, List[BenchRecord]] = {}
  for record in records:
    by_kernel.setdefault(record.kernel, []).append(record)
  slopes = {}
  for kernel, rows in by_kernel.items():
    if len({r.n for r in rows}) < 2:
      continue
    slopes[kernel] = float(np.polyfit(np.log([r.n for r in rows]), np.log([r.flops for r in rows]), 1)[0])
  return slopes


def write_bench_csv(records : Sequence[BenchRecord],
                    stream : TextIO,
                    slopes : Dict[str, float] = None) -> None:
  writer = csv.writer(stream, lineterminator="\n")
  writer.writerow(BENCH_HEADER)
  for record in records:
    writer.writerow(astuple(record))
  if slopes is not None:
    writer.writerow(SLOPE_HEADER)
    for kernel, slope in slopes.items():
      writer.writerow((kernel, f"{slope:.6f}"))
