# Licensed under the GPL. See License.txt in the project root for license information.

"""
Registry of gradient checks covering every differentiable operation, from single primitives to
whole networks. A check builder receives a seeded generator and returns an objective for
grad_check together with the parameters (inputs included) whose gradients are compared.
"""

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .attention import EigenExtractor, FactorizedBlock, NlaUnit, SteaUnit, TaylorOrder
from .conv_ops import (ChannelAttention, ChannelLayerNorm, Conv3x3, DepthwiseConv, Gdfn, PointwiseConv,
                       depthwise_conv2d, depthwise_conv2d_backward, pixel_shuffle, pixel_unshuffle)
from .errors import CheckFailure
from .grad_check import DEFAULT_EPSILON, DEFAULT_TOLERANCE, Objective, ProjectedObjective, grad_check
from .mlfr import MlfrBlock
from .networks import Adapter, BlockOptions, Fusion, LabNet, LabNetConfig, LsteaBlock, RealNet, RealNetConfig
from .tensor_util import (Module, Param, gelu, gelu_backward, matmul, matmul_backward, relu, relu_backward,
                          row_softmax, row_softmax_backward, sigmoid, sigmoid_backward)

logger = logging.getLogger(__name__)

Builder = Callable[[np.random.Generator], Tuple[Objective, List[Param]]]

CHECK_CHANNELS = 4
CHECK_MAP = (CHECK_CHANNELS, 6, 6)
NETWORK_COORDS = 3
GATE_FLOOR = 0.05
REPORT_HEADER = ("op", "max_rel_error", "status")


@dataclass
class CheckResult:
  name : str
  max_error : float
  tolerance : float

  @property
  def passed(self) -> bool:
    return bool(self.max_error <= self.tolerance)


  ################################################################
  #####################  Builder factories  ######################
  ################################################################

def _projection_seed(rng : np.random.Generator) -> int:
  return int(rng.integers(0, 2 ** 31))


def _tracked_forward(gate : Module,
                    calls : List[Module]) -> Callable:
  forward = type(gate).forward

  def run(*args, **kwargs):
    calls.append(gate)
    return forward(gate, *args, **kwargs)
  return run


def open_relu_gates(module : Module,
                    forward : Callable[[], object],
                    floor : float = GATE_FLOOR) -> int:
  """
  Adjusts the squeeze layers of module (eigenvalue extractors and channel attention) until every
  ReLU inside them is active for the inputs captured by forward. Below a closed ReLU every gradient
  is zero.

  Gates are opened in execution order. Opening one only changes what runs after it, so every pass
  fixes the first closed gate for good.

  :return: Number of forward passes that moved a gate.
  """
  gates = [m for m in module.modules() if isinstance(m, (EigenExtractor, ChannelAttention))]
  calls : List[Module] = []
  for gate in gates:
    gate.forward = _tracked_forward(gate, calls)
  moved = 0
  try:
    for _ in range(len(gates) + 1):
      calls.clear()
      forward()
      if next((gate for gate in calls if gate.open_gates(floor)), None) is None:
        break
      moved += 1
  finally:
    for gate in gates:
      del gate.forward
  return moved


def _function_check(forward : Callable, backward : Callable, *shapes : Sequence[int]) -> Builder:
  """
  Check of a parameter-free function of one or more inputs.
  backward(d_out, *inputs) returns one gradient per input.
  """
  def builder(rng : np.random.Generator):
    inputs = [Param(rng.uniform(-1.0, 1.0, size=shape), f"input{i}") for i, shape in enumerate(shapes)]

    def run_backward(d_out):
      grads = backward(d_out, *[p.value for p in inputs])
      for param, grad in zip(inputs, grads if isinstance(grads, tuple) else (grads,)):
        param.accumulate(grad)

    objective = ProjectedObjective(lambda: forward(*[p.value for p in inputs]), run_backward, _projection_seed(rng))
    return objective, inputs
  return builder


def _module_check(make : Callable[[np.random.Generator], Module],
                  *shapes : Sequence[int],
                  check_inputs : bool = True,
                  input_range : Tuple[float, float] = (-1.0, 1.0),
                  **forward_kwargs) -> Builder:
  """
  Check of a module's parameters and, unless check_inputs is off, of the gradient it returns
  for each input.
  """
  def builder(rng : np.random.Generator):
    module = make(rng)
    inputs = [Param(rng.uniform(*input_range, size=shape), f"input{i}") for i, shape in enumerate(shapes)]
    open_relu_gates(module, lambda: module.forward(*[p.value for p in inputs], **forward_kwargs))

    def run_backward(d_out):
      grads = module.backward(*d_out) if isinstance(d_out, tuple) else module.backward(d_out)
      if check_inputs:
        for param, grad in zip(inputs, grads if isinstance(grads, tuple) else (grads,)):
          param.accumulate(grad)

    objective = ProjectedObjective(lambda: module.forward(*[p.value for p in inputs], **forward_kwargs),
                                   run_backward, _projection_seed(rng))
    return objective, (inputs if check_inputs else []) + module.params()
  return builder


  ################################################################
  ########################  Suite class  #########################
  ################################################################

class GradCheckSuite:
  """
  Ordered collection of named gradient checks.

  :param tolerance: Largest accepted relative error.
  :param coords: When set, overrides the per-check number of sampled coordinates per parameter.
  :param seed: Base seed; check i is built from ``seed ^ i``.
  """
  def __init__(self,
               tolerance : float = DEFAULT_TOLERANCE,
               epsilon : float = DEFAULT_EPSILON,
               coords : int = None,
               seed : int = 0):
    self.tolerance = tolerance
    self.epsilon = epsilon
    self.coords = coords
    self.seed = seed
    self._checks : Dict[str, Tuple[Builder, Optional[int]]] = {}

  @property
  def names(self) -> List[str]:
    return list(self._checks.keys())

  def register_check(self,
                     name : str,
                     builder : Builder,
                     coords : int = None) -> None:
    """
    :param name: Name reported for the check.
    :param builder: Callable building (objective, params) from a seeded generator.
    :param coords: Default number of sampled coordinates per parameter, all when None.
    :raises ValueError: If the name is empty or already registered.
    """
    if not name or builder is None:
      raise ValueError("Gradient check name and builder cannot be None.")
    if name in self._checks:
      raise ValueError(f"Gradient check {name!r} is already registered.")
    self._checks[name] = (builder, coords)

  def build(self,
            name : str) -> Tuple[Objective, List[Param]]:
    """
    :raises KeyError: If no check of that name is registered.
    :return: Objective and checked parameters of the check, built from its seed.
    """
    if name not in self._checks:
      raise KeyError(f"Gradient check {name!r} not recognised. Registered checks include:\n{self.names}")
    return self._checks[name][0](np.random.default_rng(self.seed ^ self.names.index(name)))

  def run_check(self,
                name : str) -> CheckResult:
    objective, params = self.build(name)
    index = self.names.index(name)
    coords = self._checks[name][1]
    error = grad_check(objective, params, self.epsilon,
                       coords=self.coords if self.coords is not None else coords,
                       seed=self.seed ^ index)
    result = CheckResult(name, error, self.tolerance)
    logger.info("%-20s max relative error %.3e %s", name, error, "ok" if result.passed else "FAILED")
    return result

  def run(self,
          only : Sequence[str] = None) -> List[CheckResult]:
    names = list(only) if only else self.names
    return [self.run_check(name) for name in names]


def verify(results : Sequence[CheckResult]) -> None:
  """
  :raises CheckFailure: Naming the first check above its tolerance.
  """
  for result in results:
    if not result.passed:
      raise CheckFailure(f"Gradient check of {result.name} failed: max relative error "
                         f"{result.max_error:.3e} exceeds {result.tolerance:.0e}.")


def write_report(results : Sequence[CheckResult],
                 stream : TextIO) -> None:
  writer = csv.writer(stream, lineterminator="\n")
  writer.writerow(REPORT_HEADER)
  for result in results:
    writer.writerow((result.name, f"{result.max_error:.3e}", "ok" if result.passed else "FAILED"))


  ################################################################
  ######################  Default checks  ########################
  ################################################################

def _small_labnet(rng : np.random.Generator) -> LabNet:
  return LabNet(LabNetConfig(channels=CHECK_CHANNELS, scale=2, patch=16), rng)


def _small_realnet(rng : np.random.Generator) -> RealNet:
  cfg = RealNetConfig(channels=CHECK_CHANNELS, scale=2, modules=2, alpha=(0.8, 1.0), beta=(1.2, 0.6), patch=16)
  return RealNet(cfg, rng)


def default_suite(tolerance : float = DEFAULT_TOLERANCE,
                  coords : int = None,
                  seed : int = 0) -> GradCheckSuite:
  """
  Every differentiable operation of the package, primitives first and whole networks last.
  """
  c = CHECK_CHANNELS
  tokens = CHECK_MAP[1] * CHECK_MAP[2]
  suite = GradCheckSuite(tolerance, coords=coords, seed=seed)

  suite.register_check("matmul", _function_check(matmul, lambda d, a, b: matmul_backward(a, b, d), (5, 4), (4, 3)))
  suite.register_check("row_softmax", _function_check(row_softmax,
                                                      lambda d, a: row_softmax_backward(row_softmax(a), d), (4, 6)))
  suite.register_check("relu", _function_check(relu, lambda d, x: relu_backward(x, d), (5, 5)))
  suite.register_check("gelu", _function_check(gelu, lambda d, x: gelu_backward(x, d), (5, 5)))
  suite.register_check("sigmoid", _function_check(sigmoid, lambda d, x: sigmoid_backward(sigmoid(x), d), (5, 5)))
  suite.register_check("pixel_shuffle", _function_check(lambda x: pixel_shuffle(x, 2),
                                                        lambda d, x: pixel_unshuffle(d, 2), (8, 3, 3)))
  suite.register_check("dilated_dwc", _function_check(lambda x, w: depthwise_conv2d(x, w, 2),
                                                      lambda d, x, w: depthwise_conv2d_backward(x, w, 2, d),
                                                      CHECK_MAP, (c, 3, 3)))

  suite.register_check("depthwise_conv", _module_check(lambda r: DepthwiseConv(c, 5, rng=r), CHECK_MAP))
  suite.register_check("pointwise_conv", _module_check(lambda r: PointwiseConv(c, 3, bias=True, rng=r), CHECK_MAP))
  suite.register_check("conv3x3", _module_check(lambda r: Conv3x3(c, 3, rng=r), CHECK_MAP))
  suite.register_check("conv3x3_stride2", _module_check(lambda r: Conv3x3(c, 3, stride=2, rng=r), CHECK_MAP))
  suite.register_check("layer_norm", _module_check(lambda r: ChannelLayerNorm(c), CHECK_MAP))
  suite.register_check("channel_attention", _module_check(lambda r: ChannelAttention(c, r), CHECK_MAP))
  suite.register_check("gdfn", _module_check(lambda r: Gdfn(c, rng=r), CHECK_MAP))
  suite.register_check("eigen_extractor", _module_check(lambda r: EigenExtractor(c, r), (tokens, c)))
  suite.register_check("factorized_block", _module_check(lambda r: FactorizedBlock(c, r), (tokens, c)))

  suite.register_check("ftea_unit", _module_check(lambda r: SteaUnit(c, tokens, TaylorOrder.FTEA, False, r), CHECK_MAP))
  suite.register_check("stea_unit", _module_check(lambda r: SteaUnit(c, tokens, TaylorOrder.STEA, True, r), CHECK_MAP))
  suite.register_check("ttea_unit", _module_check(lambda r: SteaUnit(c, tokens, TaylorOrder.TTEA, True, r), CHECK_MAP))
  suite.register_check("nla_unit", _module_check(lambda r: NlaUnit(c, r), CHECK_MAP))
  suite.register_check("mlfr", _module_check(lambda r: MlfrBlock(c, "v3", r), CHECK_MAP))
  suite.register_check("lstea_block", _module_check(lambda r: LsteaBlock(c, tokens, BlockOptions(), r), CHECK_MAP))
  suite.register_check("adapter", _module_check(lambda r: Adapter(c, r), CHECK_MAP, CHECK_MAP, alpha=0.7, beta=1.3))
  suite.register_check("fusion", _module_check(lambda r: Fusion(c, 2, r), CHECK_MAP, CHECK_MAP, alpha=0.9, beta=0.4))

  suite.register_check("labnet", _module_check(_small_labnet, (3, 8, 8), check_inputs=False, input_range=(0.0, 1.0)),
                       coords=NETWORK_COORDS)
  suite.register_check("realnet", _module_check(_small_realnet, (3, 8, 8), check_inputs=False, input_range=(0.0, 1.0)),
                       coords=NETWORK_COORDS)
  return suite
