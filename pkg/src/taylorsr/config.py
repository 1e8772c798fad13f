# Licensed under the GPL. See License.txt in the project root for license information.

"""
Line based ``key = value`` run configuration. ``#`` starts a comment, blank lines are ignored and
every key must be one of KNOWN_KEYS. The parsed values are turned into the dataclasses the rest of
the package consumes.
"""

import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Union

from .degradation import DegradationSpec
from .errors import ConfigurationError
from .networks import BlockOptions, LabNetConfig, RealNetConfig
from .training import TrainConfig

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "TAYLOR_ATTN_SEED"
DEFAULT_SEED = 0
MODELS = ("labnet", "realnet")
REALNET_LR = 1e-3

KNOWN_KEYS = ("model", "scale", "channels", "blocks", "modules",
              "alpha1", "alpha2", "alpha3", "alpha4", "beta1", "beta2", "beta3", "beta4",
              "mlfr.variant", "taylor.order", "attention", "mlfr", "dwc", "global_skip",
              "seed", "patch", "lr", "halve_every", "iters", "batch", "checkpoint_every", "log_every",
              "noise_sigma", "degradation.order", "loss.l1", "loss.perc", "loss.adv", "data", "out")

_SWITCHES = { "on" : True, "off" : False, "true" : True, "false" : False, "1" : True, "0" : False }


@dataclass
class RunConfig:
  model : str = "labnet"
  network : Union[LabNetConfig, RealNetConfig] = field(default_factory=LabNetConfig)
  train : TrainConfig = field(default_factory=TrainConfig)
  degradation : DegradationSpec = field(default_factory=DegradationSpec)
  seed : Optional[int] = None
  data : Optional[str] = None
  out : Optional[str] = None
  text : str = ""


def parse_config_text(text : str) -> Dict[str, str]:
  """
  :raises ConfigurationError: On a line without ``=``, an unknown key or a repeated key.
  :return: Raw string values keyed by name, in file order.
  """
  values : Dict[str, str] = {}
  for number, line in enumerate(text.splitlines(), start=1):
    line = line.split("#", 1)[0].strip()
    if not line:
      continue
    if "=" not in line:
      raise ConfigurationError(f"Line {number} is not of the form key = value: {line!r}")
    key, value = (part.strip() for part in line.split("=", 1))
    if key not in KNOWN_KEYS:
      raise ConfigurationError(f"Unknown configuration key {key!r} on line {number}.")
    if key in values:
      raise ConfigurationError(f"Configuration key {key!r} is set twice (line {number}).")
    values[key] = value
  return values


def _typed(values : Mapping[str, str],
           key : str,
           cast,
           default):
  if key not in values:
    return default
  try:
    return cast(values[key])
  except ValueError as e:
    raise ConfigurationError(f"Cannot read {key} = {values[key]!r} as {cast.__name__}.") from e


def _switch(value : str) -> bool:
  if value.lower() not in _SWITCHES:
    raise ValueError(value)
  return _SWITCHES[value.lower()]


def _int_tuple(value : str):
  return tuple(int(v) for v in value.split(",") if v.strip())


def build_run_config(values : Mapping[str, str],
                     text : str = "") -> RunConfig:
  """
  Turns parsed key/value pairs into validated configuration dataclasses.

  :raises ConfigurationError: If a value has the wrong type, breaks a range constraint or enables
      a loss term other than l1.
  """
  model = values.get("model", "labnet")
  if model not in MODELS:
    raise ConfigurationError(f"Model must be one of {MODELS}, got {model!r}.")
  scale = _typed(values, "scale", int, 2)
  channels = _typed(values, "channels", int, 16)
  patch = _typed(values, "patch", int, 32)
  global_skip = _typed(values, "global_skip", _switch, True)
  options = BlockOptions(attention=values.get("attention", "stea"),
                         taylor_order=_typed(values, "taylor.order", int, 2),
                         use_dwc=_typed(values, "dwc", _switch, True),
                         use_mlfr=_typed(values, "mlfr", _switch, True),
                         mlfr_variant=values.get("mlfr.variant", "v3"))

  if model == "labnet":
    network = LabNetConfig(channels=channels, scale=scale, patch=patch, global_skip=global_skip, options=options,
                           blocks=_typed(values, "blocks", _int_tuple, (1, 1, 1, 1, 1, 1)))
  else:
    modules = _typed(values, "modules", int, 4)
    blocks = _typed(values, "blocks", _int_tuple, (1,))
    if len(blocks) != 1:
      raise ConfigurationError(f"RealNet takes one block count per module, got {values['blocks']!r}.")
    alpha = tuple(_typed(values, f"alpha{i + 1}", float, 1.0) for i in range(modules))
    beta = tuple(_typed(values, f"beta{i + 1}", float, 1.0) for i in range(modules))
    network = RealNetConfig(channels=channels, scale=scale, modules=modules, blocks=blocks[0],
                            alpha=alpha, beta=beta, patch=patch, global_skip=global_skip, options=options)
  network.validate()

  loss_weights = (_typed(values, "loss.l1", float, 1.0),
                  _typed(values, "loss.perc", float, 0.0),
                  _typed(values, "loss.adv", float, 0.0))
  for name, weight in zip(("loss.perc", "loss.adv"), loss_weights[1:]):
    if weight != 0.0:
      raise ConfigurationError(f"{name} = {weight} is out of scope, only the l1 loss is trained.")
  iters = _typed(values, "iters", int, TrainConfig.iters)
  default_lr = REALNET_LR if model == "realnet" else TrainConfig.lr
  default_halve = max(1, iters // 2) if model == "realnet" else TrainConfig.halve_every
  train = TrainConfig(lr=_typed(values, "lr", float, default_lr),
                      halve_every=_typed(values, "halve_every", int, default_halve),
                      iters=iters,
                      batch=_typed(values, "batch", int, TrainConfig.batch),
                      loss_weights=loss_weights,
                      checkpoint_every=_typed(values, "checkpoint_every", int, TrainConfig.checkpoint_every),
                      log_every=_typed(values, "log_every", int, TrainConfig.log_every)).validate()

  degradation = DegradationSpec(scale=scale,
                                noise_sigma=_typed(values, "noise_sigma", float, 0.0),
                                order=_typed(values, "degradation.order", int, 1)).validate()
  return RunConfig(model=model, network=network, train=train, degradation=degradation,
                   seed=_typed(values, "seed", int, None),
                   data=values.get("data"), out=values.get("out"), text=text)


def parse_config(text : str) -> RunConfig:
  return build_run_config(parse_config_text(text), text)


def load_config(path : str) -> RunConfig:
  with open(path) as f:
    text = f.read()
  logger.debug("Read configuration %s", path)
  return parse_config(text)


def resolve_seed(flag : Optional[int] = None,
                 configured : Optional[int] = None,
                 environ : Mapping[str, str] = None) -> int:
  """
  First of: the --seed flag, the config file seed, the TAYLOR_ATTN_SEED variable, DEFAULT_SEED.

  :raises ConfigurationError: If the environment variable is not an integer.
  """
  if flag is not None:
    return int(flag)
  if configured is not None:
    return int(configured)
  environ = os.environ if environ is None else environ
  if environ.get(SEED_ENV_VAR):
    try:
      return int(environ[SEED_ENV_VAR])
    except ValueError as e:
      raise ConfigurationError(f"{SEED_ENV_VAR} must be an integer, got {environ[SEED_ENV_VAR]!r}.") from e
  return DEFAULT_SEED
