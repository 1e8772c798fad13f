# Licensed under the GPL. See License.txt in the project root for license information.

import pytest

from taylorsr.config import (DEFAULT_SEED, SEED_ENV_VAR, load_config, parse_config, parse_config_text, resolve_seed)
from taylorsr.errors import ConfigurationError
from taylorsr.networks import LabNetConfig, RealNetConfig

LABNET_TEXT = """
# desk LabNet
model = labnet
scale = 3
channels = 8
blocks = 1,2,1,1,2,1
mlfr.variant = v2   # two branches
taylor.order = 3
dwc = off
seed = 42
iters = 50
"""


def test_parse_config_text_skips_comments():
  values = parse_config_text("# nothing\n\nscale = 4\n")
  assert values == { "scale" : "4" }


@pytest.mark.parametrize("text,message", [("scale 4", "key = value"),
                                          ("colour = red", "Unknown"),
                                          ("scale = 2\nscale = 3", "twice")])
def test_parse_config_text_errors(text, message):
  with pytest.raises(ConfigurationError, match=message):
    parse_config_text(text)


def test_labnet_config():
  cfg = parse_config(LABNET_TEXT)
  assert cfg.model == "labnet"
  assert isinstance(cfg.network, LabNetConfig)
  assert cfg.network.blocks == (1, 2, 1, 1, 2, 1)
  assert cfg.network.scale == cfg.degradation.scale == 3
  assert cfg.network.options.mlfr_variant == "v2"
  assert cfg.network.options.taylor_order == 3
  assert cfg.network.options.use_dwc is False
  assert cfg.seed == 42
  assert cfg.train.iters == 50
  assert cfg.train.lr == 4e-4
  assert cfg.text == LABNET_TEXT


def test_realnet_defaults():
  cfg = parse_config("model = realnet\nmodules = 2\nalpha1 = 0.5\nbeta2 = 0.0\niters = 300\n")
  assert isinstance(cfg.network, RealNetConfig)
  assert cfg.network.alpha == (0.5, 1.0)
  assert cfg.network.beta == (1.0, 0.0)
  assert cfg.train.lr == 1e-3
  assert cfg.train.halve_every == 150


@pytest.mark.parametrize("text", ["model = gan",
                                  "loss.perc = 1.0",
                                  "loss.adv = 0.1",
                                  "channels = many",
                                  "dwc = maybe",
                                  "blocks = 1,1,1",
                                  "model = realnet\nblocks = 1,2",
                                  "scale = 5",
                                  "noise_sigma = -1"])
def test_invalid_configs(text):
  with pytest.raises(ConfigurationError):
    parse_config(text)


def test_zero_auxiliary_losses_are_accepted():
  assert parse_config("loss.l1 = 1\nloss.perc = 0\nloss.adv = 0\n").train.loss_weights == (1.0, 0.0, 0.0)


def test_load_config(tmp_path):
  path = tmp_path / "run.cfg"
  path.write_text(LABNET_TEXT)
  assert load_config(str(path)).network.channels == 8


def test_seed_resolution_order():
  environ = { SEED_ENV_VAR : "17" }
  assert resolve_seed(3, 9, environ) == 3
  assert resolve_seed(None, 9, environ) == 9
  assert resolve_seed(None, None, environ) == 17
  assert resolve_seed(None, None, {}) == DEFAULT_SEED
  with pytest.raises(ConfigurationError):
    resolve_seed(None, None, { SEED_ENV_VAR : "x" })
