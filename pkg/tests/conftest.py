# Licensed under the GPL. See License.txt in the project root for license information.

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "src"))


def pytest_addoption(parser):
  parser.addoption("--runslow", action="store_true", default=False, help="Run the long acceptance tests.")


def pytest_configure(config):
  config.addinivalue_line("markers", "slow: long acceptance run, enabled with --runslow")


def pytest_collection_modifyitems(config, items):
  if config.getoption("--runslow"):
    return
  skip_slow = pytest.mark.skip(reason="needs --runslow")
  for item in items:
    if "slow" in item.keywords:
      item.add_marker(skip_slow)


@pytest.fixture
def rng():
  return np.random.default_rng(1234)
