# Licensed under the GPL. See License.txt in the project root for license information.

import csv
import io
import os

import numpy as np
import pytest

from taylorsr import command_util
from taylorsr.command_util import Bench, TaylorCommand
from taylorsr.degradation import synthesize_hr_corpus
from taylorsr.errors import UsageError
from taylorsr.gradcheck_suite import GradCheckSuite, _function_check
from taylorsr.image_io import read_ppm, write_ppm
from taylorsr.runner import EXIT_FAILURE, EXIT_OK, EXIT_USAGE, TaylorRunner, main


def _run(*argv):
  stdout = io.StringIO()
  code = main(["--quiet"] + [str(a) for a in argv], stdout=stdout)
  return code, stdout.getvalue()


def _rows(text):
  return list(csv.reader(io.StringIO(text)))


def test_registry():
  runner = TaylorRunner()
  assert "bench" in runner.command_names and "make-data" in runner.command_names
  with pytest.raises(ValueError):
    runner.register_command("bench", Bench)
  with pytest.raises(UsageError):
    runner.run_command("plot")
  assert "kernels" in runner.get_command_args("bench")


def test_unimplemented_command():
  runner = TaylorRunner()
  runner.register_command("noop", TaylorCommand)
  with pytest.raises(NotImplementedError):
    runner.run_command("noop")


def test_usage_exit_codes():
  assert main(["--help"]) == EXIT_OK
  assert main([]) == EXIT_USAGE
  assert _run("bench", "--kernel", "softmax")[0] == EXIT_USAGE
  assert _run("bench", "--n", "abc")[0] == EXIT_USAGE
  assert _run("gradcheck", "--only", "nothing")[0] == EXIT_USAGE
  assert _run("make-data", "somewhere")[0] == EXIT_USAGE


def test_bench_command():
  code, out = _run("--seed", 3, "bench", "--kernel", "nla,stea", "--d", 8, "--n", "16,64", "--fit")
  assert code == EXIT_OK
  rows = _rows(out)
  assert rows[0] == ["kernel", "n", "d", "flops", "wall_ns", "seed"]
  assert [row[:3] for row in rows[1:5]] == [["nla", "16", "8"], ["nla", "64", "8"], ["stea", "16", "8"], ["stea", "64", "8"]]
  assert all(row[5] == "3" for row in rows[1:5])
  assert rows[5] == ["kernel", "slope"]
  assert [row[0] for row in rows[6:]] == ["nla", "stea"]


def test_gradcheck_command():
  code, out = _run("gradcheck", "--only", "matmul,relu")
  assert code == EXIT_OK
  assert [row[0] for row in _rows(out)] == ["op", "matmul", "relu"]


def test_gradcheck_failure_exit(monkeypatch):
  def corrupted_suite(coords=None, seed=0):
    suite = GradCheckSuite(coords=coords, seed=seed)
    suite.register_check("square", _function_check(lambda x: x * x, lambda d, x: d * x, (3, 3)))
    return suite

  monkeypatch.setattr(command_util, "default_suite", corrupted_suite)
  code, out = _run("gradcheck")
  assert code == EXIT_FAILURE
  assert _rows(out)[1][2] == "FAILED"


def test_ablation_orderings():
  code, out = _run("ablation", "--channels", 8, "--size", 8)
  assert code == EXIT_OK
  rows = { row[0] : (int(row[1]), int(row[2])) for row in _rows(out)[1:] }
  params = [rows[name][0] for name in ("ftea", "ftea+dwc", "stea", "ttea")]
  assert params == sorted(set(params))
  assert rows["mlfr-v1"][0] < rows["mlfr-v2"][0] < rows["mlfr-v3"][0]
  assert rows["global-nla"][1] > rows["global-none"][1]


def test_data_train_eval_sr_pipeline(tmp_path):
  data = tmp_path / "data"
  assert _run("--seed", 1, "make-data", data, "--synthetic", 3, "--size", 16, "--noise", 2)[0] == EXIT_OK
  assert len(os.listdir(str(data / "lr"))) == 3

  config = tmp_path / "toy.cfg"
  config.write_text(f"model = labnet\nchannels = 4\npatch = 16\nbatch = 1\niters = 2\nseed = 5\ndata = {data}\n")
  run = tmp_path / "run"
  assert _run("train", config, "--out", run)[0] == EXIT_OK
  with open(str(run / "loss.csv")) as f:
    assert len(f.read().splitlines()) == 3

  code, out = _run("eval", run / "final", data / "hr", "--workers", 2)
  assert code == EXIT_OK
  rows = _rows(out)
  assert rows[0] == ["image", "sigma", "psnr", "ssim"]
  assert len(rows) == 1 + 3 * 8 * 2 + 2
  assert rows[2][0] == "0000@bicubic"
  assert [row[:2] for row in rows[-2:]] == [["mean", "all"], ["mean@bicubic", "all"]]
  assert _run("eval", run / "final", data / "hr", "--workers", 1)[1] == out

  sr = tmp_path / "sr.ppm"
  assert _run("sr", run / "final", data / "lr" / "0000.ppm", sr)[0] == EXIT_OK
  assert read_ppm(str(sr)).shape == (3, 16, 16)
  assert _run("sr", run / "final", data / "lr" / "0000.ppm", sr, "--alpha", "1,1", "--beta", "1,1")[0] == EXIT_USAGE
  knobs = ("--alpha", "1,1,1,1", "--beta", "0,0,0,0")
  assert _run("sr", run / "final", data / "lr" / "0000.ppm", sr, *knobs)[0] == EXIT_USAGE


def test_realnet_sr_knobs(tmp_path):
  config = tmp_path / "real.cfg"
  config.write_text("model = realnet\nchannels = 4\npatch = 16\nbatch = 1\niters = 1\n")
  run = tmp_path / "run"
  assert _run("train", config, "--out", run)[0] == EXIT_OK
  image = tmp_path / "lr.ppm"
  write_ppm(str(image), synthesize_hr_corpus(1, 8, np.random.default_rng(0))[0])
  outputs = []
  for name in ("a.ppm", "b.ppm"):
    path = tmp_path / name
    assert _run("sr", run / "final", image, path, "--alpha", "1,1,1,1", "--beta", "0,0,0,0")[0] == EXIT_OK
    with open(str(path), "rb") as f:
      outputs.append(f.read())
  assert outputs[0] == outputs[1]


def test_failure_exit_codes(tmp_path):
  config = tmp_path / "bad.cfg"
  config.write_text("loss.perc = 1.0\n")
  assert _run("train", config)[0] == EXIT_FAILURE
  assert _run("eval", tmp_path / "missing", tmp_path)[0] == EXIT_FAILURE
  assert _run("train", tmp_path / "missing.cfg")[0] == EXIT_FAILURE


@pytest.mark.parametrize("coords", ["0", "-1"])
def test_gradcheck_rejects_non_positive_coords(coords):
  assert _run("gradcheck", "--only", "matmul", "--coords", coords)[0] == EXIT_USAGE
  with pytest.raises(UsageError):
    TaylorRunner(stdout=io.StringIO()).run_command("gradcheck", only=["matmul"], coords=int(coords))


@pytest.mark.parametrize("argv", [("bench", "--repeats", "0"),
                                  ("ablation", "--channels", "-4"),
                                  ("make-data", "out", "--synthetic", "2", "--workers", "0")])
def test_non_positive_counts_are_usage_errors(argv):
  assert _run(*argv)[0] == EXIT_USAGE


def test_value_errors_are_usage_errors(monkeypatch):
  def bad_normalizer(*args, **kwargs):
    raise ValueError("Normalizer k must be positive.")

  monkeypatch.setattr(command_util, "run_sweep", bad_normalizer)
  code, out = _run("bench", "--kernel", "stea", "--n", "16")
  assert code == EXIT_USAGE
  assert out == ""
