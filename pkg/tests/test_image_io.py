# Licensed under the GPL. See License.txt in the project root for license information.

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from taylorsr.errors import ShapeError
from taylorsr.image_io import from_uint8, list_images, read_ppm, to_uint8, write_ppm


def test_ppm_is_bit_exact(tmp_path, rng):
  pixels = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
  path = str(tmp_path / "nested" / "a.ppm")
  write_ppm(path, from_uint8(pixels))
  with open(path, "rb") as f:
    assert f.read(2) == b"P6"
  assert_array_equal(to_uint8(read_ppm(path)), pixels)


def test_to_uint8_clamps_and_rounds():
  image = np.array([-0.5, 0.5 / 255.0, 1.7]).reshape(1, 1, 3).repeat(3, axis=0)
  assert_array_equal(to_uint8(image)[0, :, 0], [0, 0, 255])
  with pytest.raises(ShapeError):
    to_uint8(np.zeros((4, 2, 2)))


def test_list_images(tmp_path):
  for name in ("b.ppm", "a.ppm", "notes.txt"):
    (tmp_path / name).write_bytes(b"")
  assert [p.rsplit("/", 1)[-1] for p in list_images(str(tmp_path))] == ["a.ppm", "b.ppm"]
  with pytest.raises(FileNotFoundError):
    list_images(str(tmp_path / "missing"))
