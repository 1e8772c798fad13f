# Licensed under the GPL. See License.txt in the project root for license information.

"""
Binary tensor records and checkpoint folders.

A record is the magic ``TNSR``, a little-endian u32 rank, rank little-endian u32 dimensions and
the row-major data as little-endian 64-bit reals. A checkpoint folder holds every parameter of a
module as consecutive records in ``weights.tnsr``, a ``manifest.json`` listing (name, shape, offset)
in parameter order, and the ``config.txt`` the module was built from.
"""

import json
import logging
import os
from typing import Dict, List, Tuple

import numpy as np

from .errors import LoadError
from .tensor_util import DTYPE, Module, Tensor

logger = logging.getLogger(__name__)

MAGIC = b"TNSR"
WEIGHTS_FILE = "weights.tnsr"
MANIFEST_FILE = "manifest.json"
CONFIG_FILE = "config.txt"

_U32 = np.dtype("<u4")
_F64 = np.dtype("<f8")


def encode_tensor(tensor : Tensor) -> bytes:
  tensor = np.ascontiguousarray(tensor, dtype=DTYPE)
  header = np.array([tensor.ndim, *tensor.shape], dtype=_U32)
  return MAGIC + header.tobytes() + tensor.astype(_F64).tobytes()


def decode_tensor(buffer : bytes,
                  offset : int = 0) -> Tuple[Tensor, int]:
  """
  Decodes one record starting at offset.

  :raises LoadError: If the magic is wrong or the buffer ends inside the record.
  :return: The tensor and the offset just past its record.
  """
  if buffer[offset:offset + 4] != MAGIC:
    raise LoadError(f"Missing TNSR magic at byte {offset}.")
  offset += 4
  try:
    rank = int(np.frombuffer(buffer, dtype=_U32, count=1, offset=offset)[0])
    offset += 4
    shape = tuple(int(s) for s in np.frombuffer(buffer, dtype=_U32, count=rank, offset=offset))
    offset += 4 * rank
    count = int(np.prod(shape)) if shape else 1
    data = np.frombuffer(buffer, dtype=_F64, count=count, offset=offset)
  except ValueError as e:
    raise LoadError(f"Truncated TNSR record ending at byte {len(buffer)}.") from e
  offset += 8 * count
  return data.astype(DTYPE).reshape(shape), offset


def save_tensor(path : str,
                tensor : Tensor) -> None:
  with open(path, "wb") as f:
    f.write(encode_tensor(tensor))


def load_tensor(path : str) -> Tensor:
  with open(path, "rb") as f:
    tensor, _ = decode_tensor(f.read())
  return tensor


  ################################################################
  ########################  Checkpoints  #########################
  ################################################################

def save_checkpoint(directory : str,
                    module : Module,
                    config_text : str = "") -> None:
  """
  Writes every parameter of a module, in registration order, to a checkpoint folder.

  :param directory: Target folder, created if missing.
  :param module: Module whose parameters are stored.
  :param config_text: Configuration the module was built from, stored verbatim.
  """
  os.makedirs(directory, exist_ok=True)
  manifest : List[Dict] = []
  offset = 0
  with open(os.path.join(directory, WEIGHTS_FILE), "wb") as f:
    for name, param in module.named_params():
      record = encode_tensor(param.value)
      manifest.append({ "name" : name, "shape" : list(param.shape), "offset" : offset })
      f.write(record)
      offset += len(record)
  with open(os.path.join(directory, MANIFEST_FILE), "w") as f:
    json.dump(manifest, f, indent=1)
  with open(os.path.join(directory, CONFIG_FILE), "w") as f:
    f.write(config_text)
  logger.debug("Saved %d tensors to %s", len(manifest), directory)


def read_checkpoint_config(directory : str) -> str:
  path = os.path.join(directory, CONFIG_FILE)
  if not os.path.isfile(path):
    raise LoadError(f"Checkpoint {directory} has no {CONFIG_FILE}.")
  with open(path) as f:
    return f.read()


def load_checkpoint(directory : str,
                    module : Module) -> None:
  """
  Loads a checkpoint folder into an already constructed module, in place.

  :raises LoadError: If files are missing or the stored tensors do not match the module's
      parameters; the message names the first mismatched tensor.
  """
  try:
    with open(os.path.join(directory, MANIFEST_FILE)) as f:
      manifest = json.load(f)
    with open(os.path.join(directory, WEIGHTS_FILE), "rb") as f:
      buffer = f.read()
  except (OSError, json.JSONDecodeError) as e:
    raise LoadError(f"Cannot read checkpoint {directory}: {e}") from e

  expected = list(module.named_params())
  for position, (name, param) in enumerate(expected):
    if position >= len(manifest):
      raise LoadError(f"Checkpoint is missing tensor {name}.")
    entry = manifest[position]
    if entry["name"] != name:
      raise LoadError(f"Tensor mismatch at position {position}: checkpoint has {entry['name']}, model expects {name}.")
    if tuple(entry["shape"]) != param.shape:
      raise LoadError(f"Tensor {name} has shape {tuple(entry['shape'])} in the checkpoint, model expects {param.shape}.")
    value, _ = decode_tensor(buffer, entry["offset"])
    if value.shape != param.shape:
      raise LoadError(f"Tensor {name} is stored with shape {value.shape}, the manifest and model expect {param.shape}.")
    param.value[...] = value
  if len(manifest) > len(expected):
    raise LoadError(f"Checkpoint holds unexpected tensor {manifest[len(expected)]['name']}.")
