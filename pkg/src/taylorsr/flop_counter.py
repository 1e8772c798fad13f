# Licensed under the GPL. See License.txt in the project root for license information.

from contextlib import contextmanager
from threading import RLock, local
from typing import Iterator, Optional


class FlopCounter:
  """
  Accumulates multiply-add counts reported by the instrumented operations.
  A counter only sees operations executed while it is the active counter of the calling thread,
  see :func:`counting`.
  """
  def __init__(self,
               enabled : bool = True):
    self._lock = RLock()
    self._multiply_adds = 0
    self.enabled = enabled

  @property
  def multiply_adds(self) -> int:
    with self._lock:
      return self._multiply_adds

  def add(self,
          count : int) -> None:
    """
    Adds a number of multiply-adds to the accumulator. Ignored while the counter is disabled.

    :param count: Non-negative number of multiply-adds.
    :raises ValueError: If count is negative.
    """
    if count < 0:
      raise ValueError(f"Multiply-add count must be non-negative, got {count}.")
    with self._lock:
      if self.enabled:
        self._multiply_adds += int(count)

  def reset(self) -> None:
    with self._lock:
      self._multiply_adds = 0


_active = local()


def _stack() -> list:
  if not hasattr(_active, "counters"):
    _active.counters = []
  return _active.counters


def active_counter() -> Optional[FlopCounter]:
  stack = _stack()
  return stack[-1] if stack else None


@contextmanager
def counting(counter : FlopCounter = None) -> Iterator[FlopCounter]:
  """
  Makes a counter the active counter of the current thread for the duration of the block.
  Nested blocks shadow the outer counter.

  :param counter: Counter to activate, a fresh one is created when None.
  :return: The active counter.
  """
  counter = counter if counter is not None else FlopCounter()
  stack = _stack()
  stack.append(counter)
  try:
    yield counter
  finally:
    stack.pop()


def record_flops(count : int) -> None:
  counter = active_counter()
  if counter is not None:
    counter.add(count)
