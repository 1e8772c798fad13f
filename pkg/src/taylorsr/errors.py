# Licensed under the GPL. See License.txt in the project root for license information.

"""
Exceptions raised across taylorsr. Every error a caller is expected to handle lives here
so the command line can map them onto exit codes in one place.
"""

class ShapeError(ValueError):
  pass

class NumericError(ArithmeticError):
  pass

class DeterminismError(Exception):
  pass

class SymmetryError(ValueError):
  pass

class ConvergenceError(Exception):
  pass

class OverflowGuardError(ArithmeticError):
  pass

class ConfigurationError(ValueError):
  pass

class EmptyInputError(ValueError):
  pass

class SizeError(ValueError):
  pass

class LoadError(Exception):
  pass

class TrainingError(Exception):
  pass

class UsageError(Exception):
  pass

class CheckFailure(Exception):
  pass
