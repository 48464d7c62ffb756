"""Exception hierarchy shared by every workbench module.

Contract errors are caller mistakes (bad shapes, out-of-range layers, malformed
inputs) and map to CLI exit code 2. Checkpoint and I/O problems map to exit
code 1.
"""

from __future__ import annotations


class WorkbenchError(Exception):
    """Base class for all errors raised by the workbench."""


class ContractError(WorkbenchError, ValueError):
    """A precondition of an operation was violated."""


class ShapeError(ContractError):
    """Tensor dimensions do not agree."""


class LayerRangeError(ContractError):
    """A layer index lies outside the range an operation accepts."""


class CapacityError(ContractError):
    """A sequence or cache would exceed ``max_seq`` positions."""


class EncodeError(ContractError):
    """Text contains a character outside the fixed vocabulary."""


class GenerationError(ContractError):
    """A synthetic sample cannot be generated with the requested parameters."""


class CheckpointFormatError(WorkbenchError, OSError):
    """A checkpoint file is truncated or not in the expected container format."""


class NonFiniteError(WorkbenchError, ArithmeticError):
    """A kernel produced NaN or Inf while finite checking was enabled."""


class TrainingDivergedError(WorkbenchError, RuntimeError):
    """The training loss became non-finite."""
