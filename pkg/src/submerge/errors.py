"""Exception types shared across the package.

Every error raised by the library derives from SubmergeError so callers
(and the CLI) can distinguish our failures from genuine bugs.
"""

from __future__ import annotations


class SubmergeError(Exception):
    """Base class for all library errors."""


class FormatError(SubmergeError):
    """Archive bytes violate the container format."""


class TruncationError(SubmergeError):
    """Archive file ends before the declared payload does."""


class DataError(SubmergeError):
    """Non-finite tensor values at an I/O boundary."""


class CompatError(SubmergeError):
    """Archives disagree on tensor names or shapes."""


class CoeffError(SubmergeError):
    """Combination coefficients missing or of the wrong length."""


class IoError(SubmergeError):
    """Underlying file read/write failure."""


class BindError(SubmergeError):
    """Archive does not supply the parameters a model config requires."""


class InputError(SubmergeError):
    """Invalid tokens, sequence lengths, datasets, or tap requests."""


class PlanError(SubmergeError):
    """Unknown submodule group or out-of-range head/layer index."""


class SampleError(SubmergeError):
    """Dataset smaller than the requested sample count."""


class DegenerateError(SubmergeError):
    """Every sample was filtered out of a metric or Gram computation."""


class NumericError(SubmergeError):
    """Non-finite values reached the solver."""


class ParamError(SubmergeError):
    """Invalid merge hyperparameter (e.g. drop probability >= 1)."""


class ConfigError(SubmergeError):
    """Invalid run configuration handed to the CLI."""
