"""Exception hierarchy shared across the package.

The CLI maps these onto its exit-code contract: missing inputs and
malformed files exit 2, invalid parameters and configs exit 3, anything
else exits 1.
"""


class PatchcertError(Exception):
    """Base class for all package errors."""


class ParameterError(PatchcertError, ValueError):
    """A caller-supplied parameter is out of range or inconsistent."""


class DimensionError(ParameterError):
    """Tensor shapes do not line up for the requested operation."""


class InputError(PatchcertError, ValueError):
    """Input data (not a scalar parameter) violates a precondition."""


class EmptyVotesError(InputError):
    """A vote aggregate with zero total cannot produce a prediction."""


class FormatError(InputError):
    """An on-disk artifact does not match its declared binary format."""


class ConfigError(ParameterError):
    """Loaded components disagree (e.g. checkpoint vs dataset shape)."""


class BudgetError(PatchcertError, RuntimeError):
    """An exhaustive enumeration would exceed its safety budget."""


class UsageError(PatchcertError, RuntimeError):
    """An API was called out of order (e.g. backward before forward)."""


class DivergenceError(PatchcertError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index
