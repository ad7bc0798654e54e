"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes, so raising the right class is
part of the public contract: format problems (unreadable files) are kept
apart from contract problems (valid files combined in invalid ways) and
from numeric divergence during training.
"""


class SkillMergeError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SkillMergeError):
    """Tensor shapes are incompatible for the requested operation."""

    def __init__(self, message: str, *shapes):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class NonFiniteError(SkillMergeError):
    """A tensor that must be finite contains NaN or Inf."""


class ContractError(SkillMergeError):
    """A precondition on inputs or configuration is violated."""


class DegenerateBatchError(ContractError):
    """A loss mask selects no positions, so the batch carries no signal."""


class FormatError(SkillMergeError):
    """A file on disk does not follow its declared format."""


class ContainerFormatError(FormatError):
    """The tensor-container byte layout is malformed."""


class AdapterFormatError(FormatError):
    """A checkpoint parses as a container but not as a valid adapter."""


class MergeError(ContractError):
    """Adapters cannot be merged as requested (layer mismatch, bad density...)."""


class DivergenceError(SkillMergeError):
    """Training produced a non-finite loss."""
