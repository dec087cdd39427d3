"""Exception taxonomy shared across the package.

Every error raised on a user-reachable path carries enough context
(shapes, names, byte offsets) to act on without a debugger.
"""


class GraphflowError(Exception):
    """Base class for all package errors."""


class DimensionError(GraphflowError):
    """Shapes or extents are incompatible with the requested operation."""


class ContractError(GraphflowError):
    """An API precondition was violated (wrong call order, bad argument)."""


class FormatError(GraphflowError):
    """A serialized payload (flow file, image, checkpoint) is malformed."""


class ConfigError(GraphflowError):
    """A configuration file or flag value is unusable."""


class NumericError(GraphflowError):
    """A numeric invariant broke at runtime (non-finite loss, overflow)."""
