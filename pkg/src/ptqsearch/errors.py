"""Exception types shared across the toolkit."""


class DimensionError(ValueError):
    """Operand shapes or geometry do not line up."""


class FormatError(Exception):
    """On-disk artifact (manifest, blob, plan) is malformed."""


class ArgumentError(ValueError):
    """A parameter is outside its documented domain."""


class DegenerateScaleError(ValueError):
    """Quantization scale would be zero (e.g. all-zero tensor)."""
