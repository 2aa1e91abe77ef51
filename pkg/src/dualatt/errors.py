"""Exception types shared across the package.

Each subsystem raises the most specific class that applies; the CLI maps
these onto distinct process exit codes.
"""


class DualAttError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(DualAttError):
    """Tensor shapes do not conform; the message names the offending axes."""


class LayoutError(DualAttError):
    """Channel layout violates the anchor-major-within-class contract."""


class ConfigError(DualAttError):
    """Invalid or inconsistent run configuration."""


class ContractError(DualAttError):
    """A caller-side precondition was violated (non-scalar loss, etc.)."""


class LabelError(DualAttError):
    """Image-level labels contain values outside {0, 1}."""


class ParseError(DualAttError):
    """A structured-text file (annotations, config) could not be parsed."""


class AttachmentError(DualAttError):
    """A detector does not expose the surface the supervision head needs."""


class NumericError(DualAttError):
    """Training aborted on a non-finite loss; names the first bad node."""


class ConvergenceError(DualAttError):
    """An iterative solver failed to converge within its iteration cap."""


class DataError(DualAttError):
    """A dataset, split, or checkpoint file is missing or inconsistent."""


class FingerprintError(DualAttError):
    """Config fingerprints of two artifacts disagree."""
