"""Exception types shared across the package.

The CLI maps these onto exit codes: ConfigError -> 2, ManifestError -> 3,
DivergenceError -> 4. Everything else is a plain bug.
"""


class CxrFusionError(Exception):
    """Base class for package errors."""


class ShapeError(CxrFusionError):
    """Operands have incompatible or malformed shapes."""


class NumericError(CxrFusionError):
    """A tensor left the finite-float domain (NaN/Inf)."""


class ModeError(CxrFusionError):
    """Model called with the wrong modality combination for its mode."""


class ConfigError(CxrFusionError):
    """Invalid or inconsistent configuration."""


class EncodingError(CxrFusionError):
    """Metadata value cannot be encoded under the active feature config."""


class ManifestError(CxrFusionError):
    """Dataset manifest or image file is missing or corrupt."""


class DivergenceError(CxrFusionError):
    """Training produced a non-finite loss (learning-rate divergence signal)."""
