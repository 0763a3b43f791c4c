"""Exception hierarchy shared across the package."""


class SpclError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(SpclError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(SpclError):
    """Misuse of the reverse-mode graph (non-scalar loss, double backward)."""


class ConfigError(SpclError):
    """A configuration value or geometry combination is invalid."""


class MaskRatioError(ConfigError):
    """Mask ratio leaves no contrastive pair."""


class PlanError(SpclError):
    """A partition plan is inconsistent with the tokens it is applied to."""


class DegenerateEmbeddingError(SpclError):
    """A row to be normalized has (numerically) zero norm: representation collapse."""


class ContractError(SpclError):
    """A caller-side contract was violated (non-unit rows, bad pairing)."""


class DataFormatError(SpclError):
    """A file on disk does not conform to its declared format."""


class NumericError(SpclError):
    """A non-finite value appeared where finiteness is required."""
