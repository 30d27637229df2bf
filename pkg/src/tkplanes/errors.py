"""Exception types shared across the package."""


class TKPlanesError(Exception):
    """Base class for all package errors."""


class DimensionError(TKPlanesError):
    """Tensor shapes are incompatible for the requested operation."""


class ContractError(TKPlanesError):
    """A caller violated an operation's precondition."""


class ConfigError(TKPlanesError):
    """Invalid configuration value or file."""


class ManifestError(TKPlanesError):
    """A dataset manifest failed to parse or validate."""
