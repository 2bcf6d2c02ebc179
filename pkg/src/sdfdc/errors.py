"""Exception types shared across the package.

Anything raised on malformed or inconsistent *data* derives from
:class:`SdfdcError`, so callers (notably the CLI) can distinguish data
problems from usage errors and genuine bugs.
"""


class SdfdcError(Exception):
    """Base class for data and geometry errors raised by this package."""


class GridParseError(SdfdcError):
    """Raised when an SDFG file cannot be parsed; message carries a byte offset."""


class DomainError(SdfdcError):
    """Query point outside the domain of an interpolant."""


class DegenerateNormalError(SdfdcError):
    """Summed gradient too small to define a surface normal."""


class DegenerateFitError(SdfdcError):
    """Plane fit is rank deficient (coincident or collinear points)."""


class ConsistencyError(SdfdcError):
    """Inputs that must agree (grid/mesh/field) do not."""


class EmptySurfaceError(SdfdcError):
    """Grid contains no sign change, so there is no surface to extract."""


class WatertightnessError(SdfdcError):
    """Mesh has boundary edges where a closed surface is required."""
