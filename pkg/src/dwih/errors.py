"""Exception hierarchy. Everything user-facing derives from DwihError."""


class DwihError(ValueError):
    """Base class for validation failures raised by this package."""

    kind = "error"


class InputError(DwihError):
    kind = "input"


class GeometryError(DwihError):
    kind = "geometry"


class ArityError(DwihError):
    kind = "arity"


class ShapeError(DwihError):
    kind = "shape"


class FormatError(DwihError):
    kind = "format"


class SpecError(DwihError):
    kind = "spec"


class DegenerateDataError(DwihError):
    kind = "degenerate-data"


class CheckFailure(Exception):
    """A numerical self-check ran but did not meet its tolerance."""
