"""Exception types shared across the package."""


class SimstexError(Exception):
    """Base class for all package errors."""


class InvalidMesh(SimstexError):
    """Mesh violates a structural requirement (empty, bad indices, missing UVs)."""


class AtlasOverflow(SimstexError):
    """Too many faces for the requested atlas texel density."""


class InvalidRefinement(SimstexError):
    """Refinement FOV must be strictly narrower than the previous FOV."""


class ShapeError(SimstexError):
    """Array dimensions do not match what the operation requires."""


class ScheduleError(SimstexError):
    """Noise-schedule parameters are inconsistent."""


class GuidanceError(SimstexError):
    """Guidance weights and provided predictions disagree."""


class OracleError(SimstexError):
    """Oracle denoiser queried for an unregistered view."""


class TransportError(SimstexError):
    """Remote denoiser connection or protocol failure."""


class NumericalError(SimstexError):
    """Optimization produced non-finite values."""
