"""Exception hierarchy shared across the package."""


class ScarFinderError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(ScarFinderError, ValueError):
    """Malformed numerical input: wrong shape, non-finite entries, bad parameters."""


class ConvergenceError(ScarFinderError):
    """An iterative solver hit its iteration cap."""

    def __init__(self, message, iterations=None):
        super().__init__(message)
        self.iterations = iterations


class DegenerateStateError(ScarFinderError):
    """Truncation or normalization left a state with (numerically) zero norm."""


class GaugeError(ScarFinderError):
    """An operation that needs canonical form received a non-canonical state."""


class ConfigurationError(ScarFinderError, ValueError):
    """Inconsistent model / manifold / run configuration."""


class UnsupportedGeometryError(ConfigurationError):
    """Requested lattice geometry is not implemented."""


class CorrectionFailedError(ScarFinderError):
    """Imaginary-time energy correction failed to approach the target energy."""


class DimensionCapError(ScarFinderError):
    """Exact-diagonalization problem exceeds the configured size cap."""


class ProjectionLostError(ScarFinderError):
    """Projection to the variational ansatz lost the state (fidelity too low)."""


class EmbeddingError(ScarFinderError):
    """Projective embedding impossible: target support fills the cluster space."""
