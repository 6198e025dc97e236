"""Exception hierarchy for the LR membrane solver."""


class LRMembraneError(Exception):
    """Base class for all errors raised by this package."""


class KnotVectorError(LRMembraneError, ValueError):
    """A local knot vector violates its invariants."""


class MeshlineError(LRMembraneError, ValueError):
    """A meshline cannot be inserted into the mesh."""


class PrimitivityError(MeshlineError):
    """The meshline is not a primitive extension."""


class AlignmentError(MeshlineError):
    """The meshline does not end on element boundaries."""


class SplitError(LRMembraneError, ValueError):
    """A basis function cannot be split at the requested knot."""


class SingularGeometryError(LRMembraneError, ValueError):
    """The weight function vanishes at an evaluation point."""


class ProjectiveError(LRMembraneError, ValueError):
    """Projective transformation with a non-positive weight."""


class SpanError(LRMembraneError, ValueError):
    """A parametric interval is not a valid knot span or sub-span."""


class ConfigurationError(LRMembraneError, ValueError):
    """A model or scenario is configured inconsistently."""


class ProjectionError(LRMembraneError, ValueError):
    """A point projection onto the contact master is undefined."""


class ComparisonError(LRMembraneError, ValueError):
    """Two run reports cannot be compared."""


class DegenerateElementError(LRMembraneError, RuntimeError):
    """Surface stretch J is not positive at a quadrature point."""


class SolverError(LRMembraneError, RuntimeError):
    """The nonlinear solver failed."""


class LoadStepError(SolverError):
    """A load step failed after all step halvings; the state was rolled back."""


class InterpolationError(LRMembraneError, RuntimeError):
    """The coarse-mesh least-squares fit is singular."""
