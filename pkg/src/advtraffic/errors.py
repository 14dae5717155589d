"""Exception types raised across the package."""


class AdvTrafficError(Exception):
    """Base class for all package-specific errors."""


class SchemaViolation(AdvTrafficError):
    """Malformed serialized payload; message carries the offending path."""

    def __init__(self, path: str, message: str):
        self.path = path
        super().__init__(f"{path}: {message}")


class RouteInfeasible(AdvTrafficError):
    """A controller cannot track a route without leaving the drivable area."""


class ProximityUnmet(AdvTrafficError):
    """No adversary route approaches the ego route closely enough."""


class InitializationUnsafe(AdvTrafficError):
    """Joint recording of the initial scenario produced a collision."""


class NoAdversaries(AdvTrafficError):
    """An operation requiring at least one adversary got none."""


class TapeMissing(AdvTrafficError):
    """Backward pass requested on a rollout without the needed tape."""


class NotDifferentiableEgo(AdvTrafficError):
    """Full-path backward needs an ego agent with a Jacobian interface."""


class MethodIncompatible(AdvTrafficError):
    """Attack method cannot run with the supplied ego agent."""


class RouteExhausted(AdvTrafficError):
    """Agent has driven past the final route point."""


class EmptyDataset(AdvTrafficError):
    """Training requested on an empty demonstration set."""


class ShapeMismatch(AdvTrafficError):
    """Array shapes inconsistent with the model or dataset layout."""


class DegenerateGeometry(AdvTrafficError):
    """Map template parameters produce invalid geometry."""


class InsufficientRoutes(AdvTrafficError):
    """A map lacks enough admissible routes for the requested benchmark."""


class TooFewScenarios(AdvTrafficError):
    """Clustering requested with fewer scenarios than clusters."""


class OutOfExtent(AdvTrafficError):
    """Query point outside the map grid with clamping disabled."""


class IoFailure(AdvTrafficError):
    """Failed to write an output artifact."""
