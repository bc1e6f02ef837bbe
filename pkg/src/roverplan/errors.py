"""Exception types shared across the package."""


class RoverPlanError(Exception):
    """Base class for all errors raised by this package."""


class TerrainFormatError(RoverPlanError):
    """Heightmap file is malformed or violates the minimum-size contract."""


class TerrainBoundsError(RoverPlanError):
    """Query outside the gridded terrain; never clamped or extrapolated."""


class DegenerateStateError(RoverPlanError):
    """Motion state too close to rest for the requested gradient."""


class HorizonError(RoverPlanError):
    """Time query outside the trajectory horizon."""


class TrajectoryFormatError(RoverPlanError):
    """Serialized trajectory is malformed or has an unsupported version."""


class ProfileSpanError(RoverPlanError):
    """Time query outside the span of a user-supplied power profile."""


class InfeasibleBudgetError(RoverPlanError):
    """Energy budget cannot be met even with unlimited waiting."""


class ScenarioError(RoverPlanError):
    """Scenario file missing, malformed, or referencing missing inputs."""
