"""Exception types shared across the pipeline."""


class DeskDriveError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(DeskDriveError):
    """Invalid or inconsistent configuration values."""


class WorldFormatError(DeskDriveError):
    """Malformed world description file."""


class GridFormatError(DeskDriveError):
    """Malformed occupancy grid file."""


class InsufficientDataError(DeskDriveError):
    """Too few valid measurements to run an estimator."""


class DegenerateGeometryError(DeskDriveError):
    """Scan geometry does not constrain the motion estimate (rank-deficient solve)."""


class DegenerateMatchError(DeskDriveError):
    """Scan-to-map alignment is unobservable (featureless or ambiguous geometry)."""


class OptimizationFailedError(DeskDriveError):
    """Trajectory optimization produced a non-finite objective."""


class InfeasiblePlanError(DeskDriveError):
    """Optimized trajectory violates hard kinodynamic or clearance checks.

    Carries the rejected band so the next control cycle can warm-start
    from it instead of re-seeding, and the individual violation strings
    so callers can tell safety problems from mere bound breaches.
    """

    def __init__(self, message: str, band=None,
                 violations: tuple = ()) -> None:
        super().__init__(message)
        self.band = band
        self.violations = tuple(violations)


class GoalUnreachableError(DeskDriveError):
    """No traversable path exists between start and goal."""


class PlannerPreconditionError(DeskDriveError):
    """Planner invoked with an invalid start or goal cell."""


class BridgeStartupError(DeskDriveError):
    """The telemetry endpoint could not be brought up (e.g. port in use)."""


class DatasetWriteError(DeskDriveError):
    """Dataset recording aborted.

    `partial` is True when a partially written file was left on disk;
    `rows_written` counts the data rows that made it out before the abort.
    """

    def __init__(self, message: str, partial: bool = False,
                 rows_written: int = 0) -> None:
        super().__init__(message)
        self.partial = partial
        self.rows_written = rows_written


class ReplayFormatError(DeskDriveError):
    """A recorded dataset failed to parse; the message names the bad row."""
