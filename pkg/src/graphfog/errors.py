"""Exception hierarchy shared across the simulator."""


class GraphFogError(Exception):
    """Base class for all graphfog errors."""


class SchedulingInPast(GraphFogError):
    """An event was scheduled before the current simulation clock."""


class ClockRegression(GraphFogError):
    """A metric account was updated with a timestamp before its last update."""


class ConfigError(GraphFogError):
    """A configuration or input file is malformed or inconsistent."""


class DuplicateId(ConfigError):
    pass


class DanglingLink(ConfigError):
    pass


class NonPositiveBandwidth(ConfigError):
    pass


class LinkDown(GraphFogError):
    pass


class DeviceDown(GraphFogError):
    pass


class UnknownSource(GraphFogError):
    pass


class UnknownTarget(GraphFogError):
    pass


class Unreachable(GraphFogError):
    """No path exists between two devices under the current UP-subgraph."""


class ModuleNotPlaced(GraphFogError):
    pass


class UnplaceableModule(GraphFogError):
    """Raised by placement policies; carries the offending module name."""

    def __init__(self, module_name: str, reason: str = ""):
        self.module_name = module_name
        super().__init__(f"cannot place module {module_name!r}" + (f": {reason}" if reason else ""))


class ScenarioError(ConfigError):
    """An emergency-scenario input violates its invariants."""


class RoleCountMismatch(ScenarioError):
    pass


class NotConnected(ScenarioError):
    pass


class WrongEdgeCount(ScenarioError):
    pass


class EsnDown(GraphFogError):
    pass


class ZoneUnreachable(GraphFogError):
    pass


class UsageError(GraphFogError):
    """Bad command-line arguments (exit code 2)."""


class SimulationError(GraphFogError):
    """Unexpected failure while running a simulation (exit code 4)."""
