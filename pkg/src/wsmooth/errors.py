"""Exception hierarchy shared by all modules."""


class WsmoothError(Exception):
    """Base class for every error raised by the package."""

    code = "error"

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class MissingColumn(WsmoothError):
    pass


class BadValue(WsmoothError):
    def __init__(self, row, message="bad value"):
        self.row = row
        super().__init__(f"row {row}: {message}")

    def to_dict(self):
        out = super().to_dict()
        out["row"] = self.row
        return out


class EmptyFile(WsmoothError):
    pass


class EmptyStratum(WsmoothError):
    def __init__(self, stratum):
        self.stratum = stratum
        super().__init__(f"stratum {stratum} has no sampled units")


class EmptyCell(WsmoothError):
    pass


class DimensionMismatch(WsmoothError):
    pass


class TooManyKnots(WsmoothError):
    pass


class SingularPenalty(WsmoothError):
    pass


class InvalidSpec(WsmoothError):
    pass


class NumericalBreakdown(WsmoothError):
    pass


class NotConverged(WsmoothError):
    """PQL did not converge; ``fit`` holds the last iterate."""

    def __init__(self, max_iter, fit=None):
        self.max_iter = max_iter
        self.fit = fit
        super().__init__(f"PQL did not converge in {max_iter} iterations")


class AllTrimmed(WsmoothError):
    pass


class NegativeGamma(WsmoothError):
    pass


class DegeneratePoint(WsmoothError):
    pass


class OversampledStratum(WsmoothError):
    pass


class InsufficientReplicates(WsmoothError):
    pass


class ScenarioError(WsmoothError):
    """Scenario validation failure; ``path`` is a JSON pointer."""

    def __init__(self, path, message):
        self.path = path
        super().__init__(f"{path}: {message}")

    def to_dict(self):
        out = super().to_dict()
        out["path"] = self.path
        return out
