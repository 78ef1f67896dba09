class DescentError(RuntimeError):
    """Base class for every failure raised by this package."""


class DimensionMismatch(DescentError):
    pass


class ShapeMismatch(DescentError):
    pass


class NotPositiveDefinite(DescentError):
    def __init__(self, pivot: int, message: str = ""):
        self.pivot = pivot
        super().__init__(message or f"non-positive pivot at index {pivot}")


class CapabilityMissing(DescentError):
    pass


class EmptyBatch(DescentError):
    pass


class NonFiniteEvaluation(DescentError):
    pass


class LineSearchFailed(DescentError):
    def __init__(self, step, backtracks: int):
        # zero step the caller records in place of the rejected one
        self.step = step
        self.backtracks = backtracks
        super().__init__(f"Armijo condition not met after {backtracks} backtracks")


class MetricFailure(DescentError):
    def __init__(self, method: str, lam: float, message: str = ""):
        self.method = method
        self.lam = lam
        super().__init__(message or f"{method}: metric not factorizable up to lambda={lam:g}")


class UnknownSpec(DescentError):
    pass


class MalformedTrace(DescentError):
    pass


class ConfigError(DescentError):
    pass
