"""Exception hierarchy shared by every module of the package."""


class EsDelayError(Exception):
    """Base class for all package errors."""


# --- problem definition / validation ---------------------------------------

class ProblemError(EsDelayError):
    """A problem bundle violates one of the modelling assumptions."""


class DimensionMismatch(ProblemError):
    pass


class MissingField(ProblemError):
    pass


class InvalidParameter(ProblemError):
    pass


class NonCommensurateDelays(ProblemError):
    pass


class GainInfeasible(ProblemError):
    def __init__(self, channel: int, value: float, bound: float):
        self.channel = channel
        self.value = value
        self.bound = bound
        super().__init__(
            f"gain of channel {channel + 1} violates the delay/gain condition: "
            f"|k h| = {value:.6g} must be below 1/(e*Dbar) = {bound:.6g}"
        )


class NotHurwitz(ProblemError):
    pass


class BoxInverted(ProblemError):
    pass


class NotSymmetric(ProblemError):
    pass


class Indefinite(ProblemError):
    pass


class SingularAbsMatrix(ProblemError):
    pass


# --- analysis ----------------------------------------------------------------

class AnalysisError(EsDelayError):
    pass


class InfeasibleAtZero(AnalysisError):
    def __init__(self, channels, limits):
        self.channels = list(channels)
        self.limits = list(limits)
        names = ", ".join(str(c + 1) for c in self.channels)
        super().__init__(f"conditions fail already as epsilon -> 0 (channel(s) {names})")


class Infeasible(AnalysisError):
    pass


class NoGridPointBelow(AnalysisError):
    pass


class NoRoot(AnalysisError):
    pass


class Stalled(AnalysisError):
    pass


# --- simulation ----------------------------------------------------------------

class SimulationError(EsDelayError):
    pass


class StepTooCoarse(SimulationError):
    pass


class HistoryUnderflow(SimulationError):
    pass


class GridMismatch(SimulationError):
    pass


class StepNotDivisor(SimulationError):
    pass


class TraceTooSparse(SimulationError):
    pass


class DelayBoundViolation(SimulationError):
    pass


# --- experiments ---------------------------------------------------------------

class UnknownTable(EsDelayError):
    pass


class UnknownExample(EsDelayError):
    pass
