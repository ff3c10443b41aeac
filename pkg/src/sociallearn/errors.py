"""Exception types shared across the package."""

from __future__ import annotations


class SocialLearnError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(SocialLearnError):
    """A domain object or config field violates an invariant.

    ``field`` is a dotted/indexed path identifying the offending input,
    e.g. ``"agents[0].likelihood[1]"``.
    """

    def __init__(self, field: str, reason: str):
        self.field = field
        self.reason = reason
        super().__init__(f"{field}: {reason}")


class NonStochasticRow(ValidationError):
    """A weight or probability row does not sum to 1."""

    def __init__(self, index: int, total: float, field: str = "weights"):
        self.index = index
        self.total = total
        super().__init__(f"{field}[{index}]", f"row sums to {total!r}, expected 1")


class NegativeWeight(ValidationError):
    """An influence weight is negative."""

    def __init__(self, i: int, j: int, value: float):
        self.i = i
        self.j = j
        self.value = value
        super().__init__(f"weights[{i}][{j}]", f"negative weight {value!r}")


class NonStochasticJointRow(ValidationError):
    """A state row of a joint signal table does not sum to 1."""

    def __init__(self, theta: int, total: float):
        self.theta = theta
        self.total = total
        super().__init__(f"joint[{theta}]", f"row sums to {total!r}, expected 1")


class DimensionMismatch(ValidationError):
    """Agent count or state count disagrees across inputs."""

    def __init__(self, reason: str, field: str = "dimensions"):
        super().__init__(field, reason)


class ZeroForecastMass(SocialLearnError):
    """An observed signal had zero prior forecast probability.

    The update rule divides by the one-step forecast of the observed
    signal, so the dynamic is undefined here; callers must halt.
    """

    def __init__(self, agent: int, signal: int, step: int | None = None):
        self.agent = agent
        self.signal = signal
        self.step = step
        at = f" at step {step}" if step is not None else ""
        super().__init__(
            f"agent {agent} observed signal {signal} with zero forecast mass{at}"
        )


class BeliefDriftError(SocialLearnError):
    """A belief row drifted from unit mass beyond the hard 1e-9 bound.

    Drift this large signals an implementation bug, not rounding.
    """

    def __init__(self, agent: int, total: float):
        self.agent = agent
        self.total = total
        super().__init__(f"agent {agent} belief row sums to {total!r}")


class EmptyComparisonSet(SocialLearnError):
    """Every state is observationally equivalent; no ratio to test."""


class NotRevealing(SocialLearnError):
    """The constructed sequence fails the strict likelihood-ratio margin.

    Only reachable through rational approximation of a real-valued
    table; signals that max_denominator is too small.
    """

    def __init__(self, delta):
        self.delta = delta
        super().__init__(f"worst likelihood ratio {delta!r} >= 1")


class ParseError(SocialLearnError):
    """Config text could not be parsed."""

    def __init__(self, location: str, reason: str):
        self.location = location
        self.reason = reason
        super().__init__(f"{location}: {reason}")
