"""Exception hierarchy for the adverse control toolkit."""


class AdverseControlError(Exception):
    """Base class for every error raised by the toolkit."""


class DomainError(AdverseControlError):
    """A mollification ball leaves the declared domain of a field."""


class ShapeMismatch(AdverseControlError):
    """Grids, time steps or atoms of two objects do not line up."""


class StepCountTooSmall(AdverseControlError):
    """The fixed-step integrator would run with dt * L above the stability guard."""


class InfeasibleStart(AdverseControlError):
    """The perturbed problem cannot keep the incumbent control feasible."""


class SolverFailure(AdverseControlError):
    """No index of a j-sweep produced a solution."""


class ProblemParseError(AdverseControlError):
    """A problem or config file could not be parsed."""


class UnknownRegistryName(AdverseControlError, KeyError):
    """A dynamics, endpoint function or profile name is not registered."""

    def __init__(self, kind: str, name: str):
        self.kind = kind
        self.name = name
        super().__init__(f"Unknown {kind} name: {name!r}")

    def __str__(self) -> str:
        return f"Unknown {self.kind} name: {self.name!r}"
