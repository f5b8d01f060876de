"""Exception hierarchy shared by the package."""


class ClauseBenchError(Exception):
    """Base class for all package errors."""


class CanonError(ClauseBenchError, ValueError):
    """The canon file is malformed or violates a clause invariant."""


class ScenarioError(ClauseBenchError, ValueError):
    """A scenario document is malformed; ``path`` names the offending field."""

    def __init__(self, message: str, path: str = ""):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class RuleError(ClauseBenchError, ValueError):
    """The rule file is malformed, cyclic, or references unknown clauses."""


class ConflictError(ClauseBenchError):
    """Fired rules contradict each other and no precedence resolves them."""

    def __init__(self, clause_ids):
        self.clause_ids = sorted(clause_ids)
        super().__init__("unresolvable conflict on " + ", ".join(self.clause_ids))


class GroundingError(ClauseBenchError):
    """A trace cites clauses that were not retrieved."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("trace cites un-retrieved clauses: " + ", ".join(self.violations))


class SuiteError(ClauseBenchError, ValueError):
    """A suite specification cannot be realized."""


class LogError(ClauseBenchError, ValueError):
    """A run record cannot be serialized."""
