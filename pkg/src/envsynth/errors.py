"""Exception hierarchy shared by every envsynth module."""

from __future__ import annotations

from typing import Any


class EnvSynthError(Exception):
    """Base class for all library errors.

    ``code`` is the machine-readable name surfaced by the CLI error JSON.
    """

    code = "EnvSynthError"

    def __init__(self, message: str = "", **details: Any) -> None:
        super().__init__(message or self.code)
        self.details = details

    def to_json(self) -> dict[str, Any]:
        out: dict[str, Any] = {"error": self.code, "message": str(self)}
        if self.details:
            out["details"] = self.details
        return out


def _make(name: str, base: type[EnvSynthError] = EnvSynthError) -> type[EnvSynthError]:
    return type(name, (base,), {"code": name})


# ontology
FormatViolation = _make("FormatViolation")
ProviderExhausted = _make("ProviderExhausted")
EmptyExtraction = _make("EmptyExtraction")
NoPersonEntities = _make("NoPersonEntities")

# blueprint
IsolatedPerson = _make("IsolatedPerson")
FeedbackBudgetExhausted = _make("FeedbackBudgetExhausted")
UnknownValueType = _make("UnknownValueType")

# datastore
UnsatisfiableRange = _make("UnsatisfiableRange")
UnsatisfiableConstraints = _make("UnsatisfiableConstraints")
CorruptSnapshot = _make("CorruptSnapshot")
EntitySchemaConflict = _make("EntitySchemaConflict")

# toolgraph
UnsatisfiableTopology = _make("UnsatisfiableTopology")
BudgetExceeded = _make("BudgetExceeded")

# fusion
EmptyRegistry = _make("EmptyRegistry")
UnparseableBridgeRule = _make("UnparseableBridgeRule")
UnresolvedConflict = _make("UnresolvedConflict")

# tasks
TemplateBudgetExhausted = _make("TemplateBudgetExhausted")
NoEligibleInstances = _make("NoEligibleInstances")
CreationBudgetExhausted = _make("CreationBudgetExhausted")
IncompleteParameters = _make("IncompleteParameters")
LeakyStartupQuery = _make("LeakyStartupQuery")

# rollout
AgentPortFailure = _make("AgentPortFailure")
UserPortFailure = _make("UserPortFailure")

# evaluator
SchemaMismatch = _make("SchemaMismatch")
MissingEvaluator = _make("MissingEvaluator")
JudgePortFailure = _make("JudgePortFailure")

# pipeline / cli
StepFailed = _make("StepFailed")
RepairBudgetExhausted = _make("RepairBudgetExhausted")
ConfigError = _make("ConfigError")
LedgerMissing = _make("LedgerMissing")
GraphInvalid = _make("GraphInvalid")


class PolicyParseError(EnvSynthError):
    """A positioned parse failure in a policy document or predicate."""

    code = "PolicyParseError"

    def __init__(self, message: str, line: int = 1, column: int = 1) -> None:
        super().__init__(f"{message} (line {line}, column {column})", line=line, column=column)
        self.line = line
        self.column = column


class MalformedDelimiter(PolicyParseError):
    code = "MalformedDelimiter"


class UnknownPredicateSyntax(PolicyParseError):
    code = "UnknownPredicateSyntax"


class DuplicateToolBlock(PolicyParseError):
    code = "DuplicateToolBlock"


class PredicateTypeError(TypeError):
    """An unbound or ill-typed reference met during predicate evaluation."""
