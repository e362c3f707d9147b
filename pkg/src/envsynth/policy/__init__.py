from .audit import Finding, SearchReplace, apply_patches, audit_policy, patches_of, repair_policy_text
from .document import (
    BridgeRule,
    Mutation,
    PermissionRule,
    PolicyDoc,
    ReturnSpec,
    ToolContract,
    ValidationRule,
    parse_policy,
    serialize_contract,
    serialize_policy,
)
from .dsl import (
    And,
    Compare,
    EvalContext,
    Exists,
    Literal,
    Lookup,
    Not,
    Or,
    Ref,
    check_references,
    evaluate_predicate,
    evaluate_term,
    parse_predicate,
    to_source,
)

__all__ = [
    "And", "BridgeRule", "Compare", "EvalContext", "Exists", "Finding", "Literal", "Lookup",
    "Mutation", "Not", "Or", "PermissionRule", "PolicyDoc", "Ref", "ReturnSpec", "SearchReplace",
    "ToolContract", "ValidationRule", "apply_patches", "audit_policy", "check_references",
    "evaluate_predicate", "evaluate_term", "parse_policy", "parse_predicate", "patches_of",
    "repair_policy_text", "serialize_contract", "serialize_policy", "to_source",
]
