"""Provider ports. Anything with these methods can drive the pipeline.

The shipped implementation is :class:`envsynth.stub.provider.StubProvider`;
LLM-backed adapters only need to map each ``kind`` to a prompt and parse the
JSON answer.
"""

from __future__ import annotations

from typing import Any, Protocol, runtime_checkable


@runtime_checkable
class SynthesisPort(Protocol):
    def generate(self, kind: str, request: dict[str, Any]) -> Any:
        """Return the JSON-shaped artifact requested by ``kind``."""


@runtime_checkable
class RelationOraclePort(Protocol):
    def relate(self, person: str, targets: list[str]) -> list[dict[str, str]]:
        """Return ``[{"target": ..., "domain_context": ...}]`` for related targets."""


@runtime_checkable
class JudgePort(Protocol):
    def score_template(self, template: dict[str, Any]) -> dict[str, int]:
        """Five rubric scores in 1..5."""

    def judge_rollout(self, log: dict[str, Any]) -> list[str]:
        """Hallucination tags (H1..H5) for a rollout."""


@runtime_checkable
class FixerPort(Protocol):
    def diagnose(self, failure: dict[str, Any]) -> dict[str, Any]:
        """Return ``{"category": ..., "patches": [{"search", "replace", "mode"}]}``."""


@runtime_checkable
class AgentPort(Protocol):
    def act(self, observation: dict[str, Any]) -> dict[str, Any]:
        """Return ``{"type": "message", "content": str}`` or ``{"type": "tool_call", "tool_name", "args"}``."""


@runtime_checkable
class UserSimPort(Protocol):
    def opening(self) -> str: ...

    def respond(self, message: str) -> dict[str, Any]:
        """Return ``{"content": str, "stop": bool, "meta": {...}}``."""
