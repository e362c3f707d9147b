"""Closed-loop agent / user-simulator dialogues over a runtime, and the shipped ports."""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping

from .datastore import Snapshot, snapshot
from .errors import AgentPortFailure, UserPortFailure
from .ports import AgentPort, UserSimPort
from .runtime import Runtime
from .tasks import GroundedTask
from .util import rng_for

log = logging.getLogger(__name__)

DEFAULT_MAX_TURNS = 40
TERMINATIONS = ("user_stop", "max_turns", "agent_stop")

_CONFIRM_ASK = re.compile(r"\b(shall i|should i|may i|do you want me to|proceed|go ahead|confirm)\b")
_DONE = re.compile(r"\b(all done|completed|everything is done|is complete|finished)\b")


def normalize(text: str) -> str:
    return re.sub(r"\s+", " ", text.lower().replace("_", " ")).strip()


def asked_slots(message: str, synonyms: Mapping[str, Iterable[str]]) -> list[str]:
    """Slots a message asks about: a question mentioning a slot name or synonym."""
    if "?" not in message:
        return []
    low = normalize(message)
    phrases = sorted(
        {(normalize(w), slot) for slot, words in synonyms.items() for w in words if normalize(w)},
        key=lambda p: (-len(p[0]), p[0], p[1]),
    )
    hit: set[str] = set()
    masked: list[tuple[int, int]] = []
    for w, slot in phrases:
        for m in re.finditer(rf"(?<![a-z0-9]){re.escape(w)}(?![a-z0-9])", low):
            # a phrase inside a longer phrase already claimed by another slot does not count
            if any(a <= m.start() and m.end() <= b and b - a > len(w) for a, b in masked):
                continue
            hit.add(slot)
            masked.append(m.span())
    return [s for s in synonyms if s in hit]


def is_confirmation_request(message: str) -> bool:
    return "?" in message and _CONFIRM_ASK.search(message.lower()) is not None


# --------------------------------------------------------------------------- logs


@dataclass
class Turn:
    index: int
    actor: str  # user | assistant | tool
    content: Any
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def is_tool_call(self) -> bool:
        return self.actor == "assistant" and isinstance(self.content, dict) and "tool_name" in self.content

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "actor": self.actor, "content": self.content, "meta": self.meta}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        return cls(d["index"], d["actor"], d["content"], dict(d.get("meta", {})))


@dataclass
class RolloutLog:
    task_id: str
    turns: list[Turn]
    initial: Snapshot
    final: Snapshot
    termination: str
    meta: dict[str, Any] = field(default_factory=dict)

    @property
    def rounds(self) -> int:
        """Opening plus one per assistant action."""
        return 1 + sum(1 for t in self.turns if t.actor == "assistant")

    def tool_calls(self) -> list[tuple[Turn, Turn]]:
        """(assistant call, tool result) pairs in order."""
        out = []
        for i, t in enumerate(self.turns):
            if t.is_tool_call and i + 1 < len(self.turns) and self.turns[i + 1].actor == "tool":
                out.append((t, self.turns[i + 1]))
        return out

    def header(self) -> dict[str, Any]:
        return {
            "record": "header",
            "task_id": self.task_id,
            "termination": self.termination,
            "initial_snapshot": self.initial.address,
            "final_snapshot": self.final.address,
            "turns": len(self.turns),
            "meta": self.meta,
        }

    def to_records(self) -> list[dict[str, Any]]:
        return [self.header(), *({"record": "turn", **t.to_dict()} for t in self.turns)]

    @classmethod
    def from_records(cls, records: Iterable[Mapping[str, Any]], snapshots: Mapping[str, Snapshot]) -> "RolloutLog":
        records = list(records)
        head = records[0]
        turns = [Turn.from_dict(r) for r in records[1:]]
        return cls(
            head["task_id"], turns, snapshots[head["initial_snapshot"]], snapshots[head["final_snapshot"]],
            head["termination"], dict(head.get("meta", {})),
        )


def run_rollout(
    task: GroundedTask,
    agent: AgentPort,
    user: UserSimPort,
    runtime: Runtime,
    max_turns: int = DEFAULT_MAX_TURNS,
) -> RolloutLog:
    """Drive one dialogue. ``max_turns`` bounds the number of assistant actions."""
    if max_turns < 1:
        raise ValueError("max_turns must be at least 1")
    sid = runtime.create_session()
    session = runtime.session(sid)
    initial = snapshot(session.db)
    turns: list[Turn] = []

    def add(actor: str, content: Any, meta: dict[str, Any] | None = None) -> None:
        turns.append(Turn(len(turns), actor, content, meta or {}))

    def partial() -> RolloutLog:
        return RolloutLog(task.task_id, list(turns), initial, snapshot(session.db), "aborted", {"session": sid})

    try:
        opening = user.opening()
    except Exception as exc:
        raise UserPortFailure(f"user simulator failed to open: {exc}", log=partial()) from exc
    add("user", opening)
    observation: dict[str, Any] = {"type": "user", "content": opening, "tools": runtime.tools()}
    termination = "max_turns"
    for _ in range(max_turns):
        try:
            action = agent.act(observation)
        except Exception as exc:
            raise AgentPortFailure(f"agent failed: {exc}", log=partial()) from exc
        kind = action.get("type") if isinstance(action, Mapping) else None
        if kind == "tool_call":
            name, args = action.get("tool_name"), action.get("args") or {}
            add("assistant", {"tool_name": name, "args": args})
            result = runtime.invoke(sid, name, args)
            add("tool", result.to_dict())
            observation = {"type": "tool_result", "tool_name": name, "result": result.to_dict()}
            continue
        text = str(action.get("content", "")) if isinstance(action, Mapping) else str(action)
        add("assistant", text)
        if kind == "stop" or (isinstance(action, Mapping) and action.get("stop")):
            termination = "agent_stop"
            break
        try:
            reply = user.respond(text)
        except Exception as exc:
            raise UserPortFailure(f"user simulator failed: {exc}", log=partial()) from exc
        add("user", reply.get("content", ""), dict(reply.get("meta", {})))
        if reply.get("stop"):
            termination = "user_stop"
            break
        observation = {"type": "user", "content": reply.get("content", "")}
    return RolloutLog(task.task_id, turns, initial, snapshot(session.db), termination, {"session": sid})


# --------------------------------------------------------------------------- user simulator


class ScriptedUser:
    """Answers from hidden knowledge; reveals a slot only when asked for it."""

    def __init__(self, task: GroundedTask) -> None:
        self.task = task
        self.given: set[str] = {k for k, v in task.hidden_user_knowledge.items() if _shown(v, task.startup_query)}
        self.affirmed = 0

    def opening(self) -> str:
        return self.task.startup_query

    def respond(self, message: str) -> dict[str, Any]:
        if is_confirmation_request(message):
            self.affirmed += 1
            return {"content": "Yes, please go ahead.", "stop": False, "meta": {"affirm": True}}
        slots = asked_slots(message, self.task.synonyms)
        if slots:
            repeats = [s for s in slots if s in self.given]
            parts = []
            for s in slots:
                column = s.split(".", 1)[1].replace("_", " ")
                parts.append(f"The {column} is {_text(self.task.hidden_user_knowledge[s])}.")
            self.given.update(slots)
            meta: dict[str, Any] = {"revealed": slots}
            if repeats:
                meta["R1"] = repeats
            return {"content": " ".join(parts), "stop": False, "meta": meta}
        if "?" in message:
            return {"content": "I don't know.", "stop": False, "meta": {"unknown": True}}
        if _DONE.search(message.lower()) and self.given >= set(self.task.hidden_user_knowledge):
            return {"content": "Thanks, that's everything.", "stop": True, "meta": {"satisfied": True}}
        return {"content": "Okay.", "stop": False, "meta": {}}


def scripted_user_sim(task: GroundedTask) -> ScriptedUser:
    return ScriptedUser(task)


def _text(v: Any) -> str:
    return str(v).lower() if isinstance(v, bool) else str(v)


def _shown(v: Any, text: str) -> bool:
    return v is not None and _text(v).lower() in text.lower()


# --------------------------------------------------------------------------- agents


@dataclass
class GoldenCall:
    tool: str
    args: dict[str, Any]
    confirm: bool = False


class ScriptAgent:
    """Plays a fixed call script: gathers hidden slots, then calls tools with
    the preview / user-approval / commit protocol on confirmation tools."""

    def __init__(self, task: GroundedTask, calls: list[GoldenCall], skip_preview: bool = False) -> None:
        self.task = task
        self.skip_preview = skip_preview
        self.queue: list[dict[str, Any]] = []
        self.known = {k for k, v in task.hidden_user_knowledge.items() if _shown(v, task.startup_query)}
        for slot in task.required_slots:
            if slot not in self.known:
                word = task.synonyms.get(slot, [slot])[0].replace("_", " ")
                self.queue.append({"type": "message", "content": f"Could you tell me the {word}?", "slot": slot})
        for c in calls:
            if c.confirm and not skip_preview:
                self.queue.append({"type": "tool_call", "tool_name": c.tool, "args": dict(c.args)})
                self.queue.append({"type": "preview"})
                self.queue.append({"type": "tool_call", "tool_name": c.tool, "args": {**c.args, "confirm": True}})
            elif c.confirm:
                self.queue.append({"type": "tool_call", "tool_name": c.tool, "args": {**c.args, "confirm": True}})
            else:
                self.queue.append({"type": "tool_call", "tool_name": c.tool, "args": dict(c.args)})
        self.queue.append({"type": "message", "content": "All done, your request is completed."})
        self.last_preview = ""

    def act(self, observation: dict[str, Any]) -> dict[str, Any]:
        if observation.get("type") == "tool_result":
            payload = observation["result"].get("payload") or {}
            if isinstance(payload, dict) and payload.get("needs_confirmation"):
                self.last_preview = payload.get("action_preview", "")
        elif observation.get("type") == "user":
            said = str(observation.get("content", ""))
            self.known |= {k for k, v in self.task.hidden_user_knowledge.items() if _shown(v, said)}
        # an answer can cover several slots at once; never ask again for one already given
        while self.queue and self.queue[0].get("slot") in self.known:
            self.queue.pop(0)
        if not self.queue:
            return {"type": "stop", "content": ""}
        step = dict(self.queue.pop(0))
        step.pop("slot", None)
        if step["type"] == "preview":
            return {"type": "message", "content": f"I am about to do this: {self.last_preview}. Shall I proceed?"}
        return step


def golden_agent(task: GroundedTask, calls: list[GoldenCall]) -> ScriptAgent:
    return ScriptAgent(task, calls)


def drop_write_agent(task: GroundedTask, calls: list[GoldenCall], mutating: set[str]) -> ScriptAgent:
    """Golden script minus its last state-changing call."""
    idx = max((i for i, c in enumerate(calls) if c.tool in mutating), default=None)
    kept = [c for i, c in enumerate(calls) if i != idx]
    return ScriptAgent(task, kept)


def skip_preview_agent(task: GroundedTask, calls: list[GoldenCall]) -> ScriptAgent:
    return ScriptAgent(task, calls, skip_preview=True)


class RandomAgent:
    """Noise agent for negative tests: random tools with fuzzed arguments."""

    FUZZ = (None, "", 0, -1, 3.5, True, "x" * 40, "2025-06-01T09:00:00", [], {"k": 1})

    def __init__(self, tools: list[str], seed: int = 0, talk_rate: float = 0.2) -> None:
        self.tools = list(tools)
        self.rng = rng_for(seed, "random_agent")
        self.talk_rate = talk_rate

    def act(self, observation: dict[str, Any]) -> dict[str, Any]:
        if not self.tools or self.rng.random() < self.talk_rate:
            return {"type": "message", "content": self.rng.choice(["Hmm.", "Let me look.", "Working on it."])}
        name = self.rng.choice(self.tools + ["no_such_tool"])
        args = {self.rng.choice(["id", "confirm", "notes", "x"]): self.rng.choice(self.FUZZ) for _ in range(self.rng.randint(0, 3))}
        return {"type": "tool_call", "tool_name": name, "args": args}


class SilentAgent:
    """Never calls a tool and never finishes."""

    def act(self, observation: dict[str, Any]) -> dict[str, Any]:
        return {"type": "message", "content": "Let me think about that."}
