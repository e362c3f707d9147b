"""Step orchestration with a content-hashed checkpoint ledger, plus the repair loop.

Every step writes into its own directory under the output root. A step is
skipped when the ledger's latest record for it is ``done``, its files still
hash to what was recorded, and the digest of its inputs is unchanged.
"""

from __future__ import annotations

import json
import logging
import shutil
import threading
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Sequence

from .config import PipelineConfig
from .errors import EnvSynthError, LedgerMissing, RepairBudgetExhausted, StepFailed
from .policy.audit import SearchReplace, apply_patches
from .ports import FixerPort
from .util import content_hash, derive_seed, file_hash

log = logging.getLogger(__name__)

LEDGER = "checkpoints.jsonl"
FIX_CATEGORIES = ("ImplementationBug", "TestDefect", "DataIssue")
DEFAULT_FIX_BUDGET = 5


# --------------------------------------------------------------------------- repair loop


@dataclass
class RepairAttempt:
    index: int
    failures: list[dict[str, Any]]
    category: str | None = None
    patches: list[dict[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {"index": self.index, "failures": self.failures, "category": self.category, "patches": self.patches}


@dataclass
class RepairResult:
    ok: bool
    artifact: Any
    attempts: list[RepairAttempt]

    @property
    def transcript(self) -> list[dict[str, Any]]:
        return [a.to_dict() for a in self.attempts]


def patch_text(text: str, patches: Iterable[Mapping[str, str]]) -> str:
    return apply_patches(text, [SearchReplace(p["search"], p["replace"], p.get("mode", "line")) for p in patches])


def repair_loop(
    produce: Callable[[], Any],
    test: Callable[[Any], list[dict[str, Any]]],
    fix: FixerPort,
    budget: int = DEFAULT_FIX_BUDGET,
    apply: Callable[[Any, list[dict[str, str]]], Any] = patch_text,
    context: Callable[[Any], dict[str, Any]] | None = None,
) -> RepairResult:
    """Produce, test, and patch until the tests pass or ``budget`` attempts are spent.

    ``test`` returns a list of failure dicts (empty means pass). The fixer sees
    ``{"failures": [...], **context(artifact)}`` and answers with a category
    and search/replace patches, which ``apply`` folds into the artifact.
    """
    if budget < 1:
        raise ValueError("repair budget must be at least 1")
    artifact = produce()
    attempts: list[RepairAttempt] = []
    for i in range(1, budget + 1):
        failures = test(artifact)
        attempt = RepairAttempt(i, failures)
        attempts.append(attempt)
        if not failures:
            return RepairResult(True, artifact, attempts)
        if i == budget:
            break
        answer = fix.diagnose({"failures": failures, **(context(artifact) if context else {})})
        category = answer.get("category")
        attempt.category = category if category in FIX_CATEGORIES else "ImplementationBug"
        attempt.patches = [dict(p) for p in answer.get("patches", [])]
        if attempt.patches:
            artifact = apply(artifact, attempt.patches)
    raise RepairBudgetExhausted(
        f"tests still failing after {budget} attempts",
        attempts=[a.to_dict() for a in attempts],
    )


# --------------------------------------------------------------------------- steps


@dataclass(frozen=True)
class StepSpec:
    id: int
    name: str
    inputs: tuple[int, ...]
    run: Callable[["StepContext"], None]
    retry_budget: int = 1

    @property
    def dirname(self) -> str:
        return f"{self.id:02d}_{self.name}"


@dataclass
class StepContext:
    spec: StepSpec
    root: Path
    config: PipelineConfig
    provider: Any
    jobs: int = 1

    @property
    def out(self) -> Path:
        return self.root / self.spec.dirname

    def dir(self, step_id: int) -> Path:
        return self.root / STEP_DIRS[step_id]

    def seed(self, *parts: Any) -> int:
        return derive_seed(self.config.seed, self.spec.id, *parts)


STEP_DIRS: dict[int, str] = {}


def validate_steps(steps: Sequence[StepSpec]) -> None:
    ids = {s.id for s in steps}
    if len(ids) != len(steps):
        raise ValueError("duplicate step ids")
    for s in steps:
        missing = set(s.inputs) - ids
        if missing:
            raise ValueError(f"step {s.id} needs unknown steps {sorted(missing)}")
        if any(i >= s.id for i in s.inputs):
            raise ValueError(f"step {s.id} depends on a later step")


# --------------------------------------------------------------------------- ledger


def tree_hashes(directory: Path) -> dict[str, str]:
    if not directory.is_dir():
        return {}
    return {p.relative_to(directory).as_posix(): file_hash(p) for p in sorted(directory.rglob("*")) if p.is_file()}


class Ledger:
    """Append-only JSONL of step records; the latest record per step wins."""

    def __init__(self, path: Path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()

    def exists(self) -> bool:
        return self.path.exists()

    def records(self) -> list[dict[str, Any]]:
        if not self.path.exists():
            return []
        out = []
        for line in self.path.read_text(encoding="utf-8").splitlines():
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError:
                log.warning("skipping torn ledger line")
        return out

    def latest(self) -> dict[int, dict[str, Any]]:
        out: dict[int, dict[str, Any]] = {}
        for r in self.records():
            out[r["step"]] = r
        return out

    def append(self, record: Mapping[str, Any]) -> None:
        line = json.dumps(dict(record), sort_keys=True) + "\n"
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8") as fh:
                fh.write(line)


def artifact_hashes(root: Path) -> dict[str, str]:
    """Every artifact file under ``root`` except the ledger itself."""
    root = Path(root)
    return {k: v for k, v in tree_hashes(root).items() if k != LEDGER}


# --------------------------------------------------------------------------- runner


@dataclass
class RunResult:
    executed: list[int]
    skipped: list[int]
    stopped_after: int | None
    root: Path


ProviderFactory = Callable[[int, PipelineConfig], Any]


def stub_provider_factory(step_id: int, config: PipelineConfig) -> Any:
    from .stub import StubProvider

    return StubProvider(derive_seed(config.seed, "provider", step_id), faults=dict(config.faults))


def run_pipeline(
    config: PipelineConfig,
    out: str | Path,
    steps: Sequence[StepSpec] | None = None,
    provider_factory: ProviderFactory = stub_provider_factory,
    step_range: tuple[int, int] | None = None,
    stop_after: int | None = None,
    jobs: int = 1,
    resume: bool = True,
) -> RunResult:
    """Run the step DAG in dependency order, skipping up-to-date steps.

    ``step_range`` limits which steps may execute; steps below it must already
    be done. ``stop_after`` halts once that step has completed, as an
    interruption would.
    """
    from .steps import STEPS

    steps = list(steps or STEPS)
    validate_steps(steps)
    root = Path(out)
    root.mkdir(parents=True, exist_ok=True)
    ledger = Ledger(root / LEDGER)
    if not resume and ledger.exists():
        ledger.path.unlink()
    lo, hi = step_range or (min(s.id for s in steps), max(s.id for s in steps))
    by_id = {s.id: s for s in steps}
    latest = ledger.latest()
    digests: dict[int, str] = {}
    done: set[int] = set()
    executed: list[int] = []
    skipped: list[int] = []

    def input_digest(s: StepSpec) -> str:
        return content_hash({"config": config.digest, "inputs": {i: digests[i] for i in s.inputs}})

    def up_to_date(s: StepSpec) -> str | None:
        rec = latest.get(s.id)
        if not rec or rec.get("status") != "done":
            return None
        if rec.get("input_digest") != input_digest(s):
            return None
        current = tree_hashes(root / s.dirname)
        if current != rec.get("outputs"):
            log.info("step %d outputs changed on disk; re-running", s.id)
            return None
        return content_hash(current)

    def execute(s: StepSpec) -> str:
        attempts = []
        prior = latest.get(s.id, {}).get("attempt", 0)
        for k in range(1, s.retry_budget + 1):
            target = root / s.dirname
            if target.exists():
                shutil.rmtree(target)
            target.mkdir(parents=True)
            ctx = StepContext(s, root, config, provider_factory(s.id, config), jobs)
            try:
                s.run(ctx)
            except EnvSynthError as exc:
                attempts.append(exc.to_json())
                log.warning("step %d (%s) attempt %d failed: %s", s.id, s.name, k, exc)
                continue
            outputs = tree_hashes(target)
            ledger.append({"step": s.id, "name": s.name, "status": "done", "outputs": outputs,
                           "input_digest": input_digest(s), "attempt": prior + k})
            return content_hash(outputs)
        ledger.append({"step": s.id, "name": s.name, "status": "failed", "outputs": {},
                       "input_digest": input_digest(s), "attempt": prior + s.retry_budget, "errors": attempts})
        raise StepFailed(f"step {s.id} ({s.name}) failed", step=s.id, name=s.name, attempts=attempts)

    pending = sorted(by_id)
    stop = False

    def finish(s: StepSpec, digest: str) -> None:
        nonlocal stop
        digests[s.id] = digest
        done.add(s.id)
        executed.append(s.id)
        if stop_after is not None and s.id >= stop_after:
            stop = True

    with ThreadPoolExecutor(max_workers=max(1, jobs)) as pool:
        running: dict[Any, StepSpec] = {}
        while (pending or running) and not stop:
            ready = [i for i in pending if all(d in done for d in by_id[i].inputs)]
            launched = False
            for i in ready:
                s = by_id[i]
                pending.remove(i)
                fresh = up_to_date(s)
                if fresh is not None:
                    digests[i] = fresh
                    done.add(i)
                    skipped.append(i)
                    continue
                if not lo <= i <= hi:
                    if i < lo:
                        raise StepFailed(f"step {i} ({s.name}) is not done; run it first", step=i, name=s.name)
                    continue
                launched = True
                if jobs <= 1:
                    finish(s, execute(s))
                    break
                running[pool.submit(execute, s)] = s
            if running:
                finished, _ = wait(list(running), return_when=FIRST_COMPLETED)
                for fut in finished:
                    finish(running.pop(fut), fut.result())
            elif not launched and not ready:
                break
        # let concurrently started steps land in the ledger before returning
        for fut in list(running):
            finish(running.pop(fut), fut.result())
    return RunResult(sorted(executed), sorted(skipped), stop_after if stop else None, root)


def resume_pipeline(config: PipelineConfig, out: str | Path, **kw: Any) -> RunResult:
    if not (Path(out) / LEDGER).exists():
        raise LedgerMissing(f"no checkpoint ledger under {out}", out=str(out))
    return run_pipeline(config, out, resume=True, **kw)
