from __future__ import annotations

from collections import Counter

import pytest

from envsynth.config import PipelineConfig
from envsynth.errors import EnvSynthError, LedgerMissing, RepairBudgetExhausted, StepFailed
from envsynth.pipeline import Ledger, StepSpec, repair_loop, resume_pipeline, run_pipeline, validate_steps

CFG = PipelineConfig()


class Toy:
    """Three chained steps that each write one file and count their runs."""

    def __init__(self, flaky: int = 0):
        self.runs = Counter()
        self.flaky = flaky

    def step(self, sid, text):
        def run(ctx):
            self.runs[sid] += 1
            if sid == 2 and self.runs[sid] <= self.flaky:
                raise EnvSynthError("transient")
            upstream = "".join((ctx.root / f"{i:02d}_s{i}" / "out.txt").read_text() for i in ctx.spec.inputs)
            (ctx.out / "out.txt").write_text(upstream + text)

        return run

    def steps(self, retry=1):
        return [
            StepSpec(1, "s1", (), self.step(1, "a")),
            StepSpec(2, "s2", (1,), self.step(2, "b"), retry_budget=retry),
            StepSpec(3, "s3", (2,), self.step(3, "c")),
        ]


def run(toy, out, **kw):
    return run_pipeline(CFG, out, steps=toy.steps(kw.pop("retry", 1)), provider_factory=lambda *_: None, **kw)


def test_second_run_skips_everything(tmp_path):
    toy = Toy()
    first = run(toy, tmp_path)
    assert first.executed == [1, 2, 3]
    assert (tmp_path / "03_s3" / "out.txt").read_text() == "abc"
    again = run(toy, tmp_path)
    assert again.executed == [] and again.skipped == [1, 2, 3]
    assert toy.runs == Counter({1: 1, 2: 1, 3: 1})


def test_tampered_output_is_rebuilt(tmp_path):
    toy = Toy()
    run(toy, tmp_path)
    (tmp_path / "02_s2" / "out.txt").write_text("junk")
    res = run(toy, tmp_path)
    assert 2 in res.executed
    assert (tmp_path / "02_s2" / "out.txt").read_text() == "ab"


def test_config_change_reruns_all(tmp_path):
    toy = Toy()
    run(toy, tmp_path)
    res = run_pipeline(CFG.replace(seed=9), tmp_path, steps=toy.steps(), provider_factory=lambda *_: None)
    assert res.executed == [1, 2, 3]


def test_stop_after_then_resume(tmp_path):
    toy = Toy()
    res = run(toy, tmp_path, stop_after=1)
    assert res.executed == [1] and res.stopped_after == 1
    res = resume_pipeline(CFG, tmp_path, steps=toy.steps(), provider_factory=lambda *_: None)
    assert res.skipped == [1] and res.executed == [2, 3]


def test_resume_needs_ledger(tmp_path):
    with pytest.raises(LedgerMissing):
        resume_pipeline(CFG, tmp_path / "nothing")


def test_step_range_requires_earlier_steps(tmp_path):
    with pytest.raises(StepFailed):
        run(Toy(), tmp_path, step_range=(2, 3))


def test_retry_budget(tmp_path):
    toy = Toy(flaky=1)
    res = run(toy, tmp_path / "a", retry=2)
    assert res.executed == [1, 2, 3] and toy.runs[2] == 2
    toy = Toy(flaky=5)
    with pytest.raises(StepFailed):
        run(toy, tmp_path / "b", retry=2)
    rec = Ledger(tmp_path / "b" / "checkpoints.jsonl").latest()[2]
    assert rec["status"] == "failed" and len(rec["errors"]) == 2


def test_torn_ledger_line_is_ignored(tmp_path):
    toy = Toy()
    run(toy, tmp_path)
    with open(tmp_path / "checkpoints.jsonl", "a") as fh:
        fh.write('{"step": 3, "stat')
    assert run(toy, tmp_path).skipped == [1, 2, 3]


def test_parallel_jobs_match_serial(tmp_path):
    run(Toy(), tmp_path / "serial")
    run(Toy(), tmp_path / "par", jobs=4)
    for i, name in ((1, "s1"), (2, "s2"), (3, "s3")):
        path = f"{i:02d}_{name}/out.txt"
        assert (tmp_path / "serial" / path).read_text() == (tmp_path / "par" / path).read_text()


@pytest.mark.parametrize(
    "steps",
    [
        [StepSpec(1, "a", (), print), StepSpec(1, "b", (), print)],
        [StepSpec(1, "a", (2,), print), StepSpec(2, "b", (), print)],
        [StepSpec(1, "a", (7,), print)],
    ],
)
def test_bad_step_graphs(steps):
    with pytest.raises(ValueError):
        validate_steps(steps)


class ScriptedFixer:
    def __init__(self, answers):
        self.answers = list(answers)
        self.seen = []

    def diagnose(self, request):
        self.seen.append(request)
        return self.answers.pop(0) if self.answers else {"category": "ImplementationBug", "patches": []}


def test_repair_loop_converges():
    fixer = ScriptedFixer([{"category": "TestDefect", "patches": [{"search": "retrun 1", "replace": "return 1"}]}])
    res = repair_loop(lambda: "retrun 1", lambda a: [] if a == "return 1" else [{"error": "syntax"}], fixer, budget=5)
    assert res.ok and res.artifact == "return 1"
    assert [a.category for a in res.attempts] == ["TestDefect", None]
    assert fixer.seen == [{"failures": [{"error": "syntax"}]}]


def test_repair_loop_exhausts_budget():
    fixer = ScriptedFixer([{"category": "nonsense"}])
    with pytest.raises(RepairBudgetExhausted) as info:
        repair_loop(lambda: "x", lambda a: [{"error": "no"}], fixer, budget=3)
    attempts = info.value.details["attempts"]
    assert len(attempts) == 3 and len(fixer.seen) == 2
    # unknown categories fall back to an implementation bug
    assert attempts[0]["category"] == "ImplementationBug"
    with pytest.raises(ValueError):
        repair_loop(lambda: "x", lambda a: [], fixer, budget=0)
