"""Evaluation result types shared by the evaluator and the report renderers."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from pathlib import Path

from .sandbox import RunOutcome
from .submission_intake import SubmissionEvent


class TestOutcome(str, enum.Enum):
    __test__ = False

    PASS = 'Pass'
    WRONG_OUTPUT = 'WrongOutput'
    TIME_LIMIT = 'TimeLimit'
    MEMORY_LIMIT = 'MemoryLimit'
    RUNTIME_ERROR = 'RuntimeError'


class Overall(str, enum.Enum):
    EVALUATED = 'Evaluated'
    COMPILE_ERROR = 'CompileError'
    TAMPERED = 'Tampered'


@dataclass(frozen=True)
class TestCase:
    __test__ = False

    name: str
    input_path: Path
    expected_path: Path
    args: tuple[str, ...] = ()


@dataclass(frozen=True)
class TestVerdict:
    __test__ = False

    name: str
    outcome: TestOutcome
    run: RunOutcome
    expected: bytes = b''
    diff_excerpt: str | None = None

    @property
    def passed(self) -> bool:
        return self.outcome is TestOutcome.PASS


@dataclass(frozen=True)
class AnalyzerSection:
    title: str
    body: str
    ok: bool


@dataclass(frozen=True)
class EvaluationReport:
    event: SubmissionEvent
    evaluated_at: int
    overall: Overall
    cooldown_until: int
    test_verdicts: tuple[TestVerdict, ...] = ()
    analyzer_sections: tuple[AnalyzerSection, ...] = ()
    build_output: str | None = None
    test_count: int = 0

    def __post_init__(self) -> None:
        if self.overall is Overall.TAMPERED and self.test_verdicts:
            raise ValueError('a tampered submission runs no tests')

    @property
    def passed(self) -> int:
        return sum(v.passed for v in self.test_verdicts)

    @property
    def failed(self) -> int:
        return self.test_count - self.passed
