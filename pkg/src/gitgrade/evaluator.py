"""The evaluation pipeline for one submission event.

Order is fixed: tamper check, cooldown check, checkout, build, tests,
analyzers, report.  Student submission repositories are only ever read
here; reports go to the group's feedback repository.
"""

from __future__ import annotations

import logging
import os
import shlex
import threading
import time
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

from . import git_ops, sandbox
from .commit_db import CommitDB, Status, SubmissionRecord
from .config import AnalyzerSpec, AssessmentConfig, CourseConfig, OnFailure
from .errors import EvaluationFailed, GitGradeError, UnknownUser
from .git_ops import Author, WorkTree
from .gitlab_api import GitLabClient
from .models import (AnalyzerSection, EvaluationReport, Overall, TestCase, TestOutcome,
                     TestVerdict)
from .provisioner import CI_FILE, CourseTopology, stored_canonical_ci
from .reporting import (BUILD_OUTPUT_BYTES, Publisher, dashboard_rows, package_code,
                        render_dashboard, render_feedback)
from .sandbox import ResourceLimits, Verdict
from .submission_intake import SubmissionEvent

log = logging.getLogger(__name__)

FORBIDDEN_TITLE = 'Forbidden libraries'
NULL_COMMIT = '0' * 40


def detect_tamper(tree: WorkTree | Path | bytes | None, canonical_ci: bytes) -> bool:
    """True when ``.gitlab-ci.yml`` is missing or differs byte-wise from ``canonical_ci``.

    ``tree`` may be a checked-out tree, a directory, or the file's bytes
    (None meaning absent).
    """
    if isinstance(tree, (WorkTree, Path)):
        root = tree.local_path if isinstance(tree, WorkTree) else tree
        path = root / CI_FILE
        tree = path.read_bytes() if path.is_file() else None
    return tree != canonical_ci


def _strip_blanks(data: bytes) -> bytes:
    return b'\n'.join(line.rstrip(b' \t') for line in data.split(b'\n'))


def compare_output(actual: bytes, expected: bytes) -> bool:
    """Equality ignoring trailing blanks per line and one missing final newline."""
    a, e = _strip_blanks(actual), _strip_blanks(expected)
    return a == e or a + b'\n' == e or a == e + b'\n'


def discover_tests(tests_dir: Path) -> list[TestCase]:
    """``<name>.in`` / ``<name>.out`` pairs, plus optional ``<name>.args``."""
    tests_dir = Path(tests_dir)
    if not tests_dir.is_dir():
        raise FileNotFoundError(f'tests_dir {tests_dir} does not exist')
    cases = []
    for inp in sorted(tests_dir.glob('*.in')):
        out = inp.with_suffix('.out')
        if not out.is_file():
            raise FileNotFoundError(f'{inp.name} has no matching .out file')
        args_file = inp.with_suffix('.args')
        args = tuple(line for line in args_file.read_text().splitlines() if line) if args_file.is_file() else ()
        cases.append(TestCase(inp.stem, inp, out, args))
    return sorted(cases, key=lambda c: c.name)


def expand_command(template: str, **values: str) -> list[str]:
    """Split a command template and substitute ``{name}`` placeholders per token."""
    argv = []
    for token in shlex.split(template):
        for key, value in values.items():
            token = token.replace('{' + key + '}', value)
        argv.append(token)
    return argv


_OUTCOME = {
    Verdict.TIME_LIMIT: TestOutcome.TIME_LIMIT,
    Verdict.MEMORY_LIMIT: TestOutcome.MEMORY_LIMIT,
    Verdict.RUNTIME_ERROR: TestOutcome.RUNTIME_ERROR,
    Verdict.OUTPUT_LIMIT: TestOutcome.RUNTIME_ERROR,
}


def run_tests(workdir: Path, assessment: AssessmentConfig,
              cases: Sequence[TestCase] | None = None) -> list[TestVerdict]:
    """Run every test case in name order; a failing test never stops the rest."""
    workdir = Path(workdir)
    cases = discover_tests(assessment.tests_dir) if cases is None else cases
    limits = ResourceLimits.for_assessment(assessment)
    verdicts = []
    for case in sorted(cases, key=lambda c: c.name):
        argv = expand_command(assessment.run_cmd, workdir=str(workdir), test_input=str(case.input_path))
        run = sandbox.run(argv + list(case.args), stdin_source=case.input_path, workdir=workdir, limits=limits)
        if run.verdict is Verdict.SANDBOX_ERROR:
            raise EvaluationFailed(f'sandbox fault on test {case.name}')
        expected = case.expected_path.read_bytes()
        if run.verdict is Verdict.OK:
            outcome = TestOutcome.PASS if compare_output(run.stdout, expected) else TestOutcome.WRONG_OUTPUT
        else:
            outcome = _OUTCOME[run.verdict]
        verdicts.append(TestVerdict(case.name, outcome, run, expected))
    return verdicts


def _source_files(root: Path, extensions: Iterable[str]) -> list[Path]:
    exts = tuple(extensions)
    files = []
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames[:] = sorted(d for d in dirnames if d != '.git')
        files += [Path(dirpath) / f for f in sorted(filenames) if f.endswith(exts)]
    return files


def forbidden_includes(tree: WorkTree | Path, patterns: Sequence[str],
                       extensions: Iterable[str] = ('.c', '.h', '.py')) -> AnalyzerSection:
    """List ``file:line`` for every source line containing a forbidden pattern."""
    root = Path(tree.local_path if isinstance(tree, WorkTree) else tree)
    hits = []
    if patterns:
        for path in _source_files(root, extensions):
            text = path.read_bytes().decode('utf-8', errors='replace')
            for lineno, line in enumerate(text.splitlines(), 1):
                found = [p for p in patterns if p in line]
                if found:
                    rel = path.relative_to(root).as_posix()
                    hits.append(f'- `{rel}:{lineno}` uses `{found[0]}`: `{line.strip()}`')
    body = ''
    if hits:
        body = 'These lines use libraries that are not allowed in this assessment:\n\n' + '\n'.join(hits)
    return AnalyzerSection(FORBIDDEN_TITLE, body, not hits)


def run_analyzers(workdir: Path, specs: Sequence[AnalyzerSpec], limits: ResourceLimits,
                  out_dir: Path | None = None) -> list[AnalyzerSection]:
    workdir = Path(workdir)
    out_dir = Path(out_dir) if out_dir is not None else workdir.parent / f'{workdir.name}.analyzers'
    out_dir.mkdir(parents=True, exist_ok=True)
    sections = []
    for spec in specs:
        out_file = out_dir / f'{spec.name}.out'
        if out_file.exists():
            out_file.unlink()
        argv = expand_command(spec.command, workdir=str(workdir), out=str(out_file))
        spec_limits = ResourceLimits(cpu_s=spec.timeout_s, mem_bytes=limits.mem_bytes, wall_s=spec.timeout_s,
                                     max_output_bytes=limits.max_output_bytes,
                                     max_processes=limits.max_processes)
        run = sandbox.run(argv, workdir=workdir, limits=spec_limits)
        if run.verdict is not Verdict.OK:
            log.warning('analyzer.failed name=%s verdict=%s exit=%s', spec.name, run.verdict.value, run.exit_code)
            if spec.on_failure is OnFailure.WARN:
                sections.append(AnalyzerSection(
                    spec.title, f'This analyzer is currently unavailable ({run.verdict.value}).', False))
            continue
        body = out_file.read_bytes() if '{out}' in spec.command and out_file.exists() else run.stdout
        sections.append(AnalyzerSection(spec.title, body.decode('utf-8', errors='replace'), True))
    return sections


@dataclass(frozen=True)
class EvaluationResult:
    record: SubmissionRecord
    report: EvaluationReport | None = None


class Evaluator:
    """Runs the pipeline; one instance is shared by all serve workers."""

    def __init__(self, config: CourseConfig, client: GitLabClient, db: CommitDB, topology: CourseTopology,
                 *, token: str | None = None, clock: Callable[[], float] = time.time):
        self.config = config
        self.client = client
        self.db = db
        self.topology = topology
        self.token = token
        self.clock = clock
        self.author = Author(config.bot_name, config.bot_email)
        self.publisher = Publisher(config.work_dir / 'repos', self.author, token)
        self._key_locks: dict[tuple[str, str], threading.Lock] = defaultdict(threading.Lock)
        self._guard = threading.Lock()
        self._dashboard_lock = threading.Lock()

    def _lock_for(self, key: tuple[str, str]) -> threading.Lock:
        with self._guard:
            return self._key_locks[key]

    def _now(self) -> int:
        return int(self.clock())

    def _store(self, event: SubmissionEvent, received_at: int, status: Status, *, evaluated_at: int | None = None,
               passed: int = 0, failed: int = 0, test_count: int | None = None) -> SubmissionRecord:
        record = SubmissionRecord(event.assessment_id, event.group_id, event.commit, event.pushed_at,
                                  received_at, status, evaluated_at, passed, failed)
        self.db.record(record, test_count)
        log.info('evaluation.recorded assessment=%s group=%s commit=%s status=%s passed=%d failed=%d',
                 event.assessment_id, event.group_id, event.commit[:8], status.value, passed, failed)
        return record

    def record_superseded(self, event: SubmissionEvent) -> SubmissionRecord:
        """A queued push replaced by a newer one from the same group."""
        return self._store(event, self._now(), Status.SKIPPED_COOLDOWN)

    def record_failed(self, event: SubmissionEvent) -> SubmissionRecord:
        return self._store(event, self._now(), Status.FAILED)

    def evaluate(self, event: SubmissionEvent, *, bypass_cooldown: bool = False,
                 update_dashboard: bool = True) -> EvaluationResult:
        key = event.key
        with self._lock_for(key):
            received_at = self._now()
            try:
                return self._evaluate(event, received_at, bypass_cooldown, update_dashboard)
            except (GitGradeError, OSError) as e:
                log.error('evaluation.failed assessment=%s group=%s commit=%s error=%r',
                          event.assessment_id, event.group_id, event.commit[:8], str(e))
                try:
                    self._store(event, received_at, Status.FAILED)
                except GitGradeError:
                    log.exception('evaluation.record_failed')
                raise EvaluationFailed(f'{type(e).__name__}: {e}') from e

    def _evaluate(self, event: SubmissionEvent, received_at: int, bypass_cooldown: bool,
                  update_dashboard: bool) -> EvaluationResult:
        a = self.config.assessment(event.assessment_id)
        key = event.key
        submission_repo = self.topology.submissions[key]
        feedback_repo = self.topology.feedback[key]
        work = self.config.work_dir

        tree = git_ops.clone_or_update(submission_repo.clone_url, work / 'clones' / submission_repo.full_path,
                                       self.token)
        ci = git_ops.read_file_at(tree, event.commit, CI_FILE)
        if detect_tamper(ci, stored_canonical_ci(self.config, a.id)):
            return self._tampered(event, a, received_at)

        if not bypass_cooldown:
            until = self.db.check_cooldown(event.group_id, a.id, self.clock(), a.cooldown_s)
            if until is not None:
                log.info('evaluation.cooldown assessment=%s group=%s until=%d', a.id, event.group_id, until)
                return EvaluationResult(self._store(event, received_at, Status.SKIPPED_COOLDOWN))

        git_ops.checkout_commit(tree, event.commit)
        run_dir = git_ops.export_tree(tree, work / 'runs' / f'{a.id}-{event.group_id}')
        cases = discover_tests(a.tests_dir)
        limits = ResourceLimits.for_assessment(a)

        overall = Overall.EVALUATED
        build_output = None
        verdicts: list[TestVerdict] = []
        if a.build_cmd:
            build = sandbox.run(expand_command(a.build_cmd, workdir=str(run_dir)), workdir=run_dir, limits=limits)
            if build.verdict is Verdict.SANDBOX_ERROR:
                raise EvaluationFailed('sandbox fault during build')
            if build.verdict is not Verdict.OK:
                overall = Overall.COMPILE_ERROR
                build_output = (build.stdout + build.stderr)[:BUILD_OUTPUT_BYTES].decode('utf-8', errors='replace')
        if overall is Overall.EVALUATED:
            verdicts = run_tests(run_dir, a, cases)

        sections = []
        if a.forbidden_patterns:
            sections.append(forbidden_includes(tree, a.forbidden_patterns, a.source_extensions))
        sections += run_analyzers(run_dir, a.analyzers, limits)

        evaluated_at = self._now()
        report = EvaluationReport(event, evaluated_at, overall, evaluated_at + a.cooldown_s, tuple(verdicts),
                                  tuple(sections), build_output, len(cases))
        readme = render_feedback(report, a)
        tar = package_code(tree, mtime=evaluated_at)
        self.publisher.publish(readme, tar, feedback_repo, event.commit[:8])
        record = self._store(event, received_at, Status.EVALUATED, evaluated_at=evaluated_at,
                             passed=report.passed, failed=report.failed, test_count=len(cases))
        if update_dashboard:
            self.refresh_dashboard(a.id)
        return EvaluationResult(record, report)

    def _tampered(self, event: SubmissionEvent, a: AssessmentConfig, received_at: int) -> EvaluationResult:
        repo = self.topology.submissions[event.key]
        for user in self.topology.members(a.id, event.group_id):
            try:
                self.client.revoke_write(repo, user)
            except UnknownUser:
                log.warning('tamper.not_member repo=%s user=%s', repo.full_path, user)
        log.warning('evaluation.tampered assessment=%s group=%s commit=%s pusher=%s',
                    a.id, event.group_id, event.commit[:8], event.pusher)
        now = self._now()
        report = EvaluationReport(event, now, Overall.TAMPERED, now + a.cooldown_s)
        self.publisher.publish(render_feedback(report, a), None, self.topology.feedback[event.key],
                               event.commit[:8])
        return EvaluationResult(self._store(event, received_at, Status.SKIPPED_TAMPER), report)

    def refresh_dashboard(self, assessment_id: str) -> None:
        """Re-render and push the dashboard; failures are logged, not raised."""
        a = self.config.assessment(assessment_id)
        with self._dashboard_lock:
            now = self._now()
            rows = dashboard_rows(self.db, a, self.topology.rosters[a.id].group_ids, now)
            try:
                self.publisher.publish_dashboard(render_dashboard(rows, a.id, now), a.id, self.topology.course_info)
            except GitGradeError as e:
                log.error('dashboard.failed assessment=%s error=%r', a.id, str(e))

    def reevaluate_all(self, assessment_id: str) -> dict[str, Status]:
        """Evaluate every group's head commit once, ignoring cooldowns."""
        a = self.config.assessment(assessment_id)
        results: dict[str, Status] = {}
        for gid in self.topology.rosters[a.id].group_ids:
            repo = self.topology.submissions[a.id, gid]
            now = self._now()
            try:
                tree = git_ops.clone_or_update(repo.clone_url,
                                               self.config.work_dir / 'clones' / repo.full_path, self.token)
                head = tree.current_commit
            except GitGradeError as e:
                log.error('reevaluate.clone_failed repo=%s error=%r', repo.full_path, str(e))
                head = None
            event = SubmissionEvent(a.id, gid, head or NULL_COMMIT, now, repo.full_path, 'reevaluate')
            if head is None:
                results[gid] = self.record_failed(event).status
                continue
            try:
                results[gid] = self.evaluate(event, bypass_cooldown=True, update_dashboard=False).record.status
            except EvaluationFailed:
                results[gid] = Status.FAILED
        self.refresh_dashboard(a.id)
        return results
