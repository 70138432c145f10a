from __future__ import annotations

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import pytest
import yaml

from gitgrade.commit_db import CommitDB
from gitgrade.config import CourseConfig, load_config
from gitgrade.evaluator import Evaluator
from gitgrade.git_ops import Author
from gitgrade.gitlab_api import GitLabClient
from gitgrade.mock_gitlab import MockGitLab
from gitgrade.provisioner import CourseTopology, load_rosters, provision_course, publish_assessment
from gitgrade.submission_intake import SubmissionEvent, parse_event

TOKEN = 'mock-token'
STUDENTS = {'g1': ['alice', 'bob'], 'g2': ['carol'], 'g3': ['dave'], 'g4': ['erin'], 'g5': ['frank']}
FACULTY = ['prof']

# Reads lines from stdin and prints them upper-cased.
GOOD_SOLUTION = b'import sys\nfor line in sys.stdin:\n    print(line.rstrip("\\n").upper())\n'
BAD_SOLUTION = b'import sys\nfor line in sys.stdin:\n    print(line.rstrip("\\n"))\n'
UPPER_TESTS = {'t1': ('hello\n', 'HELLO\n'), 't2': ('a\nb\n', 'A\nB\n'), 't3': ('MiXeD\n', 'MIXED\n')}


def write_tests(directory: Path, cases: dict[str, tuple[str, str]]) -> Path:
    directory.mkdir(parents=True, exist_ok=True)
    for name, (inp, out) in cases.items():
        (directory / f'{name}.in').write_text(inp)
        (directory / f'{name}.out').write_text(out)
    return directory


class FakeClock:
    def __init__(self, now: float = 1_700_000_000.0):
        self.now = now

    def __call__(self) -> float:
        return self.now

    def advance(self, seconds: float) -> None:
        self.now += seconds


@dataclass
class Course:
    root: Path
    mock: MockGitLab
    config: CourseConfig
    config_path: Path
    client: GitLabClient
    clock: FakeClock
    groups: dict[str, list[str]] = field(default_factory=dict)
    topology: CourseTopology | None = None
    _db: CommitDB | None = field(default=None, repr=False)

    @property
    def db(self) -> CommitDB:
        if self._db is None:
            self._db = CommitDB(self.config.state_db_path)
        return self._db

    def init(self) -> CourseTopology:
        self.topology = provision_course(self.client, self.config, load_rosters(self.config))
        return self.topology

    def publish(self, aid: str = 'lab1') -> None:
        materials = self.root / 'materials' / aid
        materials.mkdir(parents=True, exist_ok=True)
        (materials / 'README.md').write_text(f'# {aid}\n\nUpper-case every input line.\n')
        result = publish_assessment(self.topology, self.config, self.config.assessment(aid), materials,
                                    Author('prof', 'prof@course.invalid'), TOKEN)
        assert not result.errors

    def setup(self, aid: str = 'lab1') -> 'Course':
        self.init()
        self.publish(aid)
        return self

    def evaluator(self) -> Evaluator:
        return Evaluator(self.config, self.client, self.db, self.topology, token=TOKEN, clock=self.clock)

    def push(self, gid: str, files: dict[str, bytes | None], aid: str = 'lab1',
             author: str | None = None, pushed_at: int | None = None) -> str:
        author = author or self.groups[gid][0]
        when = int(self.clock()) if pushed_at is None else pushed_at
        return self.mock.simulate_student_push(f'{self.config.course_id}/{aid}/{gid}', files, author,
                                               pushed_at=when)

    def take_events(self) -> list[SubmissionEvent]:
        """Parse and remove every event file the mock runner dropped."""
        events = []
        for p in sorted(self.config.drop_dir.glob('*.sub')):
            events.append(parse_event(p.read_bytes(), filename=p.name))
            p.unlink()
        return sorted(events, key=lambda e: (e.pushed_at, e.group_id))

    def feedback_path(self, gid: str, aid: str = 'lab1') -> str:
        return f'{self.config.course_id}/feedback/{aid}-{gid}'

    def close(self) -> None:
        if self._db is not None:
            self._db.close()


def make_course(root: Path, monkeypatch: pytest.MonkeyPatch, *, groups: dict[str, list[str]] | None = None,
                assessment: dict[str, Any] | None = None, tests: dict[str, tuple[str, str]] | None = None,
                clock: FakeClock | None = None) -> Course:
    groups = STUDENTS if groups is None else groups
    (root / 'drop').mkdir(parents=True, exist_ok=True)
    write_tests(root / 'tests' / 'lab1', UPPER_TESTS if tests is None else tests)
    (root / 'roster.txt').write_text(''.join(f'{g}: {",".join(m)}\n' for g, m in groups.items()))
    users = [u for m in groups.values() for u in m] + FACULTY
    mock = MockGitLab(root / 'remote', root / 'drop', token=TOKEN, users=users).start()
    a = {'id': 'lab1', 'kind': 'Lab', 'start_date': '2024-01-01', 'tests_dir': 'tests/lab1',
         'run_cmd': 'python3 {workdir}/main.py', 'cpu_limit_s': 2}
    a.update(assessment or {})
    raw = {
        'course_id': 'cs101', 'server_base_url': mock.base_url, 'auth_token_env': 'GITGRADE_TOKEN',
        'drop_dir': 'drop', 'work_dir': 'work', 'state_db_path': 'state.sqlite', 'roster_path': 'roster.txt',
        'faculty': FACULTY, 'assessments': [a],
    }
    path = root / 'course.yaml'
    path.write_text(yaml.safe_dump(raw, sort_keys=False))
    monkeypatch.setenv('GITGRADE_TOKEN', TOKEN)
    config = load_config(path)
    return Course(root, mock, config, path, GitLabClient(mock.base_url, TOKEN, backoff=(0.01,)),
                  clock or FakeClock(), dict(groups))


@pytest.fixture
def course_factory(tmp_path, monkeypatch):
    made: list[Course] = []

    def factory(name: str = 'course', **kwargs: Any) -> Course:
        c = make_course(tmp_path / name, monkeypatch, **kwargs)
        made.append(c)
        return c

    yield factory
    for c in made:
        c.close()
        c.mock.shutdown()


@pytest.fixture
def course(course_factory) -> Course:
    return course_factory()


def live_marked_processes() -> list[int]:
    """PIDs of live (non-zombie) processes started by the sandbox."""
    import psutil

    from gitgrade.sandbox import MARKER_ENV
    found = []
    for proc in psutil.process_iter(['pid', 'status']):
        try:
            if proc.info['status'] == psutil.STATUS_ZOMBIE or proc.pid == os.getpid():
                continue
            if MARKER_ENV in proc.environ():
                found.append(proc.pid)
        except (psutil.NoSuchProcess, psutil.AccessDenied, psutil.ZombieProcess):
            continue
    return found


# acceptance criteria summary: one line per criterion in the terminal report

_criteria: dict[int, tuple[str, str]] = {}


def pytest_configure(config):
    config.addinivalue_line('markers', 'criterion(number, title): acceptance criterion covered by a test')


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker('criterion')
    if marker is None:
        return
    number, title = marker.args
    failed = report.failed or (report.when == 'call' and report.skipped)
    if report.when == 'call' or failed:
        previous = _criteria.get(number, (title, 'PASS'))[1]
        _criteria[number] = (title, 'FAIL' if failed or previous == 'FAIL' else 'PASS')


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section('acceptance criteria')
    for number in sorted(_criteria):
        title, verdict = _criteria[number]
        terminalreporter.write_line(f'criterion {number}: {verdict} - {title}')
