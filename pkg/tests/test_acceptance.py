"""End-to-end acceptance scenarios, one test per criterion.

The terminal summary prints ``criterion N: PASS|FAIL`` for each of them.
"""

import os
import random
import re
import threading
import time
from pathlib import Path

import pytest

from gitgrade import evaluator as evaluator_mod
from gitgrade import sandbox
from gitgrade.cli import main, serve
from gitgrade.commit_db import Status, days_since, read_csv
from gitgrade.config import Kind, Role, build_config
from gitgrade.mock_gitlab import PushDenied
from gitgrade.provisioner import CI_FILE
from gitgrade.reporting import DashboardRow, parse_dashboard, ranking_key
from gitgrade.sandbox import ResourceLimits, Verdict

from conftest import BAD_SOLUTION, GOOD_SOLUTION, STUDENTS, live_marked_processes

GOLDEN = Path(__file__).parent / 'golden'
# upper-cases only the first line: passes t1 and t3, fails t2
PARTIAL_SOLUTION = b'import sys\nlines = sys.stdin.read().split("\\n")\nlines[0] = lines[0].upper()\n' \
                   b'print("\\n".join(lines), end="")\n'


def cli(course, *args):
    return main(['--config', str(course.config_path), *args])


def one_event(course, gid, files):
    course.push(gid, files)
    [event] = course.take_events()
    return event


@pytest.mark.criterion(1, 'end-to-end happy path under one serve cycle')
def test_end_to_end_happy_path(course_factory, capsys):
    c = course_factory()
    assert cli(c, 'init') == 0
    materials = c.root / 'materials'
    materials.mkdir()
    (materials / 'README.md').write_text('# Lab 1\n')
    assert cli(c, 'publish', '--assessment', 'lab1', '--materials', str(materials)) == 0

    stop = threading.Event()
    server = threading.Thread(target=serve, args=(c.config, stop), kwargs={'workers': 2, 'poll_interval': 0.1})
    server.start()
    try:
        start = time.monotonic()
        sha = c.mock.simulate_student_push('cs101/lab1/g1', {'main.py': GOOD_SOLUTION}, 'alice')
        fb = c.feedback_path('g1')
        while time.monotonic() - start < 10 and c.mock.head(fb) is None:
            time.sleep(0.05)
        feedback_latency = time.monotonic() - start
        while time.monotonic() - start < 10 and b'| g1 | 3 |' not in _dashboard(c):
            time.sleep(0.05)
        elapsed = time.monotonic() - start
    finally:
        stop.set()
        server.join(30)
    assert feedback_latency < 10 and elapsed < 10, (feedback_latency, elapsed)
    readme = c.mock.read_file(fb, 'README.md').decode()
    assert '**Result: 3/3 tests passed.**' in readme
    assert all(f'| t{i} | Pass |' in readme for i in (1, 2, 3))
    assert sorted(c.mock.list_files(fb)) == ['README.md', f'code-{sha[:8]}.tar']
    dashboard = _dashboard(c)
    generated = re.search(rb'Generated at: (\S+)', dashboard).group(1).decode()
    now = time.mktime(time.strptime(generated, '%Y-%m-%dT%H:%M:%SZ')) - time.timezone
    days = days_since(c.config.assessment('lab1').start_date, now)
    assert DashboardRow('g1', 3, 0, 1, days) in parse_dashboard(dashboard)


def _dashboard(c):
    try:
        return c.mock.read_file('cs101/course-info', 'dashboards/lab1.md')
    except Exception:
        return b''


@pytest.mark.criterion(2, 'cooldown defaults and boundary')
def test_cooldown(course_factory, tmp_path):
    defaults = build_config({'course_id': 'c', 'server_base_url': 'x', 'auth_token_env': 'T', 'drop_dir': 'd',
                             'work_dir': 'w', 'state_db_path': 's', 'roster_path': 'r', 'assessments': [
                                 {'id': 'l', 'kind': 'Lab', 'start_date': '2024-01-01', 'tests_dir': 't',
                                  'run_cmd': 'x'},
                                 {'id': 'p', 'kind': 'Project', 'start_date': '2024-01-01', 'tests_dir': 't',
                                  'run_cmd': 'x'}]}, tmp_path)
    assert [(a.kind, a.cooldown_s) for a in defaults.assessments] == [(Kind.LAB, 60), (Kind.PROJECT, 600)]

    c = course_factory()
    c.setup()
    ev = c.evaluator()
    fb = c.feedback_path('g1')
    assert ev.evaluate(one_event(c, 'g1', {'main.py': BAD_SOLUTION})).record.status is Status.EVALUATED
    c.clock.advance(30)
    assert ev.evaluate(one_event(c, 'g1', {'main.py': GOOD_SOLUTION})).record.status is Status.SKIPPED_COOLDOWN
    statuses = [r.status for r in c.db.records('lab1', 'g1')]
    assert sorted(statuses) == [Status.EVALUATED, Status.SKIPPED_COOLDOWN]
    assert c.mock.commit_count(fb) == 1
    c.clock.advance(30)  # exactly 60 s after the first evaluation
    assert ev.evaluate(one_event(c, 'g1', {'main.py': GOOD_SOLUTION})).record.status is Status.EVALUATED
    assert c.mock.commit_count(fb) == 2


@pytest.mark.criterion(3, 'tamper lockout')
def test_tamper_lockout(course, monkeypatch):
    course.setup()
    runs = []
    real_run = sandbox.run
    monkeypatch.setattr(evaluator_mod.sandbox, 'run', lambda *a, **k: runs.append(a) or real_run(*a, **k))
    ci = course.mock.read_file('cs101/lab1/g1', CI_FILE)
    event = one_event(course, 'g1', {CI_FILE: ci.replace(b'set -eu', b'set -eu; echo hi'),
                                     'main.py': GOOD_SOLUTION})
    result = course.evaluator().evaluate(event)
    assert result.record.status is Status.SKIPPED_TAMPER
    assert runs == []
    assert result.report.test_verdicts == ()
    for user in STUDENTS['g1']:
        assert course.mock.member_role('cs101/lab1/g1', user) is Role.REPORTER
    readme = course.mock.read_file(course.feedback_path('g1'), 'README.md').decode()
    assert '## Tampered' in readme
    assert 'reach out to the faculty' in readme
    assert '## Results' not in readme


@pytest.mark.slow
@pytest.mark.criterion(4, 'sandbox busy loop under the default cpu limit')
def test_sandbox_busy_loop(tmp_path):
    limits = ResourceLimits(cpu_s=5, mem_bytes=8 * 2**30, wall_s=15)
    program = tmp_path / 'spin.py'
    program.write_text('import subprocess\nsubprocess.Popen(["sleep", "120"])\nwhile True:\n    pass\n')
    start = time.monotonic()
    out = sandbox.run(['python3', str(program)], workdir=tmp_path, limits=limits)
    total_wall = time.monotonic() - start
    print(f'busy loop: verdict={out.verdict.value} cpu={out.cpu_used_s:.2f}s wall={total_wall:.2f}s')
    assert out.verdict is Verdict.TIME_LIMIT
    assert 5 <= out.cpu_used_s <= 5 + sandbox.GRACE_S
    assert total_wall <= limits.wall_s + 2
    assert live_marked_processes() == []


VISIBILITY_TESTS = {'t1': ('a\n', 'A\n'), 't2': ('b\n', 'B\n'), 't3': ('c\n', 'C\n')}
# right on t1, wrong on t2 and t3
VISIBILITY_SOLUTION = b'import sys\nd = sys.stdin.read()\nprint(d.upper() if d == "a\\n" else d, end="")\n'


@pytest.mark.criterion(5, 'default visibility shows only the first wrong output')
def test_visibility_flags(course_factory):
    readmes = []
    for name in ('run1', 'run2'):
        c = course_factory(name, groups={'g1': ['alice']}, tests=VISIBILITY_TESTS)
        c.setup()
        event = one_event(c, 'g1', {'main.py': VISIBILITY_SOLUTION})
        report = c.evaluator().evaluate(event).report
        assert [v.outcome.value for v in report.test_verdicts] == ['Pass', 'WrongOutput', 'WrongOutput']
        readme = c.mock.read_file(c.feedback_path('g1'), 'README.md')
        readmes.append(readme.replace(event.commit[:8].encode(), b'<commit>'))
    blocks = re.findall(rb'^## Output of test `(\w+)`$', readmes[0], re.M)
    assert blocks == [b't2']
    assert readmes[0].count(b'Expected output:') == readmes[0].count(b'Your output:') == 1
    assert readmes[0] == readmes[1]
    if os.environ.get('GITGRADE_UPDATE_GOLDEN'):
        (GOLDEN / 'acceptance_visibility.md').write_bytes(readmes[0])
    assert readmes[0] == (GOLDEN / 'acceptance_visibility.md').read_bytes()


@pytest.mark.criterion(6, 'dashboard equals a brute-force recount of the CSV dump')
def test_dashboard_oracle(course, capsys):
    course.setup()
    ev = course.evaluator()
    rng = random.Random(20240219)
    solutions = [GOOD_SOLUTION, BAD_SOLUTION, PARTIAL_SOLUTION]
    groups = sorted(STUDENTS)
    seen = set()
    for i in range(55):
        gid = rng.choice(groups)
        course.clock.advance(rng.choice([5, 20, 45, 61, 90]))
        files = {'main.py': rng.choice(solutions), 'note.txt': str(i).encode()}
        status = ev.evaluate(one_event(course, gid, files), update_dashboard=False).record.status
        seen.add(status)
    assert {Status.EVALUATED, Status.SKIPPED_COOLDOWN} <= seen
    ev.refresh_dashboard('lab1')

    assert cli(course, 'dump') == 0
    records = list(read_csv(capsys.readouterr().out))
    assert len(records) == 55
    now = course.clock()
    start = course.config.assessment('lab1').start_date
    expected = []
    for gid in groups:
        mine = [r for r in records if r.group_id == gid]
        evaluated = [r for r in mine if r.status is Status.EVALUATED]
        last = max(evaluated, key=lambda r: r.evaluated_at, default=None)
        passed, failed = (last.tests_passed, last.tests_failed) if last else (0, 0)
        expected.append(DashboardRow(gid, passed, failed, len(mine), days_since(start, now)))
    expected.sort(key=lambda r: (-r.passed, r.submissions, r.group_id))

    published = parse_dashboard(course.mock.read_file('cs101/course-info', 'dashboards/lab1.md'))
    assert published == expected
    assert published == sorted(published, key=ranking_key)


@pytest.mark.criterion(7, 'lock then reevaluate once per group; students can no longer push')
def test_lock_and_reevaluate(course, capsys):
    course.setup()
    ev = course.evaluator()
    ev.evaluate(one_event(course, 'g1', {'main.py': GOOD_SOLUTION}))
    course.push('g2', {'main.py': BAD_SOLUTION})
    course.take_events()
    before = len(course.db.records('lab1'))

    assert cli(course, 'lock', '--assessment', 'lab1') == 0
    assert cli(course, 'reevaluate', '--assessment', 'lab1') == 0
    out = capsys.readouterr().out
    assert 'demoted 6' in out

    fresh = course.db.records('lab1')[before:]
    assert sorted(r.group_id for r in fresh) == sorted(STUDENTS)
    assert {r.status for r in fresh} == {Status.EVALUATED}
    g1 = [r for r in fresh if r.group_id == 'g1'][0]
    assert (g1.tests_passed, g1.tests_failed) == (3, 0)
    for gid, members in STUDENTS.items():
        for user in members:
            assert course.mock.member_role(f'cs101/lab1/{gid}', user) is Role.REPORTER
            with pytest.raises(PushDenied):
                course.push(gid, {'main.py': GOOD_SOLUTION}, author=user)


@pytest.mark.criterion(8, 'init is idempotent')
def test_init_idempotent(course, capsys):
    assert cli(course, 'init') == 0
    first_out = capsys.readouterr().out
    assert first_out.strip() and first_out != 'no changes\n'
    snapshot = course.mock.snapshot()
    assert cli(course, 'init') == 0
    assert capsys.readouterr().out == 'no changes\n'
    assert course.mock.snapshot() == snapshot


@pytest.mark.criterion(9, 'forbidden-library analyzer')
def test_forbidden_library(course_factory):
    c = course_factory(groups={'g1': ['alice']}, assessment={'forbidden_patterns': ['string.h']})
    c.setup()
    ev = c.evaluator()
    source = b'#include <stdio.h>\n\n#include <string.h>\nint main(void) { return 0; }\n'
    report = ev.evaluate(one_event(c, 'g1', {'main.py': GOOD_SOLUTION, 'main.c': source})).report
    [section] = report.analyzer_sections
    assert not section.ok
    readme = c.mock.read_file(c.feedback_path('g1'), 'README.md').decode()
    assert '## Hints: Forbidden libraries' in readme
    assert 'main.c:3' in readme

    c.clock.advance(60)
    clean = source.replace(b'#include <string.h>\n', b'')
    report = ev.evaluate(one_event(c, 'g1', {'main.c': clean})).report
    [section] = report.analyzer_sections
    assert section.ok
    assert 'main.c:3' not in c.mock.read_file(c.feedback_path('g1'), 'README.md').decode()
