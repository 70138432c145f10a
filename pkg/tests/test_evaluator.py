import re

import pytest
from hypothesis import given, strategies as st

from gitgrade.commit_db import Status
from gitgrade.config import AnalyzerSpec, OnFailure, Role
from gitgrade.evaluator import (compare_output, detect_tamper, discover_tests, expand_command,
                                forbidden_includes, run_analyzers, run_tests)
from gitgrade.models import Overall, TestOutcome
from gitgrade.provisioner import CI_FILE
from gitgrade.reporting import render_feedback
from gitgrade.sandbox import ResourceLimits

from conftest import BAD_SOLUTION, GOOD_SOLUTION, STUDENTS, write_tests

LIMITS = ResourceLimits(cpu_s=2, mem_bytes=2**30, wall_s=5)


# pure helpers

def test_detect_tamper(tmp_path):
    canonical = b'stages: [submit]\n'
    (tmp_path / CI_FILE).write_bytes(canonical)
    assert not detect_tamper(tmp_path, canonical)
    (tmp_path / CI_FILE).write_bytes(b'stages: [submiT]\n')
    assert detect_tamper(tmp_path, canonical)
    (tmp_path / CI_FILE).unlink()
    assert detect_tamper(tmp_path, canonical)
    assert detect_tamper(None, canonical)


@pytest.mark.parametrize('actual, expected, same', [
    (b'1 2\n', b'1 2\n', True),
    (b'1 2', b'1 2\n', True),
    (b'1 2\n', b'1 3\n', False),
    (b'1 2  \t\n', b'1 2\n', True),
    (b'1 2\n\n', b'1 2\n', True),
    (b'1 2\n\n\n', b'1 2\n', False),
    (b'\n1 2\n', b'1 2\n', False),
    (b'', b'', True),
])
def test_compare_output(actual, expected, same):
    assert compare_output(actual, expected) is same


lines_st = st.lists(st.text(st.sampled_from('ab1 \t'), max_size=6), max_size=5)


@given(lines_st, st.booleans(), st.lists(st.sampled_from([' ', '\t']), max_size=3))
def test_compare_output_ignores_trailing_blanks(lines, final_newline, pad):
    expected = ''.join(line + '\n' for line in lines).encode()
    actual = '\n'.join(line + ''.join(pad) for line in lines)
    if lines and final_newline:
        actual += '\n'
    assert compare_output(actual.encode(), expected)


def test_discover_tests(tmp_path):
    write_tests(tmp_path, {'b': ('', ''), 'a': ('', '')})
    (tmp_path / 'a.args').write_text('--fast\n\nx y\n')
    cases = discover_tests(tmp_path)
    assert [c.name for c in cases] == ['a', 'b']
    assert cases[0].args == ('--fast', 'x y')


def test_expand_command():
    assert expand_command('python3 {workdir}/main.py < {test_input}', workdir='/w', test_input='/t/a.in') == [
        'python3', '/w/main.py', '<', '/t/a.in']


def assessment_for(course_factory, tests, run_cmd, **extra):
    c = course_factory(tests=tests, assessment={'run_cmd': run_cmd, **extra})
    return c.config.assessment('lab1')


def test_run_tests_empty(course_factory, tmp_path):
    a = assessment_for(course_factory, {}, 'cat')
    assert run_tests(tmp_path, a) == []


def test_run_tests_echo(course_factory, tmp_path):
    a = assessment_for(course_factory, {'t': ('x\n', 'x\n')}, 'cat')
    [v] = run_tests(tmp_path, a)
    assert v.outcome is TestOutcome.PASS


def test_run_tests_do_not_short_circuit(course_factory, tmp_path):
    (tmp_path / 'main.py').write_bytes(b'import sys\nd = sys.stdin.read()\nprint(d, end="")\n'
                                       b'sys.exit(1 if d == "2\\n" else 0)\n')
    a = assessment_for(course_factory, {'t1': ('1\n', '1\n'), 't2': ('2\n', '2\n'), 't3': ('3\n', 'x\n')},
                       'python3 {workdir}/main.py')
    assert [(v.name, v.outcome) for v in run_tests(tmp_path, a)] == [
        ('t1', TestOutcome.PASS), ('t2', TestOutcome.RUNTIME_ERROR), ('t3', TestOutcome.WRONG_OUTPUT)]


def test_run_tests_args_and_input_placeholder(course_factory, tmp_path):
    tests = {'t': ('ignored\n', 'file-arg extra\n')}
    (tmp_path / 'main.py').write_bytes(b'import sys, os\nprint(os.path.basename(sys.argv[1])[:1] and "file-arg", '
                                       b'sys.argv[2])\n')
    c = course_factory(tests=tests, assessment={'run_cmd': 'python3 {workdir}/main.py {test_input}'})
    (c.root / 'tests' / 'lab1' / 't.args').write_text('extra\n')
    [v] = run_tests(tmp_path, c.config.assessment('lab1'))
    assert v.outcome is TestOutcome.PASS, v.run.stderr


def test_forbidden_includes(tmp_path):
    (tmp_path / 'main.c').write_text('#include <stdio.h>\n\n#include <string.h>\nint main(){}\n')
    (tmp_path / 'notes.txt').write_text('string.h\n')
    section = forbidden_includes(tmp_path, ['string.h'], ('.c', '.h'))
    assert not section.ok
    assert 'main.c:3' in section.body
    assert 'notes.txt' not in section.body
    (tmp_path / 'main.c').write_text('#include <stdio.h>\n')
    clean = forbidden_includes(tmp_path, ['string.h'], ('.c',))
    assert clean.ok and clean.body == ''
    assert forbidden_includes(tmp_path, [], ('.c',)).ok


def test_run_analyzers(tmp_path):
    specs = [
        AnalyzerSpec('echo', 'Echo', 'echo all good {workdir}'),
        AnalyzerSpec('fail', 'Fail', 'false {workdir}', on_failure=OnFailure.SKIP),
        AnalyzerSpec('slow', 'Slow', 'sleep 10 {workdir}', timeout_s=1),
        AnalyzerSpec('file', 'File', 'sh -c "echo from-file > {out}" {workdir}'),
    ]
    sections = run_analyzers(tmp_path, specs, LIMITS)
    assert [(s.title, s.ok) for s in sections] == [('Echo', True), ('Slow', False), ('File', True)]
    assert sections[0].body.startswith('all good')
    assert sections[2].body == 'from-file\n'


# full pipeline against the mock server

def evaluate_push(course, gid, files, evaluator=None, **kw):
    course.push(gid, files)
    [event] = course.take_events()
    return (evaluator or course.evaluator()).evaluate(event, **kw)


def test_happy_path(course):
    course.setup()
    result = evaluate_push(course, 'g1', {'main.py': GOOD_SOLUTION})
    assert result.record.status is Status.EVALUATED
    assert (result.record.tests_passed, result.record.tests_failed) == (3, 0)
    files = course.mock.list_files(course.feedback_path('g1'))
    assert files == ['README.md', f'code-{result.record.commit[:8]}.tar']


def test_tamper_dominates_cooldown(course):
    course.setup()
    ev = course.evaluator()
    evaluate_push(course, 'g1', {'main.py': GOOD_SOLUTION}, ev)
    course.clock.advance(5)
    result = evaluate_push(course, 'g1', {CI_FILE: b'stages: []\n'}, ev)
    assert result.record.status is Status.SKIPPED_TAMPER
    assert result.report.overall is Overall.TAMPERED
    for user in STUDENTS['g1']:
        assert course.mock.member_role('cs101/lab1/g1', user) is Role.REPORTER
    assert course.mock.member_role('cs101/lab1/g2', 'carol') is Role.DEVELOPER


def test_cooldown_skip_leaves_feedback_untouched(course):
    course.setup()
    ev = course.evaluator()
    evaluate_push(course, 'g1', {'main.py': BAD_SOLUTION}, ev)
    head = course.mock.head(course.feedback_path('g1'))
    course.clock.advance(30)
    result = evaluate_push(course, 'g1', {'main.py': GOOD_SOLUTION}, ev)
    assert result.record.status is Status.SKIPPED_COOLDOWN
    assert course.mock.head(course.feedback_path('g1')) == head


def test_compile_error_still_runs_builtin_analyzer(course_factory):
    c = course_factory(assessment={'build_cmd': 'python3 -m py_compile {workdir}/main.py',
                                   'forbidden_patterns': ['import os']})
    c.setup()
    result = evaluate_push(c, 'g1', {'main.py': b'import os\ndef broken(:\n'})
    assert result.report.overall is Overall.COMPILE_ERROR
    assert result.report.test_verdicts == ()
    assert (result.record.tests_passed, result.record.tests_failed) == (0, 3)
    readme = c.mock.read_file(c.feedback_path('g1'), 'README.md').decode()
    assert '## Build output' in readme and 'SyntaxError' in readme
    assert 'main.py:1' in readme


def test_reevaluating_same_commit_changes_only_timestamps(course):
    course.setup()
    ev = course.evaluator()
    first = evaluate_push(course, 'g1', {'main.py': BAD_SOLUTION}, ev)
    course.clock.advance(1000)
    event = first.report.event
    second = ev.evaluate(event)
    stamp = re.compile(rb'\d{4}-\d\d-\d\dT\d\d:\d\d:\d\dZ')
    a = stamp.sub(b'TS', render_feedback(first.report, course.config.assessment('lab1')))
    b = stamp.sub(b'TS', course.mock.read_file(course.feedback_path('g1'), 'README.md'))
    assert a == b
    assert second.record.status is Status.EVALUATED


def test_engine_never_pushes_to_submission_repos(course):
    course.setup()
    before = {g: course.mock.commit_count(f'cs101/lab1/{g}') for g in STUDENTS}
    ev = course.evaluator()
    evaluate_push(course, 'g1', {'main.py': GOOD_SOLUTION}, ev)
    evaluate_push(course, 'g2', {CI_FILE: b'x'}, ev)
    after = {g: course.mock.commit_count(f'cs101/lab1/{g}') for g in STUDENTS}
    assert after == {**before, 'g1': before['g1'] + 1, 'g2': before['g2'] + 1}


def test_unknown_commit_is_recorded_failed(course):
    from gitgrade.errors import EvaluationFailed
    from gitgrade.submission_intake import SubmissionEvent
    course.setup()
    bogus = SubmissionEvent('lab1', 'g1', 'f' * 40, 1, 'cs101/lab1/g1', 'alice')
    with pytest.raises(EvaluationFailed):
        course.evaluator().evaluate(bogus)
    assert [r.status for r in course.db.records('lab1', 'g1')] == [Status.FAILED]


def test_reevaluate_all_bypasses_cooldown(course_factory):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob'], 'g3': ['carol']})
    c.setup()
    ev = c.evaluator()
    evaluate_push(c, 'g1', {'main.py': GOOD_SOLUTION}, ev)
    c.clock.advance(1)
    results = ev.reevaluate_all('lab1')
    assert results == {'g1': Status.EVALUATED, 'g2': Status.EVALUATED, 'g3': Status.EVALUATED}
    fresh = [r for r in c.db.records('lab1') if r.evaluated_at == int(c.clock())]
    assert sorted(r.group_id for r in fresh) == ['g1', 'g2', 'g3']
