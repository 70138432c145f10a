import pytest

from gitgrade.config import Role
from gitgrade.errors import RosterError, UnknownAssessment
from gitgrade.git_ops import Author
from gitgrade.provisioner import (CI_FILE, GITIGNORE_NOTE, README_WARNING, Roster, canonical_ci,
                                  load_rosters, lock_assessment, parse_roster, provision_course,
                                  publish_assessment)

BOT = Author('gitgrade bot', 'bot@course.invalid')


def test_parse_roster():
    r = parse_roster('# groups\ng1: alice, bob\n\ng2: carol  # solo\n')
    assert r.entries == (('g1', ('alice', 'bob')), ('g2', ('carol',)))
    assert r.students == {'alice', 'bob', 'carol'}


@pytest.mark.parametrize('text', [
    'g1 alice\n',
    'g1: alice\ng1: bob\n',
    'g1:\n',
    'g1: alice\ng2: alice\n',
    'g/1: alice\n',
])
def test_bad_rosters(text):
    with pytest.raises(RosterError):
        parse_roster(text)


def test_topology_for_two_groups(course_factory):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob']})
    topo = c.init()
    snap = c.mock.snapshot()
    assert sorted(snap['groups']) == ['cs101', 'cs101/feedback', 'cs101/lab1']
    assert sorted(snap['projects']) == ['cs101/course-info', 'cs101/feedback/lab1-g1', 'cs101/feedback/lab1-g2',
                                        'cs101/lab1/g1', 'cs101/lab1/g2']
    m = c.mock.member_role
    assert m('cs101/lab1/g1', 'alice') is Role.DEVELOPER
    assert m('cs101/feedback/lab1-g1', 'alice') is Role.REPORTER
    assert m('cs101/course-info', 'alice') is Role.REPORTER
    assert m('cs101/feedback/lab1-g2', 'alice') is None
    assert m('cs101/lab1/g2', 'alice') is None
    assert m('cs101/lab1/g1', 'prof') is Role.MAINTAINER
    assert topo.submissions['lab1', 'g2'].full_path == 'cs101/lab1/g2'


def test_no_cross_group_feedback_visibility(course):
    topo = course.init()
    snap = course.mock.snapshot()['members']
    for (aid, gid), fb in topo.feedback.items():
        members = set(snap[fb.full_path])
        for other, users in topo.rosters[aid].entries:
            if other != gid:
                assert members.isdisjoint(users)


def test_rerun_restores_membership_and_is_idempotent(course_factory):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob']})
    c.init()
    c.client.remove_member(c.topology.submissions['lab1', 'g2'], 'bob')
    topo = c.init()
    assert topo.changes == ['set bob Developer on cs101/lab1/g2']
    once = c.mock.snapshot()
    assert c.init().changes == []
    assert c.mock.snapshot() == once


def test_student_moved_between_groups_loses_old_access(course_factory):
    c = course_factory(groups={'g1': ['alice', 'bob'], 'g2': ['carol']})
    c.init()
    c.config.roster_path.write_text('g1: alice\ng2: carol, bob\n')
    topo = provision_course(c.client, c.config, load_rosters(c.config))
    assert 'removed bob from cs101/lab1/g1' in topo.changes
    assert c.mock.member_role('cs101/lab1/g1', 'bob') is None
    assert c.mock.member_role('cs101/lab1/g2', 'bob') is Role.DEVELOPER


def test_empty_roster(course_factory):
    c = course_factory(groups={})
    c.init()
    assert sorted(c.mock.snapshot()['projects']) == ['cs101/course-info']


def test_publish_broadcasts_identical_trees(course_factory, tmp_path):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob']})
    c.init()
    materials = tmp_path / 'm'
    materials.mkdir()
    (materials / 'README.md').write_text('# Lab 1\n')
    (materials / 'skeleton.c').write_text('int main(){}\n')
    a = c.config.assessment('lab1')
    result = publish_assessment(c.topology, c.config, a, materials, BOT)
    assert sorted(result.pushed) == ['cs101/lab1/g1', 'cs101/lab1/g2']
    files = {g: {f: c.mock.read_file(f'cs101/lab1/{g}', f) for f in c.mock.list_files(f'cs101/lab1/{g}')}
             for g in ('g1', 'g2')}
    assert files['g1'] == files['g2']
    assert files['g1'][CI_FILE] == canonical_ci(c.config, 'lab1')
    assert files['g1']['README.md'].decode() == README_WARNING + '# Lab 1\n'
    assert GITIGNORE_NOTE in files['g1']['.gitignore'].decode()
    again = publish_assessment(c.topology, c.config, a, materials, BOT)
    assert again.pushed == [] and len(again.unchanged) == 2
    assert c.mock.commit_count('cs101/lab1/g1') == 1


def test_publish_requires_statement(course, tmp_path):
    course.init()
    materials = tmp_path / 'm'
    materials.mkdir()
    (materials / 'skeleton.c').write_text('')
    with pytest.raises(FileNotFoundError):
        publish_assessment(course.topology, course.config, course.config.assessment('lab1'), materials, BOT)
    assert course.mock.commit_count('cs101/lab1/g1') == 0


def test_publish_reports_rejected_repo(course_factory, tmp_path):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob']})
    c.init()
    c.mock.set_push_rejected('cs101/lab1/g2')
    materials = tmp_path / 'm'
    materials.mkdir()
    (materials / 'statement.pdf').write_bytes(b'%PDF')
    result = publish_assessment(c.topology, c.config, c.config.assessment('lab1'), materials, BOT)
    assert result.pushed == ['cs101/lab1/g1']
    assert list(result.errors) == ['cs101/lab1/g2']


def test_lock(course_factory):
    c = course_factory(groups={'g1': ['alice'], 'g2': ['bob'], 'g3': ['carol']})
    c.init()
    assert lock_assessment(c.client, c.topology, 'lab1', c.config.faculty).demotions == 3
    assert c.mock.member_role('cs101/lab1/g1', 'alice') is Role.REPORTER
    assert c.mock.member_role('cs101/lab1/g1', 'prof') is Role.MAINTAINER
    assert lock_assessment(c.client, c.topology, 'lab1', c.config.faculty).demotions == 0
    with pytest.raises(UnknownAssessment):
        lock_assessment(c.client, c.topology, 'lab9')


def test_roster_rejects_bad_ids():
    with pytest.raises(RosterError):
        Roster((('a__b', ('x',)),))
