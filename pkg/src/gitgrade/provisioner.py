"""Course topology on the GitLab server: groups, repositories and memberships.

Path scheme::

    <course>/                             main group
    <course>/course-info                  course repository (dashboards)
    <course>/<assessment>/<group_id>      submission repository
    <course>/feedback/<assessment>-<group_id>

Students are Developers on their submission repository and Reporters on
their feedback repository and on course-info.  Faculty get the configured
role everywhere.
"""

from __future__ import annotations

import logging
import re
import shutil
from dataclasses import dataclass, field
from pathlib import Path

from . import git_ops
from .config import AssessmentConfig, CourseConfig, Role
from .errors import GitLabError, PushRejected, RosterError, TransportError, UnknownAssessment
from .git_ops import Author, NothingToCommit
from .gitlab_api import SEGMENT_RE, GitLabClient, RemoteRef
from .submission_intake import render_ci

log = logging.getLogger(__name__)

COURSE_INFO = 'course-info'
FEEDBACK = 'feedback'
CI_FILE = '.gitlab-ci.yml'
GITIGNORE_NOTE = ('# .gitlab-ci.yml is managed by the course staff and must stay versioned: '
                  'do not edit or delete it.')
README_WARNING = ('> **Warning:** do not edit or delete `.gitlab-ci.yml`. Any change to it suspends '
                  'your write access to this repository until the course staff review it.\n\n')


@dataclass(frozen=True)
class Roster:
    entries: tuple[tuple[str, tuple[str, ...]], ...] = ()

    def __post_init__(self) -> None:
        seen_groups: set[str] = set()
        seen_users: dict[str, str] = {}
        for gid, members in self.entries:
            if not SEGMENT_RE.fullmatch(gid) or '__' in gid:
                raise RosterError(f'invalid group id {gid!r}')
            if gid in seen_groups:
                raise RosterError(f'duplicate group id {gid!r}')
            seen_groups.add(gid)
            if not members:
                raise RosterError(f'group {gid!r} has no members')
            for user in members:
                if user in seen_users:
                    raise RosterError(f'{user!r} is in both {seen_users[user]!r} and {gid!r}')
                seen_users[user] = gid

    @property
    def group_ids(self) -> list[str]:
        return [gid for gid, _ in self.entries]

    def members(self, group_id: str) -> tuple[str, ...]:
        for gid, members in self.entries:
            if gid == group_id:
                return members
        raise KeyError(group_id)

    @property
    def students(self) -> set[str]:
        return {u for _, members in self.entries for u in members}


def parse_roster(text: str) -> Roster:
    """One group per line, ``group_id: user1,user2``; ``#`` starts a comment."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        gid, sep, users = line.partition(':')
        if not sep:
            raise RosterError(f'line {lineno}: expected "group_id: user1,user2"')
        members = tuple(u.strip() for u in re.split(r'[,\s]+', users) if u.strip())
        entries.append((gid.strip(), members))
    return Roster(tuple(entries))


def load_roster(path: str | Path) -> Roster:
    try:
        return parse_roster(Path(path).read_text())
    except OSError as e:
        raise RosterError(f'cannot read roster {path}: {e}') from e


def load_rosters(config: CourseConfig) -> dict[str, Roster]:
    default = load_roster(config.roster_path)
    return {a.id: load_roster(a.roster_path) if a.roster_path else default for a in config.assessments}


@dataclass
class CourseTopology:
    course: RemoteRef
    course_info: RemoteRef
    feedback_group: RemoteRef
    assessment_groups: dict[str, RemoteRef]
    submissions: dict[tuple[str, str], RemoteRef]
    feedback: dict[tuple[str, str], RemoteRef]
    rosters: dict[str, Roster]
    changes: list[str] = field(default_factory=list)

    def members(self, assessment_id: str, group_id: str) -> tuple[str, ...]:
        return self.rosters[assessment_id].members(group_id)

    def valid_groups(self) -> dict[str, frozenset[str]]:
        return {aid: frozenset(r.group_ids) for aid, r in self.rosters.items()}


def feedback_name(assessment_id: str, group_id: str) -> str:
    return f'{assessment_id}-{group_id}'


class _Provisioner:
    def __init__(self, client: GitLabClient, config: CourseConfig):
        self.client = client
        self.config = config
        self.changes: list[str] = []

    def _wrap(self, path: str, fn, *args):
        try:
            return fn(*args)
        except GitLabError as e:
            raise type(e)(f'{path}: {e}') from e

    def group(self, parent: RemoteRef | None, name: str) -> RemoteRef:
        path = f'{parent.full_path}/{name}' if parent else name
        ref = self._wrap(path, self.client.ensure_group, parent, name)
        if ref.created:
            self.changes.append(f'created group {ref.full_path}')
        return ref

    def project(self, parent: RemoteRef, name: str) -> RemoteRef:
        ref = self._wrap(f'{parent.full_path}/{name}', self.client.ensure_project, parent, name)
        if ref.created:
            self.changes.append(f'created project {ref.full_path}')
        return ref

    def converge(self, project: RemoteRef, wanted: dict[str, Role], students: set[str]) -> None:
        """Give every wanted member its role; drop students who do not belong."""
        for user, role in sorted(wanted.items()):
            if self._wrap(project.full_path, self.client.set_member_role, project, user, role):
                self.changes.append(f'set {user} {role.label} on {project.full_path}')
        current = self._wrap(project.full_path, self.client.list_members, project)
        for user in sorted(current):
            if user in students and user not in wanted:
                self._wrap(project.full_path, self.client.remove_member, project, user)
                self.changes.append(f'removed {user} from {project.full_path}')


def provision_course(client: GitLabClient, config: CourseConfig, rosters: dict[str, Roster]) -> CourseTopology:
    """Create or repair the whole course topology; safe to re-run."""
    p = _Provisioner(client, config)
    faculty = {u: config.faculty_role for u in config.faculty}
    students = {u for r in rosters.values() for u in r.students}

    course = p.group(None, config.course_id)
    feedback_group = p.group(course, FEEDBACK)
    course_info = p.project(course, COURSE_INFO)
    topo = CourseTopology(course, course_info, feedback_group, {}, {}, {}, dict(rosters))
    info_members = dict(faculty)
    for a in config.assessments:
        roster = rosters[a.id]
        sub_group = p.group(course, a.id)
        topo.assessment_groups[a.id] = sub_group
        for gid, members in roster.entries:
            sub = p.project(sub_group, gid)
            fb = p.project(feedback_group, feedback_name(a.id, gid))
            topo.submissions[a.id, gid] = sub
            topo.feedback[a.id, gid] = fb
            p.converge(sub, {**{u: Role.DEVELOPER for u in members}, **faculty}, students)
            p.converge(fb, {**{u: Role.REPORTER for u in members}, **faculty}, students)
            info_members.update((u, Role.REPORTER) for u in members if u not in faculty)
    p.converge(course_info, info_members, students)
    topo.changes = p.changes
    return topo


def load_topology(client: GitLabClient, config: CourseConfig, rosters: dict[str, Roster]) -> CourseTopology:
    """Look up an already provisioned topology without changing anything."""
    c = config.course_id
    topo = CourseTopology(client.get_group(c), client.get_project(f'{c}/{COURSE_INFO}'),
                          client.get_group(f'{c}/{FEEDBACK}'), {}, {}, {}, dict(rosters))
    for a in config.assessments:
        topo.assessment_groups[a.id] = client.get_group(f'{c}/{a.id}')
        for gid in rosters[a.id].group_ids:
            topo.submissions[a.id, gid] = client.get_project(f'{c}/{a.id}/{gid}')
            topo.feedback[a.id, gid] = client.get_project(f'{c}/{FEEDBACK}/{feedback_name(a.id, gid)}')
    return topo


# publishing and locking


def canonical_ci(config: CourseConfig, assessment_id: str) -> bytes:
    return render_ci(config.course_id, assessment_id, config.drop_dir, config.runner_tag)


def canonical_ci_path(config: CourseConfig, assessment_id: str) -> Path:
    return config.work_dir / 'canonical' / f'{assessment_id}{CI_FILE}'


def stored_canonical_ci(config: CourseConfig, assessment_id: str) -> bytes:
    """The CI file as last published, falling back to a fresh rendering."""
    path = canonical_ci_path(config, assessment_id)
    return path.read_bytes() if path.exists() else canonical_ci(config, assessment_id)


def _statement_file(materials_dir: Path) -> Path | None:
    for p in sorted(materials_dir.iterdir()):
        if p.is_file() and (p.name.lower() == 'readme.md' or p.name.lower().startswith('statement')):
            return p
    return None


@dataclass
class PublishResult:
    pushed: list[str] = field(default_factory=list)
    unchanged: list[str] = field(default_factory=list)
    errors: dict[str, str] = field(default_factory=dict)


def publish_assessment(topology: CourseTopology, config: CourseConfig, assessment: AssessmentConfig,
                       materials_dir: str | Path, author: Author, token: str | None = None) -> PublishResult:
    """Push materials, the CI script and the warnings into every submission repo."""
    materials_dir = Path(materials_dir)
    if not materials_dir.is_dir() or _statement_file(materials_dir) is None:
        raise FileNotFoundError(f'{materials_dir} has no statement file (README.md or statement.*)')
    ci = canonical_ci(config, assessment.id)
    stored = canonical_ci_path(config, assessment.id)
    stored.parent.mkdir(parents=True, exist_ok=True)
    stored.write_bytes(ci)

    result = PublishResult()
    work = config.work_dir / 'publish'
    for gid in topology.rosters[assessment.id].group_ids:
        repo = topology.submissions[assessment.id, gid]
        try:
            with git_ops.repo_lock(work / repo.full_path):
                tree = git_ops.clone_or_update(repo.clone_url, work / repo.full_path, token)
                _apply_materials(tree.local_path, materials_dir, ci)
                try:
                    git_ops.commit_all_push(tree, f'Publish {assessment.id} materials', author)
                except NothingToCommit:
                    result.unchanged.append(repo.full_path)
                else:
                    result.pushed.append(repo.full_path)
        except (PushRejected, TransportError) as e:
            log.error('publish.failed repo=%s error=%r', repo.full_path, str(e))
            result.errors[repo.full_path] = str(e)
    return result


def _apply_materials(root: Path, materials_dir: Path, ci: bytes) -> None:
    shutil.copytree(materials_dir, root, dirs_exist_ok=True, ignore=shutil.ignore_patterns('.git'))
    (root / CI_FILE).write_bytes(ci)
    gitignore = root / '.gitignore'
    lines = gitignore.read_text().splitlines() if gitignore.exists() else []
    if GITIGNORE_NOTE not in lines:
        gitignore.write_text('\n'.join(lines + [GITIGNORE_NOTE]) + '\n')
    readme = root / 'README.md'
    body = (materials_dir / 'README.md').read_text() if (materials_dir / 'README.md').exists() else ''
    readme.write_text(README_WARNING + body)


@dataclass
class LockResult:
    demotions: int = 0
    errors: dict[str, str] = field(default_factory=dict)


def lock_assessment(client: GitLabClient, topology: CourseTopology, assessment_id: str,
                    faculty: tuple[str, ...] = ()) -> LockResult:
    """Demote every non-faculty member of the assessment's submission repos to Reporter."""
    if assessment_id not in topology.rosters:
        raise UnknownAssessment(assessment_id)
    result = LockResult()
    for gid in topology.rosters[assessment_id].group_ids:
        repo = topology.submissions[assessment_id, gid]
        try:
            members = client.list_members(repo)
            for user, role in sorted(members.items()):
                if user in faculty or role is None or role <= Role.REPORTER:
                    continue
                if client.revoke_write(repo, user):
                    result.demotions += 1
        except (GitLabError, TransportError) as e:
            result.errors[repo.full_path] = str(e)
    return result
