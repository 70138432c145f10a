"""Course configuration: loading, validation and defaults.

The configuration is a single YAML file.  Relative paths are resolved
against the directory holding the file.  Every optional field left out of
the file is replaced by its default, so the rest of the engine never has
to care whether a value was written explicitly.

Example::

    course_id: cs101
    server_base_url: https://gitlab.example.edu
    auth_token_env: GITGRADE_TOKEN
    drop_dir: /srv/gitgrade/drop
    work_dir: /srv/gitgrade/work
    state_db_path: /srv/gitgrade/state.sqlite
    roster_path: roster.txt
    assessments:
      - id: lab1
        kind: Lab
        start_date: 2024-02-19
        tests_dir: tests/lab1
        build_cmd: gcc -O2 -o prog main.c
        run_cmd: "{workdir}/prog"
        forbidden_patterns: ["string.h"]
"""

from __future__ import annotations

import dataclasses
import datetime as dt
import enum
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

import yaml

from .errors import MissingToken, ParseError, ValidationError

ID_RE = re.compile(r'[a-z0-9_-]{1,64}')

DEFAULT_COOLDOWN_S = {'Lab': 60, 'Project': 600}
DEFAULT_CPU_LIMIT_S = 5
DEFAULT_MEM_LIMIT_BYTES = 8 * 2**30
DEFAULT_MAX_OUTPUT_BYTES = 2**20
DEFAULT_MAX_PROCESSES = 16
DEFAULT_ANALYZER_TIMEOUT_S = 60
DEFAULT_SOURCE_EXTENSIONS = ('.c', '.h', '.py')
DEFAULT_WORKERS = 2


class Kind(str, enum.Enum):
    LAB = 'Lab'
    PROJECT = 'Project'


class OnFailure(str, enum.Enum):
    WARN = 'Warn'
    SKIP = 'Skip'


def default_wall_limit(cpu_limit_s: float) -> float:
    return 2 * cpu_limit_s + 5


@dataclass(frozen=True)
class AnalyzerSpec:
    name: str
    title: str
    command: str
    timeout_s: float = DEFAULT_ANALYZER_TIMEOUT_S
    on_failure: OnFailure = OnFailure.WARN


@dataclass(frozen=True)
class AssessmentConfig:
    id: str
    kind: Kind
    start_date: dt.date
    tests_dir: Path
    run_cmd: str
    deadline: dt.datetime | None = None
    cooldown_s: int = 60
    cpu_limit_s: float = DEFAULT_CPU_LIMIT_S
    mem_limit_bytes: int = DEFAULT_MEM_LIMIT_BYTES
    wall_limit_s: float = default_wall_limit(DEFAULT_CPU_LIMIT_S)
    output_visible: bool = False
    only_first_wrong_visible: bool = True
    build_cmd: str | None = None
    analyzers: tuple[AnalyzerSpec, ...] = ()
    forbidden_patterns: tuple[str, ...] = ()
    source_extensions: tuple[str, ...] = DEFAULT_SOURCE_EXTENSIONS
    max_output_bytes: int = DEFAULT_MAX_OUTPUT_BYTES
    max_processes: int = DEFAULT_MAX_PROCESSES
    roster_path: Path | None = None


class Role(enum.IntEnum):
    """Project member roles, valued by their GitLab access level."""

    REPORTER = 20
    DEVELOPER = 30
    MAINTAINER = 40
    OWNER = 50

    @classmethod
    def parse(cls, name: str) -> 'Role':
        try:
            return cls[name.upper()]
        except KeyError:
            raise ValueError(f'unknown role {name!r}') from None

    @property
    def label(self) -> str:
        return self.name.capitalize()


@dataclass(frozen=True)
class CourseConfig:
    course_id: str
    server_base_url: str
    auth_token_env: str
    drop_dir: Path
    work_dir: Path
    state_db_path: Path
    roster_path: Path
    assessments: tuple[AssessmentConfig, ...] = ()
    faculty: tuple[str, ...] = ()
    faculty_role: Role = Role.MAINTAINER
    workers: int = DEFAULT_WORKERS
    runner_tag: str = ''
    bot_name: str = 'gitgrade bot'
    bot_email: str = 'bot@course.invalid'

    def assessment(self, assessment_id: str) -> AssessmentConfig:
        for a in self.assessments:
            if a.id == assessment_id:
                return a
        raise KeyError(assessment_id)

    @property
    def assessment_ids(self) -> list[str]:
        return [a.id for a in self.assessments]

    def to_dict(self) -> dict[str, Any]:
        return _course_to_dict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


_COURSE_REQUIRED = ('course_id', 'server_base_url', 'auth_token_env', 'drop_dir',
                    'work_dir', 'state_db_path', 'roster_path')
_COURSE_KEYS = set(_COURSE_REQUIRED) | {'assessments', 'faculty', 'faculty_role', 'workers',
                                        'runner_tag', 'bot_name', 'bot_email'}
_ASSESSMENT_REQUIRED = ('id', 'kind', 'start_date', 'tests_dir', 'run_cmd')
_ASSESSMENT_KEYS = {f.name for f in dataclasses.fields(AssessmentConfig)}
_ANALYZER_KEYS = {f.name for f in dataclasses.fields(AnalyzerSpec)}


def load_config(path: str | Path) -> CourseConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ParseError(f'cannot read {path}: {e}') from e
    return parse_config(text, base_dir=path.resolve().parent)


def parse_config(text: str, base_dir: Path | None = None) -> CourseConfig:
    try:
        raw = yaml.safe_load(text)
    except yaml.MarkedYAMLError as e:
        line = e.problem_mark.line + 1 if e.problem_mark is not None else None
        raise ParseError(str(e.problem or e), line) from e
    except yaml.YAMLError as e:
        raise ParseError(str(e)) from e
    if not isinstance(raw, dict):
        raise ParseError('top level must be a mapping', 1)
    return build_config(raw, base_dir or Path.cwd())


def build_config(raw: Mapping[str, Any], base_dir: Path) -> CourseConfig:
    _check_keys(raw, _COURSE_KEYS, _COURSE_REQUIRED, '')

    course_id = _string(raw, 'course_id', '')
    if not ID_RE.fullmatch(course_id):
        raise ValidationError('course_id', f'{course_id!r} does not match [a-z0-9_-]{{1,64}}')

    def path_of(key: str) -> Path:
        p = Path(_string(raw, key, ''))
        return p if p.is_absolute() else (base_dir / p).resolve()

    drop_dir = path_of('drop_dir')
    work_dir = path_of('work_dir')
    state_db_path = path_of('state_db_path')
    if len({drop_dir, work_dir, state_db_path}) != 3:
        raise ValidationError('drop_dir', 'drop_dir, work_dir and state_db_path must be distinct')

    raw_assessments = raw.get('assessments') or []
    if not isinstance(raw_assessments, list):
        raise ValidationError('assessments', 'must be a list')
    assessments = tuple(_build_assessment(a, i, base_dir) for i, a in enumerate(raw_assessments))
    seen: set[str] = set()
    for a in assessments:
        if a.id in seen:
            raise ValidationError('assessments.id', f'duplicate assessment id {a.id!r}')
        if a.id == 'feedback':
            raise ValidationError('assessments.id', "'feedback' is reserved")
        seen.add(a.id)

    faculty = raw.get('faculty') or []
    if not isinstance(faculty, list) or not all(isinstance(u, str) and u for u in faculty):
        raise ValidationError('faculty', 'must be a list of usernames')
    try:
        faculty_role = Role.parse(str(raw.get('faculty_role', 'Maintainer')))
    except ValueError as e:
        raise ValidationError('faculty_role', str(e)) from None
    if faculty_role < Role.MAINTAINER:
        raise ValidationError('faculty_role', 'must be Maintainer or Owner')

    workers = raw.get('workers', DEFAULT_WORKERS)
    if not _is_int(workers) or workers < 1:
        raise ValidationError('workers', 'must be a positive integer')

    return CourseConfig(
        course_id=course_id,
        server_base_url=_string(raw, 'server_base_url', '').rstrip('/'),
        auth_token_env=_string(raw, 'auth_token_env', ''),
        drop_dir=drop_dir,
        work_dir=work_dir,
        state_db_path=state_db_path,
        roster_path=path_of('roster_path'),
        assessments=assessments,
        faculty=tuple(faculty),
        faculty_role=faculty_role,
        workers=workers,
        runner_tag=str(raw.get('runner_tag') or f'{course_id}-grader'),
        bot_name=str(raw.get('bot_name', CourseConfig.bot_name)),
        bot_email=str(raw.get('bot_email', CourseConfig.bot_email)),
    )


def _build_assessment(raw: Any, index: int, base_dir: Path) -> AssessmentConfig:
    prefix = f'assessments[{index}].'
    if not isinstance(raw, dict):
        raise ValidationError(f'assessments[{index}]', 'must be a mapping')
    _check_keys(raw, _ASSESSMENT_KEYS, _ASSESSMENT_REQUIRED, prefix)

    aid = _string(raw, 'id', prefix)
    if not ID_RE.fullmatch(aid) or '__' in aid:
        raise ValidationError(prefix + 'id', f'{aid!r} is not a valid identifier')
    try:
        kind = Kind(raw['kind'])
    except ValueError:
        raise ValidationError(prefix + 'kind', f"must be Lab or Project, got {raw['kind']!r}") from None

    start_date = _date(raw['start_date'], prefix + 'start_date')
    deadline = None
    if raw.get('deadline') is not None:
        if kind is Kind.LAB:
            raise ValidationError(prefix + 'deadline', 'labs have no deadline')
        deadline = _timestamp(raw['deadline'], prefix + 'deadline')

    cooldown_s = raw.get('cooldown_s', DEFAULT_COOLDOWN_S[kind.value])
    if not _is_int(cooldown_s) or cooldown_s < 0:
        raise ValidationError(prefix + 'cooldown_s', 'must be an integer >= 0')
    cpu = raw.get('cpu_limit_s', DEFAULT_CPU_LIMIT_S)
    if not _is_number(cpu) or cpu <= 0:
        raise ValidationError(prefix + 'cpu_limit_s', 'must be > 0')
    mem = raw.get('mem_limit_bytes', DEFAULT_MEM_LIMIT_BYTES)
    if not _is_int(mem) or mem <= 0:
        raise ValidationError(prefix + 'mem_limit_bytes', 'must be a positive integer')
    wall = raw.get('wall_limit_s', default_wall_limit(cpu))
    if not _is_number(wall) or wall < cpu:
        raise ValidationError(prefix + 'wall_limit_s', 'must be >= cpu_limit_s')
    for key in ('max_output_bytes', 'max_processes'):
        if key in raw and (not _is_int(raw[key]) or raw[key] <= 0):
            raise ValidationError(prefix + key, 'must be a positive integer')

    flags = {}
    for key, default in (('output_visible', False), ('only_first_wrong_visible', True)):
        value = raw.get(key, default)
        if not isinstance(value, bool):
            raise ValidationError(prefix + key, 'must be true or false')
        flags[key] = value

    tests_dir = Path(_string(raw, 'tests_dir', prefix))
    if not tests_dir.is_absolute():
        tests_dir = (base_dir / tests_dir).resolve()
    roster_path = None
    if raw.get('roster_path'):
        roster_path = Path(str(raw['roster_path']))
        if not roster_path.is_absolute():
            roster_path = (base_dir / roster_path).resolve()

    build_cmd = raw.get('build_cmd')
    if build_cmd is not None and not isinstance(build_cmd, str):
        raise ValidationError(prefix + 'build_cmd', 'must be a string')

    analyzers = raw.get('analyzers') or []
    if not isinstance(analyzers, list):
        raise ValidationError(prefix + 'analyzers', 'must be a list')
    specs = tuple(_build_analyzer(s, f'{prefix}analyzers[{i}].') for i, s in enumerate(analyzers))
    names = [s.name for s in specs]
    if len(names) != len(set(names)):
        raise ValidationError(prefix + 'analyzers', 'analyzer names must be unique')

    return AssessmentConfig(
        id=aid,
        kind=kind,
        start_date=start_date,
        deadline=deadline,
        tests_dir=tests_dir,
        run_cmd=_string(raw, 'run_cmd', prefix),
        build_cmd=build_cmd,
        cooldown_s=cooldown_s,
        cpu_limit_s=cpu,
        mem_limit_bytes=mem,
        wall_limit_s=wall,
        analyzers=specs,
        forbidden_patterns=_str_tuple(raw, 'forbidden_patterns', prefix, ()),
        source_extensions=_str_tuple(raw, 'source_extensions', prefix, DEFAULT_SOURCE_EXTENSIONS),
        max_output_bytes=raw.get('max_output_bytes', DEFAULT_MAX_OUTPUT_BYTES),
        max_processes=raw.get('max_processes', DEFAULT_MAX_PROCESSES),
        roster_path=roster_path,
        **flags,
    )


def _build_analyzer(raw: Any, prefix: str) -> AnalyzerSpec:
    if not isinstance(raw, dict):
        raise ValidationError(prefix.rstrip('.'), 'must be a mapping')
    _check_keys(raw, _ANALYZER_KEYS, ('name', 'title', 'command'), prefix)
    command = _string(raw, 'command', prefix)
    if '{workdir}' not in command:
        raise ValidationError(prefix + 'command', 'must contain the {workdir} placeholder')
    timeout = raw.get('timeout_s', DEFAULT_ANALYZER_TIMEOUT_S)
    if not _is_number(timeout) or timeout <= 0:
        raise ValidationError(prefix + 'timeout_s', 'must be > 0')
    try:
        on_failure = OnFailure(raw.get('on_failure', 'Warn'))
    except ValueError:
        raise ValidationError(prefix + 'on_failure', 'must be Warn or Skip') from None
    return AnalyzerSpec(name=_string(raw, 'name', prefix), title=_string(raw, 'title', prefix),
                        command=command, timeout_s=timeout, on_failure=on_failure)


def resolve_token(config: CourseConfig, environment: Mapping[str, str]) -> str:
    token = environment.get(config.auth_token_env)
    if not token:
        raise MissingToken(f'environment variable {config.auth_token_env} is not set')
    return token


# serialization


def _course_to_dict(c: CourseConfig) -> dict[str, Any]:
    return {
        'course_id': c.course_id,
        'server_base_url': c.server_base_url,
        'auth_token_env': c.auth_token_env,
        'drop_dir': str(c.drop_dir),
        'work_dir': str(c.work_dir),
        'state_db_path': str(c.state_db_path),
        'roster_path': str(c.roster_path),
        'faculty': list(c.faculty),
        'faculty_role': c.faculty_role.label,
        'workers': c.workers,
        'runner_tag': c.runner_tag,
        'bot_name': c.bot_name,
        'bot_email': c.bot_email,
        'assessments': [_assessment_to_dict(a) for a in c.assessments],
    }


def _assessment_to_dict(a: AssessmentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {
        'id': a.id,
        'kind': a.kind.value,
        'start_date': a.start_date.isoformat(),
        'tests_dir': str(a.tests_dir),
        'run_cmd': a.run_cmd,
        'cooldown_s': a.cooldown_s,
        'cpu_limit_s': a.cpu_limit_s,
        'mem_limit_bytes': a.mem_limit_bytes,
        'wall_limit_s': a.wall_limit_s,
        'output_visible': a.output_visible,
        'only_first_wrong_visible': a.only_first_wrong_visible,
        'forbidden_patterns': list(a.forbidden_patterns),
        'source_extensions': list(a.source_extensions),
        'max_output_bytes': a.max_output_bytes,
        'max_processes': a.max_processes,
        'analyzers': [
            {'name': s.name, 'title': s.title, 'command': s.command,
             'timeout_s': s.timeout_s, 'on_failure': s.on_failure.value}
            for s in a.analyzers
        ],
    }
    if a.deadline is not None:
        out['deadline'] = a.deadline.strftime('%Y-%m-%dT%H:%M:%SZ')
    if a.build_cmd is not None:
        out['build_cmd'] = a.build_cmd
    if a.roster_path is not None:
        out['roster_path'] = str(a.roster_path)
    return out


# field helpers


def _check_keys(raw: Mapping[str, Any], allowed: set[str], required: tuple[str, ...], prefix: str) -> None:
    for key in raw:
        if key not in allowed:
            raise ValidationError(prefix + str(key), 'unknown key')
    for key in required:
        if raw.get(key) is None:
            raise ValidationError(prefix + key, 'required')


def _string(raw: Mapping[str, Any], key: str, prefix: str) -> str:
    value = raw[key]
    if not isinstance(value, str) or not value:
        raise ValidationError(prefix + key, 'must be a non-empty string')
    return value


def _str_tuple(raw: Mapping[str, Any], key: str, prefix: str, default: tuple[str, ...]) -> tuple[str, ...]:
    value = raw.get(key)
    if value is None:
        return default
    if not isinstance(value, list) or not all(isinstance(v, str) and v for v in value):
        raise ValidationError(prefix + key, 'must be a list of non-empty strings')
    return tuple(value)


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _date(value: Any, name: str) -> dt.date:
    if isinstance(value, dt.datetime):
        return value.date()
    if isinstance(value, dt.date):
        return value
    try:
        return dt.date.fromisoformat(str(value))
    except ValueError:
        raise ValidationError(name, f'{value!r} is not a YYYY-MM-DD date') from None


def _timestamp(value: Any, name: str) -> dt.datetime:
    if isinstance(value, dt.datetime):
        ts = value
    elif isinstance(value, dt.date):
        ts = dt.datetime.combine(value, dt.time())
    else:
        text = str(value)
        if text.endswith('Z'):
            text = text[:-1] + '+00:00'
        try:
            ts = dt.datetime.fromisoformat(text)
        except ValueError:
            raise ValidationError(name, f'{value!r} is not an ISO-8601 timestamp') from None
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=dt.timezone.utc)
    return ts.astimezone(dt.timezone.utc)
