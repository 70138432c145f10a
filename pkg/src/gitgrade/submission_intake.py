"""Submission events: wire format, drop-directory watcher and coalescing queue.

The course runner writes one file per push into the drop directory::

    <epoch>__<assessment_id>__<group_id>__<commit>.sub

whose body holds ``key=value`` lines.  Writers create the file under a
dot-prefixed temporary name and rename it into place; the watcher also
waits until a file's size is stable across two polls before claiming it.
Claimed files move to ``processing/`` and end in ``done/`` or ``failed/``.
"""

from __future__ import annotations

import logging
import os
import re
import shlex
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Collection, Iterable, Mapping, Sequence, TypeVar

from .errors import BadCommitId, EventError, MissingField, UnknownAssessment, UnknownGroup

log = logging.getLogger(__name__)

COMMIT_RE = re.compile(r'[0-9a-f]{40}')
EVENT_SUFFIX = '.sub'
EVENT_FIELDS = ('assessment_id', 'group_id', 'commit', 'pushed_at', 'repo_path', 'pusher')
SUBDIRS = ('processing', 'done', 'failed')


@dataclass(frozen=True)
class SubmissionEvent:
    assessment_id: str
    group_id: str
    commit: str
    pushed_at: int
    repo_path: str
    pusher: str

    @property
    def key(self) -> tuple[str, str]:
        return self.assessment_id, self.group_id


def event_filename(event: SubmissionEvent) -> str:
    return f'{event.pushed_at}__{event.assessment_id}__{event.group_id}__{event.commit}{EVENT_SUFFIX}'


def format_event(event: SubmissionEvent) -> bytes:
    return ''.join(f'{k}={getattr(event, k)}\n' for k in EVENT_FIELDS).encode()


def write_event_file(drop_dir: Path, event: SubmissionEvent) -> Path:
    drop_dir.mkdir(parents=True, exist_ok=True)
    name = event_filename(event)
    tmp = drop_dir / f'.{name}.tmp'
    tmp.write_bytes(format_event(event))
    target = drop_dir / name
    os.replace(tmp, target)
    return target


def _fields_from_filename(name: str) -> dict[str, str]:
    if not name.endswith(EVENT_SUFFIX):
        return {}
    parts = name[:-len(EVENT_SUFFIX)].split('__')
    if len(parts) != 4:
        return {}
    return dict(zip(('pushed_at', 'assessment_id', 'group_id', 'commit'), parts))


def parse_event(data: bytes, valid_groups: Mapping[str, Collection[str]] | None = None,
                filename: str | None = None) -> SubmissionEvent:
    """Parse an event file body.

    Fields missing from the body are taken from ``filename`` when given.
    When ``valid_groups`` (assessment id -> group ids) is given, unknown
    assessments and groups are rejected.
    """
    try:
        text = data.decode('utf-8')
    except UnicodeDecodeError:
        raise EventError('event file is not UTF-8') from None
    fields = _fields_from_filename(filename) if filename else {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        key, sep, value = line.partition('=')
        if not sep:
            raise EventError(f'malformed line {line!r}')
        fields[key.strip()] = value.strip()

    for name in EVENT_FIELDS:
        if not fields.get(name):
            raise MissingField(name)
        if name == 'assessment_id' and valid_groups is not None and fields[name] not in valid_groups:
            raise UnknownAssessment(fields[name])
        if name == 'group_id' and valid_groups is not None \
                and fields[name] not in valid_groups[fields['assessment_id']]:
            raise UnknownGroup(fields[name])
        if name == 'commit' and not COMMIT_RE.fullmatch(fields[name]):
            raise BadCommitId(fields[name])
        if name == 'pushed_at':
            try:
                pushed_at = int(fields[name])
            except ValueError:
                raise EventError(f'pushed_at: {fields[name]!r} is not an integer') from None
            if pushed_at <= 0:
                raise EventError('pushed_at: must be positive')

    return SubmissionEvent(
        assessment_id=fields['assessment_id'], group_id=fields['group_id'], commit=fields['commit'],
        pushed_at=int(fields['pushed_at']), repo_path=fields['repo_path'], pusher=fields['pusher'])


T = TypeVar('T')


def coalesce(queue: Sequence[T], event_of: Callable[[T], SubmissionEvent] = lambda e: e) -> list[T]:
    """Keep one item per (assessment, group): the newest push wins.

    The survivor takes the queue slot of the first item with its key, so
    groups keep their relative order.  Ties on ``pushed_at`` go to the
    later arrival.
    """
    best: dict[tuple[str, str], int] = {}
    slot: dict[tuple[str, str], int] = {}
    for i, item in enumerate(queue):
        key = event_of(item).key
        slot.setdefault(key, i)
        if key not in best or event_of(item).pushed_at >= event_of(queue[best[key]]).pushed_at:
            best[key] = i
    order = sorted(slot, key=slot.__getitem__)
    return [queue[best[k]] for k in order]


# drop directory


@dataclass
class Claim:
    """An event file moved into ``processing/`` and awaiting a verdict."""

    event: SubmissionEvent
    path: Path
    drop_dir: Path
    finished: bool = field(default=False, compare=False)

    def done(self) -> None:
        self._finish('done')

    def fail(self, reason: str) -> None:
        _write_reason(self.drop_dir / 'failed' / self.path.name, reason)
        self._finish('failed')

    def _finish(self, where: str) -> None:
        if self.finished:
            return
        os.replace(self.path, self.drop_dir / where / self.path.name)
        self.finished = True


def _write_reason(target: Path, reason: str) -> None:
    target.with_name(target.name + '.reason').write_text(reason.rstrip() + '\n')


class DropDirWatcher:
    def __init__(self, drop_dir: str | Path, valid_groups: Mapping[str, Collection[str]] | None = None,
                 poll_interval: float = 1.0):
        self.drop_dir = Path(drop_dir)
        self.valid_groups = valid_groups
        self.poll_interval = poll_interval
        self._seen: dict[str, tuple[int, int]] = {}
        for sub in SUBDIRS:
            (self.drop_dir / sub).mkdir(parents=True, exist_ok=True)

    def recover(self) -> int:
        """Return files left in ``processing/`` by a crash to the queue."""
        n = 0
        for p in sorted((self.drop_dir / 'processing').iterdir()):
            os.replace(p, self.drop_dir / p.name)
            n += 1
        return n

    def poll(self) -> list[Claim]:
        """Claim every stable event file; malformed ones go to ``failed/``."""
        claims = []
        current: dict[str, tuple[int, int]] = {}
        for entry in sorted(os.scandir(self.drop_dir), key=lambda e: e.name):
            if entry.name.startswith('.') or not entry.is_file(follow_symlinks=False):
                continue
            try:
                st = entry.stat(follow_symlinks=False)
            except FileNotFoundError:
                continue
            sig = (st.st_size, st.st_mtime_ns)
            if self._seen.get(entry.name) != sig:
                current[entry.name] = sig
                continue
            claim = self._claim(entry.name)
            if claim is not None:
                claims.append(claim)
        self._seen = current
        return claims

    def _claim(self, name: str) -> Claim | None:
        processing = self.drop_dir / 'processing' / name
        try:
            os.rename(self.drop_dir / name, processing)
        except FileNotFoundError:
            return None
        try:
            data = processing.read_bytes()
            if not data:
                raise EventError('empty event file')
            if not name.endswith(EVENT_SUFFIX):
                raise EventError(f'unexpected file name {name!r}')
            event = parse_event(data, self.valid_groups, filename=name)
        except EventError as e:
            reason = f'{type(e).__name__}: {e}'
            log.warning('intake.rejected file=%s reason=%r', name, reason)
            _write_reason(self.drop_dir / 'failed' / name, reason)
            os.replace(processing, self.drop_dir / 'failed' / name)
            return None
        return Claim(event, processing, self.drop_dir)

    def run(self, sink: Callable[[Claim], None], stop: threading.Event) -> None:
        """Poll until ``stop`` is set, handing each claim to ``sink``.

        ``sink`` takes ownership of the claim and must eventually call
        ``done()`` or ``fail()`` on it.
        """
        while not stop.is_set():
            try:
                for claim in self.poll():
                    sink(claim)
            except OSError:
                log.exception('intake.poll_error dir=%s', self.drop_dir)
            stop.wait(self.poll_interval)


def watch_drop_dir(drop_dir: str | Path, sink: Callable[[SubmissionEvent], None], stop: threading.Event,
                   valid_groups: Mapping[str, Collection[str]] | None = None,
                   poll_interval: float = 1.0) -> None:
    """Synchronous consumer: an event is done when ``sink`` returns, failed if it raises."""
    watcher = DropDirWatcher(drop_dir, valid_groups, poll_interval)
    watcher.recover()

    def deliver(claim: Claim) -> None:
        try:
            sink(claim.event)
        except Exception as e:
            log.exception('intake.sink_error file=%s', claim.path.name)
            claim.fail(f'{type(e).__name__}: {e}')
        else:
            claim.done()

    watcher.run(deliver, stop)


class PendingQueue:
    """Bounded queue of claims feeding the evaluation workers.

    Holds at most one pending claim per (assessment, group); a newer push
    replaces the pending one; the loser and the survivor are handed to
    ``on_superseded``.  ``get``
    never returns a claim whose key is already being evaluated.
    """

    def __init__(self, maxsize: int = 1024,
                 on_superseded: Callable[[Claim, Claim], None] | None = None):
        self.maxsize = maxsize
        self.on_superseded = on_superseded
        self._items: list[Claim] = []
        self._busy: set[tuple[str, str]] = set()
        self._cond = threading.Condition()
        self._closed = False

    def put(self, claim: Claim) -> None:
        dropped = kept = None
        with self._cond:
            for i, pending in enumerate(self._items):
                if pending.event.key == claim.event.key:
                    kept = coalesce([pending, claim], lambda c: c.event)[0]
                    dropped = claim if kept is pending else pending
                    self._items[i] = kept
                    break
            else:
                while len(self._items) >= self.maxsize and not self._closed:
                    self._cond.wait()
                self._items.append(claim)
            self._cond.notify_all()
        if dropped is not None and self.on_superseded is not None:
            self.on_superseded(dropped, kept)

    def get(self, timeout: float | None = None) -> Claim | None:
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            while True:
                for i, claim in enumerate(self._items):
                    if claim.event.key not in self._busy:
                        del self._items[i]
                        self._busy.add(claim.event.key)
                        self._cond.notify_all()
                        return claim
                if self._closed:
                    return None
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    return None
                self._cond.wait(remaining)

    def task_done(self, claim: Claim) -> None:
        with self._cond:
            self._busy.discard(claim.event.key)
            self._cond.notify_all()

    def close(self) -> None:
        with self._cond:
            self._closed = True
            self._cond.notify_all()

    def drain(self) -> list[Claim]:
        with self._cond:
            items, self._items = self._items, []
            self._cond.notify_all()
            return items

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


# CI script


def render_ci(course_id: str, assessment_id: str, drop_dir: str | Path, runner_tag: str) -> bytes:
    """The ``.gitlab-ci.yml`` published into every submission repository.

    Its single job runs on the course runner, never checks out the pushed
    code and only writes one event file into the drop directory.
    """
    drop = shlex.quote(str(drop_dir))
    aid = shlex.quote(assessment_id)
    return f"""\
# Generated by gitgrade for {course_id}/{assessment_id}. DO NOT EDIT THIS FILE.
# Any change to it is detected and locks this repository until faculty review it.
stages:
  - submit

submit:
  stage: submit
  tags:
    - {runner_tag}
  variables:
    GIT_STRATEGY: none
  script:
    - |
      set -eu
      drop={drop}
      ts="$(date +%s)"
      name="${{ts}}__{assessment_id}__${{CI_PROJECT_NAME}}__${{CI_COMMIT_SHA}}.sub"
      tmp="${{drop}}/.${{name}}.tmp"
      printf 'assessment_id=%s\\ngroup_id=%s\\ncommit=%s\\npushed_at=%s\\nrepo_path=%s\\npusher=%s\\n' \\
        {aid} "$CI_PROJECT_NAME" "$CI_COMMIT_SHA" "$ts" "$CI_PROJECT_PATH" "$GITLAB_USER_LOGIN" > "$tmp"
      mv "$tmp" "${{drop}}/${{name}}"
""".encode()


def valid_groups_from(rosters: Mapping[str, Iterable[str]]) -> dict[str, frozenset[str]]:
    return {aid: frozenset(groups) for aid, groups in rosters.items()}
