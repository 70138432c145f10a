"""In-process GitLab double for offline tests.

Serves the REST subset used by :mod:`gitgrade.gitlab_api` over a real
localhost HTTP socket, backs each project with a bare repository under
``repo_root`` and plays the CI runner: every student push to a submission
repository drops an event file into ``drop_dir``.
"""

from __future__ import annotations

import copy
import itertools
import json
import os
import re
import subprocess
import tempfile
import threading
import time
from dataclasses import dataclass
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Any, Callable, Mapping
from urllib.parse import parse_qs, unquote, urlsplit

from .config import Role
from .errors import GitGradeError
from .submission_intake import SubmissionEvent, write_event_file


class UnknownProject(GitGradeError):
    pass


class PushDenied(GitGradeError):
    """The pusher lacks Developer access to the project."""


@dataclass
class _Response:
    status: int
    body: Any = None
    headers: dict[str, str] | None = None


class MockGitLab:
    def __init__(self, repo_root: str | Path, drop_dir: str | Path, *, token: str = 'mock-token',
                 users: tuple[str, ...] | list[str] = (), page_size: int = 20,
                 clock: Callable[[], float] = time.time):
        self.repo_root = Path(repo_root)
        self.drop_dir = Path(drop_dir)
        self.token = token
        self.page_size = page_size
        self.clock = clock
        self.groups: dict[str, dict[str, Any]] = {}
        self.projects: dict[str, dict[str, Any]] = {}
        self.members: dict[int, dict[int, int]] = {}
        self.users: dict[str, int] = {}
        self.request_log: list[tuple[str, str, int]] = []
        self._ids = itertools.count(1)
        self._user_ids = itertools.count(1000)
        self._lock = threading.RLock()
        self._server: ThreadingHTTPServer | None = None
        self._thread: threading.Thread | None = None
        self.base_url = ''
        for u in users:
            self.add_user(u)

    # lifecycle

    def start(self) -> 'MockGitLab':
        self.repo_root.mkdir(parents=True, exist_ok=True)
        mock = self

        class Handler(BaseHTTPRequestHandler):
            def log_message(self, *args: Any) -> None:
                pass

            def _handle(self) -> None:
                length = int(self.headers.get('Content-Length') or 0)
                raw = self.rfile.read(length) if length else b''
                resp = mock.dispatch(self.command, self.path, raw, self.headers.get('PRIVATE-TOKEN'))
                payload = b'' if resp.body is None else json.dumps(resp.body).encode()
                self.send_response(resp.status)
                self.send_header('Content-Type', 'application/json')
                self.send_header('Content-Length', str(len(payload)))
                for k, v in (resp.headers or {}).items():
                    self.send_header(k, v)
                self.end_headers()
                self.wfile.write(payload)

            do_GET = do_POST = do_PUT = do_DELETE = _handle

        self._server = ThreadingHTTPServer(('127.0.0.1', 0), Handler)
        self._server.daemon_threads = True
        self.base_url = f'http://127.0.0.1:{self._server.server_address[1]}'
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def shutdown(self) -> None:
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
            self._server = None

    def __enter__(self) -> 'MockGitLab':
        return self.start()

    def __exit__(self, *exc: Any) -> None:
        self.shutdown()

    # state

    def add_user(self, username: str) -> int:
        with self._lock:
            if username not in self.users:
                self.users[username] = next(self._user_ids)
            return self.users[username]

    def snapshot(self) -> dict[str, Any]:
        """Deep copy of groups, projects, users and memberships."""
        with self._lock:
            names = {v: k for k, v in self.users.items()}
            pid_path = {p['id']: path for path, p in self.projects.items()}
            return copy.deepcopy({
                'groups': self.groups,
                'projects': self.projects,
                'users': self.users,
                'members': {pid_path[pid]: {names[uid]: lvl for uid, lvl in m.items()}
                            for pid, m in self.members.items()},
            })

    def member_role(self, project_path: str, username: str) -> Role | None:
        with self._lock:
            project = self._project_by_path(project_path)
            level = self.members.get(project['id'], {}).get(self.users.get(username, -1))
            return None if level is None else Role(level)

    assert_member_role = member_role

    def bare_repo(self, project_path: str) -> Path:
        self._project_by_path(project_path)
        return self.repo_root / f'{project_path}.git'

    def head(self, project_path: str) -> str | None:
        proc = _git(self.bare_repo(project_path), 'rev-parse', '--verify', '-q', 'refs/heads/main',
                    check=False)
        return proc.stdout.decode().strip() or None

    def read_file(self, project_path: str, name: str, rev: str = 'main') -> bytes:
        return _git(self.bare_repo(project_path), 'show', f'{rev}:{name}').stdout

    def list_files(self, project_path: str, rev: str = 'main') -> list[str]:
        out = _git(self.bare_repo(project_path), 'ls-tree', '-r', '--name-only', rev).stdout
        return out.decode().splitlines()

    def commit_count(self, project_path: str) -> int:
        if self.head(project_path) is None:
            return 0
        out = _git(self.bare_repo(project_path), 'rev-list', '--count', 'main').stdout
        return int(out)

    def set_push_rejected(self, project_path: str, rejected: bool = True) -> None:
        """Install (or remove) a pre-receive hook refusing every push."""
        hook = self.bare_repo(project_path) / 'hooks' / 'pre-receive'
        if rejected:
            hook.write_text('#!/bin/sh\necho "push rejected by mock" >&2\nexit 1\n')
            hook.chmod(0o755)
        elif hook.exists():
            hook.unlink()

    def simulate_student_push(self, project_path: str, files: Mapping[str, bytes | None], author: str,
                              *, message: str = 'student work', pushed_at: int | None = None) -> str:
        """Commit ``files`` onto the project's main branch as ``author``.

        A value of None deletes that file.  Pushes to submission projects
        also drop an event file, as the course runner would.
        """
        with self._lock:
            try:
                project = self._project_by_path(project_path)
            except KeyError:
                raise UnknownProject(project_path) from None
            uid = self.users.get(author)
            level = self.members.get(project['id'], {}).get(uid, 0)
            if level < Role.DEVELOPER:
                raise PushDenied(f'{author} cannot push to {project_path}')
        repo = self.bare_repo(project_path)
        parent = self.head(project_path)
        env = dict(os.environ, GIT_AUTHOR_NAME=author, GIT_AUTHOR_EMAIL=f'{author}@students.invalid',
                   GIT_COMMITTER_NAME=author, GIT_COMMITTER_EMAIL=f'{author}@students.invalid')
        with tempfile.TemporaryDirectory() as tmp:
            env['GIT_INDEX_FILE'] = os.path.join(tmp, 'index')
            if parent:
                _git(repo, 'read-tree', parent, env=env)
            for name, data in sorted(files.items()):
                if data is None:
                    _git(repo, 'update-index', '--index-info', env=env, input=f'0 {"0" * 40}\t{name}\n'.encode())
                    continue
                blob = _git(repo, 'hash-object', '-w', '--stdin', input=data).stdout.decode().strip()
                _git(repo, 'update-index', '--add', '--cacheinfo', f'100644,{blob},{name}', env=env)
            tree = _git(repo, 'write-tree', env=env).stdout.decode().strip()
            args = ['commit-tree', tree, '-m', message] + (['-p', parent] if parent else [])
            sha = _git(repo, *args, env=env).stdout.decode().strip()
        _git(repo, 'update-ref', 'refs/heads/main', sha, *([parent] if parent else []))

        parts = project_path.split('/')
        if len(parts) == 3 and parts[1] != 'feedback':
            event = SubmissionEvent(
                assessment_id=parts[1], group_id=parts[2], commit=sha,
                pushed_at=int(pushed_at if pushed_at is not None else self.clock()),
                repo_path=project_path, pusher=author)
            write_event_file(self.drop_dir, event)
        return sha

    # request dispatch

    def dispatch(self, method: str, raw_path: str, body: bytes, token: str | None) -> _Response:
        split = urlsplit(raw_path)
        query = {k: v[0] for k, v in parse_qs(split.query).items()}
        with self._lock:
            if token != self.token:
                resp = _Response(401, {'message': '401 Unauthorized'})
            else:
                try:
                    data = json.loads(body) if body else {}
                except ValueError:
                    data = {k: v[0] for k, v in parse_qs(body.decode()).items()}
                resp = self._route(method, split.path, query, data)
            self.request_log.append((method, split.path, resp.status))
            return resp

    _ROUTES = [
        ('GET', r'/api/v4/groups', '_list_groups'),
        ('POST', r'/api/v4/groups', '_create_group'),
        ('GET', r'/api/v4/groups/(?P<ident>[^/]+)', '_get_group'),
        ('GET', r'/api/v4/projects', '_list_projects'),
        ('POST', r'/api/v4/projects', '_create_project'),
        ('GET', r'/api/v4/projects/(?P<ident>[^/]+)', '_get_project'),
        ('GET', r'/api/v4/projects/(?P<ident>[^/]+)/members', '_list_members'),
        ('POST', r'/api/v4/projects/(?P<ident>[^/]+)/members', '_add_member'),
        ('GET', r'/api/v4/projects/(?P<ident>[^/]+)/members/(?P<uid>\d+)', '_get_member'),
        ('PUT', r'/api/v4/projects/(?P<ident>[^/]+)/members/(?P<uid>\d+)', '_edit_member'),
        ('DELETE', r'/api/v4/projects/(?P<ident>[^/]+)/members/(?P<uid>\d+)', '_delete_member'),
        ('GET', r'/api/v4/users', '_list_users'),
    ]

    def _route(self, method: str, path: str, query: dict[str, str], data: dict[str, Any]) -> _Response:
        for m, pattern, handler in self._ROUTES:
            if m != method:
                continue
            match = re.fullmatch(pattern, path)
            if match:
                kwargs = {k: unquote(v) for k, v in match.groupdict().items()}
                try:
                    return getattr(self, handler)(query=query, data=data, **kwargs)
                except KeyError:
                    return _Response(404, {'message': '404 Not Found'})
        return _Response(404, {'message': '404 Not Found'})

    def _paginate(self, items: list[Any], query: dict[str, str]) -> _Response:
        per_page = min(int(query.get('per_page', 20)), self.page_size)
        page = int(query.get('page', 1))
        chunk = items[(page - 1) * per_page: page * per_page]
        headers = {'X-Page': str(page), 'X-Total': str(len(items))}
        if page * per_page < len(items):
            headers['X-Next-Page'] = str(page + 1)
        return _Response(200, chunk, headers)

    def _group_by_ident(self, ident: str) -> dict[str, Any]:
        if ident.isdigit():
            for g in self.groups.values():
                if g['id'] == int(ident):
                    return g
            raise KeyError(ident)
        return self.groups[ident]

    def _project_by_ident(self, ident: str) -> dict[str, Any]:
        if ident.isdigit():
            for p in self.projects.values():
                if p['id'] == int(ident):
                    return p
            raise KeyError(ident)
        return self.projects[ident]

    def _project_by_path(self, path: str) -> dict[str, Any]:
        return self.projects[path]

    def _taken(self, full_path: str) -> bool:
        return full_path in self.groups or full_path in self.projects

    def _list_groups(self, query: dict[str, str], data: dict[str, Any]) -> _Response:
        items = sorted(self.groups.values(), key=lambda g: g['id'])
        return self._paginate(items, query)

    def _get_group(self, ident: str, **_: Any) -> _Response:
        return _Response(200, self._group_by_ident(ident))

    def _create_group(self, query: dict[str, str], data: dict[str, Any]) -> _Response:
        name, path = data.get('name'), data.get('path')
        if not name or not path:
            return _Response(400, {'message': 'name and path are required'})
        parent_id = data.get('parent_id')
        prefix = ''
        if parent_id is not None:
            try:
                prefix = self._group_by_ident(str(parent_id))['full_path'] + '/'
            except KeyError:
                return _Response(404, {'message': '404 Parent Not Found'})
        full_path = prefix + path
        if self._taken(full_path):
            return _Response(400, {'message': {'path': ['has already been taken']}})
        group = {'id': next(self._ids), 'name': name, 'path': path, 'full_path': full_path,
                 'parent_id': None if parent_id is None else int(parent_id)}
        self.groups[full_path] = group
        return _Response(201, group)

    def _list_projects(self, query: dict[str, str], data: dict[str, Any]) -> _Response:
        items = sorted(self.projects.values(), key=lambda p: p['id'])
        return self._paginate(items, query)

    def _get_project(self, ident: str, **_: Any) -> _Response:
        return _Response(200, self._project_by_ident(ident))

    def _create_project(self, query: dict[str, str], data: dict[str, Any]) -> _Response:
        name, path = data.get('name'), data.get('path')
        if not name or not path:
            return _Response(400, {'message': 'name and path are required'})
        try:
            ns = self._group_by_ident(str(data['namespace_id']))
        except KeyError:
            return _Response(404, {'message': '404 Namespace Not Found'})
        full_path = f"{ns['full_path']}/{path}"
        if self._taken(full_path):
            return _Response(400, {'message': {'path': ['has already been taken']}})
        bare = self.repo_root / f'{full_path}.git'
        bare.parent.mkdir(parents=True, exist_ok=True)
        subprocess.run(['git', 'init', '-q', '--bare', '-b', 'main', str(bare)], check=True)
        project = {'id': next(self._ids), 'name': name, 'path': path,
                   'path_with_namespace': full_path,
                   'namespace': {'id': ns['id'], 'full_path': ns['full_path']},
                   'default_branch': 'main',
                   'http_url_to_repo': bare.resolve().as_uri()}
        self.projects[full_path] = project
        self.members[project['id']] = {}
        return _Response(201, project)

    def _member_json(self, uid: int, level: int) -> dict[str, Any]:
        username = next(name for name, i in self.users.items() if i == uid)
        return {'id': uid, 'username': username, 'access_level': level}

    def _list_members(self, ident: str, query: dict[str, str], **_: Any) -> _Response:
        project = self._project_by_ident(ident)
        items = [self._member_json(uid, lvl) for uid, lvl in sorted(self.members[project['id']].items())]
        return self._paginate(items, query)

    def _get_member(self, ident: str, uid: str, **_: Any) -> _Response:
        project = self._project_by_ident(ident)
        level = self.members[project['id']][int(uid)]
        return _Response(200, self._member_json(int(uid), level))

    def _add_member(self, ident: str, data: dict[str, Any], **_: Any) -> _Response:
        project = self._project_by_ident(ident)
        uid, level = int(data.get('user_id', -1)), int(data.get('access_level', 0))
        if uid not in self.users.values():
            return _Response(404, {'message': '404 User Not Found'})
        if level not in set(Role):
            return _Response(400, {'message': 'access_level does not have a valid value'})
        if uid in self.members[project['id']]:
            return _Response(409, {'message': 'Member already exists'})
        self.members[project['id']][uid] = level
        return _Response(201, self._member_json(uid, level))

    def _edit_member(self, ident: str, uid: str, data: dict[str, Any], **_: Any) -> _Response:
        project = self._project_by_ident(ident)
        members = self.members[project['id']]
        if int(uid) not in members:
            raise KeyError(uid)
        level = int(data.get('access_level', 0))
        if level not in set(Role):
            return _Response(400, {'message': 'access_level does not have a valid value'})
        members[int(uid)] = level
        return _Response(200, self._member_json(int(uid), level))

    def _delete_member(self, ident: str, uid: str, **_: Any) -> _Response:
        project = self._project_by_ident(ident)
        del self.members[project['id']][int(uid)]
        return _Response(204)

    def _list_users(self, query: dict[str, str], data: dict[str, Any]) -> _Response:
        username = query.get('username')
        items = [{'id': i, 'username': u} for u, i in sorted(self.users.items())
                 if username is None or u == username]
        return self._paginate(items, query)


def start(repo_root: str | Path, drop_dir: str | Path, fixture: Mapping[str, Any] | None = None,
          **kwargs: Any) -> MockGitLab:
    """Start a mock server; ``fixture`` may carry ``users`` and ``token``."""
    fixture = dict(fixture or {})
    if 'token' in fixture:
        kwargs.setdefault('token', fixture['token'])
    kwargs.setdefault('users', tuple(fixture.get('users', ())))
    return MockGitLab(repo_root, drop_dir, **kwargs).start()


def _git(repo: Path, *args: str, env: Mapping[str, str] | None = None, input: bytes | None = None,
         check: bool = True) -> subprocess.CompletedProcess:
    return subprocess.run(['git', '--git-dir', str(repo), *args], input=input, env=env,
                          capture_output=True, check=check)
