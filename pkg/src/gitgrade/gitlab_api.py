"""Small idempotent client for the GitLab REST v4 surface the engine needs.

Only groups, projects and project memberships are covered.  Every mutating
call first reads the current state and only writes when it differs, so
running the same provisioning twice converges to the same server state.
"""

from __future__ import annotations

import enum
import logging
import re
import threading
import time
from dataclasses import dataclass, field
from typing import Any, Iterator, Sequence
from urllib.parse import quote

import requests

from .config import Role
from .errors import (AuthError, ConflictError, GitLabError, NotFound, ServerError,
                     TransportError, UnknownUser)

log = logging.getLogger(__name__)

SEGMENT_RE = re.compile(r'[A-Za-z0-9_][A-Za-z0-9_.-]*')
DEFAULT_BACKOFF = (0.5, 1.0, 2.0)


class RefKind(str, enum.Enum):
    GROUP = 'Group'
    PROJECT = 'Project'


@dataclass(frozen=True)
class RemoteRef:
    kind: RefKind
    id: int
    full_path: str
    clone_url: str | None = None
    # True when this call created the entity; ignored by equality
    created: bool = field(default=False, compare=False)

    @property
    def name(self) -> str:
        return self.full_path.rsplit('/', 1)[-1]


def check_segment(name: str) -> None:
    if not isinstance(name, str) or not SEGMENT_RE.fullmatch(name):
        raise ValueError(f'{name!r} is not a valid path segment')


class GitLabClient:
    """Thread-safe REST client; one instance may be shared by all workers."""

    def __init__(self, base_url: str, token: str, *, backoff: Sequence[float] = DEFAULT_BACKOFF,
                 timeout: float = 30.0):
        self.base_url = base_url.rstrip('/')
        self.api = self.base_url + '/api/v4'
        self.token = token
        self.backoff = tuple(backoff)
        self.timeout = timeout
        self._local = threading.local()
        self._user_ids: dict[str, int] = {}

    @property
    def _session(self) -> requests.Session:
        s = getattr(self._local, 'session', None)
        if s is None:
            s = requests.Session()
            s.headers['PRIVATE-TOKEN'] = self.token
            self._local.session = s
        return s

    def _request(self, method: str, path: str, *, params: dict | None = None,
                 json: dict | None = None) -> requests.Response:
        url = self.api + path
        for attempt in range(len(self.backoff) + 1):
            try:
                resp = self._session.request(method, url, params=params, json=json, timeout=self.timeout)
            except requests.RequestException as e:
                if attempt == len(self.backoff):
                    raise TransportError(f'{method} {path}: {e}') from e
                log.warning('gitlab.retry method=%s path=%s error=%s', method, path, type(e).__name__)
                time.sleep(self.backoff[attempt])
                continue
            if resp.status_code >= 500 or resp.status_code == 429:
                if attempt == len(self.backoff):
                    raise ServerError(f'{method} {path}: HTTP {resp.status_code}')
                log.warning('gitlab.retry method=%s path=%s status=%d', method, path, resp.status_code)
                time.sleep(self.backoff[attempt])
                continue
            if resp.status_code in (401, 403):
                raise AuthError(f'{method} {path}: HTTP {resp.status_code}')
            if resp.status_code == 404:
                raise NotFound(f'{method} {path}')
            if resp.status_code == 409:
                raise ConflictError(f'{method} {path}: {_message(resp)}')
            if resp.status_code >= 400:
                raise GitLabError(f'{method} {path}: HTTP {resp.status_code} {_message(resp)}')
            return resp
        raise AssertionError('unreachable')

    def _get_all(self, path: str, params: dict | None = None) -> Iterator[dict[str, Any]]:
        params = dict(params or {}, per_page=100, page=1)
        while True:
            resp = self._request('GET', path, params=params)
            yield from resp.json()
            next_page = resp.headers.get('X-Next-Page')
            if not next_page:
                return
            params['page'] = int(next_page)

    # lookups

    def get_group(self, full_path: str) -> RemoteRef:
        data = self._request('GET', f'/groups/{quote(full_path, safe="")}').json()
        return RemoteRef(RefKind.GROUP, data['id'], data['full_path'])

    def get_project(self, full_path: str) -> RemoteRef:
        data = self._request('GET', f'/projects/{quote(full_path, safe="")}').json()
        return _project_ref(data)

    def _exists(self, kind: RefKind, full_path: str) -> bool:
        try:
            (self.get_group if kind is RefKind.GROUP else self.get_project)(full_path)
        except NotFound:
            return False
        return True

    def user_id(self, username: str) -> int:
        if username in self._user_ids:
            return self._user_ids[username]
        users = self._request('GET', '/users', params={'username': username}).json()
        if not users:
            raise UnknownUser(username)
        self._user_ids[username] = users[0]['id']
        return users[0]['id']

    # groups and projects

    def ensure_group(self, parent: RemoteRef | None, name: str) -> RemoteRef:
        check_segment(name)
        if parent is not None and parent.kind is not RefKind.GROUP:
            raise ConflictError(f'{parent.full_path} is a project, not a group')
        full_path = f'{parent.full_path}/{name}' if parent else name
        try:
            return self.get_group(full_path)
        except NotFound:
            pass
        if self._exists(RefKind.PROJECT, full_path):
            raise ConflictError(f'{full_path} is occupied by a project')
        body: dict[str, Any] = {'name': name, 'path': name}
        if parent is not None:
            body['parent_id'] = parent.id
        try:
            data = self._request('POST', '/groups', json=body).json()
        except GitLabError:
            # lost a creation race: the group now exists
            if self._exists(RefKind.GROUP, full_path):
                return self.get_group(full_path)
            raise
        log.info('gitlab.created kind=group path=%s', full_path)
        return RemoteRef(RefKind.GROUP, data['id'], data['full_path'], created=True)

    def ensure_project(self, parent: RemoteRef, name: str) -> RemoteRef:
        check_segment(name)
        if parent.kind is not RefKind.GROUP:
            raise ConflictError(f'{parent.full_path} is a project, not a group')
        full_path = f'{parent.full_path}/{name}'
        try:
            return self.get_project(full_path)
        except NotFound:
            pass
        if self._exists(RefKind.GROUP, full_path):
            raise ConflictError(f'{full_path} is occupied by a group')
        body = {'name': name, 'path': name, 'namespace_id': parent.id}
        try:
            data = self._request('POST', '/projects', json=body).json()
        except GitLabError:
            if self._exists(RefKind.PROJECT, full_path):
                return self.get_project(full_path)
            raise
        log.info('gitlab.created kind=project path=%s', full_path)
        return _project_ref(data, created=True)

    # memberships

    def member_role(self, project: RemoteRef, username: str) -> Role | None:
        uid = self.user_id(username)
        try:
            data = self._request('GET', f'/projects/{project.id}/members/{uid}').json()
        except NotFound:
            return None
        return _role(data['access_level'])

    def list_members(self, project: RemoteRef) -> dict[str, Role | None]:
        return {m['username']: _role(m['access_level'])
                for m in self._get_all(f'/projects/{project.id}/members')}

    def set_member_role(self, project: RemoteRef, username: str, role: Role) -> bool:
        """Converge ``username``'s role on ``project`` to ``role``.

        Returns True when the server state changed.
        """
        uid = self.user_id(username)
        current = self.member_role(project, username)
        if current is role:
            return False
        if current is None:
            try:
                self._request('POST', f'/projects/{project.id}/members',
                              json={'user_id': uid, 'access_level': int(role)})
            except ConflictError:
                self._request('PUT', f'/projects/{project.id}/members/{uid}',
                              json={'access_level': int(role)})
        else:
            self._request('PUT', f'/projects/{project.id}/members/{uid}',
                          json={'access_level': int(role)})
        log.info('gitlab.role project=%s user=%s role=%s', project.full_path, username, role.label)
        return True

    def revoke_write(self, project: RemoteRef, username: str) -> bool:
        current = self.member_role(project, username)
        if current is None:
            raise UnknownUser(f'{username} is not a member of {project.full_path}')
        if current is Role.REPORTER:
            return False
        return self.set_member_role(project, username, Role.REPORTER)

    def remove_member(self, project: RemoteRef, username: str) -> bool:
        uid = self.user_id(username)
        try:
            self._request('DELETE', f'/projects/{project.id}/members/{uid}')
        except NotFound:
            return False
        return True


def _project_ref(data: dict[str, Any], created: bool = False) -> RemoteRef:
    return RemoteRef(RefKind.PROJECT, data['id'], data['path_with_namespace'],
                     data['http_url_to_repo'], created=created)


def _role(level: int) -> Role | None:
    try:
        return Role(level)
    except ValueError:
        # guests and minimal-access members have no engine role
        return None


def _message(resp: requests.Response) -> str:
    try:
        return str(resp.json().get('message', ''))
    except ValueError:
        return resp.text[:200]
