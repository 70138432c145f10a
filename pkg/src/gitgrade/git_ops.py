"""Local working-tree operations on top of the git command line.

A :class:`WorkTree` is single-writer: callers serialize access per path
(see :func:`repo_lock`).  HTTPS credentials are passed to git through
environment-scoped config, so tokens never land in ``.git/config``.
"""

from __future__ import annotations

import base64
import logging
import os
import shutil
import subprocess
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .errors import GitError, PushRejected, TransportError, UnknownCommit

log = logging.getLogger(__name__)

BRANCH = 'main'
PUSH_ATTEMPTS = 3

_locks: dict[str, threading.Lock] = {}
_locks_guard = threading.Lock()


def repo_lock(path: str | Path) -> threading.Lock:
    key = str(Path(path).resolve())
    with _locks_guard:
        return _locks.setdefault(key, threading.Lock())


@dataclass(frozen=True)
class Author:
    name: str
    email: str


@dataclass
class WorkTree:
    local_path: Path
    remote_url: str
    current_commit: str | None
    token: str | None = field(default=None, repr=False)


class NothingToCommit(GitError):
    """Raised by :func:`commit_all_push` when the tree is clean."""

    def __init__(self, head: str | None):
        self.head = head
        super().__init__('nothing to commit')


def _env(token: str | None, author: Author | None = None) -> dict[str, str]:
    env = dict(os.environ, GIT_TERMINAL_PROMPT='0', LC_ALL='C')
    if token:
        basic = base64.b64encode(f'oauth2:{token}'.encode()).decode()
        env.update(GIT_CONFIG_COUNT='1', GIT_CONFIG_KEY_0='http.extraHeader',
                   GIT_CONFIG_VALUE_0=f'Authorization: Basic {basic}')
    if author:
        env.update(GIT_AUTHOR_NAME=author.name, GIT_AUTHOR_EMAIL=author.email,
                   GIT_COMMITTER_NAME=author.name, GIT_COMMITTER_EMAIL=author.email)
    return env


def git(cwd: Path | None, *args: str, token: str | None = None, author: Author | None = None,
        check: bool = True, input: bytes | None = None) -> subprocess.CompletedProcess:
    proc = subprocess.run(['git', *args], cwd=cwd, env=_env(token, author), input=input,
                          capture_output=True)
    if check and proc.returncode != 0:
        raise GitError(f"git {' '.join(args[:2])}: {proc.stderr.decode(errors='replace').strip()}")
    return proc


def _head(path: Path) -> str | None:
    proc = git(path, 'rev-parse', '--verify', '-q', 'HEAD', check=False)
    return proc.stdout.decode().strip() or None


def _is_clone_of(path: Path, remote_url: str) -> bool:
    if not (path / '.git').is_dir():
        return False
    proc = git(path, 'config', '--get', 'remote.origin.url', check=False)
    return proc.returncode == 0 and proc.stdout.decode().strip() == remote_url


def _remote_has_branch(path: Path, token: str | None) -> bool:
    proc = git(path, 'ls-remote', '--heads', 'origin', BRANCH, token=token, check=False)
    if proc.returncode != 0:
        raise TransportError(proc.stderr.decode(errors='replace').strip())
    return bool(proc.stdout.strip())


def clone_or_update(remote_url: str, local_path: str | Path, token: str | None = None) -> WorkTree:
    """Bring ``local_path`` to the remote's default branch head.

    A directory that is not a clone of ``remote_url`` is moved aside
    (``<name>.corrupt-<ts>``) and recloned.
    """
    path = Path(local_path)
    if path.exists() and not _is_clone_of(path, remote_url):
        quarantine = path.with_name(f'{path.name}.corrupt-{time.time_ns()}')
        log.warning('git.quarantine path=%s moved_to=%s', path, quarantine)
        path.rename(quarantine)
    if not path.exists():
        path.parent.mkdir(parents=True, exist_ok=True)
        proc = git(None, 'clone', '-q', '--no-checkout', remote_url, str(path), token=token, check=False)
        if proc.returncode != 0:
            shutil.rmtree(path, ignore_errors=True)
            raise TransportError(proc.stderr.decode(errors='replace').strip())
        git(path, 'config', 'core.autocrlf', 'false')
    if _remote_has_branch(path, token):
        proc = git(path, 'fetch', '-q', '--prune', 'origin', token=token, check=False)
        if proc.returncode != 0:
            raise TransportError(proc.stderr.decode(errors='replace').strip())
        git(path, 'checkout', '-q', '-f', '-B', BRANCH, f'origin/{BRANCH}')
        git(path, 'clean', '-q', '-f', '-d', '-x')
    else:
        # empty remote: start the branch locally
        git(path, 'symbolic-ref', 'HEAD', f'refs/heads/{BRANCH}')
    return WorkTree(path, remote_url, _head(path), token)


def fetch_commit(tree: WorkTree, commit: str) -> None:
    """Make sure ``commit`` is present locally (it may be newer than our fetch)."""
    if git(tree.local_path, 'cat-file', '-e', f'{commit}^{{commit}}', check=False).returncode == 0:
        return
    git(tree.local_path, 'fetch', '-q', 'origin', token=tree.token, check=False)
    if git(tree.local_path, 'cat-file', '-e', f'{commit}^{{commit}}', check=False).returncode != 0:
        raise UnknownCommit(commit)


def checkout_commit(tree: WorkTree, commit: str) -> None:
    fetch_commit(tree, commit)
    proc = git(tree.local_path, 'checkout', '-q', '-f', '--detach', commit, check=False)
    if proc.returncode != 0:
        raise UnknownCommit(commit)
    git(tree.local_path, 'clean', '-q', '-f', '-d', '-x')
    tree.current_commit = _head(tree.local_path)


def read_file_at(tree: WorkTree, commit: str, name: str) -> bytes | None:
    """Contents of ``name`` at ``commit``, or None when absent."""
    fetch_commit(tree, commit)
    proc = git(tree.local_path, 'cat-file', 'blob', f'{commit}:{name}', check=False)
    return proc.stdout if proc.returncode == 0 else None


def commit_all_push(tree: WorkTree, message: str, author: Author) -> str:
    """Commit every change in the tree and push it to ``main``.

    A concurrent remote commit is rebased over, up to three attempts.
    Raises NothingToCommit (carrying the current head) on a clean tree.
    """
    path = tree.local_path
    git(path, 'add', '-A')
    if not git(path, 'status', '--porcelain').stdout.strip():
        raise NothingToCommit(_head(path))
    git(path, 'commit', '-q', '--no-verify', '-m', message, author=author)
    for attempt in range(1, PUSH_ATTEMPTS + 1):
        proc = git(path, 'push', '-q', 'origin', f'HEAD:refs/heads/{BRANCH}', token=tree.token, check=False)
        if proc.returncode == 0:
            tree.current_commit = _head(path)
            return tree.current_commit
        err = proc.stderr.decode(errors='replace').strip()
        log.warning('git.push_retry path=%s attempt=%d error=%r', path, attempt, err)
        if attempt == PUSH_ATTEMPTS:
            raise PushRejected(err)
        fetch = git(path, 'fetch', '-q', 'origin', token=tree.token, check=False)
        if fetch.returncode != 0:
            continue
        if git(path, 'rev-parse', '--verify', '-q', f'origin/{BRANCH}', check=False).returncode == 0:
            rebase = git(path, 'rebase', '-q', f'origin/{BRANCH}', author=author, check=False)
            if rebase.returncode != 0:
                git(path, 'rebase', '--abort', check=False)
                raise PushRejected(f'rebase failed: {rebase.stderr.decode(errors="replace").strip()}')
    raise AssertionError('unreachable')


def export_tree(tree: WorkTree, target: str | Path) -> Path:
    """Copy the checked-out files (without ``.git``) into a fresh directory."""
    target = Path(target)
    if target.exists():
        shutil.rmtree(target)
    shutil.copytree(tree.local_path, target, symlinks=True, ignore=shutil.ignore_patterns('.git'))
    return target


def write_files(tree: WorkTree, files: Mapping[str, bytes]) -> None:
    for name, data in files.items():
        p = tree.local_path / name
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_bytes(data)
