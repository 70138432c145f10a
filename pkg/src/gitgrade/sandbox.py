"""Run untrusted commands under CPU, memory, wall-clock, output and process limits.

Enforcement:

* CPU: a watchdog sums the kernel's per-process CPU accounting over the
  process tree and kills at ``cpu_s``; ``RLIMIT_CPU`` one second later is
  the backstop (kernel tick rounding can fire it slightly early).
* Memory: ``RLIMIT_AS`` address-space cap.
* Wall clock: the supervising loop kills the process group at ``wall_s``.
* Processes: ``RLIMIT_NPROC`` (ineffective for root) plus tree sampling.
* Output: streams are captured up to ``max_output_bytes``; a program still
  flooding past ``output_kill_bytes`` is killed.

The child runs in its own session.  On return every process of that
session, every descendant the watchdog saw, and every process carrying the
run's marker environment variable is killed.

This is a lightweight boundary, not a container: there is no filesystem or
network isolation.  Swap :func:`run` for a stricter backend when needed.
"""

from __future__ import annotations

import enum
import logging
import math
import os
import resource
import signal
import subprocess
import threading
import time
import uuid
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Mapping, Sequence

import psutil

from .errors import SandboxError

log = logging.getLogger(__name__)

GRACE_S = 2.0
MARKER_ENV = 'GITGRADE_SANDBOX_RUN'
MAX_FILE_BYTES = 256 * 2**20
OOM_MARKERS = (b'MemoryError', b'std::bad_alloc', b'Cannot allocate memory', b'out of memory')
DEFAULT_PATH = '/usr/local/bin:/usr/bin:/bin'


class Verdict(str, enum.Enum):
    OK = 'OK'
    TIME_LIMIT = 'TimeLimit'
    MEMORY_LIMIT = 'MemoryLimit'
    RUNTIME_ERROR = 'RuntimeError'
    OUTPUT_LIMIT = 'OutputLimit'
    SANDBOX_ERROR = 'SandboxError'


@dataclass(frozen=True)
class ResourceLimits:
    cpu_s: float
    mem_bytes: int
    wall_s: float
    max_output_bytes: int = 2**20
    max_processes: int = 16
    output_kill_bytes: int | None = None

    def __post_init__(self) -> None:
        if min(self.cpu_s, self.mem_bytes, self.wall_s, self.max_output_bytes, self.max_processes) <= 0:
            raise ValueError('all limits must be positive')
        if self.wall_s < self.cpu_s:
            raise ValueError('wall_s must be >= cpu_s')

    @property
    def kill_output_bytes(self) -> int:
        return self.output_kill_bytes or 16 * self.max_output_bytes

    @classmethod
    def for_assessment(cls, assessment) -> 'ResourceLimits':
        return cls(cpu_s=assessment.cpu_limit_s, mem_bytes=assessment.mem_limit_bytes,
                   wall_s=assessment.wall_limit_s, max_output_bytes=assessment.max_output_bytes,
                   max_processes=assessment.max_processes)


@dataclass(frozen=True)
class RunOutcome:
    verdict: Verdict
    exit_code: int | None
    term_signal: int | None
    cpu_used_s: float
    wall_used_s: float
    stdout: bytes = b''
    stderr: bytes = b''
    stdout_truncated: bool = False
    stderr_truncated: bool = False
    peak_memory_bytes: int = 0

    @property
    def truncated(self) -> bool:
        return self.stdout_truncated or self.stderr_truncated


class _Capture(threading.Thread):
    def __init__(self, stream: IO[bytes], keep: int, flood: int, flooded: threading.Event):
        super().__init__(daemon=True)
        self.stream = stream
        self.keep = keep
        self.flood = flood
        self.flooded = flooded
        self.chunks: list[bytes] = []
        self.kept = 0
        self.total = 0

    def run(self) -> None:
        try:
            while True:
                chunk = self.stream.read1(65536)
                if not chunk:
                    break
                self.total += len(chunk)
                if self.kept < self.keep:
                    piece = chunk[:self.keep - self.kept]
                    self.chunks.append(piece)
                    self.kept += len(piece)
                if self.total > self.flood:
                    self.flooded.set()
        except (OSError, ValueError):
            pass

    @property
    def data(self) -> bytes:
        return b''.join(self.chunks)

    @property
    def truncated(self) -> bool:
        return self.total > self.kept


def _user_process_count() -> int:
    uid = os.getuid()
    n = 0
    for p in psutil.process_iter(['uids']):
        try:
            if p.info['uids'] and p.info['uids'].real == uid:
                n += 1
        except psutil.Error:
            pass
    return n


def _kill_group(pgid: int) -> None:
    try:
        os.killpg(pgid, signal.SIGKILL)
    except (ProcessLookupError, PermissionError):
        pass


def _kill_marked(token: str, tracked: dict[int, psutil.Process]) -> None:
    for p in tracked.values():
        try:
            if p.is_running():
                p.kill()
        except psutil.Error:
            pass
    for p in psutil.process_iter():
        try:
            if p.environ().get(MARKER_ENV) == token:
                p.kill()
        except psutil.Error:
            pass


def run(command: Sequence[str], stdin_source: str | Path | None = None, workdir: str | Path = '.',
        limits: ResourceLimits | None = None, env: Mapping[str, str] | None = None) -> RunOutcome:
    """Run ``command`` in ``workdir`` under ``limits`` and classify the result.

    Raises SandboxError only for engine faults; anything the child does is
    reported through the returned verdict.
    """
    if not command:
        raise ValueError('empty command')
    limits = limits or ResourceLimits(cpu_s=5, mem_bytes=8 * 2**30, wall_s=15)
    workdir = Path(workdir)
    if not workdir.is_dir():
        raise SandboxError(f'workdir {workdir} does not exist')

    token = uuid.uuid4().hex
    child_env = {'PATH': os.environ.get('PATH', DEFAULT_PATH), 'HOME': str(workdir),
                 'LANG': 'C.UTF-8', 'LC_ALL': 'C.UTF-8', MARKER_ENV: token}
    child_env.update(env or {})
    cpu_soft = math.ceil(limits.cpu_s) + 1
    nproc = limits.max_processes + _user_process_count()

    def preexec() -> None:
        resource.setrlimit(resource.RLIMIT_CPU, (cpu_soft, cpu_soft + 1))
        resource.setrlimit(resource.RLIMIT_AS, (limits.mem_bytes, limits.mem_bytes))
        resource.setrlimit(resource.RLIMIT_NPROC, (nproc, nproc))
        resource.setrlimit(resource.RLIMIT_CORE, (0, 0))
        resource.setrlimit(resource.RLIMIT_FSIZE, (MAX_FILE_BYTES, MAX_FILE_BYTES))

    stdin: IO[bytes] | int = subprocess.DEVNULL
    if stdin_source is not None:
        try:
            stdin = open(stdin_source, 'rb')
        except OSError as e:
            raise SandboxError(f'cannot open stdin source {stdin_source}: {e}') from e
    start = time.monotonic()
    try:
        proc = subprocess.Popen(list(command), cwd=workdir, stdin=stdin, stdout=subprocess.PIPE,
                                stderr=subprocess.PIPE, env=child_env, preexec_fn=preexec,
                                start_new_session=True, close_fds=True)
    except (FileNotFoundError, PermissionError) as e:
        code = 127 if isinstance(e, FileNotFoundError) else 126
        return RunOutcome(Verdict.RUNTIME_ERROR, code, None, 0.0, time.monotonic() - start,
                          stderr=f'{command[0]}: {e.strerror}\n'.encode())
    except OSError as e:
        log.error('sandbox.spawn_failed command=%r error=%s', command[0], e)
        return RunOutcome(Verdict.SANDBOX_ERROR, None, None, 0.0, time.monotonic() - start,
                          stderr=str(e).encode())
    finally:
        if not isinstance(stdin, int):
            stdin.close()

    flooded = threading.Event()
    readers = [_Capture(s, limits.max_output_bytes, limits.kill_output_bytes, flooded)
               for s in (proc.stdout, proc.stderr)]
    for r in readers:
        r.start()

    tracked: dict[int, psutil.Process] = {}
    cpu_seen: dict[int, float] = {}
    peak_vms = 0
    kill_reason = None
    delay = 0.001
    status = rusage = None
    try:
        root = psutil.Process(proc.pid)
    except psutil.Error:
        root = None
    while True:
        pid, status, rusage = os.wait4(proc.pid, os.WNOHANG)
        if pid:
            break
        elapsed = time.monotonic() - start
        if kill_reason is None:
            if elapsed >= limits.wall_s:
                kill_reason = 'wall'
            elif flooded.is_set():
                kill_reason = 'output'
            else:
                alive, vms = _sample(root, tracked, cpu_seen)
                peak_vms = max(peak_vms, vms)
                if sum(cpu_seen.values()) >= limits.cpu_s:
                    kill_reason = 'cpu'
                elif alive > limits.max_processes:
                    kill_reason = 'processes'
            if kill_reason is not None:
                _kill_group(proc.pid)
                _kill_marked(token, tracked)
        time.sleep(delay)
        delay = min(delay * 2, 0.02)
    wall_used = time.monotonic() - start
    proc.returncode = status  # reaped by wait4; keep Popen from waiting again

    _kill_group(proc.pid)
    _kill_marked(token, tracked)
    for r in readers:
        r.join(GRACE_S)
    for s in (proc.stdout, proc.stderr):
        s.close()

    cpu_used = max(rusage.ru_utime + rusage.ru_stime, sum(cpu_seen.values()))
    peak = max(peak_vms, rusage.ru_maxrss * 1024)
    exit_code = os.waitstatus_to_exitcode(status)
    term_signal = -exit_code if exit_code < 0 else None
    exit_code = exit_code if exit_code >= 0 else None
    out, err = readers

    if kill_reason == 'output':
        verdict = Verdict.OUTPUT_LIMIT
    elif (kill_reason in ('wall', 'cpu') or term_signal == signal.SIGXCPU
          or (term_signal == signal.SIGKILL and cpu_used >= limits.cpu_s)):
        verdict = Verdict.TIME_LIMIT
    elif exit_code == 0 and kill_reason is None:
        verdict = Verdict.OK
    elif peak >= 0.9 * limits.mem_bytes or any(m in err.data for m in OOM_MARKERS):
        verdict = Verdict.MEMORY_LIMIT
    else:
        verdict = Verdict.RUNTIME_ERROR

    return RunOutcome(verdict, exit_code, term_signal, cpu_used, wall_used, out.data, err.data,
                      out.truncated, err.truncated, peak)


def _sample(root: psutil.Process | None, tracked: dict[int, psutil.Process],
            cpu_seen: dict[int, float]) -> tuple[int, int]:
    """Record the live process tree; return (live count, largest address space)."""
    if root is None:
        return 0, 0
    try:
        procs = [root] + root.children(recursive=True)
    except psutil.Error:
        return 0, 0
    alive = 0
    peak = 0
    for p in procs:
        tracked.setdefault(p.pid, p)
        try:
            with p.oneshot():
                t = p.cpu_times()
                cpu_seen[p.pid] = t.user + t.system
                peak = max(peak, p.memory_info().vms)
            alive += 1
        except psutil.Error:
            pass
    return alive, peak
