"""Command-line entry point.

Exit codes: 0 success, 1 bad configuration or unknown id, 2 partial
failure, 3 infrastructure error.
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import time
from pathlib import Path
from typing import Callable, Sequence

from .commit_db import CommitDB, Status
from .config import CourseConfig, load_config, resolve_token
from .errors import ConfigError, EvaluationFailed, GitGradeError, RosterError, UnknownAssessment
from .evaluator import Evaluator
from .git_ops import Author
from .gitlab_api import GitLabClient
from .provisioner import load_rosters, load_topology, lock_assessment, provision_course, publish_assessment
from .submission_intake import Claim, DropDirWatcher, PendingQueue

log = logging.getLogger('gitgrade')

EXIT_OK, EXIT_INVALID, EXIT_PARTIAL, EXIT_INFRA = 0, 1, 2, 3


class _StderrHandler(logging.StreamHandler):
    """Always writes to the current ``sys.stderr``, even if it was swapped."""

    @property
    def stream(self):
        return sys.stderr

    @stream.setter
    def stream(self, value) -> None:
        pass


def setup_logging(level: int = logging.INFO) -> None:
    handler = _StderrHandler()
    handler.setFormatter(logging.Formatter('%(asctime)s %(levelname)s %(message)s'))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level)


class Server:
    """Drop-dir watcher plus a pool of evaluation workers."""

    def __init__(self, evaluator: Evaluator, drop_dir: Path, workers: int = 2, poll_interval: float = 0.2):
        self.evaluator = evaluator
        self.drop_dir = Path(drop_dir)
        self.workers = max(1, workers)
        self.watcher = DropDirWatcher(drop_dir, evaluator.topology.valid_groups(), poll_interval)
        self.queue = PendingQueue(on_superseded=self._superseded)

    def _superseded(self, dropped: Claim, kept: Claim) -> None:
        log.info('intake.superseded assessment=%s group=%s dropped=%s kept=%s', dropped.event.assessment_id,
                 dropped.event.group_id, dropped.event.commit[:8], kept.event.commit[:8])
        try:
            self.evaluator.record_superseded(dropped.event)
        except GitGradeError:
            log.exception('intake.superseded_record_failed')
        dropped.done()

    def _work(self, stop: threading.Event) -> None:
        while not stop.is_set():
            claim = self.queue.get(timeout=0.2)
            if claim is None:
                continue
            try:
                self.evaluator.evaluate(claim.event)
            except EvaluationFailed as e:
                claim.fail(str(e))
            except Exception as e:
                log.exception('worker.crash file=%s', claim.path.name)
                claim.fail(f'{type(e).__name__}: {e}')
            else:
                claim.done()
            finally:
                self.queue.task_done(claim)

    def run(self, stop: threading.Event) -> None:
        recovered = self.watcher.recover()
        log.info('serve.start workers=%d recovered=%d drop_dir=%s', self.workers, recovered, self.drop_dir)
        watcher = threading.Thread(target=self.watcher.run, args=(self.queue.put, stop), name='watcher')
        pool = [threading.Thread(target=self._work, args=(stop,), name=f'worker-{i}') for i in range(self.workers)]
        for t in [watcher, *pool]:
            t.start()
        while not stop.wait(0.5):
            pass
        log.info('serve.stopping')
        watcher.join()
        for t in pool:
            t.join()
        self.queue.close()
        returned = 0
        for claim in self.queue.drain():
            os.replace(claim.path, self.drop_dir / claim.path.name)
            returned += 1
        log.info('serve.stopped returned=%d', returned)


def _context(config: CourseConfig) -> tuple[GitLabClient, str]:
    token = resolve_token(config, os.environ)
    return GitLabClient(config.server_base_url, token), token


def serve(config: CourseConfig, stop: threading.Event, *, workers: int | None = None,
          clock: Callable[[], float] = time.time, poll_interval: float = 0.2) -> None:
    client, token = _context(config)
    topology = load_topology(client, config, load_rosters(config))
    with CommitDB(config.state_db_path) as db:
        evaluator = Evaluator(config, client, db, topology, token=token, clock=clock)
        Server(evaluator, config.drop_dir, workers or config.workers, poll_interval).run(stop)


def _unknown(config: CourseConfig, assessment_id: str) -> bool:
    if assessment_id in config.assessment_ids:
        return False
    print(f'error: unknown assessment {assessment_id!r}', file=sys.stderr)
    return True


def cmd_init(config: CourseConfig, args: argparse.Namespace) -> int:
    client, _ = _context(config)
    topology = provision_course(client, config, load_rosters(config))
    for change in topology.changes:
        print(change)
    if not topology.changes:
        print('no changes')
    return EXIT_OK


def cmd_publish(config: CourseConfig, args: argparse.Namespace) -> int:
    if _unknown(config, args.assessment):
        return EXIT_INVALID
    client, token = _context(config)
    topology = load_topology(client, config, load_rosters(config))
    author = Author(config.bot_name, config.bot_email)
    try:
        result = publish_assessment(topology, config, config.assessment(args.assessment), args.materials,
                                    author, token)
    except FileNotFoundError as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_INVALID
    print(f'pushed {len(result.pushed)}, unchanged {len(result.unchanged)}, failed {len(result.errors)}')
    for repo, err in sorted(result.errors.items()):
        print(f'failed {repo}: {err}', file=sys.stderr)
    return EXIT_PARTIAL if result.errors else EXIT_OK


def cmd_lock(config: CourseConfig, args: argparse.Namespace) -> int:
    if _unknown(config, args.assessment):
        return EXIT_INVALID
    client, _ = _context(config)
    topology = load_topology(client, config, load_rosters(config))
    result = lock_assessment(client, topology, args.assessment, config.faculty)
    print(f'demoted {result.demotions}')
    for repo, err in sorted(result.errors.items()):
        print(f'failed {repo}: {err}', file=sys.stderr)
    return EXIT_PARTIAL if result.errors else EXIT_OK


def cmd_reevaluate(config: CourseConfig, args: argparse.Namespace) -> int:
    if _unknown(config, args.assessment):
        return EXIT_INVALID
    client, token = _context(config)
    topology = load_topology(client, config, load_rosters(config))
    with CommitDB(config.state_db_path) as db:
        results = Evaluator(config, client, db, topology, token=token).reevaluate_all(args.assessment)
    for gid, status in results.items():
        print(f'{gid} {status.value}')
    return EXIT_PARTIAL if Status.FAILED in results.values() else EXIT_OK


def cmd_serve(config: CourseConfig, args: argparse.Namespace) -> int:
    stop = threading.Event()

    def on_signal(signum: int, frame: object) -> None:
        log.info('serve.signal signal=%s', signal.Signals(signum).name)
        stop.set()

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, on_signal)
        signal.signal(signal.SIGINT, on_signal)
    serve(config, stop, workers=args.workers)
    return EXIT_OK


def cmd_dump(config: CourseConfig, args: argparse.Namespace) -> int:
    with CommitDB(config.state_db_path) as db:
        db.dump_csv(sys.stdout)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    # --config is accepted before or after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument('--config', type=Path, default=argparse.SUPPRESS, help='course configuration (YAML)')
    common.add_argument('-v', '--verbose', action='store_true', default=argparse.SUPPRESS, help='debug logging')

    parser = argparse.ArgumentParser(prog='gitgrade', description='Git-backed assessment engine.',
                                     parents=[common])
    sub = parser.add_subparsers(dest='command', required=True)

    def command(name: str, func: Callable, help: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, parents=[common], help=help)
        p.set_defaults(func=func)
        return p

    command('init', cmd_init, 'create or repair groups, repositories and memberships')
    p = command('publish', cmd_publish, 'push assessment materials to every submission repository')
    p.add_argument('--assessment', required=True)
    p.add_argument('--materials', required=True, type=Path)
    p = command('lock', cmd_lock, 'revoke student write access for an assessment')
    p.add_argument('--assessment', required=True)
    p = command('serve', cmd_serve, 'watch the drop directory and evaluate submissions')
    p.add_argument('--workers', type=int, default=None)
    p = command('reevaluate', cmd_reevaluate, 'evaluate every group head of an assessment, ignoring cooldowns')
    p.add_argument('--assessment', required=True)
    command('dump', cmd_dump, 'print the submission history as CSV')
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, 'config', None) is None:
        parser.error('--config is required')
    setup_logging(logging.DEBUG if getattr(args, 'verbose', False) else logging.INFO)
    try:
        config = load_config(args.config)
        return args.func(config, args)
    except (ConfigError, RosterError, UnknownAssessment) as e:
        print(f'error: {e}', file=sys.stderr)
        return EXIT_INVALID
    except GitGradeError as e:
        log.error('command.failed command=%s error=%r', args.command, f'{type(e).__name__}: {e}')
        return EXIT_INFRA
    except OSError as e:
        log.error('command.failed command=%s error=%r', args.command, str(e))
        return EXIT_INFRA


if __name__ == '__main__':
    sys.exit(main())
