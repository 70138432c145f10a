"""Feedback READMEs, code archives and per-assessment dashboards.

Renderers are pure: equal inputs give identical bytes, so golden files can
pin them.  Publishing goes through git working trees under ``work_dir``.
"""

from __future__ import annotations

import datetime as dt
import io
import logging
import re
import stat
import tarfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

from . import git_ops
from .commit_db import CommitDB
from .config import AssessmentConfig
from .git_ops import Author, NothingToCommit, WorkTree
from .gitlab_api import RemoteRef
from .models import EvaluationReport, Overall, TestVerdict

log = logging.getLogger(__name__)

EXCERPT_BYTES = 4096
BUILD_OUTPUT_BYTES = 64 * 1024
CI_WARNING = ('**Do not edit `.gitlab-ci.yml`.** Any change to it suspends your write access '
              'until you contact the course staff.')
TAMPER_NOTICE = ('Your `.gitlab-ci.yml` differs from the one published by the course staff, so this '
                 'submission was not evaluated and your write access to the repository has been '
                 'suspended. Please reach out to the faculty to have it restored.')


def iso(ts: float) -> str:
    return dt.datetime.fromtimestamp(int(ts), dt.timezone.utc).strftime('%Y-%m-%dT%H:%M:%SZ')


def _fence(text: str) -> str:
    longest = max((len(m) for m in re.findall(r'`+', text)), default=0)
    ticks = '`' * max(3, longest + 1)
    body = text if text.endswith('\n') or not text else text + '\n'
    return f'{ticks}text\n{body}{ticks}\n'


def _excerpt(data: bytes, limit: int = EXCERPT_BYTES) -> str:
    text = data[:limit].decode('utf-8', errors='replace')
    if len(data) > limit:
        text += f'\n[... {len(data) - limit} more bytes not shown]\n'
    return text


def _cell(text: str) -> str:
    return text.replace('|', '\\|')


def visible_tests(verdicts: Iterable[TestVerdict], assessment: AssessmentConfig) -> list[TestVerdict]:
    """Tests whose expected/actual output the student may see."""
    verdicts = sorted(verdicts, key=lambda v: v.name)
    if assessment.output_visible:
        return verdicts
    if assessment.only_first_wrong_visible:
        return [v for v in verdicts if not v.passed][:1]
    return []


def _output_block(v: TestVerdict) -> str:
    out = [f'## Output of test `{v.name}`\n', f'Verdict: {v.outcome.value}\n']
    if v.run.truncated:
        out.append('Your output was truncated.\n')
    out.append('Expected output:\n')
    out.append(_fence(_excerpt(v.expected)))
    out.append('Your output:\n')
    out.append(_fence(_excerpt(v.run.stdout)))
    if v.diff_excerpt:
        out.append(v.diff_excerpt + '\n')
    return '\n'.join(out)


def render_feedback(report: EvaluationReport, assessment: AssessmentConfig) -> bytes:
    ev = report.event
    parts = [
        f'# {ev.assessment_id}: {ev.group_id}\n',
        '\n'.join([
            f'- Commit: `{ev.commit[:8]}`',
            f'- Evaluated at: {iso(report.evaluated_at)}',
            f'- Next evaluation available at: {iso(report.cooldown_until)}',
        ]) + '\n',
    ]
    if report.overall is Overall.TAMPERED:
        parts.append('## Tampered\n')
        parts.append(TAMPER_NOTICE + '\n')
    else:
        if report.overall is Overall.COMPILE_ERROR:
            parts.append('**Result: compilation failed.**\n')
            parts.append('## Build output\n')
            parts.append(_fence(report.build_output or ''))
        else:
            parts.append(f'**Result: {report.passed}/{report.test_count} tests passed.**\n')
        if report.test_verdicts:
            rows = ['| Test | Verdict |', '| --- | --- |']
            rows += [f'| {_cell(v.name)} | {v.outcome.value} |'
                     for v in sorted(report.test_verdicts, key=lambda v: v.name)]
            parts.append('## Results\n')
            parts.append('\n'.join(rows) + '\n')
        for v in visible_tests(report.test_verdicts, assessment):
            parts.append(_output_block(v))
    for section in report.analyzer_sections:
        parts.append(f'## Hints: {section.title}\n')
        parts.append((section.body.rstrip() or 'Nothing to report.') + '\n')
    parts.append('---\n')
    parts.append(CI_WARNING + '\n')
    return '\n'.join(parts).encode()


def package_code(tree: WorkTree | Path | str, mtime: int = 0) -> bytes:
    """Deterministic ustar archive of the tree, ``.git`` excluded."""
    root = Path(tree.local_path if isinstance(tree, WorkTree) else tree)
    paths = sorted(p for p in root.rglob('*')
                   if '.git' not in p.relative_to(root).parts and (p.is_file() or p.is_symlink()))
    buf = io.BytesIO()
    with tarfile.open(fileobj=buf, mode='w', format=tarfile.USTAR_FORMAT) as tar:
        for p in paths:
            rel = p.relative_to(root).as_posix()
            info = tarfile.TarInfo(rel)
            info.mtime = mtime
            info.uid = info.gid = 0
            info.uname = info.gname = ''
            if p.is_symlink():
                info.type = tarfile.SYMTYPE
                info.linkname = str(p.readlink())
                info.mode = 0o777
                tar.addfile(info)
                continue
            data = p.read_bytes()
            info.size = len(data)
            info.mode = 0o755 if p.stat().st_mode & stat.S_IXUSR else 0o644
            tar.addfile(info, io.BytesIO(data))
    return buf.getvalue()


# dashboards


@dataclass(frozen=True)
class DashboardRow:
    group_id: str
    passed: int
    failed: int
    submissions: int
    days: int

    def __post_init__(self) -> None:
        if min(self.passed, self.failed, self.submissions, self.days) < 0:
            raise ValueError('dashboard counts must be >= 0')


def ranking_key(row: DashboardRow) -> tuple:
    return (-row.passed, row.submissions, row.group_id)


def dashboard_rows(db: CommitDB, assessment: AssessmentConfig, group_ids: Iterable[str],
                   now: float) -> list[DashboardRow]:
    rows = []
    for gid in group_ids:
        s = db.stats(gid, assessment.id, now, assessment.start_date)
        rows.append(DashboardRow(gid, s.passed, s.failed, s.submissions, s.days))
    return sorted(rows, key=ranking_key)


def render_dashboard(rows: Iterable[DashboardRow], assessment_id: str, generated_at: float) -> bytes:
    lines = [
        f'# Dashboard: {assessment_id}',
        '',
        f'Generated at: {iso(generated_at)}',
        '',
        '| Group | Passed | Failed | Submissions | Days |',
        '| --- | ---: | ---: | ---: | ---: |',
    ]
    for r in sorted(rows, key=ranking_key):
        lines.append(f'| {_cell(r.group_id)} | {r.passed} | {r.failed} | {r.submissions} | {r.days} |')
    return ('\n'.join(lines) + '\n').encode()


def parse_dashboard(data: bytes) -> list[DashboardRow]:
    """Read rows back from a rendered dashboard (used by audits and tests)."""
    rows = []
    for line in data.decode().splitlines():
        cells = [c.strip() for c in line.strip().strip('|').split('|')]
        if len(cells) == 5 and cells[1].isdigit():
            rows.append(DashboardRow(cells[0], *map(int, cells[1:])))
    return rows


# publishing


class Publisher:
    """Pushes reports to feedback repos and dashboards to the course repo."""

    def __init__(self, work_dir: Path, author: Author, token: str | None = None):
        self.work_dir = Path(work_dir)
        self.author = author
        self.token = token

    def _checkout(self, repo: RemoteRef) -> WorkTree:
        return git_ops.clone_or_update(repo.clone_url, self.work_dir / repo.full_path, self.token)

    def _push(self, tree: WorkTree, message: str) -> str:
        try:
            return git_ops.commit_all_push(tree, message, self.author)
        except NothingToCommit as e:
            return e.head

    def publish(self, report_bytes: bytes, tar_bytes: bytes | None, feedback_repo: RemoteRef,
                short_sha: str) -> str:
        with git_ops.repo_lock(self.work_dir / feedback_repo.full_path):
            tree = self._checkout(feedback_repo)
            (tree.local_path / 'README.md').write_bytes(report_bytes)
            if tar_bytes is not None:
                for old in tree.local_path.glob('code-*.tar'):
                    old.unlink()
                (tree.local_path / f'code-{short_sha}.tar').write_bytes(tar_bytes)
            return self._push(tree, f'Feedback for {short_sha}')

    def publish_dashboard(self, dashboard_bytes: bytes, assessment_id: str, course_repo: RemoteRef) -> str:
        with git_ops.repo_lock(self.work_dir / course_repo.full_path):
            tree = self._checkout(course_repo)
            target = tree.local_path / 'dashboards' / f'{assessment_id}.md'
            target.parent.mkdir(exist_ok=True)
            target.write_bytes(dashboard_bytes)
            return self._push(tree, f'Update {assessment_id} dashboard')
