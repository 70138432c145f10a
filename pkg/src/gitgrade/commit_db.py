"""Persistent submission history; the only source for cooldowns and dashboards."""

from __future__ import annotations

import csv
import datetime as dt
import enum
import io
import sqlite3
import threading
from dataclasses import astuple, dataclass, fields
from pathlib import Path
from typing import Iterator, NamedTuple

from .errors import StoreError


class Status(str, enum.Enum):
    EVALUATED = 'Evaluated'
    SKIPPED_COOLDOWN = 'SkippedCooldown'
    SKIPPED_TAMPER = 'SkippedTamper'
    FAILED = 'Failed'


@dataclass(frozen=True)
class SubmissionRecord:
    assessment_id: str
    group_id: str
    commit: str
    pushed_at: int
    received_at: int
    status: Status
    evaluated_at: int | None = None
    tests_passed: int = 0
    tests_failed: int = 0

    def validate(self, test_count: int | None = None) -> None:
        if (self.status is Status.EVALUATED) != (self.evaluated_at is not None):
            raise ValueError('evaluated_at must be set exactly when status is Evaluated')
        if self.tests_passed < 0 or self.tests_failed < 0:
            raise ValueError('test counts must be >= 0')
        if self.status is not Status.EVALUATED and (self.tests_passed or self.tests_failed):
            raise ValueError('only Evaluated records carry test counts')
        if (self.status is Status.EVALUATED and test_count is not None
                and self.tests_passed + self.tests_failed != test_count):
            raise ValueError(f'passed + failed must equal the test count ({test_count})')


class Stats(NamedTuple):
    passed: int
    failed: int
    submissions: int
    days: int


CSV_HEADER = [f.name for f in fields(SubmissionRecord)]

_SCHEMA = """
CREATE TABLE IF NOT EXISTS submissions (
    id INTEGER PRIMARY KEY AUTOINCREMENT,
    assessment_id TEXT NOT NULL,
    group_id TEXT NOT NULL,
    commit_id TEXT NOT NULL,
    pushed_at INTEGER NOT NULL,
    received_at INTEGER NOT NULL,
    status TEXT NOT NULL,
    evaluated_at INTEGER,
    tests_passed INTEGER NOT NULL,
    tests_failed INTEGER NOT NULL
);
CREATE INDEX IF NOT EXISTS submissions_key ON submissions (assessment_id, group_id, id);
"""


def days_since(start_date: dt.date, now: float) -> int:
    start = dt.datetime.combine(start_date, dt.time(), tzinfo=dt.timezone.utc).timestamp()
    return max(0, int((now - start) // 86400))


class CommitDB:
    """Append-only store in a single sqlite file.

    One connection guarded by a lock: writes are serialized and each
    record commits on its own.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = threading.Lock()
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._conn = sqlite3.connect(str(self.path), check_same_thread=False, isolation_level=None)
            self._conn.execute('PRAGMA journal_mode=WAL')
            self._conn.execute('PRAGMA synchronous=FULL')
            self._conn.executescript(_SCHEMA)
        except (OSError, sqlite3.Error) as e:
            raise StoreError(f'cannot open {self.path}: {e}') from e

    def close(self) -> None:
        with self._lock:
            self._conn.close()

    def __enter__(self) -> 'CommitDB':
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _query(self, sql: str, params: tuple = ()) -> list[tuple]:
        with self._lock:
            try:
                return self._conn.execute(sql, params).fetchall()
            except sqlite3.Error as e:
                raise StoreError(str(e)) from e

    def record(self, record: SubmissionRecord, test_count: int | None = None) -> None:
        record.validate(test_count)
        with self._lock:
            try:
                with self._conn:
                    self._conn.execute('BEGIN IMMEDIATE')
                    self._conn.execute(
                        'INSERT INTO submissions (assessment_id, group_id, commit_id, pushed_at, '
                        'received_at, status, evaluated_at, tests_passed, tests_failed) '
                        'VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)',
                        (record.assessment_id, record.group_id, record.commit, record.pushed_at,
                         record.received_at, record.status.value, record.evaluated_at,
                         record.tests_passed, record.tests_failed))
            except sqlite3.Error as e:
                raise StoreError(str(e)) from e

    def records(self, assessment_id: str | None = None, group_id: str | None = None) -> list[SubmissionRecord]:
        sql = ('SELECT assessment_id, group_id, commit_id, pushed_at, received_at, status, '
               'evaluated_at, tests_passed, tests_failed FROM submissions')
        where, params = [], []
        if assessment_id is not None:
            where.append('assessment_id = ?')
            params.append(assessment_id)
        if group_id is not None:
            where.append('group_id = ?')
            params.append(group_id)
        if where:
            sql += ' WHERE ' + ' AND '.join(where)
        rows = self._query(sql + ' ORDER BY id', tuple(params))
        return [SubmissionRecord(a, g, c, p, r, Status(s), e, tp, tf) for a, g, c, p, r, s, e, tp, tf in rows]

    def last_evaluated(self, group_id: str, assessment_id: str) -> SubmissionRecord | None:
        rows = self._query(
            'SELECT assessment_id, group_id, commit_id, pushed_at, received_at, status, evaluated_at, '
            'tests_passed, tests_failed FROM submissions '
            'WHERE assessment_id = ? AND group_id = ? AND status = ? ORDER BY id DESC LIMIT 1',
            (assessment_id, group_id, Status.EVALUATED.value))
        return SubmissionRecord(*rows[0][:5], Status(rows[0][5]), *rows[0][6:]) if rows else None

    def check_cooldown(self, group_id: str, assessment_id: str, now: float, cooldown_s: int) -> int | None:
        """Return None when the submission may be evaluated now.

        Otherwise return the epoch second at which the window opens.  Only
        Evaluated records start a window; the boundary is inclusive.
        """
        last = self.last_evaluated(group_id, assessment_id)
        if last is None:
            return None
        until = last.evaluated_at + cooldown_s
        return None if now >= until else until

    def stats(self, group_id: str, assessment_id: str, now: float, start_date: dt.date) -> Stats:
        last = self.last_evaluated(group_id, assessment_id)
        (count,), = self._query('SELECT COUNT(*) FROM submissions WHERE assessment_id = ? AND group_id = ?',
                                (assessment_id, group_id))
        passed, failed = (last.tests_passed, last.tests_failed) if last else (0, 0)
        return Stats(passed, failed, count, days_since(start_date, now))

    def dump_csv(self, out: io.TextIOBase | None = None) -> str:
        buf = out if out is not None else io.StringIO()
        writer = csv.writer(buf, lineterminator='\n')
        writer.writerow(CSV_HEADER)
        for r in self.records():
            row = list(astuple(r))
            row[CSV_HEADER.index('status')] = r.status.value
            writer.writerow(['' if v is None else v for v in row])
        return buf.getvalue() if out is None else ''


def read_csv(text: str) -> Iterator[SubmissionRecord]:
    for row in csv.DictReader(io.StringIO(text)):
        yield SubmissionRecord(
            assessment_id=row['assessment_id'], group_id=row['group_id'], commit=row['commit'],
            pushed_at=int(row['pushed_at']), received_at=int(row['received_at']),
            status=Status(row['status']),
            evaluated_at=int(row['evaluated_at']) if row['evaluated_at'] else None,
            tests_passed=int(row['tests_passed']), tests_failed=int(row['tests_failed']))
