"""Exception hierarchy shared by every gitgrade module."""

from __future__ import annotations


class GitGradeError(Exception):
    """Base class for all engine errors."""


# configuration


class ConfigError(GitGradeError):
    pass


class ParseError(ConfigError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f'line {line}: {message}'
        super().__init__(message)


class ValidationError(ConfigError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f'{field}: {message}')


class MissingToken(ConfigError):
    pass


# GitLab REST


class GitLabError(GitGradeError):
    pass


class AuthError(GitLabError):
    pass


class ServerError(GitLabError):
    pass


class ConflictError(GitLabError):
    pass


class NotFound(GitLabError):
    pass


class UnknownUser(GitLabError):
    pass


class TransportError(GitGradeError):
    """Network or git transport failure after retries."""


# git working trees


class GitError(GitGradeError):
    pass


class CorruptClone(GitError):
    pass


class UnknownCommit(GitError):
    pass


class PushRejected(GitError):
    pass


# submission intake


class EventError(GitGradeError):
    pass


class MissingField(EventError):
    pass


class BadCommitId(EventError):
    pass


class UnknownAssessment(EventError):
    pass


class UnknownGroup(EventError):
    pass


# storage, sandbox, evaluation


class StoreError(GitGradeError):
    pass


class SandboxError(GitGradeError):
    pass


class RosterError(GitGradeError):
    pass


class EvaluationFailed(GitGradeError):
    """Infrastructure fault during an evaluation; the record is marked Failed."""
