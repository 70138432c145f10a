"""gitgrade: automated assessment of programming coursework hosted on GitLab."""

__version__ = '0.1.0'
