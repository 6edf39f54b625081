"""Shared pytest wiring.

The acceptance tests report one line per shipping criterion. Stdout from
passing tests is captured, so the lines are collected here and replayed in
the terminal summary, where they are visible under a plain `pytest -v`.
"""
from __future__ import annotations

_criterion_lines: list[str] = []


def record_criterion_line(line: str) -> None:
    _criterion_lines.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
