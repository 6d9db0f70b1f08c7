import contextlib

import pytest

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


class _Recorder:
    def __init__(self):
        self.detail = ""

    def note(self, text: str) -> None:
        self.detail = text


@pytest.fixture
def criterion():
    """Record the outcome of one acceptance criterion for the end-of-run summary."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        rec = _Recorder()
        try:
            yield rec
        except BaseException as exc:
            ACCEPTANCE[number] = (title, False, rec.detail or f"{type(exc).__name__}: {exc}".splitlines()[0])
            raise
        ACCEPTANCE[number] = (title, True, rec.detail)

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        line = f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}"
        terminalreporter.write_line(line + (f"  ({detail})" if detail else ""))
