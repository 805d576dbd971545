import pytest

_ACCEPTANCE = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a one-line pass/fail verdict for an acceptance criterion.

    Usage: ``criterion(6, ok, "detail")``; the line is printed immediately and
    repeated in the terminal summary, so it shows up without ``-s``.
    """
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(number, ok, detail=""):
        line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        lines[number] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(lines):
        terminalreporter.write_line(lines[number])
