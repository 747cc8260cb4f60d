import contextlib
import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

VERDICTS = []


@contextlib.contextmanager
def verdict(number, title):
    """Record one acceptance line (PASS/FAIL) for the end-of-run summary."""
    detail = {}
    try:
        yield detail
    except BaseException as exc:
        line = f"criterion {number:2d} FAIL  {title}: {type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}"
        VERDICTS.append((number, line))
        print(line)
        raise
    extra = " ".join(f"{k}={v}" for k, v in detail.items())
    line = f"criterion {number:2d} PASS  {title}" + (f" ({extra})" if extra else "")
    VERDICTS.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(VERDICTS):
            terminalreporter.write_line(line)
