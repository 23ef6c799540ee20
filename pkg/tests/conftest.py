import contextlib

import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Context manager recording one acceptance verdict; exceptions count as FAIL."""

    @contextlib.contextmanager
    def record(label: str):
        res = {"ok": False, "detail": ""}
        try:
            yield res
        except BaseException as exc:
            res["ok"] = False
            res["detail"] = (res["detail"] + f" [{type(exc).__name__}: {exc}]").strip()
            raise
        finally:
            _CRITERIA.append((label, bool(res["ok"]), res["detail"]))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for label, ok, detail in _CRITERIA:
        terminalreporter.write_line(f"criterion {label}: {'PASS' if ok else 'FAIL'} | {detail}")
