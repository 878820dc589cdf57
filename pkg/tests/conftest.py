import functools

import pytest

from ensemble_ddm import fem, mesh

ACCEPTANCE_LINES = []


@functools.lru_cache(maxsize=None)
def spaces_at(n: int) -> fem.Spaces:
    """Coupled spaces on the structured mesh with ``ny = n``."""
    return fem.build_spaces(*mesh.build_coupled_meshes(1.0 / n))


@pytest.fixture(scope="session")
def spaces8():
    return spaces_at(8)


@pytest.fixture(scope="session")
def spaces16():
    return spaces_at(16)


def record(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append((number, passed, detail))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE_LINES, key=lambda t: t[0]):
        terminalreporter.write_line(
            f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
