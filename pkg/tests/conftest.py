import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import pytest

from mcnn.synthetic import MotifBank, make_corpus, synthetic_schema


@pytest.fixture(scope="session")
def bank():
    return MotifBank.create(0)


@pytest.fixture(scope="session")
def schema():
    return synthetic_schema()


@pytest.fixture(scope="session")
def small_corpus(bank):
    return make_corpus(50, seed=1, bank=bank)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)
