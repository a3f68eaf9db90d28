import numpy as np
import pytest

from dstt.data import clean_missing, parse_omni_table, sample_path, synthesize_records


@pytest.fixture(scope="session")
def sample_table():
    return parse_omni_table(sample_path())


@pytest.fixture(scope="session")
def clean_sample(sample_table):
    return clean_missing(sample_table)[0]


@pytest.fixture(scope="session")
def synth_small():
    return synthesize_records(1200, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    reports = [r for key in ("passed", "failed") for r in terminalreporter.stats.get(key, [])
               if r.when == "call" and "test_acceptance.py::test_criterion_" in r.nodeid]
    if not reports:
        return
    terminalreporter.section("acceptance criteria")
    for r in sorted(reports, key=lambda r: r.nodeid):
        name = r.nodeid.split("::")[-1]
        terminalreporter.write_line(f"{name.split('_')[2]:>3} {'PASS' if r.passed else 'FAIL'}  {name}")
