from importlib.resources import files
from pathlib import Path

import numpy as np
import pytest

from seqrecourse.actions import load_catalog
from seqrecourse.nnmodel import load_model

DATA = Path(str(files("seqrecourse") / "data"))
GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def credit_model():
    return load_model(DATA / "credit_model.json")


@pytest.fixture(scope="session")
def german(credit_model):
    return load_catalog(DATA / "german_catalog.json", credit_model.schema)


@pytest.fixture(scope="session")
def toy1():
    m = load_model(DATA / "toy_threshold_model.json")
    return m, load_catalog(DATA / "toy_threshold_catalog.json", m.schema), np.array([3.0])


@pytest.fixture(scope="session")
def toy3():
    m = load_model(DATA / "toy_pair_model.json")
    return m, load_catalog(DATA / "toy_pair_catalog.json", m.schema), np.array([1.0, 1.0, 1.0, 0.0])


# criterion number -> (verdict, title, seconds); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[str, str, float]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        verdict, title, secs = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {verdict}  {title}  ({secs:.1f} s)")
