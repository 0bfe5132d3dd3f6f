import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=100, deadline=None, derandomize=True)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent


def mnist_dir() -> Path | None:
    from tempnet.data import data_dir, verify_mnist
    try:
        d = data_dir(os.environ.get("TEMP_DATA_DIR"))
    except Exception:
        return None
    try:
        ok = verify_mnist(d)
    except Exception:
        return None
    return d if all(ok.values()) else None


@pytest.fixture
def rng():
    return np.random.default_rng(1234)

# a local MNIST copy is picked up without exporting TEMP_DATA_DIR
_home_mnist = Path.home() / "data" / "mnist"
if not os.environ.get("TEMP_DATA_DIR") and _home_mnist.is_dir():
    os.environ["TEMP_DATA_DIR"] = str(_home_mnist)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE, key=lambda k: int(k.split()[0])):
            terminalreporter.write_line(ACCEPTANCE[key])
