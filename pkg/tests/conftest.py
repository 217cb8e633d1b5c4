import os
from pathlib import Path

import numpy as np
import pytest

from smilesprop.codec import build_vocabulary
from smilesprop.models import HyperParams, TaskSpec, build_model

DATA = Path(__file__).resolve().parent.parent / "data"
ESOL = DATA / "esol.csv"
FREESOLV = DATA / "freesolv.csv"


def tox21_path():
    env = os.environ.get("SMILESPROP_TOX21")
    if env:
        return Path(env)
    return DATA / "tox21.csv"


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_vocab():
    return build_vocabulary(["c1ccncc1", "CCO", "O=C(Cl)Br", "N#CCF"])


def micro_model(arch, vocab, task=None, dtype=np.float64, seed=0, em=4, conv=4, rnn=(4, 4)):
    arch_has_conv = arch.startswith("cnn")
    hp = HyperParams(em, rnn[0], rnn[1], conv if arch_has_conv else None)
    return build_model(arch, hp, task or TaskSpec("regression"), vocab, seed, dtype=dtype, on_grid=False)


ACCEPTANCE = []


def report(number, title, passed, detail):
    """Record one acceptance criterion outcome; the summary is printed at the end of the run."""
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
