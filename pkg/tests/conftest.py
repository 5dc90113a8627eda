import numpy as np
import pytest

from shallowlake.cansys import make_system
from shallowlake.css import build_catalog, mirrored
from shallowlake.model import ModelParams


@pytest.fixture(scope="session")
def sys065():
    return make_system(ModelParams(b=0.65))


@pytest.fixture(scope="session")
def cat065(sys065):
    """Flat and primary patterned steady states at b = 0.65 (with spectra)."""
    return build_catalog(0.65, sys065, modes=(1, 2, 3))


def by_avgP(cat, branch, avgP, tol=0.05):
    """Patterned record on ``branch`` whose mean state is closest to ``avgP``."""
    cands = [r for lbl, r in cat.items() if lbl.startswith(branch + ":")]
    best = min(cands, key=lambda r: abs(r.avgP - avgP))
    assert abs(best.avgP - avgP) < tol, (branch, avgP, [r.avgP for r in cands])
    return best


@pytest.fixture(scope="session")
def ps065(cat065):
    rec = by_avgP(cat065, "p1", 1.24)
    assert rec.defect == 0
    return rec


@pytest.fixture(scope="session")
def p3_065(cat065):
    return by_avgP(cat065, "p3", 1.02)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request, capsys):
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_VERDICTS, [])

    def emit(num, name, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  criterion {num:>2}: {name}" + (f"  [{detail}]" if detail else "")
        lines.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok

    return emit


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
