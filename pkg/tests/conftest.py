import math

import numpy as np
import pytest

from mrfdesign.bloch import AcqSchedule, IsochromatEnsemble, TissueParams, conventional_schedule
from mrfdesign.design import DesignConfig, optimize


def random_schedule(rng, n, first=math.pi, phi=False):
    """Feasible-looking schedule with random flips, phases and TRs."""
    alpha = np.r_[first, rng.uniform(math.radians(10), math.radians(60), n - 1)]
    ph = rng.uniform(-math.pi, math.pi, n) if phi else 0.0
    return AcqSchedule(alpha, ph, 2.0, rng.uniform(11.0, 15.0, n))


def random_tissue(rng):
    return TissueParams(rng.uniform(300, 2000), rng.uniform(30, 200), rng.uniform(0.3, 1.2))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def ens40():
    return IsochromatEnsemble.uniform(40)


@pytest.fixture(scope="session")
def white_matter():
    return TissueParams(700.0, 60.0, 0.6)


@pytest.fixture(scope="session")
def designs_400():
    """Optimized-I and -II designs from the default conventional start (N=400)."""
    init = conventional_schedule(400, seed=0)
    cfg2 = DesignConfig(n=400).with_mode("opt2")
    cfg1 = cfg2.with_mode("opt1")
    return {
        "init": init,
        "opt1": optimize(cfg1, init),
        "opt2": optimize(cfg2, init),
        "cfg1": cfg1,
        "cfg2": cfg2,
    }


# criterion id -> (status, detail); filled by test_acceptance.py
ACCEPTANCE: dict = {}


def record(cid: str, ok: bool, detail: str, status: str | None = None) -> None:
    status = status or ("PASS" if ok else "FAIL")
    ACCEPTANCE[cid] = (status, detail)
    print(f"[acceptance] {cid} {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE, key=lambda c: int(c[1:])):
        status, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{cid} {status}: {detail}")
