import numpy as np
import pytest

from proxsc import DgpConfig, simulate_dgp


@pytest.fixture
def panel():
    return simulate_dgp(DgpConfig(F=2, K=1, T=240, seed=11))


@pytest.fixture
def cov_panel():
    return simulate_dgp(DgpConfig(F=1, K=1, T=300, seed=5, with_covariates=True))


@pytest.fixture
def contam_panel():
    return simulate_dgp(DgpConfig(F=1, K=1, T=300, seed=5, contamination=0.5))


def rng(seed=0):
    return np.random.default_rng(seed)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE, ACCEPTANCE_TITLES

    if not ACCEPTANCE:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for k, title in ACCEPTANCE_TITLES.items():
        parts = ACCEPTANCE.get(k)
        if not parts:
            tr.write_line(f"criterion {k} ({title}): NOT RUN")
            continue
        ok = all(p for _, p, _ in parts)
        detail = "; ".join(f"{name}: {d}" for name, _, d in parts)
        tr.write_line(f"criterion {k} ({title}): {'PASS' if ok else 'FAIL'} | {detail}")
