import csv
import io
import math

import numpy as np
import pytest

from proxsc import CovSpec, EstimatorKind, McConfig, emit_table, estimate, run_mc, simulate_dgp
from proxsc import montecarlo as mc
from proxsc.errors import BadConfig, SingularSystem
from proxsc.montecarlo import parse_markdown_table, sign_test

SMALL = dict(cells=((1, 200), (1, 300)), regimes=("stationary",), reps=6, base_seed=77)


@pytest.fixture(scope="module")
def small_report():
    return run_mc(McConfig(**SMALL))


def test_single_rep_is_squared_error():
    cfg = McConfig(cells=((1, 200),), regimes=("stationary",), cov_specs=(CovSpec.robust(),), reps=1, base_seed=9)
    rep = run_mc(cfg)
    panel = simulate_dgp(cfg.cell_config(1, 200, "stationary", "iid", 0))
    for m in cfg.methods:
        est = estimate(panel, m)
        cell = rep.get(m, 1, 200)
        assert cell.mse == pytest.approx((est.tau - 1) ** 2, rel=1e-12)
        assert cell.coverage in (0.0, 1.0)
        lo, hi = est.ci()
        assert cell.coverage == float(lo <= 1 <= hi)


def test_replication_seed_is_base_xor_r():
    cfg = McConfig(**SMALL)
    assert cfg.cell_config(1, 200, "stationary", "iid", 5).seed == 77 ^ 5


def test_paired_design(small_report):
    # every method's draw for rep r comes from the same panel
    cfg = small_report.config
    panel = simulate_dgp(cfg.cell_config(1, 300, "stationary", "iid", 3))
    for m in cfg.methods:
        tau = small_report.draws[("stationary", "Robust", 1, 300, m.value)]["tau"][3]
        assert tau == estimate(panel, m).tau


def test_hac_rows_use_ar1_panels(small_report):
    cfg = small_report.config
    panel = simulate_dgp(cfg.cell_config(1, 200, "stationary", "ar1", 0))
    tau = small_report.draws[("stationary", "HAC", 1, 200, "pi")]["tau"][0]
    assert tau == estimate(panel, "pi", cov="hac").tau


def test_reproducible_and_worker_independent(small_report):
    again = run_mc(McConfig(**SMALL), jobs=2)
    for metric in mc.METRICS:
        assert emit_table(again, metric) == emit_table(small_report, metric)


def test_report_invariants(small_report):
    for c in small_report.cells:
        assert 0.0 <= c.coverage <= 1.0
        assert c.mse >= c.bias**2 - 1e-12
        assert c.trimmed_mse <= c.mse + 1e-15
        errs = small_report.errors(c.method, c.K, c.T, c.regime, c.cov)
        sq = errs**2
        # jackknife standard error of a mean is the usual sd / sqrt(n)
        assert c.mse_mcse == pytest.approx(np.std(sq, ddof=1) / math.sqrt(len(sq)), rel=1e-9)


def test_table_shape(small_report):
    header, rows = mc.table_rows(small_report, "mse")
    assert len(rows) == 4  # 2 cells x 2 cov specs
    values = [h for h in header[4:] if not h.endswith("_mcse")]
    assert values == ["sc", "sc-s", "pi", "pi-p", "pi-s"]
    assert [h for h in header if h.endswith("_mcse")] == [f"{m}_mcse" for m in values]


def test_markdown_round_trips_to_csv(small_report):
    for metric in mc.METRICS:
        md_header, md_rows = parse_markdown_table(emit_table(small_report, metric, "markdown"))
        reader = list(csv.reader(io.StringIO(emit_table(small_report, metric, "csv"))))
        assert md_header == reader[0]
        assert md_rows == reader[1:]


def test_coverage_format(small_report):
    _, rows = mc.table_rows(small_report, "coverage")
    for row in rows:
        for v in row[4:]:
            assert v.endswith("%") and len(v.split(".")[1]) == 3
    assert mc._fmt("coverage", 0.9425) == "94.25%"


def test_failures_are_recorded_not_fatal(monkeypatch):
    real = mc.estimate
    calls = {"n": 0}

    def flaky(panel, method, **kw):
        calls["n"] += 1
        if EstimatorKind.parse(method) is EstimatorKind.PI and calls["n"] % 3 == 0:
            raise SingularSystem("injected", math.inf)
        return real(panel, method, **kw)

    monkeypatch.setattr(mc, "estimate", flaky)
    cfg = McConfig(cells=((1, 200),), regimes=("stationary",), cov_specs=(CovSpec.robust(),), reps=9)
    rep = run_mc(cfg)
    pi = rep.get("pi", 1, 200)
    assert pi.failures > 0 and pi.n_ok == 9 - pi.failures
    assert np.isnan(rep.errors("pi", 1, 200)).sum() == pi.failures
    assert rep.get("pi-s", 1, 200).failures == 0


def test_config_validation_and_round_trip(tmp_path):
    with pytest.raises(BadConfig):
        McConfig(reps=0)
    with pytest.raises(BadConfig):
        McConfig(regimes=("flat",))
    with pytest.raises(BadConfig):
        McConfig.from_dict({"reps": 5, "colour": "red"})
    cfg = McConfig(**SMALL)
    assert McConfig.from_dict(cfg.to_dict()) == cfg
    infeasible = McConfig(cells=((1, 200),), methods=(EstimatorKind.PI_S_COV,), reps=1)
    with pytest.raises(BadConfig):
        run_mc(infeasible)


def test_sign_test():
    a = np.array([0.1, 0.2, 0.1, 0.0, np.nan])
    b = np.array([0.2, 0.3, 0.2, 0.0, 1.0])
    assert sign_test(a, b) == pytest.approx(0.125)


def test_sanity_ordering_at_T800():
    cfg = McConfig(
        cells=((1, 800),),
        regimes=("stationary",),
        cov_specs=(CovSpec.robust(),),
        methods=(EstimatorKind.PI, EstimatorKind.PI_P, EstimatorKind.PI_S),
        reps=200,
        base_seed=2024,
    )
    rep = run_mc(cfg)
    pi, pip, pis = (rep.get(m, 1, 800) for m in ("pi", "pi-p", "pi-s"))
    tol = 2 * math.hypot(pi.mse_mcse, pis.mse_mcse)
    assert pis.mse <= pi.mse + tol
    assert pip.mse <= pi.mse + 2 * math.hypot(pi.mse_mcse, pip.mse_mcse)
