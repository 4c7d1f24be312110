import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxsc import DgpConfig, EstimatorKind, estimate, simulate_with_latents, true_parameters
from proxsc.gmm import newey_west_bandwidth


@settings(max_examples=30, deadline=None)
@given(
    kind=st.sampled_from([k for k in EstimatorKind if k is not EstimatorKind.SC]),
    F=st.integers(1, 3),
    K=st.integers(1, 2),
    seed=st.integers(0, 2**63),
)
def test_noiseless_estimates_equal_realised_att(kind, F, K, seed):
    # without idiosyncratic noise every identified estimator reproduces the
    # realised post-period ATT exactly, whatever the effect factor path
    cfg = DgpConfig(
        F=F,
        K=K,
        T=260,
        seed=seed,
        noise_scale=0.0,
        with_covariates=kind is EstimatorKind.PI_S_COV,
        contamination=0.5 if kind is EstimatorKind.PI_S_CONTAM else None,
    )
    panel, lat = simulate_with_latents(cfg)
    est = estimate(panel, kind)
    assert est.tau == pytest.approx(true_parameters(cfg, lat)["tau_sample"], abs=1e-8)
    assert np.allclose(est.fit.params.alpha, 1.0, atol=1e-8)


def test_report_is_json_ready(panel):
    rep = estimate(panel, "pi-s", cov="hac", windows=[(100, 180)], lifts=[(100, 240)]).report()
    again = json.loads(json.dumps(rep))
    assert again["tau"] == rep["tau"]
    assert {"tau_window", "tau_window_se", "tau_window_ci", "tau_lift"} <= set(rep)
    assert rep["cov"] == "HAC" and rep["diagnostics"]["hac_lags"] == newey_west_bandwidth(panel.T)


def test_pi_hac_coverage_near_nominal():
    hits = []
    for seed in range(150):
        panel, lat = simulate_with_latents(DgpConfig(T=400, seed=seed, error_kind="ar1"))
        lo, hi = estimate(panel, "pi", cov="hac").ci()
        hits.append(lo <= 1.0 <= hi)
    # nominal 95%; 150 draws leave a wide but informative band
    assert 0.87 <= np.mean(hits) <= 0.99
