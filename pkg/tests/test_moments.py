import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from proxsc import DgpConfig, EstimatorKind, InstrumentChoice, build_system, estimate, simulate_dgp
from proxsc.errors import DataError, DegenerateBaseline, EmptyWindow, MissingCovariates, MissingProxies, UnderIdentified
from proxsc.moments import ParamLayout, ParamVector, add_window_att

from helpers import jacobian_rel_error, system_panel


KINDS = list(EstimatorKind)


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
def test_jacobian_matches_finite_differences(kind):
    sys = build_system(kind, system_panel(kind))
    r = np.random.default_rng(42)
    base = sys.initial_theta()
    for _ in range(10):
        theta = base + r.normal(size=sys.p)
        assert jacobian_rel_error(sys, theta) < 1e-6


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
def test_jacobian_with_window_and_lift(kind):
    sys = build_system(kind, system_panel(kind), windows=[(100, 150)], lifts=[(120, 200)])
    theta = sys.initial_theta() + np.random.default_rng(0).normal(size=sys.p)
    assert jacobian_rel_error(sys, theta) < 1e-6


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
def test_mean_moments_and_shapes(kind):
    sys = build_system(kind, system_panel(kind))
    theta = sys.initial_theta()
    U = sys.moments(theta)
    assert U.shape == (sys.T, sys.q)
    assert np.allclose(sys.mean_moments(theta), U.mean(axis=0))
    assert len(sys.row_labels) == sys.q
    assert sys.df == sys.q - sys.p >= 0
    # eval/jac address 1-based periods
    assert np.array_equal(sys.eval(1, theta), U[0])
    assert np.array_equal(sys.jac(sys.T, theta), sys.jacobian(theta)[-1])


@pytest.mark.parametrize("kind", KINDS, ids=lambda k: k.value)
def test_rows_vanish_outside_their_period(kind):
    p = system_panel(kind)
    sys = build_system(kind, p)
    U = sys.moments(sys.initial_theta() + 0.3)
    for label, col in zip(sys.row_labels, U.T):
        if label.startswith("pre:"):
            assert np.all(col[p.post] == 0)
        if label.startswith(("post:", "att:")):
            assert np.all(col[p.pre] == 0)


def test_orders():
    p = system_panel("pi-s", F=2, K=1)
    assert (build_system("sc", p).q, build_system("sc", p).p) == (4, 4)
    assert (build_system("pi", p).q, build_system("pi", p).p) == (3, 3)
    s = build_system("pi-s", p, InstrumentChoice(squares=True))
    assert s.df == 3
    s = build_system("pi-s", p, InstrumentChoice(g1_donor_proxies=True))
    assert s.df == 2


def test_under_identified():
    p = simulate_dgp(DgpConfig(F=2, K=1, T=150))
    thin = p.__class__(p.y, p.W, p.X, p.Z0[:, :1], p.Z1, p.T0)
    with pytest.raises(UnderIdentified):
        build_system("pi", thin)


def test_missing_inputs(panel):
    with pytest.raises(MissingCovariates):
        build_system("pi-s-cov", panel)
    bare = panel.__class__(panel.y, panel.W, panel.X, panel.Z0, np.empty((panel.T, 0)), panel.T0)
    with pytest.raises(MissingProxies):
        build_system("pi-s", bare)


def test_empty_window(panel):
    sys = build_system("pi-s", panel)
    with pytest.raises(EmptyWindow):
        add_window_att(sys, 150, 151)
    with pytest.raises(DataError):
        add_window_att(sys, 10, 20)


def test_window_equals_mean_effect_over_window(panel):
    est = estimate(panel, "pi-s", windows=[(100, 150)])
    gamma = est.fit.params.gamma
    sel = (np.arange(1, panel.T + 1) > 100) & (np.arange(1, panel.T + 1) < 150)
    assert est.fit.estimate("tau_window") == pytest.approx(float(np.mean((panel.X @ gamma)[sel])), abs=1e-10)
    # the full post window reproduces tau
    est = estimate(panel, "pi-s", windows=[(panel.T0, panel.T + 1)])
    assert est.fit.estimate("tau_window") == pytest.approx(est.tau, abs=1e-10)


def test_lift_matches_ratio(panel):
    est = estimate(panel, "pi", lifts=[(100, 200)])
    a = est.fit.params.alpha
    t = np.arange(1, panel.T + 1)
    sel = (t > 100) & (t < 200)
    effect = panel.y - panel.W @ a
    expected = effect[sel].mean() / (panel.W @ a)[sel].mean()
    assert est.fit.estimate("tau_lift") == pytest.approx(expected, rel=1e-8)


def test_degenerate_lift_baseline():
    # donors with exactly zero mean over the lift window: W'alpha averages to 0
    p = simulate_dgp(DgpConfig(F=1, K=1, T=200, seed=1))
    t = np.arange(1, p.T + 1)
    sel = (t > 100) & (t < 200)
    W = p.W.copy()
    W[sel] -= W[sel].mean(axis=0)
    q = p.__class__(p.y, W, p.X, p.Z0, p.Z1, p.T0)
    with pytest.raises(DegenerateBaseline):
        estimate(q, "pi", lifts=[(100, 200)])


@settings(max_examples=30, deadline=None)
@given(N=st.integers(1, 4), H=st.integers(1, 3), contam=st.booleans(), seed=st.integers(0, 1000))
def test_layout_round_trip(N, H, contam, seed):
    blocks = [("alpha", (N,)), ("gamma", (H,))]
    if contam:
        blocks.append(("psi", (N, H)))
    blocks.append(("tau", ()))
    layout = ParamLayout(tuple(blocks)).extend("tau_window")
    theta = np.random.default_rng(seed).normal(size=layout.size)
    pv = layout.unflatten(theta)
    assert isinstance(pv, ParamVector)
    assert np.array_equal(layout.flatten(pv), theta)
    assert len(layout.labels()) == layout.size
    if contam:
        # column j of psi is contiguous
        sl = layout.slice("psi")
        assert np.array_equal(pv.psi[:, 0], theta[sl][:N])
