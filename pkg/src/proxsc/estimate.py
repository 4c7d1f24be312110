"""One-call estimation: build the moment system, solve, summarise."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .errors import DegenerateBaseline
from .gmm import CovSpec, GmmFit, WeightScheme, confidence_interval, solve
from .moments import InstrumentChoice, MomentSystem, build_system, synthetic_control_series
from .panel import EstimatorKind, Panel

__all__ = ["Estimate", "estimate"]


@dataclass
class Estimate:
    method: EstimatorKind
    system: MomentSystem
    fit: GmmFit
    level: float

    @property
    def tau(self) -> float:
        return self.fit.estimate("tau")

    @property
    def tau_se(self) -> float:
        return self.fit.stderr("tau")

    def ci(self, name: str = "tau") -> tuple[float, float]:
        return confidence_interval(self.fit, name, self.level)

    def report(self) -> dict:
        """JSON-ready summary with named estimates."""
        fit = self.fit
        named = {lab: float(v) for lab, v in zip(fit.labels, fit.theta)}
        se = {lab: float(v) for lab, v in zip(fit.labels, fit.se)}
        extras = [n for n in self.system.layout.names() if n.startswith(("tau_window", "tau_lift"))]
        out = {
            "method": self.method.value,
            "T": self.system.T,
            "T0": self.system.panel.T0,
            "q": self.system.q,
            "p": self.system.p,
            "params": fit.params.as_dict(),
            "estimates": named,
            "se": se,
            "tau": self.tau,
            "tau_se": self.tau_se,
            "tau_ci": list(self.ci("tau")),
            "ci_level": self.level,
            "weight": fit.weight,
            "cov": fit.cov.label,
            "converged": fit.converged,
            "iterations": fit.iterations,
            "grad_norm": fit.grad_norm,
            "diagnostics": {
                "jacobian_condition": fit.condition_number,
                **{k: v for k, v in fit.diagnostics.items()},
            },
            "instruments": self.system.instrument_spec,
        }
        for name in extras:
            out[name] = fit.estimate(name)
            out[f"{name}_se"] = fit.stderr(name)
            out[f"{name}_ci"] = list(self.ci(name))
        if fit.df > 0:
            out["J"] = fit.J
            out["df"] = fit.df
            out["J_pvalue"] = fit.j_pvalue
        else:
            out["df"] = 0
        return out


def estimate(
    panel: Panel,
    method: Union[EstimatorKind, str],
    cov: Union[CovSpec, str] = "robust",
    weights: Union[WeightScheme, str, None] = None,
    instruments: InstrumentChoice = InstrumentChoice(),
    windows: Sequence[tuple[int, int]] = (),
    lifts: Sequence[tuple[int, int]] = (),
    level: float = 0.95,
    bandwidth: Union[int, str, None] = None,
    raise_on_nonconvergence: bool = True,
) -> Estimate:
    """Fit ``method`` on ``panel``.

    >>> est = estimate(panel, "pi-s", cov="hac")        # doctest: +SKIP
    >>> est.tau, est.ci()                                # doctest: +SKIP
    """
    kind = EstimatorKind.parse(method)
    cov_spec = CovSpec.parse(cov, bandwidth)
    system = build_system(kind, panel, instruments, windows=windows, lifts=lifts)
    fit = solve(
        system,
        WeightScheme.parse(weights),
        cov_spec,
        raise_on_nonconvergence=raise_on_nonconvergence,
    )
    if lifts:
        sc = synthetic_control_series(system, fit.theta)
        t = np.arange(1, panel.T + 1)
        for t1, t2 in lifts:
            sel = (t > t1) & (t < t2)
            baseline = float(np.mean(sc[sel]))
            if abs(baseline) < 1e-10 * (1.0 + float(np.mean(np.abs(panel.W[sel])))):
                raise DegenerateBaseline(baseline)
    return Estimate(kind, system, fit, level)
