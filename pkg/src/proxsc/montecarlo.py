"""Monte Carlo experiments over DGP cells, estimators and covariance specs.

Replication ``r`` of every cell draws its panel with seed ``base_seed ^ r`` and
all methods are fitted on that same panel, so method comparisons are paired.
Results are stored by replication index before aggregation, which makes the
report independent of worker count and completion order.
"""

from __future__ import annotations

import csv
import io
import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from os import PathLike
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .dgp import REGIMES, DgpConfig, simulate_dgp
from .errors import BadConfig, ProxscError
from .estimate import estimate
from .gmm import CovSpec
from .moments import InstrumentChoice, build_system
from .panel import EstimatorKind

__all__ = [
    "CellResult",
    "McConfig",
    "McReport",
    "emit_table",
    "parse_markdown_table",
    "run_mc",
    "sign_test",
]

DEFAULT_METHODS = (
    EstimatorKind.SC,
    EstimatorKind.SC_S,
    EstimatorKind.PI,
    EstimatorKind.PI_P,
    EstimatorKind.PI_S,
)
DEFAULT_CELLS = ((1, 200), (1, 400), (1, 800), (5, 200), (5, 400), (5, 800))
PAIRINGS = ("matched", "crossed")


@dataclass(frozen=True)
class McConfig:
    """Experiment grid.

    ``cells`` holds ``(K, T)`` pairs and the design uses ``F = K``. With
    ``pairing="matched"`` Robust rows are computed on i.i.d. errors and HAC
    rows on AR(1) errors; ``"crossed"`` uses the error kind of ``dgp`` for
    every covariance spec. ``trim`` is the share of the largest squared errors
    dropped for the trimmed MSE.
    """

    dgp: DgpConfig = DgpConfig()
    cells: tuple[tuple[int, int], ...] = DEFAULT_CELLS
    regimes: tuple[str, ...] = REGIMES
    methods: tuple[EstimatorKind, ...] = DEFAULT_METHODS
    cov_specs: tuple[CovSpec, ...] = (CovSpec.robust(), CovSpec.hac())
    reps: int = 2000
    level: float = 0.95
    base_seed: int = 12345
    pairing: str = "matched"
    instruments: InstrumentChoice = InstrumentChoice()
    trim: float = 0.01
    jobs: int = 1

    def __post_init__(self):
        if int(self.reps) < 1:
            raise BadConfig(f"reps must be >= 1, got {self.reps}")
        if not 0 < self.level < 1:
            raise BadConfig(f"level must be in (0, 1), got {self.level}")
        if self.pairing not in PAIRINGS:
            raise BadConfig(f"pairing must be one of {PAIRINGS}")
        if not 0 <= self.trim < 0.5:
            raise BadConfig("trim must be in [0, 0.5)")
        if not self.cells or not self.methods or not self.cov_specs or not self.regimes:
            raise BadConfig("cells, regimes, methods and cov_specs must be non-empty")
        for regime in self.regimes:
            if regime not in REGIMES:
                raise BadConfig(f"unknown regime {regime!r}")
        for K, T in self.cells:
            if K < 1 or T <= self.dgp.T0 + 1:
                raise BadConfig(f"bad cell (K={K}, T={T}) for T0={self.dgp.T0}")

    def cell_config(self, K: int, T: int, regime: str, error_kind: str, rep: int) -> DgpConfig:
        return self.dgp.replace(
            F=K, K=K, T=T, factor_regime=regime, error_kind=error_kind, seed=self.base_seed ^ rep
        )

    def error_kind_for(self, cov: CovSpec) -> str:
        if self.pairing == "crossed":
            return self.dgp.error_kind
        return "ar1" if cov.tag == "hac" else "iid"

    def check_feasible(self) -> None:
        """Raise BadConfig if some method cannot be built on some cell."""
        for K, T in self.cells:
            panel = simulate_dgp(self.cell_config(K, T, self.regimes[0], "iid", 0))
            for m in self.methods:
                try:
                    build_system(m, panel, self.instruments)
                except ProxscError as exc:
                    raise BadConfig(f"{m.value} infeasible on cell (K={K}, T={T}): {exc}") from None

    def to_dict(self) -> dict:
        return {
            "dgp": self.dgp.to_dict(),
            "cells": [list(c) for c in self.cells],
            "regimes": list(self.regimes),
            "methods": [m.value for m in self.methods],
            "cov_specs": [
                {"tag": c.tag, "bandwidth": c.bandwidth, "center": c.center} for c in self.cov_specs
            ],
            "reps": self.reps,
            "level": self.level,
            "base_seed": self.base_seed,
            "pairing": self.pairing,
            "instruments": asdict(self.instruments),
            "trim": self.trim,
            "jobs": self.jobs,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "McConfig":
        data = dict(data)
        kw: dict = {}
        try:
            if "dgp" in data:
                kw["dgp"] = DgpConfig.from_dict(data.pop("dgp"))
            if "cells" in data:
                kw["cells"] = tuple((int(k), int(t)) for k, t in data.pop("cells"))
            if "regimes" in data:
                kw["regimes"] = tuple(str(r).lower() for r in data.pop("regimes"))
            if "methods" in data:
                kw["methods"] = tuple(EstimatorKind.parse(m) for m in data.pop("methods"))
            if "cov_specs" in data:
                kw["cov_specs"] = tuple(_parse_cov(c) for c in data.pop("cov_specs"))
            if "instruments" in data:
                kw["instruments"] = InstrumentChoice(**data.pop("instruments"))
            for name, conv in (
                ("reps", int),
                ("level", float),
                ("base_seed", int),
                ("pairing", str),
                ("trim", float),
                ("jobs", int),
            ):
                if name in data:
                    kw[name] = conv(data.pop(name))
        except (TypeError, ValueError) as exc:
            raise BadConfig(str(exc)) from None
        if data:
            raise BadConfig(f"unknown Monte Carlo config fields: {sorted(data)}")
        return cls(**kw)

    @classmethod
    def from_json(cls, path: "str | PathLike[str]") -> "McConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _parse_cov(value) -> CovSpec:
    if isinstance(value, dict):
        return CovSpec(value.get("tag", "robust"), value.get("bandwidth"), value.get("center", True))
    return CovSpec.parse(str(value))


@dataclass
class CellResult:
    """Summary for one (regime, cov spec, K, T, method) cell.

    Failed replications (estimation raised) are excluded from every statistic.
    Non-converged ones are kept and counted in ``nonconverged``.
    """

    regime: str
    cov: str
    K: int
    T: int
    method: str
    reps: int
    n_ok: int
    mse: float
    bias: float
    coverage: float
    mean_se: float
    mse_mcse: float
    coverage_mcse: float
    trimmed_mse: float
    failures: int
    nonconverged: int

    @property
    def key(self) -> tuple[str, str, int, int, str]:
        return (self.regime, self.cov, self.K, self.T, self.method)


@dataclass
class McReport:
    """All cell summaries plus the per-replication draws they came from.

    ``draws[(regime, cov, K, T, method)]`` holds arrays ``tau``, ``se``,
    ``covered``, ``converged`` indexed by replication (NaN where failed).
    """

    config: McConfig
    cells: list[CellResult]
    draws: dict = field(default_factory=dict, repr=False)
    elapsed: float = 0.0

    def get(self, method, K: int, T: int, regime: str = "stationary", cov: str = "Robust") -> CellResult:
        m = EstimatorKind.parse(method).value
        for c in self.cells:
            if c.key == (regime, cov, K, T, m):
                return c
        raise KeyError((regime, cov, K, T, m))

    def errors(self, method, K: int, T: int, regime: str = "stationary", cov: str = "Robust") -> np.ndarray:
        """Per-replication ``tau_hat - 1`` (NaN for failed reps)."""
        m = EstimatorKind.parse(method).value
        return self.draws[(regime, cov, K, T, m)]["tau"] - 1.0

    @property
    def failures(self) -> int:
        return sum(c.failures for c in self.cells)

    @property
    def nonconverged(self) -> int:
        return sum(c.nonconverged for c in self.cells)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "elapsed_seconds": self.elapsed,
            "failures": self.failures,
            "nonconverged": self.nonconverged,
            "cells": [asdict(c) for c in self.cells],
        }


# --------------------------------------------------------------------------- running


def _cov_groups(cfg: McConfig) -> dict[str, list[CovSpec]]:
    groups: dict[str, list[CovSpec]] = {}
    for c in cfg.cov_specs:
        groups.setdefault(cfg.error_kind_for(c), []).append(c)
    return groups


def _run_chunk(cfg: McConfig, K: int, T: int, regime: str, error_kind: str, reps: Sequence[int]):
    """Fit every method/cov spec on replications ``reps`` of one panel stream."""
    specs = _cov_groups(cfg)[error_kind]
    out = []
    for r in reps:
        panel = simulate_dgp(cfg.cell_config(K, T, regime, error_kind, r))
        for m in cfg.methods:
            for c in specs:
                try:
                    est = estimate(
                        panel,
                        m,
                        cov=c,
                        instruments=cfg.instruments,
                        level=cfg.level,
                        raise_on_nonconvergence=False,
                    )
                    lo, hi = est.ci()
                    row = (est.tau, est.tau_se, float(lo <= 1.0 <= hi), float(est.fit.converged))
                except (ProxscError, np.linalg.LinAlgError, ValueError, FloatingPointError):
                    row = (math.nan, math.nan, math.nan, math.nan)
                out.append((r, m.value, c.label, row))
    return out


def _summarise(cfg: McConfig, key: tuple, arr: np.ndarray) -> CellResult:
    regime, cov, K, T, method = key
    tau, se, covered, conv = arr.T
    ok = ~np.isnan(tau)
    n = int(ok.sum())
    err = tau[ok] - 1.0
    sq = err**2
    if n:
        mse = float(np.mean(sq))
        bias = float(np.mean(err))
        coverage = float(np.mean(covered[ok]))
        mean_se = float(np.mean(se[ok]))
        if n > 1:
            loo = (sq.sum() - sq) / (n - 1)
            mse_mcse = float(math.sqrt((n - 1) / n * np.sum((loo - loo.mean()) ** 2)))
        else:
            mse_mcse = math.nan
        coverage_mcse = math.sqrt(coverage * (1 - coverage) / n)
        drop = int(math.floor(cfg.trim * n))
        trimmed = float(np.mean(np.sort(sq)[: n - drop]))
    else:
        mse = bias = coverage = mean_se = mse_mcse = coverage_mcse = trimmed = math.nan
    return CellResult(
        regime=regime,
        cov=cov,
        K=K,
        T=T,
        method=method,
        reps=len(tau),
        n_ok=n,
        mse=mse,
        bias=bias,
        coverage=coverage,
        mean_se=mean_se,
        mse_mcse=mse_mcse,
        coverage_mcse=coverage_mcse,
        trimmed_mse=trimmed,
        failures=len(tau) - n,
        nonconverged=int(np.sum(conv[ok] == 0.0)),
    )


def run_mc(cfg: McConfig, jobs: Optional[int] = None, progress=None) -> McReport:
    """Run the experiment. ``jobs`` overrides ``cfg.jobs``; ``progress(done, total)`` is optional."""
    start = time.perf_counter()
    cfg.check_feasible()
    jobs = max(1, int(cfg.jobs if jobs is None else jobs))
    groups = _cov_groups(cfg)
    chunk = max(1, math.ceil(cfg.reps / (4 * jobs))) if jobs > 1 else cfg.reps
    tasks = [
        (K, T, regime, ek, range(lo, min(lo + chunk, cfg.reps)))
        for K, T in cfg.cells
        for regime in cfg.regimes
        for ek in groups
        for lo in range(0, cfg.reps, chunk)
    ]

    draws: dict = {}
    for K, T in cfg.cells:
        for regime in cfg.regimes:
            for c in cfg.cov_specs:
                for m in cfg.methods:
                    draws[(regime, c.label, K, T, m.value)] = np.full((cfg.reps, 4), math.nan)

    def collect(task, rows):
        K, T, regime = task[:3]
        for r, m, cov, row in rows:
            draws[(regime, cov, K, T, m)][r] = row

    if jobs == 1:
        for i, task in enumerate(tasks):
            collect(task, _run_chunk(cfg, *task))
            if progress:
                progress(i + 1, len(tasks))
    else:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_chunk, cfg, *task) for task in tasks]
            for i, (task, fut) in enumerate(zip(tasks, futures)):
                collect(task, fut.result())
                if progress:
                    progress(i + 1, len(tasks))

    cells = [_summarise(cfg, key, arr) for key, arr in draws.items()]
    out_draws = {
        key: {
            "tau": arr[:, 0],
            "se": arr[:, 1],
            "covered": arr[:, 2],
            "converged": arr[:, 3],
        }
        for key, arr in draws.items()
    }
    return McReport(cfg, cells, out_draws, time.perf_counter() - start)


def sign_test(a: np.ndarray, b: np.ndarray) -> float:
    """One-sided paired sign test p-value for ``a < b`` (ties and NaNs dropped)."""
    ok = ~(np.isnan(a) | np.isnan(b)) & (a != b)
    wins = int(np.sum(a[ok] < b[ok]))
    return float(stats.binomtest(wins, int(ok.sum()), 0.5, alternative="greater").pvalue)


# --------------------------------------------------------------------------- tables

METRICS = ("mse", "bias", "coverage", "mean_se", "trimmed_mse")


def _fmt(metric: str, value: float) -> str:
    if math.isnan(value):
        return "NA"
    if metric == "coverage":
        return f"{100 * value:.2f}%"
    return f"{value:.6f}"


def _mcse(metric: str, cell: CellResult) -> float:
    if metric == "mse":
        return cell.mse_mcse
    if metric == "coverage":
        return cell.coverage_mcse
    return math.nan


def table_rows(report: McReport, metric: str = "mse") -> tuple[list[str], list[list[str]]]:
    """Header and formatted rows: one row per (regime, cov spec, cell), methods as columns."""
    if metric not in METRICS:
        raise ValueError(f"metric must be one of {METRICS}")
    cfg = report.config
    methods = [m.value for m in cfg.methods]
    header = ["regime", "se", "K", "T"] + methods
    if metric in ("mse", "coverage"):
        header += [f"{m}_mcse" for m in methods]
    by_key = {c.key: c for c in report.cells}
    rows = []
    for regime in cfg.regimes:
        for c in cfg.cov_specs:
            for K, T in cfg.cells:
                cells = [by_key[(regime, c.label, K, T, m)] for m in methods]
                row = [regime, c.label, str(K), str(T)]
                row += [_fmt(metric, getattr(x, metric)) for x in cells]
                if metric in ("mse", "coverage"):
                    row += [_fmt(metric, _mcse(metric, x)) for x in cells]
                rows.append(row)
    return header, rows


def emit_table(report: McReport, metric: str = "mse", fmt: str = "csv") -> str:
    """Render one metric as CSV or a GitHub markdown table, methods as columns."""
    header, rows = table_rows(report, metric)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
        return buf.getvalue()
    if fmt == "markdown":
        lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
        lines += ["| " + " | ".join(r) + " |" for r in rows]
        return "\n".join(lines) + "\n"
    raise ValueError(f"unknown table format {fmt!r}")


def parse_markdown_table(text: str) -> tuple[list[str], list[list[str]]]:
    """Inverse of the markdown branch of :func:`emit_table`."""
    lines = [ln.strip() for ln in text.strip().splitlines() if ln.strip()]
    cells = [[c.strip() for c in ln.strip("|").split("|")] for ln in lines]
    return cells[0], cells[2:]
