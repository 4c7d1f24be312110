"""GMM estimation, long-run covariance, sandwich variance and the J-test."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal, NamedTuple, Optional, Union

import numpy as np
import scipy.linalg
from scipy import stats

from .errors import (
    InvalidWeighting,
    NoConvergence,
    NonPsdWeight,
    NotOveridentified,
    SingularSystem,
    UnderIdentified,
)
from .moments import MomentSystem, ParamVector

__all__ = [
    "CovSpec",
    "GmmFit",
    "JTest",
    "WeightScheme",
    "confidence_interval",
    "estimate_S",
    "j_test",
    "long_run_covariance",
    "newey_west_bandwidth",
    "sandwich",
    "solve",
]

COND_LIMIT = 1e10
STEP_TOL = 1e-12


@dataclass(frozen=True)
class WeightScheme:
    tag: Literal["identity", "twostep", "fixed"] = "identity"
    matrix: Optional[np.ndarray] = None

    @classmethod
    def identity(cls) -> "WeightScheme":
        return cls("identity")

    @classmethod
    def twostep(cls) -> "WeightScheme":
        return cls("twostep")

    @classmethod
    def fixed(cls, matrix) -> "WeightScheme":
        return cls("fixed", np.asarray(matrix, dtype=float))

    @classmethod
    def parse(cls, value: Union[str, "WeightScheme", None]) -> Optional["WeightScheme"]:
        if value is None or isinstance(value, WeightScheme):
            return value
        key = value.strip().lower().replace("-", "").replace("_", "")
        if key == "identity":
            return cls.identity()
        if key == "twostep":
            return cls.twostep()
        raise ValueError(f"unknown weight scheme {value!r}")


def newey_west_bandwidth(T: int) -> int:
    """Rule-of-thumb lag truncation ``floor(4 (T/100)^(2/9))``."""
    return int(math.floor(4.0 * (T / 100.0) ** (2.0 / 9.0)))


@dataclass(frozen=True)
class CovSpec:
    """Long-run covariance estimator for the moment series.

    ``robust`` is the zero-lag case of ``hac``; ``bandwidth=None`` selects the
    Newey-West rule. The kernel is always Bartlett.
    """

    tag: Literal["robust", "hac"] = "robust"
    bandwidth: Optional[int] = None
    center: bool = True

    @classmethod
    def robust(cls, center: bool = True) -> "CovSpec":
        return cls("robust", 0, center)

    @classmethod
    def hac(cls, bandwidth: Optional[int] = None, center: bool = True) -> "CovSpec":
        if bandwidth is not None and bandwidth < 0:
            raise ValueError("bandwidth must be >= 0")
        return cls("hac", bandwidth, center)

    @classmethod
    def parse(cls, value: Union[str, "CovSpec"], bandwidth: Union[str, int, None] = None) -> "CovSpec":
        if isinstance(value, CovSpec):
            return value
        key = value.strip().lower()
        if key == "robust":
            return cls.robust()
        if key == "hac":
            if bandwidth is None or str(bandwidth).lower() == "auto":
                return cls.hac()
            return cls.hac(int(bandwidth))
        raise ValueError(f"unknown covariance spec {value!r}")

    def lags(self, T: int) -> int:
        if self.tag == "robust":
            return 0
        b = newey_west_bandwidth(T) if self.bandwidth is None else int(self.bandwidth)
        if b >= T:
            raise ValueError(f"HAC bandwidth {b} must be smaller than T={T}")
        return b

    @property
    def label(self) -> str:
        if self.tag == "robust":
            return "Robust"
        return "HAC" if self.bandwidth is None else f"HAC({self.bandwidth})"


class JTest(NamedTuple):
    J: float
    df: int
    pvalue: float


@dataclass
class GmmFit:
    """Result of :func:`solve`. ``vcov`` is already divided by ``T``."""

    theta: np.ndarray
    params: ParamVector
    labels: list[str]
    vcov: np.ndarray
    se: np.ndarray
    S_hat: np.ndarray
    G_hat: np.ndarray
    omega: np.ndarray
    J: float
    df: int
    j_pvalue: Optional[float]
    converged: bool
    iterations: int
    weight: str
    cov: CovSpec
    T: int
    moment_means: np.ndarray
    grad_norm: float
    condition_number: float
    diagnostics: dict = field(default_factory=dict)

    def index(self, name: Union[int, str]) -> int:
        if isinstance(name, (int, np.integer)):
            return int(name)
        if name in self.labels:
            return self.labels.index(name)
        raise KeyError(f"no parameter named {name!r}; have {self.labels}")

    def estimate(self, name: Union[int, str]) -> float:
        return float(self.theta[self.index(name)])

    def stderr(self, name: Union[int, str]) -> float:
        return float(self.se[self.index(name)])


# --------------------------------------------------------------------------- linear algebra


def _psd_sqrt(omega: np.ndarray) -> np.ndarray:
    """``C`` with ``C.T @ C == omega``; raises on an indefinite or asymmetric matrix."""
    omega = np.asarray(omega, dtype=float)
    if omega.ndim != 2 or omega.shape[0] != omega.shape[1]:
        raise NonPsdWeight(f"weight matrix must be square, got {omega.shape}")
    scale = max(float(np.max(np.abs(omega))), 1e-300)
    if np.max(np.abs(omega - omega.T)) > 1e-10 * scale:
        raise NonPsdWeight("weight matrix is not symmetric")
    ev, vec = np.linalg.eigh(0.5 * (omega + omega.T))
    if ev.min() < -1e-10 * scale:
        raise NonPsdWeight(f"weight matrix has negative eigenvalue {ev.min():.3e}")
    return np.sqrt(np.clip(ev, 0.0, None))[:, None] * vec.T


def _pivoted_lstsq(A: np.ndarray, b: np.ndarray, what: str) -> tuple[np.ndarray, float]:
    """Least squares via column-equilibrated QR with column pivoting."""
    norms = np.linalg.norm(A, axis=0)
    if np.any(norms == 0) or not np.all(np.isfinite(A)):
        raise SingularSystem(f"{what}: Jacobian has a zero or non-finite column", math.inf)
    As = A / norms
    Q, R, perm = scipy.linalg.qr(As, mode="economic", pivoting=True)
    cond = float(np.linalg.cond(R))
    if not cond < COND_LIMIT:
        raise SingularSystem(f"{what}: rank-deficient weighted Jacobian", cond)
    z = scipy.linalg.solve_triangular(R, Q.T @ b)
    x = np.empty_like(z)
    x[perm] = z
    return x / norms, cond


def _equilibrated_cond(A: np.ndarray) -> float:
    d = np.sqrt(np.abs(np.diag(A)))
    if np.any(d == 0):
        return math.inf
    return float(np.linalg.cond(A / np.outer(d, d)))


# --------------------------------------------------------------------------- covariance


def long_run_covariance(
    U: np.ndarray, cov: CovSpec = CovSpec.robust(), return_info: bool = False
):
    """Bartlett-kernel long-run covariance of a ``(T, q)`` moment series.

    ``S = G_0 + sum_{j=1}^{b} (1 - j/(b+1)) (G_j + G_j')`` with
    ``G_j = (1/T) sum_t u_t u_{t-j}'``. The result is symmetrised; negative
    eigenvalues are clipped to zero and reported through ``return_info``.
    """
    U = np.asarray(U, dtype=float)
    if U.ndim == 1:
        U = U[:, None]
    T = U.shape[0]
    if cov.center:
        U = U - U.mean(axis=0)
    b = cov.lags(T)
    S = U.T @ U / T
    for j in range(1, b + 1):
        Gj = U[j:].T @ U[:-j] / T
        S += (1.0 - j / (b + 1.0)) * (Gj + Gj.T)
    S = 0.5 * (S + S.T)
    clipped = False
    if b > 0:
        ev, vec = np.linalg.eigh(S)
        if ev.min() < -1e-12 * max(float(np.abs(ev).max()), 1e-300):
            S = (vec * np.clip(ev, 0.0, None)) @ vec.T
            S = 0.5 * (S + S.T)
            clipped = True
    if return_info:
        return S, {"lags": b, "clipped": clipped}
    return S


def estimate_S(sys: MomentSystem, theta: np.ndarray, cov: CovSpec = CovSpec.robust(), return_info: bool = False):
    """Long-run covariance of ``U_t(theta)`` for the system's panel."""
    theta = np.asarray(theta, dtype=float)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    return long_run_covariance(sys.moments(theta), cov, return_info=return_info)


def sandwich(G: np.ndarray, S: np.ndarray, omega: np.ndarray, T: int = 1) -> np.ndarray:
    """``(G'WG)^-1 G'W S W'G (G'W'G)^-1 / T``."""
    G = np.asarray(G, dtype=float)
    A = G.T @ omega @ G
    cond = _equilibrated_cond(A)
    if not cond < COND_LIMIT:
        raise SingularSystem("G'WG is not invertible", cond)
    B = G.T @ omega @ S @ omega.T @ G
    left = np.linalg.solve(A, B)
    V = np.linalg.solve(A.T, left.T).T / T
    return 0.5 * (V + V.T)


# --------------------------------------------------------------------------- solver


def _gn_minimize(
    sys: MomentSystem,
    C: np.ndarray,
    omega: np.ndarray,
    theta: np.ndarray,
    max_iter: int,
    tol: float,
) -> tuple[np.ndarray, bool, int, float, float]:
    """Damped Gauss-Newton on ``||C m(theta)||^2``.

    Converged when the gradient norm drops below ``tol`` or the full
    Gauss-Newton step is below ``STEP_TOL`` relative to ``theta``. Returns
    ``(theta, converged, iterations, grad_norm, cond)``.
    """

    def objective(th):
        m = sys.mean_moments(th)
        r = C @ m
        return float(r @ r), m

    obj, m = objective(theta)
    cond = math.nan
    grad_norm = math.inf
    for it in range(max_iter + 1):
        G = sys.mean_jacobian(theta)
        grad_norm = float(np.linalg.norm(G.T @ omega @ m))
        if grad_norm < tol:
            return theta, True, it, grad_norm, cond
        if it == max_iter:
            break
        step, cond = _pivoted_lstsq(C @ G, -(C @ m), sys.kind)
        if np.linalg.norm(step) <= STEP_TOL * (1.0 + np.linalg.norm(theta)):
            # the gradient test is not scale free: under a huge weight matrix
            # (nearly exact moments) a negligible Newton step is the better signal
            return theta, True, it, grad_norm, cond
        scale = 1.0
        for _ in range(31):
            cand = theta + scale * step
            cobj, cm = objective(cand)
            if cobj < obj:
                break
            scale *= 0.5
        else:
            # no decrease along the Gauss-Newton direction: at the numerical floor
            return theta, grad_norm < 1e-8, it, grad_norm, cond
        theta, obj, m = cand, cobj, cm
    return theta, False, max_iter, grad_norm, cond


def _minimize(sys, omega, init, max_iter, tol):
    C = _psd_sqrt(omega)
    if sys.affine:
        theta0 = np.zeros(sys.p) if init is None else np.asarray(init, dtype=float)
        G = sys.mean_jacobian(theta0)
        m = sys.mean_moments(theta0)
        step, cond = _pivoted_lstsq(C @ G, -(C @ m), sys.kind)
        theta = theta0 + step
        grad = float(np.linalg.norm(G.T @ omega @ sys.mean_moments(theta)))
        return theta, True, 1, grad, cond
    theta0 = sys.initial_theta() if init is None else np.asarray(init, dtype=float)
    return _gn_minimize(sys, C, omega, theta0, max_iter, tol)


def _as_vector(sys: MomentSystem, init) -> Optional[np.ndarray]:
    if init is None:
        return None
    if isinstance(init, ParamVector):
        return sys.layout.flatten(init)
    return np.asarray(init, dtype=float)


def solve(
    sys: MomentSystem,
    w: Optional[WeightScheme] = None,
    cov: CovSpec = CovSpec.robust(),
    init: Union[ParamVector, np.ndarray, None] = None,
    max_iter: int = 200,
    tol: float = 1e-10,
    raise_on_nonconvergence: bool = True,
) -> GmmFit:
    """Minimise ``m(theta)' W m(theta)`` and attach sandwich inference.

    Parameters
    ----------
    sys : moment system bound to a panel
    w : weighting; defaults to identity when exactly identified and two-step
        efficient GMM otherwise
    cov : long-run covariance used for the variance (and the two-step weight)
    init : starting value; affine systems are solved in closed form from it
    raise_on_nonconvergence : if False, a non-converged Gauss-Newton run is
        returned with ``converged=False`` instead of raising
    """
    q, p, T = sys.q, sys.p, sys.T
    if q < p:
        raise UnderIdentified(q, p)
    if w is None:
        w = WeightScheme.identity() if sys.df == 0 else WeightScheme.twostep()
    init = _as_vector(sys, init)
    diagnostics: dict = {}

    if w.tag == "fixed":
        omega = np.asarray(w.matrix, dtype=float)
        if omega.shape != (q, q):
            raise NonPsdWeight(f"weight matrix must be {q}x{q}, got {omega.shape}")
    else:
        omega = np.eye(q)
    theta, converged, iters, grad, cond = _minimize(sys, omega, init, max_iter, tol)
    weight = w.tag

    if w.tag == "twostep":
        S1 = estimate_S(sys, theta, cov)
        s_cond = _equilibrated_cond(S1)
        # moments that vanish at every t (noiseless data) give a well-conditioned
        # but numerically zero S; measure it against the Jacobian's scale
        G1 = sys.mean_jacobian(theta)
        scale = (np.linalg.norm(G1) * (1.0 + np.linalg.norm(theta))) ** 2
        d = np.diag(S1)
        negligible = np.trace(S1) <= 1e-20 * max(scale, 1e-300) or d.min() <= 1e-20 * d.max()
        if s_cond < COND_LIMIT and not negligible:
            omega2 = np.linalg.inv(S1)
            omega2 = 0.5 * (omega2 + omega2.T)
            theta2, converged, it2, grad, cond = _minimize(sys, omega2, theta, max_iter, tol)
            theta, omega, iters = theta2, omega2, iters + it2
        else:
            # first-step moment covariance is singular (e.g. noiseless data)
            weight = "identity"
            diagnostics["twostep_fallback"] = (
                "first-step S is numerically zero in some direction"
                if negligible
                else f"first-step S condition number {s_cond:.3e}"
            )

    if not converged and raise_on_nonconvergence:
        raise NoConvergence(grad, iters)

    G = sys.mean_jacobian(theta)
    S, s_info = estimate_S(sys, theta, cov, return_info=True)
    vcov = sandwich(G, S, omega, T)
    diag = np.clip(np.diag(vcov), 0.0, None)
    m = sys.mean_moments(theta)
    J = max(float(T * m @ omega @ m), 0.0)
    df = sys.df
    pval = float(stats.chi2.sf(J, df)) if (df > 0 and weight == "twostep") else None
    diagnostics.update(
        {
            "hac_lags": s_info["lags"],
            "S_clipped": s_info["clipped"],
            "S_condition": _equilibrated_cond(S),
        }
    )
    return GmmFit(
        theta=theta,
        params=sys.unflatten(theta),
        labels=sys.layout.labels(),
        vcov=vcov,
        se=np.sqrt(diag),
        S_hat=S,
        G_hat=G,
        omega=omega,
        J=J,
        df=df,
        j_pvalue=pval,
        converged=converged,
        iterations=iters,
        weight=weight,
        cov=cov,
        T=T,
        moment_means=m,
        grad_norm=grad,
        condition_number=cond,
        diagnostics=diagnostics,
    )


def j_test(fit: GmmFit) -> JTest:
    """Hansen overidentification test; needs efficient (two-step) weighting."""
    if fit.df < 1:
        raise NotOveridentified(fit.df)
    if fit.weight != "twostep":
        raise InvalidWeighting(f"J-test requires two-step weighting, fit used {fit.weight!r}")
    return JTest(fit.J, fit.df, float(stats.chi2.sf(fit.J, fit.df)))


def confidence_interval(fit: GmmFit, index: Union[int, str] = "tau", level: float = 0.95) -> tuple[float, float]:
    """Wald interval ``theta_i +/- z * se_i``."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must be in (0, 1)")
    i = fit.index(index)
    z = stats.norm.ppf(0.5 + level / 2.0)
    est, se = float(fit.theta[i]), float(fit.se[i])
    return est - z * se, est + z * se
