"""Synthetic panels from an interactive fixed-effects design.

Donors load on factors ``lambda_t``; the treatment effect and the surrogates load
on factors ``rho_t``. With ``N = 2F`` control units and ``H = 2K`` surrogates,
the first half of each pool is used as donors/surrogates and the second half as
proxies. Loadings are ``Gamma = (I_F, I_F)``, ``Phi = (I_K, I_K)`` and
``beta = theta = 1``, so the true weights are ``alpha = 1`` and ``gamma = 1``,
and the ATT is ``sum(mu) = 1``.

Randomness comes from numpy's counter-based Philox generator keyed by the
64-bit seed. Monte Carlo replication ``r`` uses key ``seed ^ r``, so replications
are independent streams that can run in any order.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from os import PathLike
from typing import Optional

import numpy as np
from scipy.signal import lfilter

from .errors import BadConfig, BadPhi
from .panel import Panel

__all__ = [
    "DgpConfig",
    "DgpLatents",
    "ar1_series",
    "make_rng",
    "simulate_contaminated",
    "simulate_dgp",
    "simulate_with_latents",
    "true_parameters",
]

REGIMES = ("stationary", "logtrend")
ERROR_KINDS = ("iid", "ar1")


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Philox generator for ``seed`` on stream ``stream`` (key ``seed ^ stream``)."""
    key = (int(seed) ^ int(stream)) & 0xFFFFFFFFFFFFFFFF
    return np.random.Generator(np.random.Philox(key=key))


@dataclass(frozen=True)
class DgpConfig:
    """Simulation design.

    ``noise_scale`` multiplies every idiosyncratic error (0 gives a noiseless
    panel) and ``effect_sd`` is the standard deviation of the effect factors
    around their means. ``contamination`` is the loading scale of the donor
    factors in the surrogates (``None`` for clean surrogates). ``corrupt_proxy``
    replaces the donor-side proxies by factor signal plus the donors' own
    errors, which makes them invalid instruments. ``center_effect`` demeans the
    effect-factor deviations over the post period, so the realised ATT of a
    noiseless panel equals its population value exactly.
    """

    F: int = 1
    K: int = 1
    T: int = 200
    T0: int = 100
    factor_regime: str = "stationary"
    error_kind: str = "iid"
    phi: float = 0.5
    with_covariates: bool = False
    seed: int = 0
    contamination: Optional[float] = None
    noise_scale: float = 1.0
    effect_sd: float = 1.0
    corrupt_proxy: bool = False
    center_effect: bool = False

    def __post_init__(self):
        if self.F < 1 or self.K < 1:
            raise BadConfig(f"F and K must be >= 1, got F={self.F}, K={self.K}")
        if not 1 < self.T0 < self.T:
            raise BadConfig(f"need 1 < T0 < T, got T0={self.T0}, T={self.T}")
        if self.factor_regime not in REGIMES:
            raise BadConfig(f"factor_regime must be one of {REGIMES}")
        if self.error_kind not in ERROR_KINDS:
            raise BadConfig(f"error_kind must be one of {ERROR_KINDS}")
        if not -1.0 < self.phi < 1.0:
            raise BadPhi(self.phi)
        if self.noise_scale < 0 or self.effect_sd < 0:
            raise BadConfig("noise_scale and effect_sd must be non-negative")
        if not 0 <= int(self.seed) < 2**64:
            raise BadConfig("seed must be a 64-bit unsigned integer")

    @property
    def N(self) -> int:
        return 2 * self.F

    @property
    def H(self) -> int:
        return 2 * self.K

    @property
    def xi(self) -> float:
        return 1.0 if self.with_covariates else 0.0

    def replace(self, **changes) -> "DgpConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "DgpConfig":
        data = dict(data)
        contaminated = data.pop("contaminated", None)
        if isinstance(contaminated, dict):
            data.setdefault("contamination", float(contaminated.get("theta_loading_scale", 0.5)))
        elif contaminated is True:
            data.setdefault("contamination", 0.5)
        errors = data.get("error_kind")
        if isinstance(errors, dict):
            data["error_kind"] = str(errors.get("kind", "ar1")).lower()
            if "phi" in errors:
                data["phi"] = float(errors["phi"])
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise BadConfig(f"unknown DGP config fields: {sorted(unknown)}")
        try:
            return cls(**data)
        except TypeError as exc:
            raise BadConfig(str(exc)) from None

    @classmethod
    def from_json(cls, path: "str | PathLike[str]") -> "DgpConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass(frozen=True, eq=False)
class DgpLatents:
    """Unobserved quantities behind a simulated panel."""

    lam: np.ndarray  # (T, F)
    rho: np.ndarray  # (T, K)
    beta: np.ndarray
    theta: np.ndarray
    Gamma: np.ndarray  # (F, 2F)
    Phi: np.ndarray  # (K, 2K)
    mu: np.ndarray
    eps_y: np.ndarray
    eps_w: np.ndarray
    eps_x: np.ndarray
    delta: np.ndarray
    xi: float
    C_y: Optional[np.ndarray] = None
    C_w: Optional[np.ndarray] = None
    C_x: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None  # (F, K) surrogate synthetic-control weights
    delta_x: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    def effect_series(self) -> np.ndarray:
        """Per-period ``Y_t(1) - Y_t(0)``."""
        return self.rho @ self.theta + self.delta


def ar1_series(T: int, phi: float, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Stationary Gaussian AR(1) with unit marginal variance.

    ``x_1 ~ N(0, 1)`` and ``x_t = phi x_{t-1} + sqrt(1 - phi^2) e_t``. With
    ``size`` given, returns ``(T, size)`` independent columns.
    """
    if not -1.0 < phi < 1.0:
        raise BadPhi(phi)
    shape = (T,) if size is None else (T, size)
    e = rng.standard_normal(shape)
    if phi == 0.0:
        return e
    x = np.empty_like(e)
    x[0] = e[0]
    if T > 1:
        c = np.sqrt(1.0 - phi * phi)
        zi = (phi * x[0])[None, ...] if size is not None else np.array([phi * x[0]])
        x[1:], _ = lfilter([c], [1.0, -phi], e[1:], axis=0, zi=zi)
    return x


def _errors(cfg: DgpConfig, rng: np.random.Generator, cols: int) -> np.ndarray:
    if cfg.error_kind == "ar1":
        e = ar1_series(cfg.T, cfg.phi, rng, size=cols)
    else:
        e = rng.standard_normal((cfg.T, cols))
    return cfg.noise_scale * e


def simulate_with_latents(cfg: DgpConfig) -> tuple[Panel, DgpLatents]:
    """Draw one panel and return it with its latent components."""
    rng = make_rng(cfg.seed)
    T, T0, F, K = cfg.T, cfg.T0, cfg.F, cfg.K
    t = np.arange(1, T + 1, dtype=float)

    factor_mean = np.ones(T) if cfg.factor_regime == "stationary" else np.log(t)
    lam = factor_mean[:, None] + rng.standard_normal((T, F))
    mu = np.zeros(K)
    mu[0] = 1.0
    dev = rng.standard_normal((T, K))
    post = t > T0
    if cfg.center_effect:
        dev[post] -= dev[post].mean(axis=0)
    rho = mu[None, :] + cfg.effect_sd * dev

    eps_y = _errors(cfg, rng, 1)[:, 0]
    eps_w = _errors(cfg, rng, 2 * F)
    eps_x = _errors(cfg, rng, 2 * K)
    delta = _errors(cfg, rng, 1)[:, 0]

    xi = cfg.xi
    if cfg.with_covariates:
        C_y = rng.standard_normal((T, 1))
        C_w = rng.standard_normal((T, 2 * F))
        C_x = rng.standard_normal((T, 2 * K))
    else:
        C_y = np.zeros((T, 1))
        C_w = np.zeros((T, 2 * F))
        C_x = np.zeros((T, 2 * K))

    beta = np.ones(F)
    theta = np.ones(K)
    Gamma = np.hstack([np.eye(F), np.eye(F)])
    Phi = np.hstack([np.eye(K), np.eye(K)])
    post = post.astype(float)

    W_all = lam @ Gamma + xi * C_w + eps_w
    psi = None
    delta_x = None
    if cfg.contamination is None:
        X_all = rho @ Phi + xi * C_x + eps_x
    else:
        psi = cfg.contamination * np.ones((F, K))
        Theta = Gamma[:, :F] @ psi
        delta_x = _errors(cfg, rng, 2 * K)
        X_all = (
            lam @ np.hstack([Theta, Theta])
            + post[:, None] * (rho @ Phi + delta_x)
            + xi * C_x
            + eps_x
        )

    y = post * (rho @ theta + delta) + lam @ beta + xi * C_y[:, 0] + eps_y

    Z0 = W_all[:, F:]
    if cfg.corrupt_proxy:
        Z0 = lam @ Gamma[:, F:] + eps_w[:, :F]

    panel = Panel(
        y=y,
        W=W_all[:, :F],
        X=X_all[:, :K],
        Z0=Z0,
        Z1=X_all[:, K:],
        T0=T0,
        Cy=C_y if cfg.with_covariates else None,
        Cw=C_w[:, :F, None] if cfg.with_covariates else None,
        Cx=C_x[:, :K, None] if cfg.with_covariates else None,
    )
    latents = DgpLatents(
        lam=lam,
        rho=rho,
        beta=beta,
        theta=theta,
        Gamma=Gamma,
        Phi=Phi,
        mu=mu,
        eps_y=eps_y,
        eps_w=eps_w,
        eps_x=eps_x,
        delta=delta,
        xi=xi,
        C_y=C_y if cfg.with_covariates else None,
        C_w=C_w if cfg.with_covariates else None,
        C_x=C_x if cfg.with_covariates else None,
        psi=psi,
        delta_x=delta_x,
    )
    return panel, latents


def simulate_dgp(cfg: DgpConfig) -> Panel:
    """Draw one panel; deterministic in ``cfg`` (including its seed)."""
    return simulate_with_latents(cfg)[0]


def simulate_contaminated(cfg: DgpConfig) -> tuple[Panel, np.ndarray]:
    """Panel with contaminated surrogates and the true surrogate weights ``Psi`` (F x K)."""
    if cfg.contamination is None:
        raise BadConfig("simulate_contaminated needs cfg.contamination set")
    panel, lat = simulate_with_latents(cfg)
    return panel, lat.psi


def true_parameters(cfg: DgpConfig, latents: Optional[DgpLatents] = None) -> dict:
    """Population parameter values implied by ``cfg``.

    With ``latents`` supplied, also reports the realised post-period ATT.
    """
    out: dict = {
        "alpha": [1.0] * cfg.F,
        "gamma": [1.0] * cfg.K,
        "tau": 1.0,
    }
    if cfg.with_covariates:
        out["xi"] = [1.0, 1.0, 1.0]
    if cfg.contamination is not None:
        out["psi"] = (cfg.contamination * np.ones((cfg.F, cfg.K))).tolist()
    if latents is not None:
        post = np.arange(1, cfg.T + 1) > cfg.T0
        out["tau_sample"] = float(np.mean(latents.effect_series()[post]))
    return out
