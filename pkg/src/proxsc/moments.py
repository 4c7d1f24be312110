"""Per-period moment functions and analytic Jacobians for each estimator.

Every system stacks row blocks of the form ``instruments_t * residual_t(theta)``
where the instruments already carry the pre/post indicator. A block knows its
residual and the residual's gradient, which gives the per-period Jacobian as an
outer product. Systems whose residuals are all affine in ``theta`` are solved in
closed form by :mod:`proxsc.gmm`; the covariate, contaminated-surrogate and lift
systems are bilinear and go through Gauss-Newton.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import (
    DataError,
    DegenerateBaseline,
    EmptyWindow,
    MissingCovariates,
    MissingProxies,
    UnderIdentified,
)
from .panel import EstimatorKind, Panel

__all__ = [
    "InstrumentChoice",
    "MomentSystem",
    "ParamLayout",
    "ParamVector",
    "add_lift",
    "add_window_att",
    "build_pi",
    "build_pi_p",
    "build_pi_s",
    "build_pi_s_contam",
    "build_pi_s_cov",
    "build_sc",
    "build_sc_s",
    "build_system",
]

_ORDER = ("alpha0", "alpha", "gamma", "xi", "psi", "tau")


# --------------------------------------------------------------------------- parameters


@dataclass
class ParamVector:
    """Structured parameter values. Absent blocks are ``None``."""

    alpha: np.ndarray
    gamma: Optional[np.ndarray] = None
    tau: Optional[float] = None
    xi: Optional[np.ndarray] = None
    psi: Optional[np.ndarray] = None
    alpha0: Optional[float] = None
    extras: dict[str, float] = field(default_factory=dict)

    def as_dict(self) -> dict:
        out: dict = {}
        for name in _ORDER:
            v = getattr(self, name)
            if v is not None:
                out[name] = np.asarray(v).tolist() if np.ndim(v) else float(v)
        out.update({k: float(v) for k, v in self.extras.items()})
        return out


@dataclass(frozen=True)
class ParamLayout:
    """Flat layout ``alpha0 | alpha | gamma | xi | vec(psi) | tau | extras...``.

    ``psi`` is vectorised column-major, so column ``j`` (weights for surrogate
    ``j``) is contiguous.
    """

    blocks: tuple[tuple[str, tuple[int, ...]], ...]
    xi_sizes: tuple[int, int, int] = (0, 0, 0)

    @property
    def size(self) -> int:
        return sum(int(np.prod(shape)) for _, shape in self.blocks)

    def names(self) -> list[str]:
        return [name for name, _ in self.blocks]

    def slice(self, name: str) -> slice:
        start = 0
        for bname, shape in self.blocks:
            n = int(np.prod(shape))
            if bname == name:
                return slice(start, start + n)
            start += n
        raise KeyError(name)

    def has(self, name: str) -> bool:
        return name in self.names()

    def extend(self, name: str) -> "ParamLayout":
        if self.has(name):
            raise ValueError(f"parameter {name!r} already present")
        return replace(self, blocks=self.blocks + ((name, ()),))

    def unflatten(self, theta: np.ndarray) -> ParamVector:
        theta = np.asarray(theta, dtype=float)
        if theta.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got shape {theta.shape}")
        vals: dict = {}
        extras: dict[str, float] = {}
        for name, shape in self.blocks:
            chunk = theta[self.slice(name)]
            if name == "psi":
                value = chunk.reshape(shape, order="F").copy()
            elif shape == ():
                value = float(chunk[0])
            else:
                value = chunk.copy()
            if name in _ORDER:
                vals[name] = value
            else:
                extras[name] = value
        return ParamVector(extras=extras, **vals)

    def flatten(self, pv: ParamVector) -> np.ndarray:
        out = np.empty(self.size)
        for name, shape in self.blocks:
            value = getattr(pv, name) if name in _ORDER else pv.extras[name]
            if value is None:
                raise ValueError(f"parameter block {name!r} is missing")
            arr = np.asarray(value, dtype=float)
            if arr.shape != shape:
                raise ValueError(f"{name} has shape {arr.shape}, expected {shape}")
            out[self.slice(name)] = arr.reshape(-1, order="F") if name == "psi" else arr.ravel()
        return out

    def labels(self) -> list[str]:
        out: list[str] = []
        for name, shape in self.blocks:
            if shape == ():
                out.append(name)
            elif name == "psi":
                N, H = shape
                out += [f"psi[{i + 1},{j + 1}]" for j in range(H) for i in range(N)]
            elif name == "xi":
                py, pw, px = self.xi_sizes
                out += [f"xi_y[{k + 1}]" for k in range(py)]
                out += [f"xi_w[{k + 1}]" for k in range(pw)]
                out += [f"xi_x[{k + 1}]" for k in range(px)]
            else:
                out += [f"{name}[{i + 1}]" for i in range(shape[0])]
        return out


# --------------------------------------------------------------------------- instruments


@dataclass(frozen=True)
class InstrumentChoice:
    """How raw proxies become instrument functions ``g0``/``g1``.

    The default is the identity map. ``constant`` prepends a column of ones and
    ``squares`` appends elementwise squares, which overidentifies the system.
    ``g1_donor_proxies`` lets the post-period rows of PI-S and the contaminated
    system also use the donor-side proxies.
    """

    constant: bool = False
    squares: bool = False
    g1_donor_proxies: bool = False

    def apply(self, Z: np.ndarray) -> np.ndarray:
        cols = []
        if self.constant:
            cols.append(np.ones((Z.shape[0], 1)))
        cols.append(Z)
        if self.squares:
            cols.append(Z**2)
        return np.hstack(cols)

    def describe(self, base: str) -> str:
        parts = (["1"] if self.constant else []) + [base] + ([f"{base}^2"] if self.squares else [])
        return "(" + ", ".join(parts) + ")"


# --------------------------------------------------------------------------- blocks


ResidualFn = Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class _Block:
    """Rows ``V_t * r_t(theta)``; ``V`` includes the period indicator."""

    V: np.ndarray  # (T, d)
    residual: ResidualFn  # theta -> (T,)
    gradient: ResidualFn  # theta -> (T, p)
    labels: tuple[str, ...]

    @classmethod
    def linear(cls, V, target, design, labels) -> "_Block":
        """Residual ``target - design @ theta``."""
        target = np.asarray(target, dtype=float)
        design = np.asarray(design, dtype=float)
        neg = -design
        return cls(
            V=np.asarray(V, dtype=float),
            residual=lambda th: target - design @ th,
            gradient=lambda th: neg,
            labels=tuple(labels),
        )

    def padded(self, p_old: int, p_new: int) -> "_Block":
        res, grad = self.residual, self.gradient
        extra = p_new - p_old

        def gradient(th):
            g = grad(th[:p_old])
            return np.hstack([g, np.zeros((g.shape[0], extra))])

        return _Block(self.V, lambda th: res(th[:p_old]), gradient, self.labels)


@dataclass(frozen=True, eq=False)
class _Effect:
    """Per-period treatment-effect expression used by ATT, window and lift rows."""

    value: ResidualFn  # theta -> (T,)
    gradient: ResidualFn  # theta -> (T, p)

    def padded(self, p_old: int, p_new: int) -> "_Effect":
        val, grad = self.value, self.gradient
        extra = p_new - p_old

        def gradient(th):
            g = grad(th[:p_old])
            return np.hstack([g, np.zeros((g.shape[0], extra))])

        return _Effect(lambda th: val(th[:p_old]), gradient)


@dataclass(frozen=True, eq=False)
class MomentSystem:
    """Stacked moment function ``U_t(theta)`` bound to one panel.

    ``eval``/``jac`` give one period (1-based ``t``); ``moments``/``jacobian``
    give all periods at once.
    """

    kind: str
    panel: Panel
    layout: ParamLayout
    blocks: tuple[_Block, ...]
    affine: bool
    instrument_spec: dict
    effect: _Effect
    initializer: Optional[Callable[["MomentSystem"], np.ndarray]] = None

    @property
    def q(self) -> int:
        return sum(b.V.shape[1] for b in self.blocks)

    @property
    def p(self) -> int:
        return self.layout.size

    @property
    def df(self) -> int:
        return self.q - self.p

    @property
    def T(self) -> int:
        return self.panel.T

    @property
    def row_labels(self) -> list[str]:
        return [lab for b in self.blocks for lab in b.labels]

    def moments(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        return np.hstack([b.V * b.residual(theta)[:, None] for b in self.blocks])

    def jacobian(self, theta: np.ndarray) -> np.ndarray:
        """Per-period Jacobian, shape ``(T, q, p)``."""
        theta = np.asarray(theta, dtype=float)
        return np.concatenate(
            [b.V[:, :, None] * b.gradient(theta)[:, None, :] for b in self.blocks], axis=1
        )

    def mean_moments(self, theta: np.ndarray) -> np.ndarray:
        return self.moments(theta).mean(axis=0)

    def mean_jacobian(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=float)
        T = self.T
        return np.vstack([b.V.T @ b.gradient(theta) / T for b in self.blocks])

    def eval(self, t: int, theta: np.ndarray) -> np.ndarray:
        return self.moments(theta)[self._row(t)]

    def jac(self, t: int, theta: np.ndarray) -> np.ndarray:
        return self.jacobian(theta)[self._row(t)]

    def _row(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise IndexError(f"period {t} outside 1..{self.T}")
        return t - 1

    def initial_theta(self) -> np.ndarray:
        """Starting point for iterative solvers."""
        if self.initializer is not None:
            return self.initializer(self)
        return _identity_linear_solution(self)

    def unflatten(self, theta: np.ndarray) -> ParamVector:
        return self.layout.unflatten(theta)


def _identity_linear_solution(sys: MomentSystem) -> np.ndarray:
    """Identity-weighted minimiser treating the system as affine around zero."""
    theta0 = np.zeros(sys.p)
    G = sys.mean_jacobian(theta0)
    m = sys.mean_moments(theta0)
    step, *_ = np.linalg.lstsq(G, -m, rcond=None)
    return theta0 + step


def _post_mask(panel: Panel) -> np.ndarray:
    return panel.post.astype(float)[:, None]


def _check_order(q: int, p: int, detail: str) -> None:
    if q < p:
        raise UnderIdentified(q, p, detail)


def _need_surrogate_proxies(panel: Panel) -> None:
    if panel.d1z < 1:
        raise MissingProxies("surrogate-side proxies Z1 are required for this estimator")


def _labels(prefix: str, n: int) -> list[str]:
    return [f"{prefix}[{i + 1}]" for i in range(n)]


# --------------------------------------------------------------------------- builders


def build_sc(panel: Panel) -> MomentSystem:
    """Unconstrained OLS of ``y`` on (1, post indicator, donors) as exactly identified GMM."""
    T, N = panel.T, panel.N
    D = _post_mask(panel)
    ones = np.ones((T, 1))
    layout = ParamLayout((("alpha0", ()), ("alpha", (N,)), ("tau", ())))
    design = np.hstack([ones, panel.W, D])
    V = np.hstack([ones, D, panel.W])
    block = _Block.linear(V, panel.y, design, ["sc:const", "sc:post"] + _labels("sc:w", N))
    y, W = panel.y, panel.W
    eff_grad = np.hstack([-ones, -W, np.zeros((T, 1))])
    effect = _Effect(lambda th: y - th[0] - W @ th[1 : N + 1], lambda th: eff_grad)
    return MomentSystem(
        kind=EstimatorKind.SC.value,
        panel=panel,
        layout=layout,
        blocks=(block,),
        affine=True,
        instrument_spec={"regression": "(1, 1{t>T0}, W)"},
        effect=effect,
    )


def build_sc_s(panel: Panel) -> MomentSystem:
    """OLS with post-period surrogates plus an ATT row.

    The regression is ``y = a0 + 1{t>T0} (kappa + X'g) + W'a``; ``kappa`` absorbs
    the post-period level so that ``g`` is identified from within-post variation
    only. Instruments are ``1{t>T0}``, ``1{t>T0} X``, ``W``, ``C_Y`` when present,
    and a constant. The ATT row is ``(kappa + X'g - tau) 1{t>T0}``.
    """
    T, N, H = panel.T, panel.N, panel.H
    D = _post_mask(panel)
    ones = np.ones((T, 1))
    DX = D * panel.X
    layout = ParamLayout(
        (("alpha0", ()), ("alpha", (N,)), ("gamma", (H,)), ("kappa", ()), ("tau", ()))
    )
    design = np.hstack([ones, panel.W, DX, D, np.zeros((T, 1))])
    inst = [D, DX, panel.W]
    labels = ["scs:post"] + _labels("scs:post*x", H) + _labels("scs:w", N)
    if panel.Cy is not None:
        inst.append(panel.Cy)
        labels += _labels("scs:cy", panel.Cy.shape[1])
    inst.append(ones)
    labels.append("scs:const")
    reg = _Block.linear(np.hstack(inst), panel.y, design, labels)
    att_design = np.hstack([np.zeros((T, 1 + N)), -panel.X, -ones, ones])
    att = _Block.linear(D, np.zeros(T), att_design, ["att:kappa+x'gamma-tau"])
    q = reg.V.shape[1] + 1
    _check_order(q, layout.size, "SC-S")
    X = panel.X
    gsl, ksl = layout.slice("gamma"), layout.slice("kappa")
    eff_grad = np.hstack([np.zeros((T, 1 + N)), X, ones, np.zeros((T, 1))])
    effect = _Effect(lambda th: X @ th[gsl] + th[ksl][0], lambda th: eff_grad)
    return MomentSystem(
        kind=EstimatorKind.SC_S.value,
        panel=panel,
        layout=layout,
        blocks=(reg, att),
        affine=True,
        instrument_spec={"regression": "(1{t>T0}, 1{t>T0} X, W, C_Y?, 1)"},
        effect=effect,
    )


def build_pi(panel: Panel, g: InstrumentChoice = InstrumentChoice()) -> MomentSystem:
    """Proximal synthetic control without surrogates."""
    T, N = panel.T, panel.N
    D = _post_mask(panel)
    pre = 1.0 - D
    g0 = g.apply(panel.Z0)
    layout = ParamLayout((("alpha", (N,)), ("tau", ())))
    zeros1 = np.zeros((T, 1))
    pre_block = _Block.linear(
        pre * g0, panel.y, np.hstack([panel.W, zeros1]), _labels("pre:g0", g0.shape[1])
    )
    att = _Block.linear(D, panel.y, np.hstack([panel.W, np.ones((T, 1))]), ["att:y-w'alpha-tau"])
    _check_order(g0.shape[1], N, "PI needs at least N donor-side instruments")
    y, W = panel.y, panel.W
    eff_grad = np.hstack([-W, zeros1])
    effect = _Effect(lambda th: y - W @ th[:N], lambda th: eff_grad)
    return MomentSystem(
        kind=EstimatorKind.PI.value,
        panel=panel,
        layout=layout,
        blocks=(pre_block, att),
        affine=True,
        instrument_spec={"g0": g.describe("Z0")},
        effect=effect,
    )


def _surrogate_effect(panel: Panel, layout: ParamLayout) -> _Effect:
    T = panel.T
    X = panel.X
    gsl = layout.slice("gamma")
    grad = np.zeros((T, layout.size))
    grad[:, gsl] = X
    return _Effect(lambda th: X @ th[gsl], lambda th: grad)


def _att_surrogate_block(panel: Panel, layout: ParamLayout) -> _Block:
    T = panel.T
    design = np.zeros((T, layout.size))
    design[:, layout.slice("gamma")] = -panel.X
    design[:, layout.slice("tau")] = 1.0
    return _Block.linear(_post_mask(panel), np.zeros(T), design, ["att:x'gamma-tau"])


def build_pi_p(panel: Panel, g: InstrumentChoice = InstrumentChoice()) -> MomentSystem:
    """Proximal estimator that uses post-treatment periods only."""
    _need_surrogate_proxies(panel)
    T, N, H = panel.T, panel.N, panel.H
    D = _post_mask(panel)
    g1 = g.apply(np.hstack([panel.Z0, panel.Z1]))
    layout = ParamLayout((("alpha", (N,)), ("gamma", (H,)), ("tau", ())))
    post = _Block.linear(
        D * g1,
        panel.y,
        np.hstack([panel.W, panel.X, np.zeros((T, 1))]),
        _labels("post:g1", g1.shape[1]),
    )
    _check_order(g1.shape[1], N + H, "PI-P needs d0z + d1z >= N + H")
    return MomentSystem(
        kind=EstimatorKind.PI_P.value,
        panel=panel,
        layout=layout,
        blocks=(post, _att_surrogate_block(panel, layout)),
        affine=True,
        instrument_spec={"g1": g.describe("Z0, Z1")},
        effect=_surrogate_effect(panel, layout),
    )


def _g1_raw(panel: Panel, g: InstrumentChoice) -> tuple[np.ndarray, str]:
    if g.g1_donor_proxies:
        return np.hstack([panel.Z0, panel.Z1]), "Z0, Z1"
    return panel.Z1, "Z1"


def build_pi_s(panel: Panel, g: InstrumentChoice = InstrumentChoice()) -> MomentSystem:
    """Proximal synthetic control with surrogates (pre rows for alpha, post rows for gamma)."""
    _need_surrogate_proxies(panel)
    T, N, H = panel.T, panel.N, panel.H
    D = _post_mask(panel)
    pre = 1.0 - D
    g0 = g.apply(panel.Z0)
    raw1, name1 = _g1_raw(panel, g)
    g1 = g.apply(raw1)
    layout = ParamLayout((("alpha", (N,)), ("gamma", (H,)), ("tau", ())))
    zeros = np.zeros((T, 1))
    pre_block = _Block.linear(
        pre * g0,
        panel.y,
        np.hstack([panel.W, np.zeros((T, H)), zeros]),
        _labels("pre:g0", g0.shape[1]),
    )
    post_block = _Block.linear(
        D * g1, panel.y, np.hstack([panel.W, panel.X, zeros]), _labels("post:g1", g1.shape[1])
    )
    _check_order(g0.shape[1], N, "PI-S needs at least N donor-side instruments")
    _check_order(g1.shape[1], H, "PI-S needs at least H surrogate-side instruments")
    return MomentSystem(
        kind=EstimatorKind.PI_S.value,
        panel=panel,
        layout=layout,
        blocks=(pre_block, post_block, _att_surrogate_block(panel, layout)),
        affine=True,
        instrument_spec={"g0": g.describe("Z0"), "g1": g.describe(name1)},
        effect=_surrogate_effect(panel, layout),
    )


def build_pi_s_cov(panel: Panel, g: InstrumentChoice = InstrumentChoice()) -> MomentSystem:
    """PI-S with measured covariates.

    Residuals use covariate-adjusted series ``W~ = W - C_W xi_W`` and
    ``X~ = X - C_X xi_X`` (one loading vector shared across donors, one across
    surrogates)::

        pre:  g0(Z0, C_Y, C_W)        * (y - C_Y'xi_Y - W~'alpha)
        post: g1(Z0, C_Y, C_W, Z1, C_X) * (y - C_Y'xi_Y - W~'alpha - X~'gamma)
        att:  (X~'gamma - tau) 1{t > T0}
    """
    if not panel.has_covariates:
        raise MissingCovariates("PI-S-COV requires Cy, Cw and Cx")
    _need_surrogate_proxies(panel)
    T, N, H = panel.T, panel.N, panel.H
    Cy, Cw, Cx = panel.Cy, panel.Cw, panel.Cx
    py, pw, px = Cy.shape[1], Cw.shape[2], Cx.shape[2]
    D = _post_mask(panel)
    pre = 1.0 - D
    Z0t = np.hstack([panel.Z0, Cy, Cw.reshape(T, -1)])
    g0 = g.apply(Z0t)
    g1 = g.apply(np.hstack([Z0t, panel.Z1, Cx.reshape(T, -1)]))
    layout = ParamLayout(
        (("alpha", (N,)), ("gamma", (H,)), ("xi", (py + pw + px,)), ("tau", ())),
        xi_sizes=(py, pw, px),
    )
    p = layout.size
    sa, sg, sx, st = (layout.slice(n) for n in ("alpha", "gamma", "xi", "tau"))
    y, W, X = panel.y, panel.W, panel.X
    xi0 = sx.start

    def parts(th):
        a, gm, xi = th[sa], th[sg], th[sx]
        xy, xw, xx = xi[:py], xi[py : py + pw], xi[py + pw :]
        Wt = W - Cw @ xw  # (T, N)
        Xt = X - Cx @ xx  # (T, H)
        return a, gm, xy, xw, xx, Wt, Xt

    def r_pre(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        return y - Cy @ xy - Wt @ a

    def dr_pre(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        out = np.zeros((T, p))
        out[:, sa] = -Wt
        out[:, xi0 : xi0 + py] = -Cy
        out[:, xi0 + py : xi0 + py + pw] = np.einsum("tik,i->tk", Cw, a)
        return out

    def r_post(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        return y - Cy @ xy - Wt @ a - Xt @ gm

    def dr_post(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        out = dr_pre(th)
        out[:, sg] = -Xt
        out[:, xi0 + py + pw : xi0 + py + pw + px] = np.einsum("tjk,j->tk", Cx, gm)
        return out

    def eff(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        return Xt @ gm

    def deff(th):
        a, gm, xy, xw, xx, Wt, Xt = parts(th)
        out = np.zeros((T, p))
        out[:, sg] = Xt
        out[:, xi0 + py + pw : xi0 + py + pw + px] = -np.einsum("tjk,j->tk", Cx, gm)
        return out

    def r_att(th):
        return eff(th) - th[st][0]

    def dr_att(th):
        out = deff(th)
        out[:, st] = -1.0
        return out

    blocks = (
        _Block(pre * g0, r_pre, dr_pre, tuple(_labels("pre:g0", g0.shape[1]))),
        _Block(D * g1, r_post, dr_post, tuple(_labels("post:g1", g1.shape[1]))),
        _Block(D, r_att, dr_att, ("att:x~'gamma-tau",)),
    )
    _check_order(g0.shape[1], N + py + pw, "PI-S-COV pre-period rows")
    _check_order(g1.shape[1], H + px, "PI-S-COV post-period rows")
    return MomentSystem(
        kind=EstimatorKind.PI_S_COV.value,
        panel=panel,
        layout=layout,
        blocks=blocks,
        affine=False,
        instrument_spec={"g0": g.describe("Z0, C_Y, C_W"), "g1": g.describe("Z0, C_Y, C_W, Z1, C_X")},
        effect=_Effect(eff, deff),
        initializer=lambda s: _init_pi_s_cov(s, g0, g1),
    )


def _iv(V: np.ndarray, R: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Identity-weighted linear GMM: minimise ||V'(target - R b)||."""
    coef, *_ = np.linalg.lstsq(V.T @ R, V.T @ target, rcond=None)
    return coef


def _init_pi_s_cov(sys: MomentSystem, g0: np.ndarray, g1: np.ndarray) -> np.ndarray:
    # Unrestricted linear fits (one covariate coefficient per unit), then project
    # the per-unit coefficients onto the shared loading.
    panel = sys.panel
    T, N, H = panel.T, panel.N, panel.H
    Cy, Cw, Cx = panel.Cy, panel.Cw, panel.Cx
    py, pw, px = sys.layout.xi_sizes
    pre, post = panel.pre, panel.post

    R0 = np.hstack([panel.W, Cy, -Cw.reshape(T, -1)])
    b0 = _iv(g0[pre], R0[pre], panel.y[pre])
    alpha = b0[:N]
    xi_y = b0[N : N + py]
    per_unit_w = b0[N + py :].reshape(N, pw)
    denom = float(alpha @ alpha)
    xi_w = alpha @ per_unit_w / denom if denom > 0 else np.zeros(pw)

    resid0 = panel.y - Cy @ xi_y - (panel.W - Cw @ xi_w) @ alpha
    R1 = np.hstack([panel.X, -Cx.reshape(T, -1)])
    b1 = _iv(g1[post], R1[post], resid0[post])
    gamma = b1[:H]
    per_unit_x = b1[H:].reshape(H, px)
    denom = float(gamma @ gamma)
    xi_x = gamma @ per_unit_x / denom if denom > 0 else np.zeros(px)
    tau = float(np.mean(((panel.X - Cx @ xi_x) @ gamma)[post]))

    pv = ParamVector(alpha=alpha, gamma=gamma, xi=np.concatenate([xi_y, xi_w, xi_x]), tau=tau)
    return sys.layout.flatten(pv)


def build_pi_s_contam(panel: Panel, g: InstrumentChoice = InstrumentChoice()) -> MomentSystem:
    """PI-S with contaminated surrogates, which need their own synthetic control ``Psi``.

    Rows::

        g0(Z0) (y - W'alpha)                    1{t <= T0}
        g0(Z0) (x) (X - Psi'W)                  1{t <= T0}   (surrogate-major)
        g1(Z1) (y - W'alpha - (X - Psi'W)'gamma) 1{t > T0}
        (y - tau - W'alpha)                     1{t > T0}
        ((X - Psi'W)'gamma - tau)               1{t > T0}
    """
    _need_surrogate_proxies(panel)
    T, N, H = panel.T, panel.N, panel.H
    D = _post_mask(panel)
    pre = 1.0 - D
    g0 = g.apply(panel.Z0)
    raw1, name1 = _g1_raw(panel, g)
    g1 = g.apply(raw1)
    d0 = g0.shape[1]
    layout = ParamLayout((("alpha", (N,)), ("gamma", (H,)), ("psi", (N, H)), ("tau", ())))
    p = layout.size
    sa, sg, sp, st = (layout.slice(n) for n in ("alpha", "gamma", "psi", "tau"))
    y, W, X = panel.y, panel.W, panel.X

    def psi_of(th):
        return th[sp].reshape((N, H), order="F")

    def Xt_of(th):
        return X - W @ psi_of(th)

    def dpsi_WG(th):
        # d/dvec(Psi) of (W Psi gamma): column j*N + i holds W_i * gamma_j
        gm = th[sg]
        return (gm[None, :, None] * W[:, None, :]).reshape(T, H * N)

    blocks = [
        _Block.linear(
            pre * g0, y, np.hstack([W, np.zeros((T, p - N))]), _labels("pre:g0", d0)
        )
    ]
    for j in range(H):
        design = np.zeros((T, p))
        design[:, sp.start + j * N : sp.start + (j + 1) * N] = W
        blocks.append(
            _Block.linear(pre * g0, X[:, j], design, [f"pre:g0*x{j + 1}[{k + 1}]" for k in range(d0)])
        )

    def r_post(th):
        return y - W @ th[sa] - Xt_of(th) @ th[sg]

    def dr_post(th):
        out = np.zeros((T, p))
        out[:, sa] = -W
        out[:, sg] = -Xt_of(th)
        out[:, sp] = dpsi_WG(th)
        return out

    blocks.append(_Block(D * g1, r_post, dr_post, tuple(_labels("post:g1", g1.shape[1]))))
    att_design = np.zeros((T, p))
    att_design[:, sa] = W
    att_design[:, st] = 1.0
    blocks.append(_Block.linear(D, y, att_design, ["att:y-w'alpha-tau"]))

    def eff(th):
        return Xt_of(th) @ th[sg]

    def deff(th):
        out = np.zeros((T, p))
        out[:, sg] = Xt_of(th)
        out[:, sp] = -dpsi_WG(th)
        return out

    def r_att(th):
        return eff(th) - th[st][0]

    def dr_att(th):
        out = deff(th)
        out[:, st] = -1.0
        return out

    blocks.append(_Block(D, r_att, dr_att, ("att:x~'gamma-tau",)))
    _check_order(d0, N, "contaminated system needs d0z >= N to identify Psi")
    _check_order(g1.shape[1], H, "contaminated system needs at least H surrogate-side instruments")
    return MomentSystem(
        kind=EstimatorKind.PI_S_CONTAM.value,
        panel=panel,
        layout=layout,
        blocks=tuple(blocks),
        affine=False,
        instrument_spec={"g0": g.describe("Z0"), "g1": g.describe(name1)},
        effect=_Effect(eff, deff),
        initializer=lambda s: _init_contam(s, g0, g1),
    )


def _init_contam(sys: MomentSystem, g0: np.ndarray, g1: np.ndarray) -> np.ndarray:
    panel = sys.panel
    pre, post = panel.pre, panel.post
    W, X, y = panel.W, panel.X, panel.y
    psi = np.column_stack([_iv(g0[pre], W[pre], X[pre, j]) for j in range(panel.H)])
    alpha = _iv(g0[pre], W[pre], y[pre])
    Xt = X - W @ psi
    gamma = _iv(g1[post], Xt[post], (y - W @ alpha)[post])
    tau = float(np.mean((Xt @ gamma)[post]))
    return sys.layout.flatten(ParamVector(alpha=alpha, gamma=gamma, psi=psi, tau=tau))


# --------------------------------------------------------------------------- extensions


def _window_mask(panel: Panel, t1: int, t2: int) -> np.ndarray:
    if not (panel.T0 <= t1 < t2 <= panel.T + 1):
        raise DataError(f"window bounds need T0 <= t1 < t2 <= T+1, got ({t1}, {t2})")
    t = np.arange(1, panel.T + 1)
    mask = (t > t1) & (t < t2)
    if not mask.any():
        raise EmptyWindow(t1, t2)
    return mask


def _unique_name(layout: ParamLayout, base: str) -> str:
    if not layout.has(base):
        return base
    k = 2
    while layout.has(f"{base}_{k}"):
        k += 1
    return f"{base}_{k}"


def _extend(sys: MomentSystem, name: str) -> tuple[ParamLayout, tuple[_Block, ...], _Effect]:
    layout = sys.layout.extend(name)
    p_old, p_new = sys.p, layout.size
    blocks = tuple(b.padded(p_old, p_new) for b in sys.blocks)
    return layout, blocks, sys.effect.padded(p_old, p_new)


def add_window_att(sys: MomentSystem, t1: int, t2: int, name: str = "tau_window") -> MomentSystem:
    """Append ``(effect_t - tau_window) 1{t1 < t < t2}`` with a new parameter.

    Periods are 1-based; ``(T0, T+1)`` reproduces the full post-period ATT.
    """
    mask = _window_mask(sys.panel, t1, t2).astype(float)[:, None]
    name = _unique_name(sys.layout, name)
    layout, blocks, effect = _extend(sys, name)
    k = layout.size - 1

    def residual(th):
        return effect.value(th) - th[k]

    def gradient(th):
        out = effect.gradient(th).copy()
        out[:, k] = -1.0
        return out

    row = _Block(mask, residual, gradient, (f"{name}:({t1},{t2})",))
    base_init = sys.initial_theta

    def init(s: MomentSystem) -> np.ndarray:
        th = base_init()
        full = np.append(th, 0.0)
        sel = mask[:, 0] > 0
        full[k] = float(np.mean(effect.value(full)[sel]))
        return full

    return replace(
        sys,
        layout=layout,
        blocks=blocks + (row,),
        effect=effect,
        initializer=init,
        instrument_spec={**sys.instrument_spec, name: f"window ({t1},{t2})"},
    )


def synthetic_control_series(sys: MomentSystem, theta: np.ndarray) -> np.ndarray:
    """``W_t' alpha`` for every period."""
    a = np.asarray(theta)[sys.layout.slice("alpha")]
    return sys.panel.W @ a


def add_lift(sys: MomentSystem, t1: int, t2: int, name: str = "tau_lift") -> MomentSystem:
    """Append the percentage-lift row ``(effect_t - W_t'alpha * tau_lift) 1{t1 < t < t2}``."""
    sel = _window_mask(sys.panel, t1, t2)
    mask = sel.astype(float)[:, None]
    name = _unique_name(sys.layout, name)
    layout, blocks, effect = _extend(sys, name)
    k = layout.size - 1
    sa = layout.slice("alpha")
    W = sys.panel.W

    def residual(th):
        return effect.value(th) - (W @ th[sa]) * th[k]

    def gradient(th):
        out = effect.gradient(th).copy()
        out[:, sa] -= W * th[k]
        out[:, k] = -(W @ th[sa])
        return out

    row = _Block(mask, residual, gradient, (f"{name}:({t1},{t2})",))
    base_init = sys.initial_theta

    def init(s: MomentSystem) -> np.ndarray:
        full = np.append(base_init(), 0.0)
        baseline = float(np.mean((W @ full[sa])[sel]))
        scale = float(np.mean(np.abs(W[sel]))) + 1.0
        if abs(baseline) < 1e-10 * scale:
            raise DegenerateBaseline(baseline)
        full[k] = float(np.mean(effect.value(full)[sel])) / baseline
        return full

    return replace(
        sys,
        layout=layout,
        blocks=blocks + (row,),
        effect=effect,
        affine=False,
        initializer=init,
        instrument_spec={**sys.instrument_spec, name: f"lift ({t1},{t2})"},
    )


_BUILDERS = {
    EstimatorKind.SC: lambda panel, g: build_sc(panel),
    EstimatorKind.SC_S: lambda panel, g: build_sc_s(panel),
    EstimatorKind.PI: build_pi,
    EstimatorKind.PI_P: build_pi_p,
    EstimatorKind.PI_S: build_pi_s,
    EstimatorKind.PI_S_COV: build_pi_s_cov,
    EstimatorKind.PI_S_CONTAM: build_pi_s_contam,
}


def build_system(
    kind: "EstimatorKind | str",
    panel: Panel,
    g: InstrumentChoice = InstrumentChoice(),
    windows: Sequence[tuple[int, int]] = (),
    lifts: Sequence[tuple[int, int]] = (),
) -> MomentSystem:
    """Build the moment system for ``kind``, optionally with window-ATT and lift rows."""
    sys = _BUILDERS[EstimatorKind.parse(kind)](panel, g)
    for t1, t2 in windows:
        sys = add_window_att(sys, t1, t2)
    for t1, t2 in lifts:
        sys = add_lift(sys, t1, t2)
    return sys
