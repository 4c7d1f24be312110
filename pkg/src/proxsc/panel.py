"""Observed panel data: container, validation, CSV round-trip.

The CSV layout is wide, one row per period::

    t, y, w1..wN, x1..xH, z0_1..z0_d0z, z1_1..z1_d1z, [cy_1..], [cw_<i>_<k>..], [cx_<j>_<k>..]

``t`` is 1-based on disk; arrays are 0-based in memory. The treatment date
``T0`` is not stored in the file and must be supplied by the caller.
"""

from __future__ import annotations

import csv
import enum
import math
import re
from dataclasses import dataclass
from os import PathLike
from typing import Optional

import numpy as np

from .errors import BadT0, DataError, MissingColumn, NonFiniteValue, RowCountMismatch

__all__ = [
    "EstimatorKind",
    "Panel",
    "PanelSchema",
    "PanelView",
    "load_panel",
    "save_panel",
    "split_pre_post",
]


class EstimatorKind(str, enum.Enum):
    SC = "sc"
    SC_S = "sc-s"
    PI = "pi"
    PI_P = "pi-p"
    PI_S = "pi-s"
    PI_S_COV = "pi-s-cov"
    PI_S_CONTAM = "pi-s-contam"

    @property
    def label(self) -> str:
        return self.name.replace("_", "-")

    @property
    def uses_surrogates(self) -> bool:
        return self not in (EstimatorKind.SC, EstimatorKind.PI)

    @classmethod
    def parse(cls, value: "str | EstimatorKind") -> "EstimatorKind":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"unknown estimator {value!r}; choose from {[k.value for k in cls]}")


def _readonly(a: Optional[np.ndarray], ndim: int, name: str) -> Optional[np.ndarray]:
    if a is None:
        return None
    arr = np.array(a, dtype=float)
    if arr.ndim == ndim - 1 and ndim >= 2:
        arr = arr.reshape(arr.shape + (1,))
    if arr.ndim != ndim:
        raise DataError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Panel:
    """One treated unit observed over ``T`` periods with donors, surrogates and proxies.

    Attributes
    ----------
    y : (T,) target outcome
    W : (T, N) donor outcomes
    X : (T, H) surrogates
    Z0 : (T, d0z) donor-side proxies
    Z1 : (T, d1z) surrogate-side proxies
    T0 : last pre-intervention period (1-based, so periods ``T0+1..T`` are treated)
    Cy, Cw, Cx : optional covariates, shapes (T, p_y), (T, N, p_w), (T, H, p_x)
    """

    y: np.ndarray
    W: np.ndarray
    X: np.ndarray
    Z0: np.ndarray
    Z1: np.ndarray
    T0: int
    Cy: Optional[np.ndarray] = None
    Cw: Optional[np.ndarray] = None
    Cx: Optional[np.ndarray] = None

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        y.setflags(write=False)
        object.__setattr__(self, "y", y)
        for name in ("W", "X", "Z0", "Z1"):
            object.__setattr__(self, name, _readonly(getattr(self, name), 2, name))
        object.__setattr__(self, "Cy", _readonly(self.Cy, 2, "Cy"))
        object.__setattr__(self, "Cw", _readonly(self.Cw, 3, "Cw"))
        object.__setattr__(self, "Cx", _readonly(self.Cx, 3, "Cx"))
        object.__setattr__(self, "T0", int(self.T0))
        self._validate()

    def _validate(self) -> None:
        T = self.T
        if not 1 < self.T0 < T:
            raise BadT0(self.T0, T)
        for name in ("y", "W", "X", "Z0", "Z1", "Cy", "Cw", "Cx"):
            a = getattr(self, name)
            if a is None:
                continue
            if a.shape[0] != T:
                raise RowCountMismatch(name, a.shape[0], T)
            bad = np.argwhere(~np.isfinite(a.reshape(T, -1)))
            if bad.size:
                raise NonFiniteValue(int(bad[0, 0]) + 1, name)
        if self.N < 1:
            raise DataError("panel needs at least one donor")
        if self.H < 1:
            raise DataError("panel needs at least one surrogate")
        if self.Z0.shape[1] < 1:
            raise DataError("panel needs at least one donor-side proxy")
        if self.Cw is not None and self.Cw.shape[1] != self.N:
            raise DataError(f"Cw covers {self.Cw.shape[1]} units, expected N={self.N}")
        if self.Cx is not None and self.Cx.shape[1] != self.H:
            raise DataError(f"Cx covers {self.Cx.shape[1]} units, expected H={self.H}")

    @property
    def T(self) -> int:
        return self.y.shape[0]

    @property
    def N(self) -> int:
        return self.W.shape[1]

    @property
    def H(self) -> int:
        return self.X.shape[1]

    @property
    def d0z(self) -> int:
        return self.Z0.shape[1]

    @property
    def d1z(self) -> int:
        return self.Z1.shape[1]

    @property
    def has_covariates(self) -> bool:
        return self.Cy is not None and self.Cw is not None and self.Cx is not None

    @property
    def post(self) -> np.ndarray:
        """Boolean mask of treated periods, ``t > T0``."""
        return np.arange(1, self.T + 1) > self.T0

    @property
    def pre(self) -> np.ndarray:
        return ~self.post

    @property
    def schema(self) -> "PanelSchema":
        return PanelSchema(
            N=self.N,
            H=self.H,
            d0z=self.d0z,
            d1z=self.d1z,
            p_y=0 if self.Cy is None else self.Cy.shape[1],
            p_w=0 if self.Cw is None else self.Cw.shape[2],
            p_x=0 if self.Cx is None else self.Cx.shape[2],
        )

    def equals(self, other: "Panel") -> bool:
        """Exact (bitwise-value) equality of every field."""
        if not isinstance(other, Panel) or self.T0 != other.T0:
            return False
        for name in ("y", "W", "X", "Z0", "Z1", "Cy", "Cw", "Cx"):
            a, b = getattr(self, name), getattr(other, name)
            if (a is None) != (b is None):
                return False
            if a is not None and (a.shape != b.shape or not np.array_equal(a, b)):
                return False
        return True

    def with_T0(self, T0: int) -> "Panel":
        return Panel(self.y, self.W, self.X, self.Z0, self.Z1, T0, self.Cy, self.Cw, self.Cx)


@dataclass(frozen=True, eq=False)
class PanelView:
    """Read-only window on a contiguous block of periods of a :class:`Panel`."""

    periods: np.ndarray  # 1-based period labels
    y: np.ndarray
    W: np.ndarray
    X: np.ndarray
    Z0: np.ndarray
    Z1: np.ndarray
    Cy: Optional[np.ndarray] = None
    Cw: Optional[np.ndarray] = None
    Cx: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.periods)


def split_pre_post(panel: Panel) -> tuple[PanelView, PanelView]:
    """Split into periods ``1..T0`` and ``T0+1..T``; arrays are views, not copies."""

    def view(sl: slice) -> PanelView:
        def cut(a):
            return None if a is None else a[sl]

        return PanelView(
            periods=np.arange(1, panel.T + 1)[sl],
            y=panel.y[sl],
            W=panel.W[sl],
            X=panel.X[sl],
            Z0=panel.Z0[sl],
            Z1=panel.Z1[sl],
            Cy=cut(panel.Cy),
            Cw=cut(panel.Cw),
            Cx=cut(panel.Cx),
        )

    return view(slice(0, panel.T0)), view(slice(panel.T0, panel.T))


@dataclass(frozen=True)
class PanelSchema:
    """Column counts of the wide CSV layout. Zero covariate width means absent."""

    N: int
    H: int
    d0z: int
    d1z: int
    p_y: int = 0
    p_w: int = 0
    p_x: int = 0

    def columns(self) -> list[str]:
        cols = ["t", "y"]
        cols += [f"w{i}" for i in range(1, self.N + 1)]
        cols += [f"x{j}" for j in range(1, self.H + 1)]
        cols += [f"z0_{k}" for k in range(1, self.d0z + 1)]
        cols += [f"z1_{k}" for k in range(1, self.d1z + 1)]
        cols += [f"cy_{k}" for k in range(1, self.p_y + 1)]
        if self.p_w:
            cols += [f"cw_{i}_{k}" for i in range(1, self.N + 1) for k in range(1, self.p_w + 1)]
        if self.p_x:
            cols += [f"cx_{j}_{k}" for j in range(1, self.H + 1) for k in range(1, self.p_x + 1)]
        return cols

    @classmethod
    def from_header(cls, header: list[str]) -> "PanelSchema":
        names = set(header)
        for required in ("t", "y"):
            if required not in names:
                raise MissingColumn(required)

        def count(prefix: str) -> int:
            pat = re.compile(rf"^{re.escape(prefix)}(\d+)$")
            idx = [int(m.group(1)) for c in header if (m := pat.match(c))]
            return max(idx, default=0)

        def count2(prefix: str) -> tuple[int, int]:
            pat = re.compile(rf"^{re.escape(prefix)}(\d+)_(\d+)$")
            pairs = [(int(m.group(1)), int(m.group(2))) for c in header if (m := pat.match(c))]
            if not pairs:
                return 0, 0
            return max(p[0] for p in pairs), max(p[1] for p in pairs)

        N, H = count("w"), count("x")
        if N == 0:
            raise MissingColumn("w1")
        if H == 0:
            raise MissingColumn("x1")
        d0z, d1z = count("z0_"), count("z1_")
        if d0z == 0:
            raise MissingColumn("z0_1")
        _, p_w = count2("cw_")
        _, p_x = count2("cx_")
        return cls(N=N, H=H, d0z=d0z, d1z=d1z, p_y=count("cy_"), p_w=p_w, p_x=p_x)


def save_panel(panel: Panel, path: "str | PathLike[str]") -> None:
    """Write ``panel`` as wide CSV with 17 significant digits (exact round-trip)."""
    schema = panel.schema
    T = panel.T
    blocks = [
        np.arange(1, T + 1, dtype=float)[:, None],
        panel.y[:, None],
        panel.W,
        panel.X,
        panel.Z0,
        panel.Z1,
    ]
    if panel.Cy is not None:
        blocks.append(panel.Cy)
    if panel.Cw is not None:
        blocks.append(panel.Cw.reshape(T, -1))
    if panel.Cx is not None:
        blocks.append(panel.Cx.reshape(T, -1))
    data = np.hstack(blocks)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(schema.columns())
        for t, row in enumerate(data, start=1):
            writer.writerow([str(t)] + [format(v, ".17g") for v in row[1:]])


def load_panel(
    path: "str | PathLike[str]", T0: int, schema: Optional[PanelSchema] = None
) -> Panel:
    """Read a wide CSV panel.

    Parameters
    ----------
    path : CSV file
    T0 : last pre-intervention period (1-based)
    schema : expected layout; inferred from the header when omitted. Extra
        columns beyond the schema are ignored.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        rows = [r for r in reader if r and any(c.strip() for c in r)]

    if schema is None:
        schema = PanelSchema.from_header(header)
    position = {name: i for i, name in enumerate(header)}
    columns = schema.columns()
    for col in columns:
        if col not in position:
            raise MissingColumn(col)
    T = len(rows)
    if T == 0:
        raise RowCountMismatch("file", 0, 1)

    values = np.empty((T, len(columns)))
    for r, row in enumerate(rows, start=1):
        if len(row) != len(header):
            raise RowCountMismatch(f"row {r} fields", len(row), len(header))
        for c, col in enumerate(columns):
            raw = row[position[col]].strip()
            try:
                v = float(raw)
            except ValueError:
                raise NonFiniteValue(r, col) from None
            if not math.isfinite(v):
                raise NonFiniteValue(r, col)
            values[r - 1, c] = v

    t = values[:, 0]
    if not np.array_equal(t, np.arange(1, T + 1)):
        raise DataError("column 't' must run 1..T in order")
    if not 1 < T0 < T:
        raise BadT0(T0, T)

    def take(prefix_cols: list[str]) -> np.ndarray:
        idx = [columns.index(c) for c in prefix_cols]
        return values[:, idx]

    s = schema
    W = take([f"w{i}" for i in range(1, s.N + 1)])
    X = take([f"x{j}" for j in range(1, s.H + 1)])
    Z0 = take([f"z0_{k}" for k in range(1, s.d0z + 1)])
    Z1 = take([f"z1_{k}" for k in range(1, s.d1z + 1)]) if s.d1z else np.empty((T, 0))
    Cy = take([f"cy_{k}" for k in range(1, s.p_y + 1)]) if s.p_y else None
    Cw = (
        take([f"cw_{i}_{k}" for i in range(1, s.N + 1) for k in range(1, s.p_w + 1)]).reshape(
            T, s.N, s.p_w
        )
        if s.p_w
        else None
    )
    Cx = (
        take([f"cx_{j}_{k}" for j in range(1, s.H + 1) for k in range(1, s.p_x + 1)]).reshape(
            T, s.H, s.p_x
        )
        if s.p_x
        else None
    )
    return Panel(y=values[:, 1], W=W, X=X, Z0=Z0, Z1=Z1, T0=T0, Cy=Cy, Cw=Cw, Cx=Cx)
