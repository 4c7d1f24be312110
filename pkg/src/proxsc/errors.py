"""Exception hierarchy.

Data problems (bad files, bad panels, bad configs) derive from ``DataError``;
numerical breakdowns during estimation derive from ``NumericalError``. The CLI
maps the two families onto distinct exit codes.
"""

from __future__ import annotations


class ProxscError(Exception):
    """Base class for all package errors."""


class DataError(ProxscError):
    """Input data violates a shape or content contract."""


class MissingColumn(DataError):
    def __init__(self, column: str):
        self.column = column
        super().__init__(f"missing required column {column!r}")


class NonFiniteValue(DataError):
    def __init__(self, row: int, col: str):
        self.row = row
        self.col = col
        super().__init__(f"non-finite value at row {row}, column {col!r}")


class BadT0(DataError):
    def __init__(self, T0: int, T: int):
        self.T0 = T0
        self.T = T
        super().__init__(f"treatment date must satisfy 1 < T0 < T, got T0={T0}, T={T}")


class RowCountMismatch(DataError):
    def __init__(self, name: str, rows: int, T: int):
        self.name = name
        self.rows = rows
        self.T = T
        super().__init__(f"{name} has {rows} rows, expected T={T}")


class MissingProxies(DataError):
    pass


class MissingCovariates(DataError):
    pass


class BadConfig(DataError):
    pass


class BadPhi(BadConfig):
    def __init__(self, phi: float):
        self.phi = phi
        super().__init__(f"AR(1) coefficient must satisfy |phi| < 1, got {phi}")


class EmptyWindow(DataError):
    def __init__(self, t1: int, t2: int):
        self.t1 = t1
        self.t2 = t2
        super().__init__(f"window ({t1}, {t2}) contains no periods")


class UnderIdentified(DataError):
    def __init__(self, q: int, p: int, detail: str = ""):
        self.q = q
        self.p = p
        msg = f"{q} moments cannot identify {p} parameters"
        super().__init__(f"{msg}: {detail}" if detail else msg)


class NumericalError(ProxscError):
    """Estimation failed for numerical reasons."""


class SingularSystem(NumericalError):
    def __init__(self, message: str, condition_number: float = float("inf")):
        self.condition_number = condition_number
        super().__init__(f"{message} (condition number {condition_number:.3e})")


class NoConvergence(NumericalError):
    def __init__(self, grad_norm: float, iterations: int):
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(
            f"Gauss-Newton did not converge after {iterations} iterations "
            f"(gradient norm {grad_norm:.3e})"
        )


class NonPsdWeight(NumericalError):
    pass


class DegenerateBaseline(NumericalError):
    def __init__(self, baseline: float):
        self.baseline = baseline
        super().__init__(f"synthetic-control baseline mean is ~0 ({baseline:.3e}); lift undefined")


class NotOveridentified(ProxscError):
    def __init__(self, df: int):
        self.df = df
        super().__init__(f"J-test needs more moments than parameters (df={df})")


class InvalidWeighting(ProxscError):
    pass
