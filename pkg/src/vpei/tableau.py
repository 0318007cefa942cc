"""Butcher tableaux and the exponential coefficients derived from them."""

from collections.abc import Callable
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Final

import numpy as np
import sympy
from numpy.typing import ArrayLike, NDArray

from .errors import DimensionError, MatrixRangeError, UnsupportedError, UsageError
from .matfun import BlockMatrix, Matrix, as_square, expm, hadamard_kron

ORDER_TOL: Final[float] = 1e-13
SYMPLECTIC_TOL: Final[float] = 1e-14


@dataclass(frozen=True, eq=False)
class ButcherTableau:
    """The coefficients (c, b, A) of an s-stage Runge-Kutta method.

    Attributes:
      c: Nodes, shape (s,).
      b: Weights, shape (s,).
      A: Stage coefficients, shape (s, s).
      name: Display name.
    """

    c: NDArray[np.float64]
    b: NDArray[np.float64]
    A: NDArray[np.float64]
    name: str = ""

    def __post_init__(self):
        c = np.atleast_1d(np.asarray(self.c, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        s = c.size
        if s < 1 or c.shape != (s,) or b.shape != (s,) or A.shape != (s, s):
            raise DimensionError(
                f"Inconsistent tableau shapes c{c.shape}, b{b.shape}, A{A.shape}"
            )
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(b)) and np.all(np.isfinite(A))):
            raise MatrixRangeError("Tableau has non-finite entries")
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "A", A)

    @property
    def s(self) -> int:
        return self.c.size

    @cached_property
    def symplectic(self) -> bool:
        return is_symplectic(self)

    @cached_property
    def equal_nodes(self) -> bool:
        return bool(np.ptp(self.c) <= 1e-15)

    @cached_property
    def nonzero_weights(self) -> bool:
        return bool(np.all(self.b != 0.0))

    @property
    def is_ssei(self) -> bool:
        """Whether the tableau passes the SSEI gate: symplectic, every b_j ≠ 0."""
        return self.symplectic and self.nonzero_weights

    @property
    def explicit(self) -> bool:
        return not np.triu(self.A).any()

    def __str__(self) -> str:
        rows = [f"{self.s}"]
        for i in range(self.s):
            coefficients = " ".join(f"{a:.17g}" for a in self.A[i])
            rows.append(f"{self.c[i]:.17g} | {coefficients}")
        rows.append(" ".join(f"{b:.17g}" for b in self.b))
        return "\n".join(rows)


def _evaluate(expr: str | sympy.Expr) -> float:
    try:
        value = sympy.sympify(expr, rational=True)
    except (sympy.SympifyError, TypeError, SyntaxError) as error:
        raise UsageError(f"Cannot read tableau entry {expr!r}") from error
    if not getattr(value, "is_number", False):
        raise UsageError(f"Tableau entry {expr!r} is not a number")
    return float(sympy.N(value, 30))


def _from_exact(
    c: list[str], b: list[str], A: list[list[str]], name: str
) -> ButcherTableau:
    return ButcherTableau(
        c=np.array([_evaluate(x) for x in c]),
        b=np.array([_evaluate(x) for x in b]),
        A=np.array([[_evaluate(x) for x in row] for row in A]),
        name=name,
    )


def gauss_legendre(s: int) -> ButcherTableau:
    """The s-stage Gauss-Legendre collocation method, of order 2s.

    Raises:
      UnsupportedError: If ``s`` is not 1 or 2.
    """
    match s:
        case 1:
            return _from_exact(["1/2"], ["1"], [["1/2"]], "midpoint")
        case 2:
            return _from_exact(
                ["1/2 - sqrt(3)/6", "1/2 + sqrt(3)/6"],
                ["1/2", "1/2"],
                [["1/4", "1/4 - sqrt(3)/6"], ["1/4 + sqrt(3)/6", "1/4"]],
                "gauss2",
            )
    raise UnsupportedError(f"Gauss-Legendre tableau with {s} stages is not available")


def equal_node_two_stage() -> ButcherTableau:
    """A symplectic two-stage tableau with c₁ = c₂ = 1/2."""
    return _from_exact(
        ["1/2", "1/2"], ["1/2", "1/2"], [["1/4", "1/4"], ["1/4", "1/4"]], "equal-node2"
    )


def explicit_euler() -> ButcherTableau:
    return ButcherTableau(c=[0.0], b=[1.0], A=[[0.0]], name="explicit-euler")


def symplecticity_residual(t: ButcherTableau) -> float:
    """‖BA + AᵀB − bbᵀ‖_F with B = diag(b)."""
    BA = t.b[:, None] * t.A
    return float(np.linalg.norm(BA + BA.T - np.outer(t.b, t.b)))


def is_symplectic(t: ButcherTableau) -> bool:
    return symplecticity_residual(t) <= SYMPLECTIC_TOL * (1.0 + t.b @ t.b)


def order_check(t: ButcherTableau, p: int) -> bool:
    """Check the rooted-tree order conditions up to order ``p``.

    Raises:
      UnsupportedError: If ``p`` is outside 1..4.
    """
    if not 1 <= p <= 4:
        raise UnsupportedError(f"Order conditions are implemented for p ≤ 4, got {p}")
    b, c, A = t.b, t.c, t.A
    conditions = [
        (1, b.sum(), 1.0),
        (2, b @ c, 1 / 2),
        (3, b @ c**2, 1 / 3),
        (3, b @ A @ c, 1 / 6),
        (4, b @ c**3, 1 / 4),
        (4, (b * c) @ A @ c, 1 / 8),
        (4, b @ A @ c**2, 1 / 12),
        (4, b @ A @ A @ c, 1 / 24),
    ]
    return all(abs(value - exact) <= ORDER_TOL for order, value, exact in conditions if order <= p)


def parse_tableau(text: str, name: str = "custom") -> ButcherTableau:
    """Read a tableau from its plain-text form.

    The first line holds s, the next s lines hold "c_i | a_i1 ... a_is" and
    the last line holds "b_1 ... b_s". Entries may be exact expressions such
    as ``1/4`` or ``sqrt(3)/6``. Blank lines and lines starting with ``#`` are
    skipped.

    Raises:
      UsageError: If the text is malformed.
    """
    lines = [
        line.strip()
        for line in text.splitlines()
        if line.strip() and not line.lstrip().startswith("#")
    ]
    try:
        s = int(lines[0])
    except (IndexError, ValueError) as error:
        raise UsageError("Tableau must start with the stage count") from error
    if s < 1 or len(lines) != s + 2:
        raise UsageError(f"Expected {s + 2} tableau lines, got {len(lines)}")
    c, A = [], []
    for line in lines[1 : s + 1]:
        node, sep, row = line.partition("|")
        if not sep or len(row.split()) != s:
            raise UsageError(f"Malformed tableau row {line!r}")
        c.append(node.strip())
        A.append(row.split())
    b = lines[s + 1].split()
    if len(b) != s:
        raise UsageError(f"Expected {s} weights, got {len(b)}")
    return _from_exact(c, b, A, name)


def load_tableau(path: str | Path) -> ButcherTableau:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as error:
        raise UsageError(f"Cannot read tableau file {path}") from error
    return parse_tableau(text, name=path.stem)


TABLEAUX: Final[dict[str, Callable[[], ButcherTableau]]] = {
    "midpoint": lambda: gauss_legendre(1),
    "gauss2": lambda: gauss_legendre(2),
    "equal-node2": equal_node_two_stage,
}


def get_tableau(name: str) -> ButcherTableau:
    try:
        return TABLEAUX[name]()
    except KeyError:
        raise UsageError(f"Unknown tableau {name!r}") from None


@dataclass(frozen=True, eq=False)
class ExpCoefficients:
    """Matrix-valued coefficients of an exponential integrator at step h.

    Attributes:
      abar: ā_ij = a_ij·e^{(c_i−c_j)hK} as an s×s block grid.
      bbar: b̄_i = b_i·e^{(1−c_i)hK}, shape (s, n, n).
      node_exponentials: e^{c_i hK}, shape (s, n, n).
      step_exponential: e^{hK}.
      differences: The grid E(hK) of e^{(c_i−c_j)hK} blocks.
    """

    abar: BlockMatrix
    bbar: NDArray[np.float64]
    node_exponentials: NDArray[np.float64]
    step_exponential: Matrix
    differences: BlockMatrix

    @property
    def s(self) -> int:
        return self.abar.block_rows

    @property
    def n(self) -> int:
        return self.abar.block_dim


class _ExponentialCache:
    """Memoizes e^{xhK} by the scalar x."""

    def __init__(self, h: float, K: Matrix):
        self._hK = h * K
        self._values: dict[float, Matrix] = {}

    def __call__(self, x: float) -> Matrix:
        x = float(x)
        if x not in self._values:
            self._values[x] = expm(x * self._hK)
        return self._values[x]


def _grid(exp: _ExponentialCache, c: NDArray[np.float64], n: int) -> BlockMatrix:
    s = c.size
    blocks = np.empty((s, s, n, n))
    for i in range(s):
        for j in range(s):
            blocks[i, j] = exp(c[i] - c[j])
    return BlockMatrix(blocks)


def exponential_grid(h: float, K: ArrayLike, c: ArrayLike) -> BlockMatrix:
    """The block grid of e^{(c_i−c_j)hK}."""
    K = as_square(K, "K")
    c = np.atleast_1d(np.asarray(c, dtype=float))
    return _grid(_ExponentialCache(h, K), c, K.shape[0])


def build_exp_coefficients(t: ButcherTableau, h: float, K: ArrayLike) -> ExpCoefficients:
    """Build the SSEI coefficients of ``t`` for step ``h`` and linear part ``K``.

    Args:
      t: The underlying Runge-Kutta tableau.
      h: The step size.
      K: The linear part of the vector field.

    Returns:
      The exponential coefficients. At K = 0 every block is the plain
      tableau entry times the identity.

    Raises:
      DimensionError: If K is not square.
      MatrixRangeError: If an exponential cannot be evaluated.
    """
    K = as_square(K, "K")
    exp = _ExponentialCache(h, K)
    s = t.s
    E = _grid(exp, t.c, K.shape[0])
    return ExpCoefficients(
        abar=hadamard_kron(t.A, E),
        bbar=np.array([t.b[i] * exp(1.0 - t.c[i]) for i in range(s)]),
        node_exponentials=np.array([exp(t.c[i]) for i in range(s)]),
        step_exponential=exp(1.0),
        differences=E,
    )
