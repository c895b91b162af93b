"""B-spline bases, design matrices and derivative roughness penalties."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .data import LongitudinalDataset
from .errors import ConfigError, DomainError


@dataclass(frozen=True)
class BasisSpec:
    """A clamped B-spline basis on [a, b] with an integrated derivative penalty.

    order is the spline order r (cubic = 4, number of basis functions is
    interior_knots + order).  penalty_order q penalizes the integrated
    squared q-th derivative and must satisfy 1 <= q <= r - 1.
    """

    order: int = 4
    interior_knots: int = 10
    domain: tuple[float, float] = (-2.0, 2.0)
    penalty_order: int = 2
    # explicit interior knot positions (e.g. quantile placement); None means
    # equally spaced, which is the default everywhere.
    interior_positions: tuple[float, ...] | None = None

    def __post_init__(self):
        a, b = self.domain
        if not a < b:
            raise ConfigError(f"domain must satisfy a < b, got [{a}, {b}]")
        if self.order < 1:
            raise ConfigError(f"spline order must be >= 1, got {self.order}")
        if self.interior_knots < 0:
            raise ConfigError("interior_knots must be >= 0")
        if self.penalty_order < 1:
            raise ConfigError(f"penalty order must be >= 1, got {self.penalty_order}")
        if self.interior_positions is not None:
            pos = np.asarray(self.interior_positions, dtype=float)
            if len(pos) != self.interior_knots:
                raise ConfigError("interior_positions length must equal interior_knots")
            if np.any(pos <= a) or np.any(pos >= b) or np.any(np.diff(pos) < 0):
                raise ConfigError("interior_positions must be nondecreasing inside (a, b)")

    @property
    def n_basis(self) -> int:
        return self.interior_knots + self.order


@dataclass(frozen=True)
class TermSpec:
    """One model term: a parametric column, an additive smooth, or a
    varying coefficient (basis in time scaled by a modifier covariate)."""

    kind: str  # "linear" | "smooth" | "vc"
    covariate: str | None = None  # covariate for linear/smooth, modifier for vc (None = intercept curve)
    basis: BasisSpec | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in ("linear", "smooth", "vc"):
            raise ConfigError(f"unknown term kind {self.kind!r}")
        if self.kind == "linear":
            if self.covariate is None:
                raise ConfigError("linear term requires a covariate")
        if self.kind == "smooth":
            if self.covariate is None or self.basis is None:
                raise ConfigError("smooth term requires a covariate and a basis")
        if self.kind == "vc" and self.basis is None:
            raise ConfigError("varying-coefficient term requires a basis over time")

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        if self.kind == "vc":
            return f"vc({self.covariate or '1'})"
        return f"{self.kind}({self.covariate})"


@dataclass
class TermColumns:
    """Placement of one term inside the stacked design: its column slice plus
    the centering transform used for identifiability (None when uncentered)."""

    term: TermSpec
    start: int
    stop: int
    center_means: np.ndarray | None = None  # column means subtracted pre-contrast
    contrast: np.ndarray | None = None  # orthonormal basis of the sum-to-zero subspace
    penalty_index: int | None = None  # position in the lambda vector, None if unpenalized

    @property
    def columns(self) -> slice:
        return slice(self.start, self.stop)


@dataclass
class DesignAssembly:
    """Stacked N x p design with per-term column ranges and zero-padded
    p x p penalty matrices, one per penalized term."""

    X: np.ndarray
    terms: list[TermColumns]
    penalties: list[np.ndarray] = field(default_factory=list)
    row_sizes: list[int] = field(default_factory=list)  # n_i per subject, subject-major rows

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def n_penalties(self) -> int:
        return len(self.penalties)

    def subject_rows(self, i: int) -> slice:
        start = int(np.sum(self.row_sizes[:i]))
        return slice(start, start + self.row_sizes[i])


def make_knots(spec: BasisSpec) -> np.ndarray:
    """Knot vector of length K_n + 2r: boundaries repeated r times, interior
    knots equally spaced unless explicit positions were given."""
    a, b = spec.domain
    if spec.interior_positions is not None:
        interior = np.asarray(spec.interior_positions, dtype=float)
    else:
        interior = a + (b - a) * np.arange(1, spec.interior_knots + 1) / (spec.interior_knots + 1)
    return np.concatenate([np.full(spec.order, a), interior, np.full(spec.order, b)])


def _basis_matrix_raw(knots: np.ndarray, order: int, x: np.ndarray) -> np.ndarray:
    """Cox-de Boor recursion on an explicit knot vector, vectorized over x.

    Zero-width intervals contribute nothing (the 0/0 := 0 convention) and the
    right endpoint is treated as belonging to the last nonempty interval.
    """
    t = knots
    n_int = len(t) - 1
    B = np.zeros((x.size, n_int))
    for j in range(n_int):
        if t[j + 1] > t[j]:
            B[:, j] = (x >= t[j]) & (x < t[j + 1])
    # right endpoint: last nonempty interval owns x == t[-1]
    nonempty = np.nonzero(np.diff(t) > 0)[0]
    if nonempty.size:
        B[x == t[-1], nonempty[-1]] = 1.0
    for k in range(2, order + 1):
        nb = len(t) - k
        Bk = np.zeros((x.size, nb))
        for j in range(nb):
            d1 = t[j + k - 1] - t[j]
            if d1 > 0:
                Bk[:, j] += (x - t[j]) / d1 * B[:, j]
            d2 = t[j + k] - t[j + 1]
            if d2 > 0:
                Bk[:, j] += (t[j + k] - x) / d2 * B[:, j + 1]
        B = Bk
    return B


def basis_matrix(spec: BasisSpec, x) -> np.ndarray:
    """Evaluate all K_n + r basis functions at each point of x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    a, b = spec.domain
    if np.any(x < a) or np.any(x > b):
        bad = x[(x < a) | (x > b)][0]
        raise DomainError(f"value {bad} outside basis domain [{a}, {b}]")
    return _basis_matrix_raw(make_knots(spec), spec.order, x)


def eval_basis(spec: BasisSpec, x: float) -> np.ndarray:
    """Basis function values at a single point."""
    return basis_matrix(spec, [x])[0]


def _difference_operator(spec: BasisSpec) -> tuple[np.ndarray, np.ndarray]:
    """Weighted q-th order difference operator mapping order-r coefficients to
    the coefficients of the q-th derivative in the order-(r-q) basis.

    Returns (Delta_q, reduced knot vector)."""
    t = make_knots(spec)
    r, q = spec.order, spec.penalty_order
    if q >= r:
        raise ConfigError(
            f"penalty order {q} invalid for spline order {r}; need q <= r - 1"
        )
    D = np.eye(spec.n_basis)
    for step in range(q):
        k = r - step  # current order before differentiation
        nb_in = len(t) - k
        step_mat = np.zeros((nb_in - 1, nb_in))
        for i in range(nb_in - 1):
            w = (k - 1) / (t[i + k] - t[i + 1])
            step_mat[i, i] = -w
            step_mat[i, i + 1] = w
        D = step_mat @ D
        t = t[1:-1]
    return D, t


def _gram_matrix(knots: np.ndarray, order: int) -> np.ndarray:
    """Gram matrix of the basis on an explicit knot vector: entries are the
    integrals of pairwise basis products, Gauss-Legendre per knot interval
    with enough nodes to be exact for the piecewise-polynomial integrand."""
    n_b = len(knots) - order
    nodes, weights = np.polynomial.legendre.leggauss(max(order, 1))
    R = np.zeros((n_b, n_b))
    breaks = np.unique(knots)
    for lo, hi in zip(breaks[:-1], breaks[1:]):
        mid, half = (hi + lo) / 2.0, (hi - lo) / 2.0
        xs = mid + half * nodes
        Bv = _basis_matrix_raw(knots, order, xs)
        R += half * (Bv * weights[:, None]).T @ Bv
    return R


def penalty_matrix(spec: BasisSpec) -> np.ndarray:
    """Penalty S with beta' S beta = integral of the squared q-th derivative.

    S = Delta_q' R Delta_q where R is the Gram matrix of the order-(r-q)
    basis on the reduced knot vector.
    """
    D, t_red = _difference_operator(spec)
    R = _gram_matrix(t_red, spec.order - spec.penalty_order)
    S = D.T @ R @ D
    return (S + S.T) / 2.0


def sum_to_zero_contrast(p: int) -> np.ndarray:
    """Fixed orthonormal basis of the subspace orthogonal to the ones vector."""
    return scipy.linalg.null_space(np.ones((1, p)))


def assemble_design(dataset: LongitudinalDataset, terms: list[TermSpec]) -> DesignAssembly:
    """Build the stacked design matrix, one block per term, subject-major rows.

    Additive models get a global intercept column and every smooth block is
    sum-to-zero centered (column means subtracted, one column dropped through
    an orthonormal contrast) so the intercept stays identifiable.
    Varying-coefficient blocks are the time basis scaled rowwise by the
    modifier covariate and are left uncentered.
    """
    if not terms:
        raise ConfigError("empty term list")
    has_smooth = any(t.kind == "smooth" for t in terms)
    blocks: list[np.ndarray] = []
    placed: list[TermColumns] = []
    raw_penalties: list[tuple[int, np.ndarray]] = []  # (placed index, block-level S)
    col = 0

    if has_smooth:
        blocks.append(np.ones((dataset.N, 1)))
        placed.append(TermColumns(TermSpec("linear", "1", name="intercept"), col, col + 1))
        col += 1

    for term in terms:
        if term.kind == "linear":
            x = dataset.covariate_column(term.covariate)
            block = x[:, None]
            tc = TermColumns(term, col, col + 1)
        elif term.kind == "smooth":
            x = dataset.covariate_column(term.covariate)
            B = basis_matrix(term.basis, x)
            means = B.mean(axis=0)
            Z = sum_to_zero_contrast(term.basis.n_basis)
            block = (B - means) @ Z
            S = Z.T @ penalty_matrix(term.basis) @ Z
            tc = TermColumns(term, col, col + block.shape[1], center_means=means, contrast=Z)
            raw_penalties.append((len(placed), S))
        else:  # varying coefficient over time
            times = dataset.time_column()
            B = basis_matrix(term.basis, times)
            if term.covariate is None:
                block = B
            else:
                block = B * dataset.covariate_column(term.covariate)[:, None]
            S = penalty_matrix(term.basis)
            tc = TermColumns(term, col, col + block.shape[1])
            raw_penalties.append((len(placed), S))
        blocks.append(block)
        placed.append(tc)
        col = tc.stop

    X = np.hstack(blocks)
    penalties = []
    for k, (idx, S) in enumerate(raw_penalties):
        tc = placed[idx]
        tc.penalty_index = k
        S_full = np.zeros((col, col))
        S_full[tc.columns, tc.columns] = S
        penalties.append(S_full)
    return DesignAssembly(X=X, terms=placed, penalties=penalties, row_sizes=list(dataset.sizes))


def evaluate_term(assembly: DesignAssembly, term_label: str, beta: np.ndarray, grid) -> np.ndarray:
    """Evaluate one term's fitted coefficient function on a grid, applying the
    same centering transform used when the design was assembled."""
    for tc in assembly.terms:
        if tc.term.label == term_label:
            break
    else:
        raise ConfigError(f"no term labelled {term_label!r}")
    coef = beta[tc.columns]
    if tc.term.kind == "linear":
        raise ConfigError("linear terms have a scalar coefficient, not a curve")
    B = basis_matrix(tc.term.basis, np.asarray(grid, dtype=float))
    if tc.contrast is not None:
        B = (B - tc.center_means) @ tc.contrast
    return B @ coef
