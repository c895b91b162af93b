"""Penalized weighted least squares for clustered data.

Everything routes through per-subject correlation blocks; no N x N matrix is
ever formed. The hat matrix appears only through its diagonal blocks A_ii and
through matrix-free products A @ v.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .basis import DesignAssembly, assemble_design, evaluate_term
from .correlation import CorrelationModel, build_blocks
from .data import LongitudinalDataset
from .errors import ConfigError, NumericalError, SingularFitError
from .utils import parallel_map, replicate_rng


class PenalizedFitter:
    """Fit context for one (dataset, design, working correlation).

    Precomputes the weighted cross products so that refits across penalty
    values cost one p x p factorization plus O(N p) products each.
    """

    def __init__(self, dataset: LongitudinalDataset, assembly: DesignAssembly,
                 model: CorrelationModel):
        if assembly.X.shape[0] != dataset.N:
            raise ConfigError("design rows do not match dataset observations")
        self.dataset = dataset
        self.assembly = assembly
        self.model = model
        self.X = assembly.X
        self.Y = dataset.y
        self.sizes = dataset.sizes
        self.n = dataset.n
        self.N = dataset.N
        self.p = assembly.p
        offsets = np.concatenate([[0], np.cumsum(self.sizes)])
        self.slices = [slice(int(offsets[i]), int(offsets[i + 1])) for i in range(self.n)]
        self.blocks = build_blocks(model, dataset)
        self.WX = self._w_solve_rows(self.X)  # rows of subject i hold W_i^{-1} X_i
        self.G0 = self.X.T @ self.WX
        self.c0 = self.WX.T @ self.Y
        self.penalties = assembly.penalties
        self.logabsdet_W = float(sum(b.logabsdet for b in self.blocks))

    # -- blockwise W operations ------------------------------------------------

    def _w_solve_rows(self, V: np.ndarray) -> np.ndarray:
        out = np.empty_like(V, dtype=float)
        for sl, b in zip(self.slices, self.blocks):
            out[sl] = b.solve(V[sl])
        return out

    def w_solve(self, v: np.ndarray) -> np.ndarray:
        """Blockwise W^{-1} v."""
        return self._w_solve_rows(np.asarray(v, dtype=float))

    def w_matmul(self, v: np.ndarray) -> np.ndarray:
        """Blockwise W v."""
        v = np.asarray(v, dtype=float)
        out = np.empty_like(v)
        for sl, b in zip(self.slices, self.blocks):
            out[sl] = b.matmul(v[sl])
        return out

    # -- penalized normal equations --------------------------------------------

    def _check_lambda(self, lam) -> np.ndarray:
        lam = np.atleast_1d(np.asarray(lam, dtype=float))
        if lam.size != len(self.penalties):
            raise ConfigError(
                f"lambda has {lam.size} entries but the design has "
                f"{len(self.penalties)} penalized terms"
            )
        if np.any(lam < 0):
            raise ConfigError("lambda must be nonnegative")
        return lam

    def normal_matrix(self, lam: np.ndarray) -> np.ndarray:
        H = self.G0.copy()
        for lk, Sk in zip(lam, self.penalties):
            if lk != 0.0:
                H += lk * Sk
        return H

    def factorize(self, H: np.ndarray):
        """Cholesky with a tiny-ridge retry for lambda = 0 rank edge cases."""
        try:
            return scipy.linalg.cho_factor(H, lower=True), False
        except scipy.linalg.LinAlgError:
            ridge = 1e-10 * np.trace(H) / H.shape[0]
            try:
                return scipy.linalg.cho_factor(H + ridge * np.eye(H.shape[0]), lower=True), True
            except scipy.linalg.LinAlgError as exc:
                raise SingularFitError("penalized normal matrix is singular") from exc

    def fit(self, lam, compute_hat: bool = True) -> "FitResult":
        lam = self._check_lambda(lam)
        H = self.normal_matrix(lam)
        hfac, ridged = self.factorize(H)
        beta = scipy.linalg.cho_solve(hfac, self.c0)
        fitted = self.X @ beta
        residuals = self.Y - fitted
        hat_blocks = None
        trace_A = np.nan
        if compute_hat:
            T = scipy.linalg.cho_solve(hfac, self.WX.T)  # p x N, columns H^{-1}(W^{-1}X)'
            hat_blocks = [self.X[sl] @ T[:, sl] for sl in self.slices]
            trace_A = float(sum(np.trace(a) for a in hat_blocks))
        return FitResult(
            beta=beta, fitted=fitted, residuals=residuals, hat_blocks=hat_blocks,
            trace_A=trace_A, lam=lam, correlation=self.model, hfactor=hfac,
            ridged=ridged, fitter=self,
        )

    def hat_apply(self, v: np.ndarray, hfac) -> np.ndarray:
        """A @ v = X H^{-1} X' W^{-1} v, matrix-free."""
        return self.X @ scipy.linalg.cho_solve(hfac, self.WX.T @ np.asarray(v, dtype=float))


@dataclass
class FitResult:
    """Solution of the penalized weighted least squares problem."""

    beta: np.ndarray
    fitted: np.ndarray
    residuals: np.ndarray
    hat_blocks: list[np.ndarray] | None
    trace_A: float
    lam: np.ndarray
    correlation: CorrelationModel
    hfactor: object
    ridged: bool
    fitter: PenalizedFitter

    @property
    def n(self) -> int:
        return self.fitter.n

    @property
    def N(self) -> int:
        return self.fitter.N

    def subject_residual(self, i: int) -> np.ndarray:
        return self.residuals[self.fitter.slices[i]]

    def leverages(self) -> np.ndarray:
        if self.hat_blocks is None:
            raise NumericalError("fit was computed without hat blocks")
        return np.array([np.trace(a) for a in self.hat_blocks])


def fit(dataset: LongitudinalDataset, assembly: DesignAssembly,
        model: CorrelationModel, lam) -> FitResult:
    """One-shot penalized fit; build a PenalizedFitter directly to reuse the
    weighted cross products across many penalty values."""
    return PenalizedFitter(dataset, assembly, model).fit(lam)


@dataclass
class LeverageReport:
    per_subject: np.ndarray  # tr(A_ii)
    mean: float  # tr(A) / n
    max_ratio: float  # max leverage over mean leverage
    dominant: bool  # flag when max_ratio exceeds the warning threshold

    WARN_RATIO = 10.0


def leverage_diagnostics(result: FitResult) -> LeverageReport:
    """Per-subject leverages tr(A_ii); flags dominant subjects whose leverage
    is more than 10x the average."""
    lev = result.leverages()
    mean = float(result.trace_A / result.n)
    ratio = float(lev.max() / mean) if mean > 0 else np.inf
    return LeverageReport(per_subject=lev, mean=mean, max_ratio=ratio,
                          dominant=ratio > LeverageReport.WARN_RATIO)


@dataclass
class BootstrapResult:
    grids: dict  # term label -> evaluation grid
    widths: dict  # term label -> per-gridpoint interval width
    lower: dict
    upper: dict
    level: float
    n_replicates: int
    n_dropped: int
    curves: dict = field(default_factory=dict, repr=False)  # term label -> (B_eff, G) samples


def bootstrap_ci(dataset: LongitudinalDataset, assembly: DesignAssembly,
                 model: CorrelationModel, lam, n_boot: int, level: float = 0.95,
                 seed: int = 0, grid_size: int = 100, threads: int = 1) -> BootstrapResult:
    """Cluster bootstrap: resample whole subjects with replacement, refit with
    the penalty fixed, and return pointwise quantile interval widths for each
    coefficient curve on an evaluation grid.

    Sum-to-zero centered curves are only identified up to a constant (each
    replicate re-centers over its own resampled rows), so their replicate
    curves are centered to zero mean over the evaluation grid before the
    quantiles are taken. Replicates whose resampled design is singular are
    dropped and counted; more than 10% drops is an error.
    """
    if n_boot < 2:
        raise ConfigError("bootstrap needs at least 2 replicates")
    if not 0 < level < 1:
        raise ConfigError("level must be in (0, 1)")
    terms = [tc.term for tc in assembly.terms if tc.term.kind in ("smooth", "vc")]
    if not terms:
        raise ConfigError("no coefficient curves to bootstrap")
    grids = {t.label: np.linspace(t.basis.domain[0], t.basis.domain[1], grid_size)
             for t in terms}
    user_terms = [tc.term for tc in assembly.terms if tc.term.name != "intercept"]

    def one(rep: int):
        rng = replicate_rng(seed, rep)
        idx = rng.integers(0, dataset.n, size=dataset.n)
        boot_data = dataset.subset(list(idx))
        try:
            boot_asm = assemble_design(boot_data, user_terms)
            res = fit(boot_data, boot_asm, model, lam)
        except NumericalError:
            return None
        if res.ridged:  # the resampled design was singular
            return None
        out = {}
        for t in terms:
            curve = evaluate_term(boot_asm, t.label, res.beta, grids[t.label])
            if t.kind == "smooth":
                curve = curve - curve.mean()
            out[t.label] = curve
        return out

    samples = parallel_map(one, range(n_boot), threads=threads)
    kept = [s for s in samples if s is not None]
    dropped = n_boot - len(kept)
    if dropped > 0.10 * n_boot:
        raise NumericalError(f"{dropped}/{n_boot} bootstrap replicates failed")
    a = 1.0 - level
    widths, lower, upper, curves = {}, {}, {}, {}
    for t in terms:
        M = np.vstack([s[t.label] for s in kept])
        lo = np.quantile(M, a / 2.0, axis=0)
        hi = np.quantile(M, 1.0 - a / 2.0, axis=0)
        widths[t.label] = hi - lo
        lower[t.label], upper[t.label] = lo, hi
        curves[t.label] = M
    return BootstrapResult(grids=grids, widths=widths, lower=lower, upper=upper,
                           level=level, n_replicates=len(kept), n_dropped=dropped,
                           curves=curves)
