"""Working correlation structures, per-subject block factorizations, and
plug-in estimation of correlation parameters from residuals."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg
import scipy.optimize

from .data import LongitudinalDataset
from .errors import ConfigError, EstimationError, NearSingularError

COND_LIMIT = 1e10

STRUCTURES = ("ind", "cs", "ar1", "un", "expnugget", "banded1")


@dataclass(frozen=True)
class CorrelationModel:
    """A working correlation family with fixed parameters.

    structure: "ind", "cs" (compound symmetry), "ar1", "un" (unstructured,
    needs an explicit matrix), "expnugget" (alpha + (1-alpha)exp(-theta u) in
    the time lag u), or "banded1" (correlation only at lag one; may be
    indefinite for large rho, kept invertible-only for comparison studies).
    """

    structure: str
    rho: float | None = None
    matrix: tuple[tuple[float, ...], ...] | None = None
    alpha: float | None = None
    theta: float | None = None

    def __post_init__(self):
        if self.structure not in STRUCTURES:
            raise ConfigError(f"unknown correlation structure {self.structure!r}")
        if self.structure in ("cs", "ar1", "banded1"):
            if self.rho is None:
                raise ConfigError(f"{self.structure} requires rho")
            if self.structure in ("ar1", "banded1") and not -1 < self.rho < 1:
                raise ConfigError(f"{self.structure} requires |rho| < 1, got {self.rho}")
            if self.structure == "cs" and not -1 < self.rho < 1:
                raise ConfigError(f"cs requires -1 < rho < 1, got {self.rho}")
        if self.structure == "un":
            if self.matrix is None:
                raise ConfigError("unstructured correlation requires a matrix")
            M = np.asarray(self.matrix, dtype=float)
            if M.ndim != 2 or M.shape[0] != M.shape[1]:
                raise ConfigError("unstructured matrix must be square")
            if not np.allclose(M, M.T, atol=1e-12):
                raise ConfigError("unstructured matrix must be symmetric")
            if not np.allclose(np.diag(M), 1.0, atol=1e-12):
                raise ConfigError("unstructured matrix must have unit diagonal")
        if self.structure == "expnugget":
            if self.alpha is None or self.theta is None:
                raise ConfigError("expnugget requires alpha and theta")
            if not 0 < self.alpha < 1:
                raise ConfigError(f"expnugget requires 0 < alpha < 1, got {self.alpha}")
            if self.theta <= 0:
                raise ConfigError(f"expnugget requires theta > 0, got {self.theta}")

    def to_json(self) -> dict:
        out = {"structure": self.structure}
        if self.rho is not None:
            out["rho"] = self.rho
        if self.matrix is not None:
            out["matrix"] = [list(row) for row in self.matrix]
        if self.alpha is not None:
            out["alpha"] = self.alpha
        if self.theta is not None:
            out["theta"] = self.theta
        return out

    @staticmethod
    def from_json(d: dict) -> "CorrelationModel":
        known = {"structure", "rho", "matrix", "alpha", "theta"}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown correlation keys {sorted(extra)}")
        kwargs = dict(d)
        if "matrix" in kwargs:
            kwargs["matrix"] = tuple(tuple(row) for row in kwargs["matrix"])
        return CorrelationModel(**kwargs)


def independence() -> CorrelationModel:
    return CorrelationModel("ind")


def compound_symmetry(rho: float) -> CorrelationModel:
    return CorrelationModel("cs", rho=rho)


def ar1(rho: float) -> CorrelationModel:
    return CorrelationModel("ar1", rho=rho)


def unstructured(matrix) -> CorrelationModel:
    M = np.asarray(matrix, dtype=float)
    return CorrelationModel("un", matrix=tuple(tuple(row) for row in M))


def exponential_nugget(alpha: float, theta: float) -> CorrelationModel:
    return CorrelationModel("expnugget", alpha=alpha, theta=theta)


def banded_lag1(rho: float) -> CorrelationModel:
    return CorrelationModel("banded1", rho=rho)


def exponential_nugget_correlation(u, alpha: float, theta: float):
    """Correlation at time lag u: alpha + (1 - alpha) * exp(-theta * u)."""
    return alpha + (1.0 - alpha) * np.exp(-theta * np.asarray(u, dtype=float))


def correlation_matrix(model: CorrelationModel, n_obs: int, times=None) -> np.ndarray:
    """Raw n_i x n_i correlation matrix for one subject."""
    if model.structure == "ind":
        return np.eye(n_obs)
    if model.structure == "cs":
        if model.rho <= -1.0 / max(n_obs - 1, 1):
            raise ConfigError(
                f"cs rho={model.rho} not positive definite for block size {n_obs}"
            )
        return np.full((n_obs, n_obs), model.rho) + (1 - model.rho) * np.eye(n_obs)
    if model.structure == "ar1":
        idx = np.arange(n_obs)
        # powers by the defining recurrence so entries are exact products
        pows = np.concatenate([[1.0], np.cumprod(np.full(max(n_obs - 1, 0), model.rho))])
        return pows[np.abs(idx[:, None] - idx[None, :])]
    if model.structure == "banded1":
        idx = np.arange(n_obs)
        lag = np.abs(idx[:, None] - idx[None, :])
        return np.where(lag == 0, 1.0, np.where(lag == 1, model.rho, 0.0))
    if model.structure == "un":
        M = np.asarray(model.matrix, dtype=float)
        if M.shape[0] != n_obs:
            raise ConfigError(
                f"unstructured matrix is {M.shape[0]}x{M.shape[0]} but subject has "
                f"{n_obs} observations; all subjects must share one time grid"
            )
        return M.copy()
    # expnugget
    if times is None:
        raise ConfigError("expnugget correlation requires observation times")
    t = np.asarray(times, dtype=float)
    lag = np.abs(t[:, None] - t[None, :])
    W = exponential_nugget_correlation(lag, model.alpha, model.theta)
    np.fill_diagonal(W, 1.0)
    return W


class WorkingBlock:
    """One subject's working correlation with a cached factorization.

    Cholesky when the block is SPD; a symmetric eigendecomposition fallback
    keeps merely-invertible (indefinite) blocks usable and flags them.
    """

    def __init__(self, matrix: np.ndarray):
        W = np.asarray(matrix, dtype=float)
        self.matrix = W
        self.n = W.shape[0]
        self._chol = None
        self._eig = None
        vals = np.linalg.eigvalsh(W)
        amin, amax = np.min(np.abs(vals)), np.max(np.abs(vals))
        cond = amax / amin if amin > 0 else np.inf
        if not np.isfinite(cond) or cond > COND_LIMIT:
            raise NearSingularError(
                f"working correlation block nearly singular (cond ~ {cond:.2e})"
            )
        self.cond = float(cond)
        self.is_spd = bool(vals[0] > 0)
        if self.is_spd:
            self._chol = scipy.linalg.cho_factor(W, lower=True)
            self.logabsdet = float(np.sum(np.log(vals)))
        else:
            self._eig = np.linalg.eigh(W)
            self.logabsdet = float(np.sum(np.log(np.abs(vals))))

    def solve(self, B: np.ndarray) -> np.ndarray:
        """W^{-1} B without forming the inverse."""
        if self._chol is not None:
            return scipy.linalg.cho_solve(self._chol, B)
        vals, vecs = self._eig
        return vecs @ ((vecs.T @ B).T / vals).T

    def matmul(self, B: np.ndarray) -> np.ndarray:
        return self.matrix @ B


def working_block(model: CorrelationModel, times_or_size) -> WorkingBlock:
    """Factored working-correlation block for one subject.

    times_or_size is the observation-time vector (required for expnugget) or
    an integer block size for index-lag structures.
    """
    if np.isscalar(times_or_size):
        n_obs, times = int(times_or_size), None
    else:
        times = np.asarray(times_or_size, dtype=float)
        n_obs = times.size
    return WorkingBlock(correlation_matrix(model, n_obs, times))


def solve_block(block: WorkingBlock, B: np.ndarray) -> np.ndarray:
    return block.solve(B)


def build_blocks(model: CorrelationModel, dataset: LongitudinalDataset) -> list[WorkingBlock]:
    """One factored block per subject; identical index-lag blocks are shared."""
    if model.structure == "expnugget":
        return [working_block(model, s.times if s.times is not None else np.arange(s.n_obs, dtype=float))
                for s in dataset.subjects]
    cache: dict[int, WorkingBlock] = {}
    blocks = []
    for s in dataset.subjects:
        if s.n_obs not in cache:
            cache[s.n_obs] = working_block(model, s.n_obs)
        blocks.append(cache[s.n_obs])
    return blocks


# ---------------------------------------------------------------------------
# Plug-in parameter estimation from residuals of a working-independence fit
# ---------------------------------------------------------------------------


def _residual_pairs(residuals, times):
    """All within-subject pairs as (lag, product) arrays plus the pooled
    second moment."""
    lags, prods, sq = [], [], 0.0
    count = 0
    for e, t in zip(residuals, times):
        e = np.asarray(e, dtype=float)
        t = np.asarray(t, dtype=float)
        sq += float(e @ e)
        count += e.size
        if e.size < 2:
            continue
        iu, ju = np.triu_indices(e.size, k=1)
        lags.append(np.abs(t[iu] - t[ju]))
        prods.append(e[iu] * e[ju])
    if count == 0:
        raise EstimationError("no residuals supplied")
    sigma2 = sq / count
    if not lags:
        raise EstimationError("need at least one subject with 2+ observations")
    return np.concatenate(lags), np.concatenate(prods), sigma2


def binned_lag_correlations(residuals, times):
    """Empirical residual correlations in lag bins of width equal to the
    median gap between distinct observed lags."""
    lags, prods, sigma2 = _residual_pairs(residuals, times)
    distinct = np.unique(lags)
    if distinct.size > 1:
        width = float(np.median(np.diff(distinct)))
    else:
        width = max(float(distinct[0]), 1.0)
    edges = np.arange(0.0, lags.max() + width, width)
    if edges[-1] <= lags.max():
        edges = np.append(edges, lags.max() + width)
    idx = np.digitize(lags, edges) - 1
    centers, corrs, counts = [], [], []
    for b in range(len(edges) - 1):
        sel = idx == b
        if not np.any(sel):
            continue
        centers.append(float(lags[sel].mean()))
        corrs.append(float(prods[sel].mean() / sigma2))
        counts.append(int(sel.sum()))
    return np.array(centers), np.array(corrs), np.array(counts)


def estimate_exponential_params(residuals, times) -> tuple[float, float]:
    """Fit alpha + (1-alpha)exp(-theta u) to binned residual lag correlations
    by count-weighted least squares on (logit alpha, log theta).

    residuals and times are per-subject sequences from an independence fit.
    Warns when the fit lands on the alpha -> 0 boundary (no long-run
    correlation).
    """
    centers, corrs, counts = binned_lag_correlations(residuals, times)
    if centers.size < 2:
        raise EstimationError(
            f"only {centers.size} usable lag bin(s); cannot separate alpha and theta"
        )
    w = counts / counts.sum()

    def loss(z):
        a = 1.0 / (1.0 + np.exp(-z[0]))
        th = np.exp(z[1])
        resid = corrs - exponential_nugget_correlation(centers, a, th)
        return float(np.sum(w * resid**2))

    # multistart: the surface can be flat in theta when correlations are weak
    starts = [(-0.5, 0.0), (0.0, -1.0), (-2.0, 1.0), (-6.0, 0.0)]
    best = None
    for s in starts:
        res = scipy.optimize.minimize(loss, np.asarray(s), method="Nelder-Mead",
                                      options={"xatol": 1e-8, "fatol": 1e-12, "maxiter": 2000})
        if best is None or res.fun < best.fun:
            best = res
    alpha = 1.0 / (1.0 + np.exp(-best.x[0]))
    theta = float(np.exp(best.x[1]))
    if alpha < 0.02:
        warnings.warn("alpha estimate at the zero boundary: residuals show no "
                      "long-run within-subject correlation", stacklevel=2)
    return float(alpha), theta


def estimate_cs_rho(residuals) -> float:
    """Mean off-diagonal correlation of within-subject residuals."""
    num, den, npairs = 0.0, 0.0, 0
    count = 0
    for e in residuals:
        e = np.asarray(e, dtype=float)
        den += float(e @ e)
        count += e.size
        if e.size >= 2:
            s = e.sum()
            num += (s * s - e @ e) / 2.0
            npairs += e.size * (e.size - 1) // 2
    if npairs == 0:
        raise EstimationError("no within-subject pairs for compound-symmetry estimate")
    sigma2 = den / count
    return float(num / npairs / sigma2)


def estimate_ar1_rho(residuals) -> float:
    """Mean lag-one correlation of within-subject residuals."""
    num, den, count, npairs = 0.0, 0.0, 0, 0
    for e in residuals:
        e = np.asarray(e, dtype=float)
        den += float(e @ e)
        count += e.size
        if e.size >= 2:
            num += float(e[:-1] @ e[1:])
            npairs += e.size - 1
    if npairs == 0:
        raise EstimationError("no lag-one pairs for AR(1) estimate")
    sigma2 = den / count
    return float(num / npairs / sigma2)


def estimate_unstructured(residuals) -> np.ndarray:
    """Empirical within-subject correlation matrix; requires a common n_i."""
    E = np.asarray([np.asarray(e, dtype=float) for e in residuals])
    if E.ndim != 2:
        raise EstimationError("unstructured estimate needs equal cluster sizes")
    C = (E.T @ E) / E.shape[0]
    d = np.sqrt(np.diag(C))
    R = C / np.outer(d, d)
    np.fill_diagonal(R, 1.0)
    return R


def clip_correlation(structure: str, value: float, max_cluster: int, margin: float = 1e-3) -> float:
    """Clip a moment estimate into the structure's positive-definite range."""
    if structure == "cs":
        lo = -1.0 / max(max_cluster - 1, 1) + margin
    else:
        lo = -1.0 + margin
    return float(np.clip(value, lo, 1.0 - margin))
