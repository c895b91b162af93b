"""Newton-type minimization of the approximate leave-subject-out score over
log penalty parameters, with exact first and second derivatives obtained by
differentiating the fitted coefficients through the penalized normal
equations, plus an exhaustive grid search used as oracle and fallback."""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize

from .basis import DesignAssembly
from .correlation import CorrelationModel
from .criteria import lsocv_exact, lsocv_star, v_star
from .data import LongitudinalDataset
from .errors import ConfigError, OptimizerStallError
from .estimator import PenalizedFitter

ETA_BOUND = 25.0


@dataclass
class OptimizerConfig:
    eta0: np.ndarray | None = None  # starting log-penalties; None = scale heuristic
    max_iter: int = 50
    grad_tol: float = 1e-6  # on the max-norm of the gradient
    step_halvings_max: int = 20
    hessian_ridge_floor: float = 1e-8  # eigenvalue floor, relative to max |eigenvalue|
    fd_step: float = 1e-5  # central-difference step used by derivative checks
    eta_bound: float = ETA_BOUND
    step_max: float = 5.0  # cap on one step in log-penalty units; keeps the
    # floored-Hessian direction inside step-halving range in concave regions


@dataclass
class TraceRow:
    iteration: int
    eta: np.ndarray
    value: float
    grad_norm: float
    halvings: int
    seconds: float


@dataclass
class OptimizerTrace:
    rows: list[TraceRow] = field(default_factory=list)
    termination: str = ""
    boundary_hit: bool = False

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.rows])

    def iteration_seconds(self) -> np.ndarray:
        return np.array([r.seconds for r in self.rows if r.iteration > 0])

    def as_rows(self):
        """Header plus rows for CSV export."""
        m = self.rows[0].eta.size if self.rows else 0
        header = ["iteration"] + [f"eta_{k}" for k in range(m)] + ["value", "grad_norm", "halvings"]
        body = [[r.iteration, *[f"{v:.12g}" for v in r.eta], f"{r.value:.12g}",
                 f"{r.grad_norm:.6g}", r.halvings] for r in self.rows]
        return header, body


class StarObjective:
    """Value / gradient / Hessian of the approximate CV score in eta = log
    lambda for a fixed fit context."""

    def __init__(self, fitter: PenalizedFitter):
        if not fitter.penalties:
            raise ConfigError("no penalized terms to optimize")
        self.f = fitter
        self.m = len(fitter.penalties)

    def value(self, eta: np.ndarray) -> float:
        res = self.f.fit(np.exp(eta))
        return lsocv_star(res)

    def value_grad_hess(self, eta: np.ndarray, need_hess: bool = True):
        f = self.f
        n, m = f.n, self.m
        lam = np.exp(eta)
        res = f.fit(lam)
        hfac = res.hfactor
        beta, e = res.beta, res.residuals
        slices, X = f.slices, f.X

        a_stack = np.empty(f.N)  # A_ii e_i
        at_stack = np.empty(f.N)  # A_ii' e_i
        inflate = 0.0
        for sl, A_ii in zip(slices, res.hat_blocks):
            e_i = e[sl]
            a_stack[sl] = A_ii @ e_i
            at_stack[sl] = A_ii.T @ e_i
            inflate += float(e_i @ a_stack[sl])
        value = float(e @ e) / n + 2.0 * inflate / n

        # coefficient sensitivities: b_k = d beta / d eta_k = -lam_k H^{-1} S_k beta
        M = [lam[k] * scipy.linalg.cho_solve(hfac, f.penalties[k]) for k in range(m)]
        b = [-M[k] @ beta for k in range(m)]
        D = [X @ b[k] for k in range(m)]
        r_tilde = X.T @ e
        w = f.w_solve(e)
        aa = a_stack + at_stack

        # P = sum_i v_i u_i' with u_i = X_i' e_i, v_i = X_i' w_i
        P = np.zeros((f.p, f.p))
        u_list, v_list = [], []
        for sl in slices:
            u_i = X[sl].T @ e[sl]
            v_i = X[sl].T @ w[sl]
            u_list.append(u_i)
            v_list.append(v_i)
            P += np.outer(v_i, u_i)
        HinvP = scipy.linalg.cho_solve(hfac, P)

        grad = np.empty(m)
        for k in range(m):
            grad[k] = (2.0 / n) * (
                -float(r_tilde @ b[k]) - float(D[k] @ aa)
                - float(np.sum(M[k] * HinvP.T))
            )
        if not need_hess:
            return value, grad, None, res

        AD = []  # stacked A_ii D_{k,i}
        Pk, Qk = [], []
        for k in range(m):
            adk = np.empty(f.N)
            wDk = f.w_solve(D[k])
            P_k = np.zeros((f.p, f.p))
            Q_k = np.zeros((f.p, f.p))
            for i, sl in enumerate(slices):
                adk[sl] = res.hat_blocks[i] @ D[k][sl]
                q_ki = X[sl].T @ D[k][sl]
                g_ki = X[sl].T @ wDk[sl]
                P_k += np.outer(v_list[i], q_ki)
                Q_k += np.outer(g_ki, u_list[i])
            AD.append(adk)
            Pk.append(scipy.linalg.cho_solve(hfac, P_k))
            Qk.append(scipy.linalg.cho_solve(hfac, Q_k))

        hess = np.empty((m, m))
        for k in range(m):
            for l in range(k, m):
                B_kl = -M[k] @ b[l] - M[l] @ b[k]
                if k == l:
                    B_kl = B_kl + b[k]
                XB = X @ B_kl
                h = float(D[l] @ D[k]) - float(r_tilde @ B_kl)  # residual norm part
                h += -float(XB @ aa)
                h += float(D[k] @ AD[l]) + float(D[l] @ AD[k])
                h += float(np.sum(M[l] * Pk[k].T)) + float(np.sum(M[l] * Qk[k].T))
                h += float(np.sum(M[k] * Pk[l].T)) + float(np.sum(M[k] * Qk[l].T))
                C = M[l] @ M[k] + M[k] @ M[l]
                if k == l:
                    C = C - M[k]
                h += float(np.sum(C * HinvP.T))
                hess[k, l] = hess[l, k] = (2.0 / n) * h
        return value, grad, hess, res


def default_eta0(fitter: PenalizedFitter) -> np.ndarray:
    """Balanced-scale start: lambda_k tr(S_k) = tr(X'X) / m."""
    txx = float(np.einsum("ij,ij->", fitter.X, fitter.X))
    m = len(fitter.penalties)
    eta0 = np.empty(m)
    for k, Sk in enumerate(fitter.penalties):
        ts = float(np.trace(Sk))
        eta0[k] = np.log(txx / (m * ts)) if ts > 0 else 0.0
    return np.clip(eta0, -ETA_BOUND, ETA_BOUND)


def _floor_hessian(hess: np.ndarray, floor_rel: float) -> np.ndarray | None:
    """Eigenvalue-floored positive definite version; None if degenerate."""
    vals, vecs = np.linalg.eigh((hess + hess.T) / 2.0)
    top = np.max(np.abs(vals))
    if top <= 0 or not np.isfinite(top):
        return None
    floor = floor_rel * top
    return (vecs * np.maximum(vals, floor)) @ vecs.T


@dataclass
class OptimizeResult:
    lam: np.ndarray
    eta: np.ndarray
    value: float
    trace: OptimizerTrace
    fit: object  # FitResult at the final eta


def optimize_lambda(dataset: LongitudinalDataset, assembly: DesignAssembly,
                    model: CorrelationModel, config: OptimizerConfig | None = None,
                    fitter: PenalizedFitter | None = None) -> OptimizeResult:
    """Minimize the approximate CV score over log penalties by Newton steps
    with eigenvalue-floored Hessians and step halving.

    Raises OptimizerStallError (carrying the trace) when no halved step
    decreases the score; hitting the log-penalty clamp is flagged, not fatal.
    """
    cfg = config or OptimizerConfig()
    f = fitter or PenalizedFitter(dataset, assembly, model)
    obj = StarObjective(f)
    bound = cfg.eta_bound
    eta = np.asarray(cfg.eta0, dtype=float) if cfg.eta0 is not None else default_eta0(f)
    eta = np.clip(eta, -bound, bound)
    if eta.size != obj.m:
        raise ConfigError(f"eta0 has {eta.size} entries, expected {obj.m}")

    trace = OptimizerTrace()
    t_prev = time.perf_counter()
    value, grad, hess, res = obj.value_grad_hess(eta)
    trace.rows.append(TraceRow(0, eta.copy(), value, float(np.max(np.abs(grad))), 0,
                               time.perf_counter() - t_prev))

    for it in range(1, cfg.max_iter + 1):
        t_prev = time.perf_counter()
        gnorm = float(np.max(np.abs(grad)))
        if gnorm <= cfg.grad_tol:
            trace.termination = "gradient"
            break
        hess_pd = _floor_hessian(hess, cfg.hessian_ridge_floor)
        if hess_pd is not None:
            step = -np.linalg.solve(hess_pd, grad)
            if float(step @ grad) >= 0:  # not a descent direction
                step = -grad
        else:
            step = -grad
        longest = float(np.max(np.abs(step)))
        if longest > cfg.step_max:
            step = step * (cfg.step_max / longest)

        accepted = False
        clamped_out = False
        halvings = 0
        scale = 1.0
        while halvings <= cfg.step_halvings_max:
            eta_new = np.clip(eta + scale * step, -bound, bound)
            if np.array_equal(eta_new, eta):
                clamped_out = True  # clamp absorbed the whole step
                break
            value_new = obj.value(eta_new)
            if value_new < value:
                accepted = True
                break
            scale /= 2.0
            halvings += 1
        if not accepted:
            if clamped_out:
                trace.termination = "boundary"
                break
            raise OptimizerStallError(
                f"no decrease after {cfg.step_halvings_max} halvings at iteration {it}",
                trace=trace, eta=eta.copy(),
            )
        eta = eta_new
        value, grad, hess, res = obj.value_grad_hess(eta)
        trace.rows.append(TraceRow(it, eta.copy(), value, float(np.max(np.abs(grad))),
                                   halvings, time.perf_counter() - t_prev))
    else:
        trace.termination = "max_iter"
    trace.boundary_hit = bool(np.any(np.abs(eta) >= cfg.eta_bound - 1e-12))
    return OptimizeResult(lam=np.exp(eta), eta=eta, value=value, trace=trace, fit=res)


@dataclass
class GridSearchResult:
    lam: np.ndarray
    indices: tuple[int, ...]
    values: np.ndarray  # criterion on the full grid, shape = grid dimensions
    criterion: str

    @property
    def boundary_hit(self) -> bool:
        """True when the minimizer sits on an edge of the grid."""
        return any(i == 0 or i == s - 1 for i, s in zip(self.indices, self.values.shape))


def grid_search(dataset: LongitudinalDataset, assembly: DesignAssembly,
                model: CorrelationModel, grid, use_exact: bool = False,
                max_points: int = 100_000,
                fitter: PenalizedFitter | None = None) -> GridSearchResult:
    """Exhaustive evaluation over a per-dimension grid of penalty values,
    minimizing the approximate score (or the exact CV score behind the flag)."""
    axes = [np.asarray(g, dtype=float) for g in grid]
    if not axes or any(a.size == 0 for a in axes):
        raise ConfigError("grid must have at least one point per dimension")
    total = int(np.prod([a.size for a in axes]))
    if total > max_points:
        raise ConfigError(f"grid has {total} points, exceeding the cap {max_points}")
    f = fitter or PenalizedFitter(dataset, assembly, model)
    if len(axes) != len(f.penalties):
        raise ConfigError(f"grid has {len(axes)} dimensions, expected {len(f.penalties)}")
    score = lsocv_exact if use_exact else lsocv_star
    shape = tuple(a.size for a in axes)
    values = np.empty(shape)
    for idx in itertools.product(*map(range, shape)):
        lam = np.array([axes[d][idx[d]] for d in range(len(axes))])
        values[idx] = score(f.fit(lam))
    best = np.unravel_index(np.argmin(values), shape)
    lam_best = np.array([axes[d][best[d]] for d in range(len(axes))])
    return GridSearchResult(lam=lam_best, indices=tuple(int(i) for i in best),
                            values=values, criterion="lsocv" if use_exact else "lsocv_star")


def log_grid(lo: float = 1e-4, hi: float = 1e4, num: int = 61) -> np.ndarray:
    return np.logspace(np.log10(lo), np.log10(hi), num)


def minimize_v_star(fitter: PenalizedFitter, eta0: np.ndarray | None = None,
                    eta_bound: float = ETA_BOUND) -> OptimizeResult:
    """Derivative-free minimization of the log-scale comparator criterion over
    log penalties (used by the efficiency experiments)."""

    def fn(eta):
        eta = np.clip(eta, -eta_bound, eta_bound)
        return v_star(fitter.fit(np.exp(eta)))

    x0 = eta0 if eta0 is not None else default_eta0(fitter)
    out = scipy.optimize.minimize(fn, x0, method="Nelder-Mead",
                                  options={"xatol": 1e-4, "fatol": 1e-10, "maxiter": 400})
    eta = np.clip(out.x, -eta_bound, eta_bound)
    res = fitter.fit(np.exp(eta))
    trace = OptimizerTrace(termination="nelder-mead")
    trace.boundary_hit = bool(np.any(np.abs(eta) >= eta_bound - 1e-12))
    return OptimizeResult(lam=np.exp(eta), eta=eta, value=float(out.fun), trace=trace, fit=res)


def gradient_fd(fitter: PenalizedFitter, eta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite-difference gradient of the approximate score; test and
    verification helper."""
    obj = StarObjective(fitter)
    eta = np.asarray(eta, dtype=float)
    g = np.empty(eta.size)
    for k in range(eta.size):
        ep, em = eta.copy(), eta.copy()
        ep[k] += step
        em[k] -= step
        g[k] = (obj.value(ep) - obj.value(em)) / (2.0 * step)
    return g


def hessian_fd(fitter: PenalizedFitter, eta: np.ndarray, step: float = 1e-4) -> np.ndarray:
    """Central finite-difference Hessian via gradient differences."""
    obj = StarObjective(fitter)
    eta = np.asarray(eta, dtype=float)
    m = eta.size
    Hfd = np.empty((m, m))
    for k in range(m):
        ep, em = eta.copy(), eta.copy()
        ep[k] += step
        em[k] -= step
        gp = obj.value_grad_hess(ep, need_hess=False)[1]
        gm = obj.value_grad_hess(em, need_hess=False)[1]
        Hfd[k] = (gp - gm) / (2.0 * step)
    return (Hfd + Hfd.T) / 2.0
