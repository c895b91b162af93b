"""Tuning criteria for a fitted model: the exact leave-subject-out CV score,
its cheap quadratic approximation, the log-scale comparator score, and the
simulation-only loss/risk diagnostics that require the true mean or
covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .basis import DesignAssembly
from .correlation import CorrelationModel, build_blocks
from .data import LongitudinalDataset
from .errors import ConfigError, LeverageSaturationError, NumericalError
from .estimator import FitResult, PenalizedFitter

COND_SATURATION = 1e12


@dataclass
class CriterionReport:
    lsocv: float
    lsocv_star: float
    v_star: float | None = None
    loss: float | None = None
    risk: float | None = None
    u_score: float | None = None

    def to_json(self) -> dict:
        return {
            "lsocv": self.lsocv,
            "lsocv_star": self.lsocv_star,
            "v_star": self.v_star,
            "loss": self.loss,
            "risk": self.risk,
            "u_score": self.u_score,
        }


def lsocv_exact(result: FitResult) -> float:
    """Leave-subject-out CV via the shortcut: the full-fit residual of each
    subject inflated by (I - A_ii)^{-1}, so no refits are needed."""
    total = 0.0
    for i, A_ii in enumerate(result.hat_blocks):
        e_i = result.subject_residual(i)
        M = np.eye(A_ii.shape[0]) - A_ii
        svals = np.linalg.svd(M, compute_uv=False)
        # scale against unit leverage so exact saturation (M ~ 0) is caught too
        if svals[-1] <= max(1.0, svals[0]) / COND_SATURATION:
            raise LeverageSaturationError(
                f"subject {i} saturates its own fit: I - A_ii is numerically singular"
            )
        z = np.linalg.solve(M, e_i)
        total += float(z @ z)
    return total / result.n


def lsocv_brute(dataset: LongitudinalDataset, assembly: DesignAssembly,
                model: CorrelationModel, lam) -> float:
    """Literal n-refit evaluation of the leave-subject-out CV score.

    O(n p^3) verification oracle: each subproblem is rebuilt and solved from
    scratch, independently of the shortcut path.
    """
    if dataset.n < 2:
        raise ConfigError("leave-subject-out needs at least two subjects")
    lam = np.atleast_1d(np.asarray(lam, dtype=float))
    blocks = build_blocks(model, dataset)
    p = assembly.p
    pen = np.zeros((p, p))
    for lk, Sk in zip(lam, assembly.penalties):
        pen += lk * Sk
    X_i = [assembly.X[assembly.subject_rows(i)] for i in range(dataset.n)]
    total = 0.0
    for i in range(dataset.n):
        H = pen.copy()
        c = np.zeros(p)
        for j in range(dataset.n):
            if j == i:
                continue
            WXj = blocks[j].solve(X_i[j])
            H += X_i[j].T @ WXj
            c += WXj.T @ dataset.subjects[j].y
        beta = np.linalg.solve(H, c)
        pred = X_i[i] @ beta
        diff = dataset.subjects[i].y - pred
        total += float(diff @ diff)
    return total / dataset.n


def lsocv_star(result: FitResult) -> float:
    """Quadratic approximation of the leave-subject-out score: mean squared
    residual plus twice the mean residual inflation through the hat blocks."""
    e = result.residuals
    inflate = 0.0
    for i, A_ii in enumerate(result.hat_blocks):
        e_i = result.subject_residual(i)
        inflate += float(e_i @ (A_ii @ e_i))
    return float(e @ e) / result.n + 2.0 * inflate / result.n


def v_star(result: FitResult) -> float:
    """Log-scale criterion scoring the weighted residual sum, the working
    correlation determinant, and a degrees-of-freedom penalty.

    For an indefinite working correlation the determinant term uses
    log|det W|; the leading quadratic form must stay positive.
    """
    f = result.fitter
    N = f.N
    if result.trace_A >= N:
        raise NumericalError("trace(A) >= N: degrees-of-freedom term undefined")
    u = f.w_matmul(f.Y)
    b1 = u - f.hat_apply(u, result.hfactor)
    b2 = b1 - f.hat_apply(b1, result.hfactor)
    num = float(f.Y @ b2) / N
    if num <= 0:
        raise NumericalError("weighted residual form is not positive; the "
                             "criterion is undefined for this working correlation")
    return float(np.log(num) - f.logabsdet_W / N
                 + 2.0 * result.trace_A / (N - result.trace_A))


@dataclass
class OracleScores:
    loss: float  # mean squared error of the fitted mean at the design points
    risk: float  # its expectation given the true covariance
    u_score: float  # risk surrogate, unbiased up to the lambda-free noise term


def oracle_scores(result: FitResult, mu_true, sigma_blocks) -> OracleScores:
    """Simulation-only diagnostics; require the true mean and the true
    per-subject covariance blocks."""
    f = result.fitter
    mu = np.asarray(mu_true, dtype=float)
    if mu.shape != (f.N,):
        raise ConfigError(f"mu_true must have length N={f.N}")
    if len(sigma_blocks) != f.n:
        raise ConfigError("need one covariance block per subject")
    n = f.n
    loss = float(np.sum((result.fitted - mu) ** 2)) / n

    resid_mu = mu - f.hat_apply(mu, result.hfactor)
    # K1 = X' W^{-1} Sigma X,  K2 = X' W^{-1} Sigma W^{-1} X, both p x p
    K1 = np.zeros((f.p, f.p))
    K2 = np.zeros((f.p, f.p))
    for sl, S_i in zip(f.slices, sigma_blocks):
        S_i = np.asarray(S_i, dtype=float)
        if S_i.shape != (sl.stop - sl.start, sl.stop - sl.start):
            raise ConfigError("covariance block size must match the subject")
        K1 += f.WX[sl].T @ S_i @ f.X[sl]
        K2 += f.WX[sl].T @ S_i @ f.WX[sl]
    # tr(A' A Sigma) = tr[(H^{-1} X'X)(H^{-1} K2)]
    HinvXtX = scipy.linalg.cho_solve(result.hfactor, f.X.T @ f.X)
    HinvK2 = scipy.linalg.cho_solve(result.hfactor, K2)
    tr_AAS = float(np.sum(HinvXtX * HinvK2.T))
    risk = float(resid_mu @ resid_mu) / n + tr_AAS / n

    tr_AS = float(np.trace(scipy.linalg.cho_solve(result.hfactor, K1)))
    e = result.residuals
    u_score = float(e @ e) / n + 2.0 * tr_AS / n
    return OracleScores(loss=loss, risk=risk, u_score=u_score)


def criterion_report(result: FitResult, mu_true=None, sigma_blocks=None,
                     include_v_star: bool = True) -> CriterionReport:
    """All criteria for one fit; oracle fields only when truth is supplied."""
    report = CriterionReport(
        lsocv=lsocv_exact(result),
        lsocv_star=lsocv_star(result),
    )
    if include_v_star:
        report.v_star = v_star(result)
    if mu_true is not None and sigma_blocks is not None:
        scores = oracle_scores(result, mu_true, sigma_blocks)
        report.loss = scores.loss
        report.risk = scores.risk
        report.u_score = scores.u_score
    return report
