"""Working-correlation structure selection: fit each candidate as a
regression spline (zero penalty) and keep the one with the smallest exact
leave-subject-out score."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import DesignAssembly
from .correlation import (
    CorrelationModel,
    clip_correlation,
    estimate_ar1_rho,
    estimate_cs_rho,
    estimate_unstructured,
    independence,
    unstructured,
)
from .criteria import lsocv_exact
from .data import LongitudinalDataset
from .errors import LsocvError, NumericalError
from .estimator import PenalizedFitter
from .optimizer import OptimizerConfig, optimize_lambda


@dataclass
class SelectionReport:
    candidates: list[CorrelationModel]
    scores: list[float | None]  # None for candidates that failed and were excluded
    chosen: int  # index into candidates
    lambda_policy: str
    tie: bool = False
    failures: dict = field(default_factory=dict)  # index -> error message

    @property
    def chosen_model(self) -> CorrelationModel:
        return self.candidates[self.chosen]

    def to_json(self) -> dict:
        return {
            "candidates": [
                {**m.to_json(), "lsocv": self.scores[i]}
                for i, m in enumerate(self.candidates)
            ],
            "chosen": self.chosen,
            "lambda_policy": self.lambda_policy,
            "tie": self.tie,
            "failures": {str(k): v for k, v in self.failures.items()},
        }


def select_correlation(dataset: LongitudinalDataset, assembly: DesignAssembly,
                       candidates: list[CorrelationModel],
                       lambda_policy: str = "zero") -> SelectionReport:
    """Score every candidate working correlation and pick the smallest exact
    leave-subject-out value.

    The default policy fits unpenalized regression splines (lambda = 0),
    which keeps the comparison cheap and stable; "optimize" re-tunes the
    penalties per candidate instead. Candidates whose blocks fail the
    near-singularity guard are excluded and reported.
    """
    if not candidates:
        raise LsocvError("need at least one candidate structure")
    if lambda_policy not in ("zero", "optimize"):
        raise LsocvError(f"unknown lambda policy {lambda_policy!r}")
    scores: list[float | None] = []
    failures: dict[int, str] = {}
    for i, cand in enumerate(candidates):
        try:
            fitter = PenalizedFitter(dataset, assembly, cand)
            if lambda_policy == "zero":
                res = fitter.fit(np.zeros(len(assembly.penalties)))
            else:
                res = optimize_lambda(dataset, assembly, cand,
                                      OptimizerConfig(), fitter=fitter).fit
            scores.append(lsocv_exact(res))
        except LsocvError as exc:
            scores.append(None)
            failures[i] = str(exc)
    valid = [(s, i) for i, s in enumerate(scores) if s is not None]
    if not valid:
        raise NumericalError("all candidate structures failed")
    best = min(v for v, _ in valid)
    winners = [i for v, i in valid if v == best]
    return SelectionReport(candidates=candidates, scores=scores, chosen=winners[0],
                           lambda_policy=lambda_policy, tie=len(winners) > 1,
                           failures=failures)


def estimate_candidates(dataset: LongitudinalDataset, assembly: DesignAssembly,
                        structures: tuple[str, ...] = ("ind", "cs", "ar1", "un"),
                        ) -> list[CorrelationModel]:
    """Data-driven candidate set: fit working independence without penalty and
    plug method-of-moments parameter estimates into each requested family."""
    fitter = PenalizedFitter(dataset, assembly, independence())
    res = fitter.fit(np.zeros(len(assembly.penalties)), compute_hat=False)
    resids = [res.residuals[sl] for sl in fitter.slices]
    max_ni = max(dataset.sizes)
    out = []
    for s in structures:
        if s == "ind":
            out.append(independence())
        elif s == "cs":
            rho = clip_correlation("cs", estimate_cs_rho(resids), max_ni)
            out.append(CorrelationModel("cs", rho=rho))
        elif s == "ar1":
            rho = clip_correlation("ar1", estimate_ar1_rho(resids), max_ni)
            out.append(CorrelationModel("ar1", rho=rho))
        elif s == "un":
            out.append(unstructured(estimate_unstructured(resids)))
        else:
            raise LsocvError(f"cannot estimate parameters for structure {s!r}")
    return out
