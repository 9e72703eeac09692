"""Choosing the number of experts: DSC on a merge chain, AIC/BIC/ICL on sweeps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mixing import MergeChain
from .mm import FitOptions, FitTrace, fit_mm, responsibilities
from .model import Dataset, InvalidInputError, ModelSpec, Theta, log_likelihood

CRITERIA = ("AIC", "BIC", "ICL")


@dataclass
class SelectionReport:
    criterion: str
    candidates: List[int]
    scores: List[float]
    chosen_k: int
    omega_n: Optional[float] = None
    details: List[dict] = field(default_factory=list)

    def score_of(self, kappa: int) -> float:
        return self.scores[self.candidates.index(kappa)]

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion,
            "candidates": [int(k) for k in self.candidates],
            "scores": [float(s) for s in self.scores],
            "chosen_k": int(self.chosen_k),
            "omega_n": None if self.omega_n is None else float(self.omega_n),
            "details": self.details,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SelectionReport":
        return cls(
            criterion=d["criterion"],
            candidates=[int(k) for k in d["candidates"]],
            scores=[float(s) for s in d["scores"]],
            chosen_k=int(d["chosen_k"]),
            omega_n=d.get("omega_n"),
            details=list(d.get("details", [])),
        )

    def csv_rows(self) -> List[dict]:
        rows = []
        for kappa, score, det in zip(self.candidates, self.scores, self.details):
            rows.append({"kappa": kappa, "height": det.get("height"), "loglik": det.get("loglik"), "score": score})
        return rows


def _argmin_smallest(candidates: Sequence[int], scores: Sequence[float]) -> int:
    """Candidate with the lowest score; ties go to the smallest candidate."""
    best = None
    for kappa, score in sorted(zip(candidates, scores)):
        if best is None or score < best[1]:
            best = (kappa, score)
    return best[0]


def dsc_scores(chain: MergeChain, N: int, omega: Optional[float] = None, include_one: bool = False) -> SelectionReport:
    """``DSC(kappa) = -(h(kappa) + omega * mean loglik(kappa))`` over the chain levels.

    ``omega`` defaults to ``log N``.  Level 1 is only a candidate when
    ``include_one`` is set and the chain reaches it.
    """
    if chain.logliks is None:
        raise InvalidInputError("DSC needs per-level log-likelihoods; build the chain with data")
    if N < 2:
        raise InvalidInputError("DSC needs N >= 2")
    omega_n = math.log(N) if omega is None else float(omega)
    candidates, scores, details = [], [], []
    for kappa, h, ll in zip(chain.kappas, chain.heights, chain.logliks):
        if kappa < 2 and not include_one:
            continue
        candidates.append(kappa)
        scores.append(-(h + omega_n * ll))
        details.append({"kappa": kappa, "height": h, "loglik": ll})
    if not candidates:
        raise InvalidInputError("chain has no level with at least two atoms")
    return SelectionReport("DSC", candidates, scores, _argmin_smallest(candidates, scores), omega_n, details)


def param_count(spec: ModelSpec) -> int:
    """Free parameters once the reference expert and reference class are removed."""
    L = spec.P * (spec.D + 1)
    return (spec.K - 1) * L + spec.K * (spec.M - 1) * L


def entropy(tau: np.ndarray) -> float:
    """``-sum tau log tau`` with ``0 log 0 = 0``."""
    t = tau[tau > 0]
    return float(-np.sum(t * np.log(t)))


def criterion_scores(fits: Sequence[Tuple[Theta, FitTrace, Dataset]], criterion: str) -> SelectionReport:
    """Score a sweep of fits with AIC, BIC or ICL (lower is better).

    AIC = 2p - 2L, BIC = p log N - 2L and ICL = BIC + 2 EN(tau) where EN is
    the entropy of the fitted responsibilities.
    """
    criterion = criterion.upper()
    if criterion not in CRITERIA:
        raise InvalidInputError(f"unknown criterion {criterion!r}; expected one of {CRITERIA}")
    if not fits:
        raise InvalidInputError("no fits to score")
    ref = fits[0][2]
    for _, _, data in fits:
        if data is not ref and not (
            data.N == ref.N and np.array_equal(data.x, ref.x) and np.array_equal(data.y, ref.y)
        ):
            raise InvalidInputError("all fits must share the same dataset")
    rows = []
    for theta, _trace, data in fits:
        p = param_count(theta.spec)
        ll = log_likelihood(theta, data)
        bic = p * math.log(data.N) - 2.0 * ll
        if criterion == "AIC":
            score = 2.0 * p - 2.0 * ll
        elif criterion == "BIC":
            score = bic
        else:
            score = bic + 2.0 * entropy(responsibilities(theta, data))
        rows.append((theta.spec.K, score, {"kappa": theta.spec.K, "loglik": ll, "param_count": p}))
    rows.sort(key=lambda r: r[0])
    kappas = [r[0] for r in rows]
    if len(set(kappas)) != len(kappas):
        raise InvalidInputError("duplicate expert counts in sweep")
    scores = [r[1] for r in rows]
    return SelectionReport(criterion, kappas, scores, _argmin_smallest(kappas, scores), None, [r[2] for r in rows])


def sweep_fit(data: Dataset, k_max: int, opts: Optional[FitOptions] = None, seed: int = 0, M: Optional[int] = None,
              D: int = 1) -> List[Tuple[Theta, FitTrace]]:
    """Fit kappa = 1..k_max experts, each from a clustering-based start."""
    from .init import init_from_clustering

    if k_max < 1:
        raise InvalidInputError("k_max must be at least 1")
    M = M or data.M or int(data.y.max())
    out = []
    for kappa in range(1, k_max + 1):
        theta0 = init_from_clustering(data, kappa, seed=seed, M=M, D=D)
        out.append(fit_mm(theta0, data, opts))
    return out
