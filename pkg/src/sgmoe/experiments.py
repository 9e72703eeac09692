"""Synthetic study drivers: Voronoi-loss rates and DSC-versus-criteria selection."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .diagnostics import RateFit, component_errors, rate_slope, voronoi_assign, voronoi_loss
from .init import init_from_clustering, init_perturbed_truth
from .mixing import build_chain, from_theta
from .mm import FitOptions, fit_mm
from .model import InvalidInputError, Theta, reference_truth, sample_dataset
from .selection import criterion_scores, dsc_scores, sweep_fit

log = logging.getLogger(__name__)


def derive_seeds(seed: int, *keys: int, n: int = 2) -> List[int]:
    """Independent child seeds for one (seed, keys...) job."""
    return [int(s) for s in np.random.SeedSequence([seed, *keys]).generate_state(n)]


@dataclass
class RateConfig:
    """One rate experiment.

    ``init`` is ``"perturbed"`` (truth plus ``noise`` Gaussian perturbation,
    with ``K - K0`` template duplicates appended) or ``"cluster"``.
    """

    truth: Theta = field(default_factory=reference_truth)
    K: int = 2
    n_grid: List[int] = field(default_factory=lambda: [1000, 3162, 10000, 31623])
    seeds: List[int] = field(default_factory=lambda: list(range(10)))
    init: str = "perturbed"
    noise: float = 1.0
    tol: Optional[float] = None
    max_iters: int = 5000
    ridge: float = 1e-8
    workers: int = 1

    def __post_init__(self):
        if self.K < self.truth.spec.K and self.init == "perturbed":
            raise InvalidInputError("perturbed-truth init needs K >= K0")
        if self.init not in ("perturbed", "cluster"):
            raise InvalidInputError(f"unknown init scheme {self.init!r}")
        if len(set(self.n_grid)) < 3:
            raise InvalidInputError("rate experiments need at least 3 distinct sample sizes")

    def fit_options(self) -> FitOptions:
        return FitOptions(tol=self.tol, max_iters=self.max_iters, ridge=self.ridge, record_trace=False)

    def to_dict(self) -> dict:
        from .io import theta_to_dict

        d = asdict(self)
        d["truth"] = theta_to_dict(self.truth)
        return d


def fit_one(truth: Theta, K: int, N: int, seed: int, init: str, noise: float, opts: FitOptions):
    """Sample, initialize and fit one replicate; returns (data, theta0, fit, trace)."""
    data_seed, init_seed = derive_seeds(seed, N)
    data = sample_dataset(truth, N, seed=data_seed)
    if init == "perturbed":
        theta0 = init_perturbed_truth(truth, noise=noise, extra_experts=K - truth.spec.K, seed=init_seed)
    else:
        theta0 = init_from_clustering(data, K, seed=init_seed, M=truth.spec.M, D=truth.spec.D)
    fit, trace = fit_mm(theta0, data, opts)
    return data, theta0, fit, trace


def _rate_job(args) -> dict:
    config, N, seed = args
    _, _, fit, trace = fit_one(config.truth, config.K, N, seed, config.init, config.noise, config.fit_options())
    G0 = from_theta(config.truth)
    G = from_theta(fit)
    assign = voronoi_assign(G, G0)
    loss = voronoi_loss(G, G0, assign)
    errs = component_errors(G, G0, assign)
    row = {"N": N, "seed": seed, "d_v": loss.d_v, "d_e": loss.d_e, "iters": trace.iters,
           "converged": trace.converged, "loglik": trace.loglik[-1]}
    for i, (e, k) in enumerate(zip(errs, assign.cell_of)):
        row[f"err_{i + 1}"] = e
        row[f"cell_{i + 1}"] = k + 1
        row[f"overcovered_{i + 1}"] = len(assign.cells[k]) > 1
    return row


@dataclass
class RateResult:
    rows: List[dict]
    d_v: RateFit
    components: Dict[int, RateFit]
    overcovered: Dict[int, bool]

    def slopes_dict(self) -> dict:
        return {
            "d_v": self.d_v.to_dict(),
            "components": {
                str(i): {**fit.to_dict(), "overcovered": self.overcovered[i]} for i, fit in self.components.items()
            },
        }


def _map(fn, jobs, workers: int):
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(fn, jobs))
    return [fn(j) for j in jobs]


def run_rate_experiment(config: RateConfig) -> RateResult:
    """Fit every (N, seed), then regress per-N medians on N in log-log scale.

    A fitted component counts as over-covered when its Voronoi cell holds more
    than one atom in at least half of the runs.
    """
    jobs = [(config, N, s) for N in config.n_grid for s in config.seeds]
    rows = _map(_rate_job, jobs, config.workers)
    grid = sorted(set(config.n_grid))

    def medians(key):
        return [(N, float(np.median([r[key] for r in rows if r["N"] == N]))) for N in grid]

    d_v = rate_slope(medians("d_v"))
    components, overcovered = {}, {}
    for i in range(1, config.K + 1):
        pts = medians(f"err_{i}")
        overcovered[i] = float(np.mean([r[f"overcovered_{i}"] for r in rows])) >= 0.5
        if all(v > 0 for _, v in pts):
            components[i] = rate_slope(pts)
    return RateResult(rows, d_v, components, overcovered)


@dataclass
class SelectionConfig:
    """Repeated DSC-versus-criteria comparison at one sample size."""

    truth: Theta = field(default_factory=reference_truth)
    K: int = 4
    N: int = 10_000
    seeds: List[int] = field(default_factory=lambda: list(range(20)))
    noise: float = 1.0
    criteria: Sequence[str] = ("AIC", "BIC", "ICL")
    tol: Optional[float] = None
    max_iters: int = 5000
    ridge: float = 1e-8
    omega: Optional[float] = None
    workers: int = 1

    def fit_options(self) -> FitOptions:
        return FitOptions(tol=self.tol, max_iters=self.max_iters, ridge=self.ridge, record_trace=False)


def _selection_job(args) -> dict:
    config, seed = args
    data, _, fit, _ = fit_one(config.truth, config.K, config.N, seed, "perturbed", config.noise, config.fit_options())
    chain = build_chain(from_theta(fit), data)
    row = {"N": config.N, "seed": seed, "DSC": dsc_scores(chain, data.N, config.omega).chosen_k}
    if config.criteria:
        sweep_seed = derive_seeds(seed, config.N, n=3)[2]
        sweep = sweep_fit(data, config.K, config.fit_options(), seed=sweep_seed, M=config.truth.spec.M,
                          D=config.truth.spec.D)
        fits = [(theta, trace, data) for theta, trace in sweep]
        for crit in config.criteria:
            row[crit] = criterion_scores(fits, crit).chosen_k
    return row


def run_selection_experiment(config: SelectionConfig) -> List[dict]:
    """One row per seed with the expert count chosen by DSC and each criterion."""
    return _map(_selection_job, [(config, s) for s in config.seeds], config.workers)
