"""Parameter-recovery diagnostics against a reference mixing measure."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .mixing import MixingMeasure, density_matrix
from .model import InvalidInputError


@dataclass
class VoronoiAssignment:
    cell_of: List[int]  # fitted atom -> true atom (0-based)
    cells: List[List[int]]  # true atom -> fitted atoms

    def over_covered(self) -> List[int]:
        return [k for k, c in enumerate(self.cells) if len(c) > 1]


@dataclass
class VoronoiLossReport:
    d_v: float
    d_e: float
    mass: float
    per_cell: List[dict] = field(default_factory=list)
    overfit_cells: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "d_v": self.d_v,
            "d_e": self.d_e,
            "mass": self.mass,
            "per_cell": self.per_cell,
            "overfit_cells": self.overfit_cells,
        }


@dataclass
class RateFit:
    slope: float
    intercept: float
    r2: float
    points: List[Tuple[float, float]]

    def to_dict(self) -> dict:
        return {"slope": self.slope, "intercept": self.intercept, "r2": self.r2, "points": [list(p) for p in self.points]}


def _check_compatible(G: MixingMeasure, G0: MixingMeasure) -> None:
    if (G.M, G.P, G.D) != (G0.M, G0.P, G0.D):
        raise InvalidInputError(f"measures differ in (M, P, D): {(G.M, G.P, G.D)} vs {(G0.M, G0.P, G0.D)}")


def voronoi_assign(G: MixingMeasure, G0: MixingMeasure) -> VoronoiAssignment:
    """Nearest true atom for every fitted atom (Euclidean, weights excluded).

    Ties go to the lowest true index.
    """
    _check_compatible(G, G0)
    fitted = np.stack([a.parameter_vector() for a in G.atoms])
    true = np.stack([a.parameter_vector() for a in G0.atoms])
    dist = ((fitted[:, None, :] - true[None, :, :]) ** 2).sum(axis=2)
    cell_of = [int(k) for k in np.argmin(dist, axis=1)]
    cells: List[List[int]] = [[] for _ in G0.atoms]
    for i, k in enumerate(cell_of):
        cells[k].append(i)
    return VoronoiAssignment(cell_of, cells)


def _differences(a, b):
    """Per free class: (||d gate slope||, |d intercept_m|, ||d slope_m||)."""
    dw = float(np.linalg.norm(a.gate_slope - b.gate_slope))
    out = []
    for m in range(a.expert_intercepts.shape[0]):
        out.append(
            (
                dw,
                abs(float(a.expert_intercepts[m] - b.expert_intercepts[m])),
                float(np.linalg.norm(a.expert_slopes[m] - b.expert_slopes[m])),
            )
        )
    return out


def voronoi_loss(G: MixingMeasure, G0: MixingMeasure, assignment: Optional[VoronoiAssignment] = None) -> VoronoiLossReport:
    """Mass discrepancy, linear errors on singleton cells, squared errors on over-covered cells.

    The gate-slope error sits inside the sum over free classes, so with
    ``M > 2`` it is counted once per free class.
    """
    assignment = assignment or voronoi_assign(G, G0)
    mass = 0.0
    linear = 0.0
    quadratic = 0.0
    per_cell = []
    for k, cell in enumerate(assignment.cells):
        true_atom = G0.atoms[k]
        cell_mass = sum(G.atoms[i].pi for i in cell)
        mass_k = abs(cell_mass - true_atom.pi)
        mass += mass_k
        lin_k = quad_k = 0.0
        for i in cell:
            a = G.atoms[i]
            for dw, db, ds in _differences(a, true_atom):
                if len(cell) == 1:
                    lin_k += a.pi * (dw + db + ds)
                else:
                    quad_k += a.pi * (dw**2 + db**2 + ds**2)
        linear += lin_k
        quadratic += quad_k
        per_cell.append({"cell": k, "size": len(cell), "mass": mass_k, "linear": lin_k, "quadratic": quad_k})
    d_e = mass + linear
    return VoronoiLossReport(d_v=d_e + quadratic, d_e=d_e, mass=mass, per_cell=per_cell,
                             overfit_cells=assignment.over_covered())


def component_errors(G: MixingMeasure, G0: MixingMeasure, assignment: Optional[VoronoiAssignment] = None) -> List[float]:
    """Euclidean error of every fitted atom's parameters against its matched true atom."""
    assignment = assignment or voronoi_assign(G, G0)
    return [
        float(np.linalg.norm(a.parameter_vector() - G0.atoms[k].parameter_vector()))
        for a, k in zip(G.atoms, assignment.cell_of)
    ]


def tv_discrepancy(G: MixingMeasure, G0: MixingMeasure, x_samples) -> float:
    """Average over ``x_samples`` of ``1/2 sum_m |s_G(m|x) - s_G0(m|x)|``."""
    _check_compatible(G, G0)
    x = np.atleast_2d(np.asarray(x_samples, dtype=float))
    if x.shape[0] < 1:
        raise InvalidInputError("need at least one evaluation point")
    diff = np.abs(density_matrix(G, x) - density_matrix(G0, x))
    return float(np.mean(0.5 * diff.sum(axis=1)))


def default_tv_samples(P: int, n: int = 10_000, seed: int = 0) -> np.ndarray:
    return np.random.default_rng(seed).standard_normal((n, P))


def grid_tv_samples(P: int, per_axis: int = 41, half_width: float = 3.0) -> np.ndarray:
    axes = [np.linspace(-half_width, half_width, per_axis)] * P
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def rate_slope(points: Sequence[Tuple[float, float]]) -> RateFit:
    """OLS of ``log metric`` on ``log N``.

    A constant metric gives slope 0 and ``r2 = 0``.
    """
    pts = [(float(n), float(v)) for n, v in points]
    if len(pts) < 3:
        raise InvalidInputError("rate_slope needs at least 3 points")
    if any(n <= 0 or v <= 0 for n, v in pts):
        raise InvalidInputError("sample sizes and metrics must be positive")
    lx = np.log([n for n, _ in pts])
    ly = np.log([v for _, v in pts])
    xc = lx - lx.mean()
    sxx = float(xc @ xc)
    if sxx == 0:
        raise InvalidInputError("need at least two distinct sample sizes")
    yc = ly - ly.mean()
    slope = float(xc @ yc) / sxx
    intercept = float(ly.mean() - slope * lx.mean())
    sst = float(yc @ yc)
    resid = ly - (intercept + slope * lx)
    r2 = 0.0 if sst <= 1e-30 * max(1.0, float(ly @ ly)) else 1.0 - float(resid @ resid) / sst
    if sst <= 1e-30 * max(1.0, float(ly @ ly)):
        slope = 0.0
        intercept = float(ly.mean())
    return RateFit(slope, intercept, r2, pts)
