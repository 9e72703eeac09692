"""Mixing-measure view of a fitted model, atom merging and the merge chain."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from .model import Dataset, InvalidInputError, ModelSpec, Theta, lift_matrix, logsumexp


@dataclass(frozen=True)
class Atom:
    """One weighted expert: gate slope, and per free class an intercept and slope.

    Slopes are stacked degree-major, ``[x_1^1..x_P^1, ..., x_1^D..x_P^D]``.
    """

    pi: float
    gate_slope: np.ndarray  # (P*D,)
    expert_intercepts: np.ndarray  # (M-1,)
    expert_slopes: np.ndarray  # (M-1, P*D)

    def __post_init__(self):
        if not (self.pi > 0 and np.isfinite(self.pi)):
            raise InvalidInputError(f"atom weight must be positive, got {self.pi}")
        object.__setattr__(self, "pi", float(self.pi))
        object.__setattr__(self, "gate_slope", np.asarray(self.gate_slope, dtype=float).reshape(-1))
        object.__setattr__(self, "expert_intercepts", np.asarray(self.expert_intercepts, dtype=float).reshape(-1))
        slopes = np.asarray(self.expert_slopes, dtype=float)
        object.__setattr__(self, "expert_slopes", slopes.reshape(self.expert_intercepts.shape[0], -1))

    @property
    def gate_intercept(self) -> float:
        return float(np.log(self.pi))

    def parameter_vector(self) -> np.ndarray:
        """``(gate slope, [intercept_m, slope_m] for m < M)``; the weight is excluded."""
        parts = [self.gate_slope]
        for m in range(self.expert_intercepts.shape[0]):
            parts.append(self.expert_intercepts[m : m + 1])
            parts.append(self.expert_slopes[m])
        return np.concatenate(parts)

    def with_weight(self, pi: float) -> "Atom":
        return Atom(pi, self.gate_slope, self.expert_intercepts, self.expert_slopes)

    def to_dict(self) -> dict:
        return {
            "pi": self.pi,
            "gate_slope": self.gate_slope.tolist(),
            "expert_intercepts": self.expert_intercepts.tolist(),
            "expert_slopes": self.expert_slopes.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Atom":
        return cls(d["pi"], d["gate_slope"], d["expert_intercepts"], d["expert_slopes"])


@dataclass(frozen=True)
class MixingMeasure:
    atoms: Tuple[Atom, ...]
    M: int
    P: int
    D: int

    def __post_init__(self):
        atoms = tuple(self.atoms)
        if not atoms:
            raise InvalidInputError("a mixing measure needs at least one atom")
        for a in atoms:
            if a.gate_slope.shape != (self.P * self.D,) or a.expert_slopes.shape != (self.M - 1, self.P * self.D):
                raise InvalidInputError("atom shapes do not match (M, P, D)")
        object.__setattr__(self, "atoms", atoms)

    def __len__(self):
        return len(self.atoms)

    @property
    def weights(self) -> np.ndarray:
        return np.array([a.pi for a in self.atoms])

    @property
    def total_weight(self) -> float:
        return float(sum(a.pi for a in self.atoms))

    def normalized(self) -> "MixingMeasure":
        total = self.total_weight
        return MixingMeasure(tuple(a.with_weight(a.pi / total) for a in self.atoms), self.M, self.P, self.D)

    def scaled(self, c: float) -> "MixingMeasure":
        return MixingMeasure(tuple(a.with_weight(a.pi * c) for a in self.atoms), self.M, self.P, self.D)

    def to_dict(self) -> dict:
        return {"spec": {"M": self.M, "P": self.P, "D": self.D}, "atoms": [a.to_dict() for a in self.atoms]}

    @classmethod
    def from_dict(cls, d: dict) -> "MixingMeasure":
        spec = d["spec"]
        return cls(tuple(Atom.from_dict(a) for a in d["atoms"]), int(spec["M"]), int(spec["P"]), int(spec["D"]))


def _split(coef: np.ndarray) -> Tuple[float, np.ndarray]:
    """(D+1, P) coefficients -> (intercept summed over p, degree-major slope)."""
    return float(coef[0].sum()), coef[1:].reshape(-1)


def from_theta(theta: Theta) -> MixingMeasure:
    """Atoms of ``theta`` with weights ``softmax`` of the gate intercepts.

    The reference expert becomes an atom with zero gate slope; normalizing the
    weights to sum to one is a common intercept shift, so the induced
    conditional pmf is unchanged.
    """
    spec = theta.spec
    intercepts = np.zeros(spec.K)
    slopes = np.zeros((spec.K, spec.n_slope))
    for k in range(spec.K - 1):
        intercepts[k], slopes[k] = _split(theta.gate[k])
    weights = np.exp(intercepts - logsumexp(intercepts))
    atoms = []
    for k in range(spec.K):
        e_int = np.zeros(spec.M - 1)
        e_slope = np.zeros((spec.M - 1, spec.n_slope))
        for m in range(spec.M - 1):
            e_int[m], e_slope[m] = _split(theta.experts[m, k])
        atoms.append(Atom(weights[k], slopes[k], e_int, e_slope))
    return MixingMeasure(tuple(atoms), spec.M, spec.P, spec.D)


def to_theta(G: MixingMeasure) -> Theta:
    """A parameterization of ``G`` with the last atom as reference expert.

    Intercepts are placed on the first covariate's constant coefficient.
    """
    spec = ModelSpec(K=len(G), M=G.M, P=G.P, D=G.D)
    gate = np.zeros(spec.gate_shape)
    experts = np.zeros(spec.expert_shape)
    ref = G.atoms[-1]
    for k, a in enumerate(G.atoms):
        if k < spec.K - 1:
            gate[k, 0, 0] = np.log(a.pi) - np.log(ref.pi)
            gate[k, 1:] = (a.gate_slope - ref.gate_slope).reshape(G.D, G.P)
        for m in range(G.M - 1):
            experts[m, k, 0, 0] = a.expert_intercepts[m]
            experts[m, k, 1:] = a.expert_slopes[m].reshape(G.D, G.P)
    return Theta(spec, gate, experts)


def slope_features(x, D: int) -> np.ndarray:
    """Degree-major non-constant lifted features, (N, P*D)."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    lifted = lift_matrix(x, D).reshape(x.shape[0], x.shape[1], D + 1)
    return lifted[:, :, 1:].transpose(0, 2, 1).reshape(x.shape[0], x.shape[1] * D)


def _log_mixture_terms(G: MixingMeasure, x) -> np.ndarray:
    """``log g_i(x) + log e_i(m | x)`` as (N, kappa, M)."""
    H = slope_features(x, G.D)
    weights = G.weights
    gate_slopes = np.stack([a.gate_slope for a in G.atoms])
    gs = np.log(weights)[None, :] + H @ gate_slopes.T
    log_g = gs - logsumexp(gs, axis=1, keepdims=True)
    N = H.shape[0]
    es = np.zeros((N, len(G), G.M))
    for i, a in enumerate(G.atoms):
        es[:, i, :-1] = a.expert_intercepts[None, :] + H @ a.expert_slopes.T
    log_e = es - logsumexp(es, axis=2, keepdims=True)
    return log_g[:, :, None] + log_e


def density_matrix(G: MixingMeasure, x) -> np.ndarray:
    """``s_G(. | x)`` for every row of ``x``, (N, M)."""
    return np.exp(logsumexp(_log_mixture_terms(G, x), axis=1))


def density_of_measure(G: MixingMeasure, x_row) -> np.ndarray:
    x = np.asarray(x_row, dtype=float).reshape(1, -1)
    if x.shape[1] != G.P:
        raise InvalidInputError(f"x_row has length {x.shape[1]}, expected P={G.P}")
    return density_matrix(G, x)[0]


def mean_log_likelihood(G: MixingMeasure, data: Dataset) -> float:
    """Empirical ``(1/N) sum_n log s_G(y_n | x_n)``."""
    if data.N == 0:
        raise InvalidInputError("empty dataset")
    terms = _log_mixture_terms(G, data.x)
    log_s = logsumexp(terms, axis=1)
    return float(np.mean(log_s[np.arange(data.N), data.y - 1]))


def dissimilarity(a: Atom, b: Atom) -> float:
    """Weighted squared parameter distance ``pi_a pi_b / (pi_a + pi_b) * ||eta_a - eta_b||^2``.

    The gate intercept (the weight itself) does not enter the distance.
    """
    diff = a.parameter_vector() - b.parameter_vector()
    return (a.pi * b.pi / (a.pi + b.pi)) * float(diff @ diff)


def merge_pair(a: Atom, b: Atom) -> Atom:
    """Weight-averaged atom with weight ``pi_a + pi_b``."""
    total = a.pi + b.pi
    wa, wb = a.pi / total, b.pi / total
    return Atom(
        total,
        wa * a.gate_slope + wb * b.gate_slope,
        wa * a.expert_intercepts + wb * b.expert_intercepts,
        wa * a.expert_slopes + wb * b.expert_slopes,
    )


def pairwise_dissimilarities(G: MixingMeasure) -> np.ndarray:
    n = len(G)
    out = np.full((n, n), np.inf)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = dissimilarity(G.atoms[i], G.atoms[j])
    return out


@dataclass
class MergeChain:
    """Measures at kappa = K, K-1, ..., stop and the merge that leaves each level.

    ``heights[i]`` and ``merged_pairs[i]`` describe leaving ``levels[i]``; the
    final level has no outgoing merge.  Pair indices are 0-based positions in
    the level being left; the merged atom takes the lower position.
    """

    levels: List[MixingMeasure]
    heights: List[float]
    merged_pairs: List[Tuple[int, int]]
    logliks: Optional[List[float]] = None

    @property
    def kappas(self) -> List[int]:
        return [len(G) for G in self.levels]

    def height_at(self, kappa: int) -> float:
        return self.heights[self.kappas.index(kappa)]

    def loglik_at(self, kappa: int) -> float:
        if self.logliks is None:
            raise InvalidInputError("chain was built without data")
        return self.logliks[self.kappas.index(kappa)]

    def measure_at(self, kappa: int) -> MixingMeasure:
        return self.levels[self.kappas.index(kappa)]

    def to_dict(self) -> dict:
        return {
            "kappas": self.kappas,
            "levels": [G.to_dict() for G in self.levels],
            "heights": [float(h) for h in self.heights],
            "merged_pairs": [[int(i), int(j)] for i, j in self.merged_pairs],
            "logliks": None if self.logliks is None else [float(v) for v in self.logliks],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MergeChain":
        return cls(
            levels=[MixingMeasure.from_dict(G) for G in d["levels"]],
            heights=[float(h) for h in d["heights"]],
            merged_pairs=[(int(i), int(j)) for i, j in d["merged_pairs"]],
            logliks=None if d.get("logliks") is None else [float(v) for v in d["logliks"]],
        )


def build_chain(G: MixingMeasure, data: Optional[Dataset] = None, stop_at: int = 2) -> MergeChain:
    """Greedily merge the closest pair of atoms down to ``stop_at`` atoms.

    Heights are recorded for every level from ``len(G)`` down to ``stop_at``:
    at levels above ``stop_at`` this is the dissimilarity of the merged pair;
    at ``stop_at`` itself it is the minimum pairwise dissimilarity of that
    level (no merge follows).  Ties go to the lexicographically smallest pair.
    """
    if stop_at < 1:
        raise InvalidInputError("stop_at must be at least 1")
    if len(G) < max(stop_at, 2):
        raise InvalidInputError(f"need at least {max(stop_at, 2)} atoms to build a chain, got {len(G)}")
    levels, heights, pairs = [G], [], []
    logliks = [mean_log_likelihood(G, data)] if data is not None else None
    current = G
    while True:
        if len(current) == 1:
            heights.append(0.0)
            break
        dist = pairwise_dissimilarities(current)
        flat = int(np.argmin(dist))  # row-major argmin == smallest (i, j) among ties
        i, j = divmod(flat, len(current))
        heights.append(float(dist[i, j]))
        if len(current) == stop_at:
            break
        pairs.append((i, j))
        atoms = list(current.atoms)
        atoms[i] = merge_pair(atoms[i], atoms[j])
        del atoms[j]
        current = MixingMeasure(tuple(atoms), G.M, G.P, G.D)
        levels.append(current)
        if logliks is not None:
            logliks.append(mean_log_likelihood(current, data))
    return MergeChain(levels, heights, pairs, logliks)
