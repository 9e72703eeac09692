"""Softmax-gated multinomial-logistic mixture of experts.

Parameters are stored in the reduced identifiable shape: the last expert's
gate coefficients and every expert's last-class coefficients are fixed at
zero and never materialized.

Index layout
------------
gate:    (K-1, D+1, P)      gate[k, d, p]       -> omega_{k,d,p}
experts: (M-1, K, D+1, P)   experts[m, k, d, p] -> upsilon_{m,k,d,p}

Lifted features use p-major ordering, ``[x_1^0..x_1^D, ..., x_P^0..x_P^D]``,
so the lifted index of ``(d, p)`` is ``p * (D + 1) + d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np


class InvalidInputError(ValueError):
    """Raised for non-finite values, bad labels or inconsistent shapes."""


@dataclass(frozen=True)
class ModelSpec:
    K: int
    M: int
    P: int
    D: int

    def __post_init__(self):
        for name in ("K", "M", "P", "D"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise InvalidInputError(f"{name} must be a positive integer, got {value!r}")
            object.__setattr__(self, name, int(value))
        if self.M < 2:
            raise InvalidInputError(f"M must be at least 2, got {self.M}")

    @property
    def n_lifted(self) -> int:
        return self.P * (self.D + 1)

    @property
    def n_slope(self) -> int:
        return self.P * self.D

    @property
    def gate_shape(self) -> tuple:
        return (self.K - 1, self.D + 1, self.P)

    @property
    def expert_shape(self) -> tuple:
        return (self.M - 1, self.K, self.D + 1, self.P)

    def to_dict(self) -> dict:
        return {"K": self.K, "M": self.M, "P": self.P, "D": self.D}


class Theta:
    """Identifiable SGMLMoE parameters (immutable).

    ``gate`` and ``experts`` are read-only arrays in the layout described in
    the module docstring.
    """

    __slots__ = ("spec", "gate", "experts")

    def __init__(self, spec: ModelSpec, gate, experts):
        gate = np.array(gate, dtype=float).reshape(spec.gate_shape)
        experts = np.array(experts, dtype=float).reshape(spec.expert_shape)
        if not (np.all(np.isfinite(gate)) and np.all(np.isfinite(experts))):
            raise InvalidInputError("theta entries must be finite")
        gate.flags.writeable = False
        experts.flags.writeable = False
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "gate", gate)
        object.__setattr__(self, "experts", experts)

    def __setattr__(self, name, value):
        raise AttributeError("Theta is immutable")

    def __repr__(self):
        return f"Theta(spec={self.spec})"

    def __eq__(self, other):
        if not isinstance(other, Theta):
            return NotImplemented
        return (
            self.spec == other.spec
            and np.array_equal(self.gate, other.gate)
            and np.array_equal(self.experts, other.experts)
        )

    __hash__ = None

    @classmethod
    def zeros(cls, spec: ModelSpec) -> "Theta":
        return cls(spec, np.zeros(spec.gate_shape), np.zeros(spec.expert_shape))

    # -- flat views used by the optimizer -------------------------------
    def gate_matrix(self) -> np.ndarray:
        """Gate coefficients as a (K-1, P(D+1)) matrix in lifted order."""
        return np.ascontiguousarray(self.gate.transpose(0, 2, 1)).reshape(self.spec.K - 1, self.spec.n_lifted)

    def expert_tensor(self) -> np.ndarray:
        """Expert coefficients as a (K, M-1, P(D+1)) tensor in lifted order."""
        s = self.spec
        return np.ascontiguousarray(self.experts.transpose(1, 0, 3, 2)).reshape(s.K, s.M - 1, -1)

    @classmethod
    def from_matrices(cls, spec: ModelSpec, gate_matrix, expert_tensor) -> "Theta":
        """Inverse of :meth:`gate_matrix` / :meth:`expert_tensor`."""
        W = np.asarray(gate_matrix, dtype=float).reshape(spec.K - 1, spec.P, spec.D + 1)
        V = np.asarray(expert_tensor, dtype=float).reshape(spec.K, spec.M - 1, spec.P, spec.D + 1)
        return cls(spec, W.transpose(0, 2, 1), V.transpose(1, 0, 3, 2))

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.gate.ravel(), self.experts.ravel()])


@dataclass(frozen=True)
class Dataset:
    """Covariates ``x`` (N, P) and 1-based labels ``y`` in {1..M}."""

    x: np.ndarray
    y: np.ndarray
    M: Optional[int] = None
    _lifted: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(-1, 1) if x.size else x.reshape(0, 1)
        if x.ndim != 2:
            raise InvalidInputError("x must be an N x P matrix")
        y_raw = np.asarray(self.y)
        y = y_raw.astype(np.int64).reshape(-1)
        if y_raw.size and not np.array_equal(y, y_raw.reshape(-1)):
            raise InvalidInputError("labels must be integers")
        if y.shape[0] != x.shape[0]:
            raise InvalidInputError(f"x has {x.shape[0]} rows but y has {y.shape[0]} labels")
        if not np.all(np.isfinite(x)):
            raise InvalidInputError("covariates must be finite")
        if y.size and y.min() < 1:
            raise InvalidInputError("labels must lie in {1..M}")
        if self.M is not None and y.size and y.max() > self.M:
            raise InvalidInputError(f"label {int(y.max())} exceeds M={self.M}")
        x.flags.writeable = False
        y.flags.writeable = False
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "y", y)

    @property
    def N(self) -> int:
        return self.x.shape[0]

    @property
    def P(self) -> int:
        return self.x.shape[1]

    def lifted(self, D: int) -> np.ndarray:
        """Cached (N, P(D+1)) lifted design."""
        if D not in self._lifted:
            X = lift_matrix(self.x, D)
            X.flags.writeable = False
            self._lifted[D] = X
        return self._lifted[D]

    def check(self, spec: ModelSpec) -> None:
        if self.P != spec.P:
            raise InvalidInputError(f"dataset has P={self.P}, model expects P={spec.P}")
        if self.N and self.y.max() > spec.M:
            raise InvalidInputError(f"label {int(self.y.max())} exceeds M={spec.M}")

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], self.y[idx], self.M)

    def concat(self, other: "Dataset") -> "Dataset":
        return Dataset(np.vstack([self.x, other.x]), np.concatenate([self.y, other.y]), self.M)


def lift_features(x_row, D: int) -> np.ndarray:
    """Per-coordinate polynomial expansion ``[x_1^0..x_1^D, ..., x_P^0..x_P^D]``."""
    x = np.asarray(x_row, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("x_row must be finite")
    return lift_matrix(x[None, :], D)[0]


def lift_matrix(x, D: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("covariates must be finite")
    powers = x[:, :, None] ** np.arange(D + 1)[None, None, :]
    # 0**0 is 1 in numpy, so the constant column is exact
    return powers.reshape(x.shape[0], x.shape[1] * (D + 1))


def logsumexp(a: np.ndarray, axis: int = -1, keepdims: bool = False) -> np.ndarray:
    """Max-shifted log-sum-exp (finite inputs only)."""
    m = np.max(a, axis=axis, keepdims=True)
    out = m + np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True))
    return out if keepdims else np.squeeze(out, axis=axis)


def _with_reference(scores: np.ndarray) -> np.ndarray:
    """Append the fixed zero logit of the reference category on the last axis."""
    pad = [(0, 0)] * (scores.ndim - 1) + [(0, 1)]
    return np.pad(scores, pad)


def gate_log_probs(theta: Theta, X: np.ndarray) -> np.ndarray:
    """Log gate probabilities, (N, K), from a lifted design."""
    scores = _with_reference(X @ theta.gate_matrix().T)
    return scores - logsumexp(scores, axis=1, keepdims=True)


def expert_log_probs(theta: Theta, X: np.ndarray) -> np.ndarray:
    """Log class probabilities per expert, (N, K, M), from a lifted design."""
    scores = _with_reference(np.einsum("nl,kml->nkm", X, theta.expert_tensor()))
    return scores - logsumexp(scores, axis=2, keepdims=True)


def _lift_row(theta: Theta, x_row) -> np.ndarray:
    x = np.asarray(x_row, dtype=float).reshape(-1)
    if x.shape[0] != theta.spec.P:
        raise InvalidInputError(f"x_row has length {x.shape[0]}, expected P={theta.spec.P}")
    return lift_features(x, theta.spec.D)[None, :]


def gate_probs(theta: Theta, x_row) -> np.ndarray:
    return np.exp(gate_log_probs(theta, _lift_row(theta, x_row))[0])


def expert_probs(theta: Theta, x_row, k: int) -> np.ndarray:
    """Class probabilities of expert ``k`` (1-based)."""
    if not 1 <= k <= theta.spec.K:
        raise InvalidInputError(f"expert index {k} outside 1..{theta.spec.K}")
    return np.exp(expert_log_probs(theta, _lift_row(theta, x_row))[0, k - 1])


def log_joint(theta: Theta, data: Dataset) -> np.ndarray:
    """``log g_k(x_n) + log e_k(y_n; x_n)`` as an (N, K) matrix."""
    data.check(theta.spec)
    X = data.lifted(theta.spec.D)
    log_e = expert_log_probs(theta, X)
    log_e_y = np.take_along_axis(log_e, (data.y - 1)[:, None, None], axis=2)[:, :, 0]
    return gate_log_probs(theta, X) + log_e_y


def predict_proba_matrix(theta: Theta, x) -> np.ndarray:
    """Mixture class probabilities for every row of ``x``, (N, M)."""
    X = lift_matrix(np.atleast_2d(np.asarray(x, dtype=float)), theta.spec.D)
    log_mix = gate_log_probs(theta, X)[:, :, None] + expert_log_probs(theta, X)
    return np.exp(logsumexp(log_mix, axis=1))


def predict_proba(theta: Theta, x_row) -> np.ndarray:
    x = np.asarray(x_row, dtype=float).reshape(1, -1)
    if x.shape[1] != theta.spec.P:
        raise InvalidInputError(f"x_row has length {x.shape[1]}, expected P={theta.spec.P}")
    return predict_proba_matrix(theta, x)[0]


def log_likelihood(theta: Theta, data: Dataset) -> float:
    """Observed-data log-likelihood ``sum_n log s_theta(y_n | x_n)``."""
    if data.N == 0:
        data.check(theta.spec)
        return 0.0
    return float(np.sum(logsumexp(log_joint(theta, data), axis=1)))


def standard_normal_sampler(rng: np.random.Generator, n: int, p: int) -> np.ndarray:
    return rng.standard_normal((n, p))


def sample_dataset(
    theta: Theta,
    N: int,
    x_sampler: Callable[[np.random.Generator, int, int], np.ndarray] = standard_normal_sampler,
    seed: int = 0,
) -> Dataset:
    """Draw covariates from ``x_sampler`` and labels from the mixture."""
    if N < 0:
        raise InvalidInputError("N must be nonnegative")
    rng = np.random.default_rng(seed)
    P, M = theta.spec.P, theta.spec.M
    x = np.asarray(x_sampler(rng, N, P), dtype=float).reshape(N, P)
    if N == 0:
        return Dataset(x, np.zeros(0, dtype=np.int64), M)
    probs = predict_proba_matrix(theta, x)
    u = rng.random(N)
    cdf = np.cumsum(probs, axis=1)
    y = np.minimum((u[:, None] > cdf).sum(axis=1), M - 1) + 1
    return Dataset(x, y, M)


def class_indicator(z: int, l: int, M: int) -> int:
    """Kronecker delta on labels in {1..M}.

    Equivalent to the Lagrange-basis polynomial
    ``prod_{q}(z-q) / ((z-l) (z-1)! (M-z)! (-1)^(M-z))`` (taken as its limit
    when ``z == l``), which is what :func:`class_indicator_polynomial`
    evaluates.
    """
    for v in (z, l):
        if not 1 <= v <= M:
            raise InvalidInputError(f"label {v} outside 1..{M}")
    return int(z == l)


def class_indicator_polynomial(z: int, l: int, M: int) -> float:
    from math import factorial

    for v in (z, l):
        if not 1 <= v <= M:
            raise InvalidInputError(f"label {v} outside 1..{M}")
    # the numerator vanishes at every integer label; evaluate the cancelled
    # product prod_{q != l}(z - q) instead of 0/0
    num = 1.0
    for q in range(1, M + 1):
        if q != l:
            num *= z - q
    return num / (factorial(z - 1) * factorial(M - z) * (-1) ** (M - z))


def reference_truth() -> Theta:
    """Two-expert, two-class, P=1, D=1 ground truth of the synthetic study.

    Gate: expert 1 has slope 8 and intercept 0; expert 2 is the reference.
    Experts (free class 1): expert 1 has intercept +10 and slope 20,
    expert 2 has intercept -10 and slope 20.
    """
    spec = ModelSpec(K=2, M=2, P=1, D=1)
    gate = np.zeros(spec.gate_shape)
    gate[0, 1, 0] = 8.0
    experts = np.zeros(spec.expert_shape)
    experts[0, 0, 0, 0] = 10.0
    experts[0, 0, 1, 0] = 20.0
    experts[0, 1, 0, 0] = -10.0
    experts[0, 1, 1, 0] = 20.0
    return Theta(spec, gate, experts)
