"""Batch minorize-maximize fitting of SGMLMoE models.

Each iteration forms responsibilities, the gate and expert sufficient
statistics, and the quadratic log-sum-exp majorizers

    A_q = 3/4 I_q - 1 1^T / (2q)

lifted through ``x_n x_n^T``.  The gate curvature ``A_{K-1} (x) sum_n x x^T``
and the per-expert curvatures ``A_{M-1} (x) sum_n tau_nk x x^T`` are Kronecker
products, so every solve reduces to ``A^{-1} R G^{-1}`` with a closed-form
``A^{-1}`` and a Cholesky factor of a ``P(D+1)``-square Gram matrix.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve

from .model import (
    Dataset,
    InvalidInputError,
    Theta,
    expert_log_probs,
    gate_log_probs,
    log_joint,
    log_likelihood,
    logsumexp,
)

log = logging.getLogger(__name__)

# expert blocks with less responsibility mass than this are frozen for the step
DEGENERATE_MASS = 1e-12
MAX_RELATIVE_RIDGE = 1e-2


class SingularCurvatureError(np.linalg.LinAlgError):
    """A curvature matrix could not be factorized and no ridge was allowed."""


@dataclass
class FitOptions:
    """Stopping rule and regularization for :func:`fit_mm`.

    ``tol`` is the absolute log-likelihood increment below which fitting stops;
    ``None`` means ``1e-8 * N``.  ``ridge`` is relative to the mean diagonal of
    each Gram matrix; ``0`` requests the exact surrogate minimizer and turns a
    singular curvature into an error.
    """

    tol: Optional[float] = None
    max_iters: int = 500
    ridge: float = 1e-8
    record_trace: bool = True
    record_thetas: bool = False

    def __post_init__(self):
        if self.tol is not None and not self.tol > 0:
            raise InvalidInputError("tol must be positive")
        if self.max_iters < 1:
            raise InvalidInputError("max_iters must be at least 1")
        if self.ridge < 0:
            raise InvalidInputError("ridge must be nonnegative")

    def resolved_tol(self, N: int) -> float:
        return self.tol if self.tol is not None else 1e-8 * max(N, 1)


@dataclass
class FitTrace:
    loglik: List[float] = field(default_factory=list)
    iters: int = 0
    converged: bool = False
    ridge_events: List[dict] = field(default_factory=list)
    theta_path: Optional[List[Theta]] = None

    def to_dict(self) -> dict:
        return {
            "loglik": [float(v) for v in self.loglik],
            "iters": int(self.iters),
            "converged": bool(self.converged),
            "ridge_events": list(self.ridge_events),
        }


@dataclass
class SufficientStats:
    """Aggregated gate design ``s`` (K-1, L) and expert design ``r`` (K, M-1, L)."""

    s: np.ndarray
    r: np.ndarray

    def gate_vector(self) -> np.ndarray:
        return self.s.ravel()

    def expert_vector(self) -> np.ndarray:
        return self.r.ravel()


def bound_factor(q: int) -> Tuple[np.ndarray, np.ndarray]:
    """Return ``A_q`` and its closed-form inverse ``4/3 I + 8/(3q) 1 1^T``."""
    if q < 1:
        raise InvalidInputError("bound_factor needs q >= 1")
    ones = np.ones((q, q))
    A = 0.75 * np.eye(q) - ones / (2.0 * q)
    A_inv = (4.0 / 3.0) * np.eye(q) + (8.0 / (3.0 * q)) * ones
    return A, A_inv


def _softmax_rows(a: np.ndarray) -> np.ndarray:
    e = np.exp(a - a.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def responsibilities(theta: Theta, data: Dataset) -> np.ndarray:
    """Posterior expert weights ``tau`` (N, K), normalized in log space."""
    return _softmax_rows(log_joint(theta, data))


@dataclass
class _Evaluation:
    """Everything one MM iteration needs from a single pass over the data."""

    loglik: float
    tau: np.ndarray  # (N, K)
    gate: np.ndarray  # (N, K) gate probabilities
    expert: np.ndarray  # (N, K, M) expert class probabilities


def _evaluate(W: np.ndarray, V: np.ndarray, X: np.ndarray, y0: np.ndarray) -> _Evaluation:
    N = X.shape[0]
    gs = np.zeros((N, W.shape[0] + 1))
    gs[:, :-1] = X @ W.T
    log_g = gs - logsumexp(gs, axis=1, keepdims=True)
    K, Mm1, L = V.shape
    es = np.zeros((N, K, Mm1 + 1))
    es[:, :, :-1] = (X @ V.reshape(K * Mm1, L).T).reshape(N, K, Mm1)
    log_e = es - logsumexp(es, axis=2, keepdims=True)
    a = log_g + log_e[np.arange(N), :, y0]
    m = a.max(axis=1, keepdims=True)
    ea = np.exp(a - m)
    tot = ea.sum(axis=1, keepdims=True)
    loglik = float(np.sum(m + np.log(tot)))
    return _Evaluation(loglik, ea / tot, np.exp(log_g), np.exp(log_e))


def gate_stats(tau: np.ndarray, data: Dataset, D: int) -> np.ndarray:
    """``s = sum_n [tau_{n,k} x_n]_{k<K}`` as a (K-1, L) matrix."""
    X = data.lifted(D)
    return tau[:, :-1].T @ X


def expert_stats(tau: np.ndarray, data: Dataset, D: int, M: int) -> np.ndarray:
    """``r_k = sum_n tau_{n,k} 1(y_n = m) x_n`` for free classes m < M, (K, M-1, L)."""
    X = data.lifted(D)
    onehot = np.zeros((data.N, M - 1))
    free = data.y < M
    onehot[np.flatnonzero(free), data.y[free] - 1] = 1.0
    return np.stack([(tau[:, k, None] * onehot).T @ X for k in range(tau.shape[1])])


def sufficient_stats(theta: Theta, data: Dataset, tau: Optional[np.ndarray] = None) -> SufficientStats:
    if tau is None:
        tau = responsibilities(theta, data)
    s = theta.spec
    return SufficientStats(gate_stats(tau, data, s.D), expert_stats(tau, data, s.D, s.M))


def gate_lse(theta: Theta, data: Dataset) -> float:
    """``sum_n log(1 + sum_{k<K} exp w_k(x_n))``."""
    X = data.lifted(theta.spec.D)
    scores = np.pad(X @ theta.gate_matrix().T, [(0, 0), (0, 1)])
    return float(np.sum(logsumexp(scores, axis=1))) if data.N else 0.0


def gate_lse_grad(theta: Theta, data: Dataset) -> np.ndarray:
    """Gradient of :func:`gate_lse`, (K-1, L): rows are ``sum_n g_k(x_n) x_n``."""
    X = data.lifted(theta.spec.D)
    g = np.exp(gate_log_probs(theta, X))
    return g[:, :-1].T @ X


def expert_lse(theta: Theta, tau: np.ndarray, data: Dataset) -> float:
    """``sum_n sum_k tau_nk log(1 + sum_{m<M} exp v_{m,k}(x_n))``."""
    X = data.lifted(theta.spec.D)
    scores = np.pad(np.einsum("nl,kml->nkm", X, theta.expert_tensor()), [(0, 0), (0, 0), (0, 1)])
    return float(np.sum(tau * logsumexp(scores, axis=2)))


def expert_lse_grad(theta: Theta, tau: np.ndarray, data: Dataset) -> np.ndarray:
    """Per-expert ``sum_n tau_nk grad e_n(c_k)``, (K, M-1, L)."""
    X = data.lifted(theta.spec.D)
    e = np.exp(expert_log_probs(theta, X))
    return _weighted_expert_grad(tau, e, X)


def _weighted_expert_grad(tau: np.ndarray, e: np.ndarray, X: np.ndarray) -> np.ndarray:
    return np.stack([(tau[:, k, None] * e[:, k, :-1]).T @ X for k in range(tau.shape[1])])


def weighted_gram(X: np.ndarray, weights: Optional[np.ndarray] = None) -> np.ndarray:
    """``sum_n w_n x_n x_n^T``; with a (N, K) weight matrix returns (K, L, L)."""
    if weights is None:
        return X.T @ X
    return np.stack([(weights[:, k, None] * X).T @ X for k in range(weights.shape[1])])


@dataclass
class CurvatureBundle:
    xtx: np.ndarray
    gate_factor: Optional[np.ndarray]
    expert_factor: np.ndarray
    expert_gram: np.ndarray
    ridge: float = 0.0

    def gate_matrix(self) -> np.ndarray:
        """Explicit ``A_{K-1} (x) sum_n x x^T``."""
        return np.kron(self.gate_factor, self.xtx)

    def expert_matrix(self, k: int) -> np.ndarray:
        """Explicit ``A_{M-1} (x) sum_n tau_nk x x^T`` for 0-based expert ``k``."""
        return np.kron(self.expert_factor, self.expert_gram[k])


def curvatures(theta: Theta, data: Dataset, tau: Optional[np.ndarray] = None) -> CurvatureBundle:
    spec = theta.spec
    if tau is None:
        tau = responsibilities(theta, data)
    X = data.lifted(spec.D)
    gate_factor = bound_factor(spec.K - 1)[0] if spec.K > 1 else None
    return CurvatureBundle(
        xtx=weighted_gram(X),
        gate_factor=gate_factor,
        expert_factor=bound_factor(spec.M - 1)[0],
        expert_gram=weighted_gram(X, tau),
    )


def surrogate_value(theta: Theta, anchor: Theta, data: Dataset) -> float:
    """Quadratic majorizer of ``-L(theta)`` built at ``anchor``.

    Equals ``-L(anchor)`` at ``theta == anchor`` and upper-bounds ``-L`` elsewhere.
    """
    spec = anchor.spec
    if theta.spec != spec:
        raise InvalidInputError("theta and anchor have different specs")
    tau = responsibilities(anchor, data)
    stats = sufficient_stats(anchor, data, tau)
    curv = curvatures(anchor, data, tau)
    W, W0 = theta.gate_matrix(), anchor.gate_matrix()
    V, V0 = theta.expert_tensor(), anchor.expert_tensor()

    with np.errstate(divide="ignore", invalid="ignore"):
        entropy_term = float(np.sum(np.where(tau > 0, tau * np.log(tau), 0.0)))
    const = entropy_term - float(np.sum(W * stats.s)) - float(np.sum(V * stats.r))

    value = const
    if spec.K > 1:
        dW = W - W0
        value += gate_lse(anchor, data) + float(np.sum(dW * gate_lse_grad(anchor, data)))
        value += 0.5 * float(np.sum(dW * (curv.gate_factor @ dW @ curv.xtx)))

    dV = V - V0
    value += expert_lse(anchor, tau, data) + float(np.sum(dV * expert_lse_grad(anchor, tau, data)))
    A = curv.expert_factor
    for k in range(spec.K):
        value += 0.5 * float(np.sum(dV[k] * (A @ dV[k] @ curv.expert_gram[k])))
    return value


def surrogate_gradient(theta: Theta, anchor: Theta, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Gradient of :func:`surrogate_value` in ``theta`` as (gate (K-1, L), experts (K, M-1, L))."""
    tau = responsibilities(anchor, data)
    stats = sufficient_stats(anchor, data, tau)
    curv = curvatures(anchor, data, tau)
    dW = theta.gate_matrix() - anchor.gate_matrix()
    dV = theta.expert_tensor() - anchor.expert_tensor()
    if anchor.spec.K > 1:
        grad_w = -stats.s + gate_lse_grad(anchor, data) + curv.gate_factor @ dW @ curv.xtx
    else:
        grad_w = np.zeros_like(dW)
    grad_v = -stats.r + expert_lse_grad(anchor, tau, data)
    grad_v = grad_v + np.stack([curv.expert_factor @ dV[k] @ curv.expert_gram[k] for k in range(dV.shape[0])])
    return grad_w, grad_v


def _factorize(G: np.ndarray, ridge: float, what: str, events: Optional[list]) -> Tuple[tuple, float]:
    """Cholesky of ``G + lam I`` with ``lam = ridge * mean(diag G)``.

    When ``ridge > 0`` a failed factorization raises ``lam`` tenfold up to
    ``MAX_RELATIVE_RIDGE``; with ``ridge == 0`` it is an error.
    """
    L = G.shape[0]
    scale = max(float(np.trace(G)) / L, 1e-300)
    rel = ridge
    while True:
        lam = rel * scale
        try:
            factor = cho_factor(G + lam * np.eye(L), lower=True, check_finite=False)
            if not np.all(np.diag(factor[0]) > 0) or not np.all(np.isfinite(factor[0])):
                raise LinAlgError("non-positive pivot")
            if rel != ridge and events is not None:
                events.append({"block": what, "relative_ridge": rel})
            return factor, lam
        except LinAlgError:
            if ridge == 0:
                raise SingularCurvatureError(
                    f"{what} curvature is singular; refit with a positive ridge (e.g. ridge=1e-8)"
                ) from None
            if rel >= MAX_RELATIVE_RIDGE:
                raise SingularCurvatureError(f"{what} curvature is singular even with relative ridge {rel:g}") from None
            rel = min(rel * 10.0, MAX_RELATIVE_RIDGE)


def _onehot_free(y0: np.ndarray, M: int) -> np.ndarray:
    onehot = np.zeros((y0.shape[0], M - 1))
    free = y0 < M - 1
    onehot[np.flatnonzero(free), y0[free]] = 1.0
    return onehot


def _free_columns(spec) -> np.ndarray:
    """Lifted columns kept by the solves.

    Every covariate contributes a constant column, so for ``P > 1`` the raw
    design has ``P`` identical columns and singular Gram matrices.  Only the
    first is kept; the intercept step lands on that coordinate and the
    likelihood, which sees intercepts only through their sum, is unaffected.
    """
    L = spec.n_lifted
    dup = [p * (spec.D + 1) for p in range(1, spec.P)]
    return np.array([j for j in range(L) if j not in dup], dtype=int)


def _update(
    W: np.ndarray,
    V: np.ndarray,
    X: np.ndarray,
    onehot: np.ndarray,
    ev: _Evaluation,
    ridge: float,
    xtx_factor: Optional[tuple],
    events: Optional[list],
    cols: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """Closed-form minimizer of the surrogate built from ``ev``."""
    tau = ev.tau
    K, Mm1, _ = V.shape
    Xr = X[:, cols]
    W = W.copy()
    if K > 1:
        step_rhs = (tau[:, :-1] - ev.gate[:, :-1]).T @ Xr  # s - grad g
        W[:, cols] += bound_factor(K - 1)[1] @ cho_solve(xtx_factor, step_rhs.T, check_finite=False).T
    V = V.copy()
    A_inv = bound_factor(Mm1)[1]
    mass = tau.sum(axis=0)
    for k in range(K):
        if mass[k] < DEGENERATE_MASS:
            continue
        tx = tau[:, k, None] * Xr
        gram = tx.T @ Xr
        rhs = (onehot - ev.expert[:, k, :-1]).T @ tx  # r_k - grad e_k
        factor, _ = _factorize(gram, ridge, f"expert {k + 1}", events)
        V[k][:, cols] += A_inv @ cho_solve(factor, rhs.T, check_finite=False).T
    return W, V


def mm_step(
    theta: Theta,
    data: Dataset,
    opts: Optional[FitOptions] = None,
    events: Optional[list] = None,
) -> Theta:
    """One closed-form MM update.

    The gate moves by ``A_{K-1}^{-1} (s - grad g) (X^T X)^{-1}`` and each
    expert by ``A_{M-1}^{-1} (r_k - grad e_k) G_k^{-1}`` with
    ``G_k = sum_n tau_nk x x^T``.  Experts whose responsibility mass is below
    ``DEGENERATE_MASS`` are left unchanged.
    """
    opts = opts or FitOptions()
    spec = theta.spec
    data.check(spec)
    if data.N == 0:
        return theta
    X = data.lifted(spec.D)
    y0 = data.y - 1
    W, V = theta.gate_matrix(), theta.expert_tensor()
    ev = _evaluate(W, V, X, y0)
    cols = _free_columns(spec)
    xtx_factor = None
    if spec.K > 1:
        xtx_factor, _ = _factorize(weighted_gram(X[:, cols]), opts.ridge, "gate", events)
    W, V = _update(W, V, X, _onehot_free(y0, spec.M), ev, opts.ridge, xtx_factor, events, cols)
    return Theta.from_matrices(spec, W, V)


def fit_mm(theta0: Theta, data: Dataset, opts: Optional[FitOptions] = None) -> Tuple[Theta, FitTrace]:
    """Iterate MM updates until the log-likelihood increment is at most ``tol``.

    The gate Gram matrix does not depend on the iterate and is factorized once.
    """
    opts = opts or FitOptions()
    spec = theta0.spec
    data.check(spec)
    tol = opts.resolved_tol(data.N)
    trace = FitTrace(theta_path=[theta0] if opts.record_thetas else None)
    events = trace.ridge_events
    if data.N == 0:
        trace.loglik.append(0.0)
        trace.converged = True
        return theta0, trace

    X = data.lifted(spec.D)
    y0 = data.y - 1
    onehot = _onehot_free(y0, spec.M)
    cols = _free_columns(spec)
    xtx_factor = None
    if spec.K > 1:
        xtx_factor, _ = _factorize(weighted_gram(X[:, cols]), opts.ridge, "gate", events)

    W, V = theta0.gate_matrix(), theta0.expert_tensor()
    ev = _evaluate(W, V, X, y0)
    trace.loglik.append(ev.loglik)
    for it in range(1, opts.max_iters + 1):
        n_events = len(events)
        W, V = _update(W, V, X, onehot, ev, opts.ridge, xtx_factor, events, cols)
        for e in events[n_events:]:
            e["iteration"] = it
        previous = ev.loglik
        ev = _evaluate(W, V, X, y0)
        if opts.record_trace:
            trace.loglik.append(ev.loglik)
        if opts.record_thetas:
            trace.theta_path.append(Theta.from_matrices(spec, W, V))
        trace.iters = it
        if abs(ev.loglik - previous) <= tol:
            trace.converged = True
            break
    if not opts.record_trace:
        trace.loglik.append(ev.loglik)
    log.debug("fit_mm: %d iterations, loglik %.6f, converged=%s", trace.iters, ev.loglik, trace.converged)
    return Theta.from_matrices(spec, W, V), trace


def loglik_gradient(theta: Theta, data: Dataset) -> Tuple[np.ndarray, np.ndarray]:
    """Analytic gradient of the log-likelihood, (gate (K-1, L), experts (K, M-1, L))."""
    spec = theta.spec
    X = data.lifted(spec.D)
    tau = responsibilities(theta, data)
    g = np.exp(gate_log_probs(theta, X))
    grad_w = (tau - g)[:, :-1].T @ X
    e = np.exp(expert_log_probs(theta, X))
    grad_v = expert_stats(tau, data, spec.D, spec.M) - _weighted_expert_grad(tau, e, X)
    return grad_w, grad_v


def fit_gradient_baseline(theta0: Theta, data: Dataset, step: float, iters: int) -> Tuple[Theta, FitTrace]:
    """Plain full-batch gradient ascent on the mean log-likelihood.

    Exists only as a benchmark contrast; nothing guarantees monotone ascent.
    """
    if not step > 0:
        raise InvalidInputError("step must be positive")
    if iters < 1:
        raise InvalidInputError("iters must be at least 1")
    spec = theta0.spec
    n = max(data.N, 1)
    theta = theta0
    trace = FitTrace(loglik=[log_likelihood(theta, data)])
    for it in range(1, iters + 1):
        grad_w, grad_v = loglik_gradient(theta, data)
        W = theta.gate_matrix() + step * grad_w / n
        V = theta.expert_tensor() + step * grad_v / n
        value = -np.inf
        if np.all(np.isfinite(W)) and np.all(np.isfinite(V)):
            candidate = Theta.from_matrices(spec, W, V)
            value = log_likelihood(candidate, data)
        if not np.isfinite(value):
            log.warning("gradient ascent diverged at iteration %d; keeping the last finite iterate", it)
            break
        theta = candidate
        trace.loglik.append(value)
        trace.iters = it
    return theta, trace
