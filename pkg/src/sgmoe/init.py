"""Starting points for MM fits."""

from __future__ import annotations

import logging
from typing import Optional

import numpy as np
from sklearn.cluster import KMeans

from .mm import FitOptions, fit_mm
from .model import Dataset, InvalidInputError, ModelSpec, Theta

log = logging.getLogger(__name__)

# Extra-expert template of the synthetic over-fit study: gate slope 8 with zero
# intercept; free class intercept 10 and slope 20 on the first covariate.
EXTRA_GATE_INTERCEPT = 0.0
EXTRA_GATE_SLOPE = 8.0
EXTRA_EXPERT_INTERCEPT = 10.0
EXTRA_EXPERT_SLOPE = 20.0

CLUSTER_EXPERT_STEPS = 25
MAX_RESEEDS = 5


def init_perturbed_truth(theta_true: Theta, noise: float = 1.0, extra_experts: int = 0, seed: int = 0) -> Theta:
    """Ground truth plus ``noise * N(0, 1)`` per coordinate, optionally over-specified.

    Extra experts follow the duplicate-atom template exactly (no noise).  They
    are inserted just before the reference expert so that the fitted measure
    shares the truth's gate gauge: the reference stays the last expert with an
    all-zero gate, and Voronoi errors compare like with like.
    """
    if noise < 0:
        raise InvalidInputError("noise must be nonnegative")
    if extra_experts < 0:
        raise InvalidInputError("extra_experts must be nonnegative")
    rng = np.random.default_rng(seed)
    spec = theta_true.spec
    gate = theta_true.gate + noise * rng.standard_normal(spec.gate_shape)
    experts = theta_true.experts + noise * rng.standard_normal(spec.expert_shape)
    if extra_experts == 0:
        return Theta(spec, gate, experts)

    K0, K = spec.K, spec.K + extra_experts
    new_spec = ModelSpec(K=K, M=spec.M, P=spec.P, D=spec.D)
    template_gate = np.zeros((spec.D + 1, spec.P))
    template_gate[0, 0] = EXTRA_GATE_INTERCEPT
    if spec.D >= 1:
        template_gate[1, 0] = EXTRA_GATE_SLOPE
    new_gate = np.zeros(new_spec.gate_shape)
    new_gate[: K0 - 1] = gate
    new_gate[K0 - 1 :] = template_gate

    template_expert = np.zeros((spec.M - 1, spec.D + 1, spec.P))
    template_expert[0, 0, 0] = EXTRA_EXPERT_INTERCEPT
    if spec.D >= 1:
        template_expert[0, 1, 0] = EXTRA_EXPERT_SLOPE
    new_experts = np.zeros(new_spec.expert_shape)
    new_experts[:, : K0 - 1] = experts[:, : K0 - 1]
    new_experts[:, K0 - 1 : K - 1] = template_expert[:, None]
    new_experts[:, K - 1] = experts[:, K0 - 1]
    return Theta(new_spec, new_gate, new_experts)


def _kmeans_labels(x: np.ndarray, K: int, seed: int) -> np.ndarray:
    """k-means++ labels with no empty cluster.

    Re-seeds up to ``MAX_RESEEDS`` times; if a cluster is still empty, the
    largest cluster is split along its first principal direction (this keeps
    K groups even when there are fewer distinct points than K).
    """
    for attempt in range(MAX_RESEEDS + 1):
        km = KMeans(n_clusters=K, init="k-means++", n_init=1, random_state=seed + attempt)
        labels = km.fit_predict(x)
        if np.bincount(labels, minlength=K).min() > 0:
            return labels
        log.debug("k-means produced an empty cluster (attempt %d)", attempt + 1)
    counts = np.bincount(labels, minlength=K)
    for empty in np.flatnonzero(counts == 0):
        counts = np.bincount(labels, minlength=K)
        big = int(np.argmax(counts))
        idx = np.flatnonzero(labels == big)
        if idx.size < 2:
            raise InvalidInputError(f"cannot form {K} non-empty clusters from {x.shape[0]} rows")
        order = idx[np.argsort(x[idx, 0], kind="stable")]
        labels[order[: idx.size // 2]] = empty
    return labels


def init_from_clustering(data: Dataset, K: int, seed: int = 0, M: Optional[int] = None, D: int = 1,
                         expert_steps: int = CLUSTER_EXPERT_STEPS) -> Theta:
    """Two-stage start: k-means on covariates, then one expert per cluster.

    Each cluster's expert is a single-expert model fitted by a few MM steps
    from zero.  Gate intercepts are log cluster proportions relative to the
    last cluster; gate slopes are zero.
    """
    if K < 1:
        raise InvalidInputError("K must be at least 1")
    M = M or data.M or int(data.y.max())
    spec = ModelSpec(K=K, M=M, P=data.P, D=D)
    data.check(spec)
    if data.N < K:
        raise InvalidInputError(f"need at least K={K} rows, got {data.N}")
    labels = np.zeros(data.N, dtype=int) if K == 1 else _kmeans_labels(data.x, K, seed)

    one = ModelSpec(K=1, M=M, P=data.P, D=D)
    gate = np.zeros(spec.gate_shape)
    experts = np.zeros(spec.expert_shape)
    counts = np.bincount(labels, minlength=K).astype(float)
    opts = FitOptions(max_iters=expert_steps, ridge=1e-6, tol=1e-12 * max(data.N, 1))
    for k in range(K):
        sub = data.subset(labels == k)
        fitted, _ = fit_mm(Theta.zeros(one), sub, opts)
        experts[:, k] = fitted.experts[:, 0]
        if k < K - 1:
            gate[k, 0, 0] = np.log(counts[k] / counts[-1])
    return Theta(spec, gate, experts)
