"""Closed-form per-task base learners: ridge classifier and domain adapter.

Both solvers exist in a primal form (feature-space inverse, m x m) and a
dual form (sample-space inverse, n x n or q x q); the forms are equal by
the Woodbury identity and the cheaper one is picked at runtime. Every
output is differentiable with respect to the embeddings and the ridge
strengths, so the outer meta objective can push exact gradients through
the task-level solutions.

Ridge classifier (one-hot targets Y, support embeddings Z, n x m):

    primal:  theta = (Z^T Z + gamma I_m)^{-1} Z^T Y
    dual:    theta = Z^T (Z Z^T + gamma I_n)^{-1} Y

Domain adapter (target queries Zt, q x m; source supports Zs, n x m;
normalized similarity A, q x n; D = diag of A's row sums):

    primal:  theta = (Zt^T D Zt + gamma I_m)^{-1} Zt^T A Zs
    dual:    theta = Zt^T (D Zt Zt^T + gamma I_q)^{-1} A Zs

The dual-form matrix D Zt Zt^T is not symmetric for non-uniform D, so it
is solved through the congruent SPD system

    (D K + gamma I)^{-1} = D^{1/2} (D^{1/2} K D^{1/2} + gamma I)^{-1} D^{-1/2},

which is exactly equal and keeps the single SPD solve kernel underneath.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class ClassifierSolution:
    theta: Tensor          # [m x N]
    gamma_used: float


@dataclass
class AdapterSolution:
    theta: Tensor          # [m x m]
    a_norm: Tensor         # [q x n]
    row_sums: Tensor       # [q x 1], the diagonal of D^A
    gamma_used: float
    sinkhorn_iters_used: int


def _symmetrize(m: Tensor) -> Tensor:
    return ad.mul(ad.add(m, ad.transpose(m)), 0.5)


def one_hot(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes})")
    return np.eye(num_classes)[labels]


def fit_ridge_classifier(z_sup, y_sup, gamma) -> ClassifierSolution:
    """Closed-form ridge solution mapping embeddings to one-hot scores.

    Picks the dual (n x n) solve when the support count is below the
    embedding dimension, the primal (m x m) solve otherwise.
    """
    z = ad.as_tensor(z_sup)
    y = ad.as_tensor(y_sup)
    g = ad.as_tensor(gamma)
    n, m = z.data.shape
    if y.data.ndim != 2 or y.data.shape[0] != n:
        raise ValueError(f"one-hot targets {y.data.shape} do not match {n} support rows")
    row_mass = y.data.sum(axis=1)
    if not (np.all((y.data == 0) | (y.data == 1)) and np.all(row_mass == 1)):
        raise ValueError("targets must be one-hot rows")
    gamma_val = float(g.data)
    if gamma_val <= 0:
        raise ValueError(f"gamma must be positive, got {gamma_val}")

    if n <= m:
        gram = _symmetrize(ad.matmul(z, ad.transpose(z)))
        theta = ad.matmul(ad.transpose(z), ad.spd_solve(gram, g, y))
    else:
        cov = _symmetrize(ad.matmul(ad.transpose(z), z))
        theta = ad.spd_solve(cov, g, ad.matmul(ad.transpose(z), y))
    return ClassifierSolution(theta=theta, gamma_used=gamma_val)


DIST_CAP = 120.0  # kernel weight floor exp(-120) ~ 8e-53


def similarity_matrix(z_tq, z_ss) -> Tensor:
    """Gaussian-kernel similarity exp(-||zt_i - zs_k||^2), entries in (0, 1].

    Squared distances saturate at DIST_CAP: pairs beyond it keep the
    negligible-but-positive weight exp(-120) ~ 8e-53 instead of underflowing.
    An exact zero would break the normalization's positivity contract, and
    anything below ~1e-150 would underflow to zero when the reverse pass
    squares the row/column sums it divided by.
    """
    d2 = ad.pairwise_sqdist(z_tq, z_ss)
    capped = ad.sub(DIST_CAP, ad.clamp_min(ad.sub(DIST_CAP, d2), 0.0))
    return ad.exp(ad.mul(capped, -1.0))


def normalize_similarity(a, max_iters: int = 100, tol: float = 1e-6):
    """Alternately rescale rows to 1 and columns to q/n until both marginals
    are within `tol`, or `max_iters` passes.

    Returns (normalized matrix, iterations executed). The executed passes
    form a fixed unrolled sequence through which gradients flow; the
    convergence test itself reads plain values and is not differentiated.
    """
    t = ad.as_tensor(a)
    if max_iters < 1:
        raise ValueError(f"max_iters must be >= 1, got {max_iters}")
    if np.any(t.data <= 0):
        raise ValueError("similarity entries must be strictly positive")
    q, n = t.data.shape
    col_target = q / n
    # Rescale each row by its max before iterating. The balanced result is
    # exactly invariant to positive row scalings (the first row pass absorbs
    # them), so this changes nothing mathematically -- including gradients,
    # which is why the scaling itself is detached -- but it keeps rows whose
    # largest similarity is subnormal from underflowing to exact zeros.
    t = ad.div(t, ad.constant(t.data.max(axis=1, keepdims=True)))
    iters = 0
    for i in range(max_iters):
        t = ad.div(t, ad.tsum(t, axis=1, keepdims=True))
        t = ad.div(t, ad.mul(ad.tsum(t, axis=0, keepdims=True), 1.0 / col_target))
        # re-floor: entries this far down carry no weight, but must never
        # underflow to an exact zero (strict positivity contract)
        t = ad.clamp_min(t, 1e-300)
        iters = i + 1
        row_dev = float(np.abs(t.data.sum(axis=1) - 1.0).max())
        col_dev = float(np.abs(t.data.sum(axis=0) - col_target).max())
        if row_dev <= tol and col_dev <= tol:
            break
    return t, iters


def fit_domain_adapter(z_tq, z_ss, a_norm, gamma, sinkhorn_iters_used: int = 0) -> AdapterSolution:
    """Closed-form projection pulling target queries toward similar source
    supports, weighted by the normalized similarity."""
    zt = ad.as_tensor(z_tq)
    zs = ad.as_tensor(z_ss)
    a = ad.as_tensor(a_norm)
    g = ad.as_tensor(gamma)
    q, m = zt.data.shape
    n = zs.data.shape[0]
    if zs.data.shape[1] != m:
        raise ValueError(f"feature dims differ: target {m} vs source {zs.data.shape[1]}")
    if a.data.shape != (q, n):
        raise ValueError(f"similarity shape {a.data.shape} != ({q}, {n})")
    gamma_val = float(g.data)
    if gamma_val <= 0:
        raise ValueError(f"gamma must be positive, got {gamma_val}")
    if np.any(a.data <= 0):
        raise ValueError("normalized similarity must stay strictly positive")

    row_sums = ad.tsum(a, axis=1, keepdims=True)             # [q x 1]
    rhs_full = ad.matmul(a, zs)                               # A Zs, [q x m]

    if q <= m:
        s = ad.sqrt(row_sums)                                  # D^{1/2} diagonal
        zt_s = ad.mul(s, zt)                                   # D^{1/2} Zt
        gram = _symmetrize(ad.matmul(zt_s, ad.transpose(zt_s)))
        solved = ad.spd_solve(gram, g, ad.div(rhs_full, s))    # (.)^{-1} D^{-1/2} A Zs
        theta = ad.matmul(ad.transpose(zt_s), solved)
    else:
        weighted = ad.mul(row_sums, zt)                        # D Zt
        cov = _symmetrize(ad.matmul(ad.transpose(zt), weighted))
        theta = ad.spd_solve(cov, g, ad.matmul(ad.transpose(zt), rhs_full))
    return AdapterSolution(
        theta=theta,
        a_norm=a,
        row_sums=row_sums,
        gamma_used=gamma_val,
        sinkhorn_iters_used=sinkhorn_iters_used,
    )


def predict_source(z_query, clf: ClassifierSolution) -> Tensor:
    """Source-style logits Z theta."""
    return ad.matmul(ad.as_tensor(z_query), clf.theta)


def project_target(z_tq, adapter: AdapterSolution) -> Tensor:
    return ad.matmul(ad.as_tensor(z_tq), adapter.theta)


def predict_target(z_tq, adapter: AdapterSolution, clf: ClassifierSolution) -> Tensor:
    """Target logits Z theta_T theta: project into source space, then score."""
    return ad.matmul(project_target(z_tq, adapter), clf.theta)


def predict_labels(logits) -> np.ndarray:
    """Row-wise argmax with ties broken toward the lowest class index."""
    data = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.argmax(data, axis=1)
