"""Measurement-error variance, random-effect covariance and predicted effects.

Given fitted coefficient curves, each cluster's residual vector follows the
linear model ``r_i = x_i e_i + eps_i``. The pooled within-cluster residual
sum of squares estimates ``sigma^2``; the per-cluster least squares effects,
corrected for their noise contribution, estimate ``Sigma``.

Clusters with ``n_i <= p`` or an ill-conditioned ``x_i^T x_i`` are left out of
every estimate here, and the degrees of freedom count included clusters only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoUsableClusters
from .local import evaluate_at

COND_LIMIT = 1e12


@dataclass(frozen=True, eq=False)
class ResidualSet:
    """Flat residual vector aligned with the dataset rows."""

    r: np.ndarray
    offsets: np.ndarray

    def cluster(self, i):
        return self.r[self.offsets[i]:self.offsets[i + 1]]

    @property
    def per_cluster(self):
        return [self.cluster(i) for i in range(len(self.offsets) - 1)]


@dataclass(frozen=True, eq=False)
class VarianceComponents:
    sigma2: float
    Sigma_raw: np.ndarray
    Sigma: np.ndarray
    e_hat: np.ndarray      # (m, p); NaN rows for excluded clusters
    df: int
    excluded: tuple


def residuals_from_theta(data, theta_rows, layout):
    """Residuals ``y - Gamma theta(U)`` given coefficients at every row.

    ``theta_rows`` has shape ``(n, s)``: the coefficient vector evaluated at
    each observation's index value (estimated or true).
    """
    gamma = layout.gamma(data.x, data.z_rows)
    return ResidualSet(data.y - np.einsum("ns,ns->n", gamma, theta_rows), data.offsets)


def residual_curves(data, curves, cfg, mode="exact"):
    """Residuals from the fitted coefficient curves evaluated at every ``U_ij``."""
    theta_rows = evaluate_at(curves, data, cfg, data.u, mode=mode)
    return residuals_from_theta(data, theta_rows, cfg.layout(data))


def usable_clusters(data):
    """Boolean mask of clusters entering the variance-component estimates."""
    ok = np.zeros(data.m, dtype=bool)
    p = data.p
    for i in range(data.m):
        xi = data.x[data.cluster_rows(i)]
        if xi.shape[0] <= p:
            continue
        ok[i] = np.linalg.cond(xi.T @ xi) <= COND_LIMIT
    return ok


def _cluster_fits(data, res, mask):
    """Per included cluster: ``(e_tilde, rss, (x^T x)^{-1})``."""
    out = {}
    for i in np.flatnonzero(mask):
        sl = data.cluster_rows(i)
        xi = data.x[sl]
        ri = res.r[sl]
        xtx_inv = np.linalg.inv(xi.T @ xi)
        e = xtx_inv @ (xi.T @ ri)
        resid = ri - xi @ e
        out[int(i)] = (e, float(resid @ resid), xtx_inv)
    return out


def predict_random_effects(data, res):
    """Least squares projection ``(x_i^T x_i)^{-1} x_i^T r_i`` per cluster.

    Rows of excluded clusters are NaN.
    """
    mask = usable_clusters(data)
    e_hat = np.full((data.m, data.p), np.nan)
    for i, (e, _, _) in _cluster_fits(data, res, mask).items():
        e_hat[i] = e
    return e_hat


def estimate_sigma2(data, res):
    """Pooled residual variance ``sum_i RSS_i / (n - m p)`` over included clusters."""
    mask = usable_clusters(data)
    if not mask.any():
        raise NoUsableClusters("no cluster has n_i > p and an invertible x_i^T x_i")
    fits = _cluster_fits(data, res, mask)
    rss = sum(f[1] for f in fits.values())
    df = int(data.sizes[mask].sum() - mask.sum() * data.p)
    return max(rss / df, 0.0)


def psd_project(S):
    """Nearest PSD matrix by eigenvalue clipping; identity on PSD input."""
    S = (S + S.T) / 2
    vals, vecs = np.linalg.eigh(S)
    if vals.min(initial=0.0) >= 0:
        return S.copy()
    return (vecs * np.clip(vals, 0, None)) @ vecs.T


def estimate_Sigma(data, res, sigma2):
    """Random-effect covariance from the predicted effects.

    ``Sigma_raw = mean_i(e_i e_i^T) - sigma2 * mean_i((x_i^T x_i)^{-1})``
    over included clusters; ``Sigma`` is its PSD projection.
    """
    mask = usable_clusters(data)
    if not mask.any():
        raise NoUsableClusters("no cluster has n_i > p and an invertible x_i^T x_i")
    fits = _cluster_fits(data, res, mask)
    p = data.p
    outer = np.zeros((p, p))
    inv_sum = np.zeros((p, p))
    e_hat = np.full((data.m, p), np.nan)
    for i in sorted(fits):
        e, _, xtx_inv = fits[i]
        e_hat[i] = e
        outer += np.outer(e, e)
        inv_sum += xtx_inv
    m_inc = len(fits)
    raw = (outer - sigma2 * inv_sum) / m_inc
    raw = (raw + raw.T) / 2
    df = int(data.sizes[mask].sum() - m_inc * p)
    return VarianceComponents(float(sigma2), raw, psd_project(raw), e_hat, df,
                              tuple(int(i) for i in np.flatnonzero(~mask)))


def estimate_variance_components(data, curves, cfg, mode="exact"):
    """Residuals, ``sigma^2`` and ``Sigma`` from fitted curves in one call."""
    res = residual_curves(data, curves, cfg, mode=mode)
    return estimate_Sigma(data, res, estimate_sigma2(data, res))
