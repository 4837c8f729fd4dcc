"""Local polynomial kernel-weighted least squares for the functional coefficients.

At a point ``u0`` the coefficient vector is expanded to degree ``d`` in
``U - u0`` and fitted by weighted least squares with weights
``K_h(U - u0) = K((U - u0) / h) / h``. Internally the Taylor variable is
scaled to ``t = (U - u0) / h`` so that the normal matrix stays well
conditioned for small bandwidths; the fitted block ``j`` is then
``h**j theta^(j)(u0) / j!``.

All fit points are solved in batches: the normal matrix at ``u0`` is assembled
from the moment matrices ``sum_r w_r t_r**k Gamma_r Gamma_r^T``, each a single
matrix product over the rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .config import FitConfig
from .data import ClusterDataset, CoefLayout
from .errors import InsufficientLocalData, SingularSystem
from .kernels import Kernel, kernel_eval

_CHUNK_ELEMS = 1_000_000


@dataclass(frozen=True, eq=False)
class DesignBundle:
    """Literal local design at ``u0``: columns ``((U - u0)**j Gamma)_{j=0..d}``."""

    u0: float
    degree: int
    X: np.ndarray
    w: np.ndarray
    y: np.ndarray


@dataclass(frozen=True, eq=False)
class LocalFit:
    """Local polynomial fit at one point.

    Attributes
    ----------
    theta : ndarray, shape (s,)
        Coefficient estimates at ``u0``.
    derivs : ndarray, shape (degree, s)
        Row ``j - 1`` holds the ``j``-th derivative estimate.
    gram_inv : ndarray
        Inverse of the (scaled, possibly ridged) normal matrix; with the
        design this gives the smoother rows mapping ``y`` to ``theta``.
    """

    u0: float
    theta: np.ndarray
    derivs: np.ndarray
    degree: int
    h: float
    kernel: Kernel
    layout: CoefLayout
    gram_inv: np.ndarray = field(repr=False)
    regularized: bool = False
    n_support: int = 0

    @property
    def coef_full(self):
        """Unscaled Taylor coefficients ``(theta, theta', theta''/2, ...)``."""
        blocks = [self.theta] + [self.derivs[j - 1] / math.factorial(j)
                                 for j in range(1, self.degree + 1)]
        return np.concatenate(blocks)

    def smoother_rows(self, data):
        """Matrix ``L`` of shape ``(s, n)`` with ``theta = L @ y``.

        Row blocks ``layout.alpha_slice(k)`` are the ``A_k`` matrices and
        ``layout.beta_slice`` is ``B``.
        """
        Xs, w = _scaled_design(data, self.layout, self.u0, self.degree, self.h, self.kernel)
        s = self.layout.s
        return self.gram_inv[:s] @ (Xs * w[:, None]).T


@dataclass(frozen=True, eq=False)
class CoefficientCurves:
    """Local linear fits on an evaluation grid."""

    grid: np.ndarray
    fits: tuple
    config: FitConfig
    interval: tuple
    layout: CoefLayout
    n: int

    @property
    def theta(self):
        return np.stack([f.theta for f in self.fits])

    @property
    def slope(self):
        return np.stack([f.derivs[0] for f in self.fits])

    def coef(self, c):
        return self.theta[:, self.layout.index(c)]

    @property
    def regularized(self):
        return np.array([f.regularized for f in self.fits])


def _scaled_design(data, layout, u0, degree, h, kernel):
    gamma = layout.gamma(data.x, data.z_rows)
    t = (data.u - u0) / h
    Xs = np.hstack([t[:, None] ** j * gamma for j in range(degree + 1)])
    return Xs, kernel_eval(kernel, t) / h


def build_design(data, u0, degree, h, kernel, intercept=False):
    """Assemble the local design of degree ``degree`` at ``u0``.

    Rows follow the dataset's cluster-major order.
    """
    if degree not in (1, 3):
        raise ValueError("degree must be 1 or 3")
    if not h > 0:
        raise ValueError("bandwidth must be positive")
    layout = data.layout(intercept)
    gamma = layout.gamma(data.x, data.z_rows)
    d = data.u - u0
    X = np.hstack([d[:, None] ** j * gamma for j in range(degree + 1)])
    w = kernel_eval(kernel, d / h) / h
    return DesignBundle(float(u0), degree, X, np.asarray(w, dtype=float), data.y.copy())


@dataclass
class _Batch:
    coef: np.ndarray     # (P, D) scaled Taylor coefficients
    inv: np.ndarray      # (P, D, D) or None
    regularized: np.ndarray
    support: np.ndarray
    ok: np.ndarray


def _local_solve(gamma, y, u, points, h, kernel, degree, *, min_factor, ridge_eps,
                 cond_limit=1e12, keep_inverse=True, on_failure="raise"):
    """Solve the local weighted least squares problems at every point."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    n, s = gamma.shape
    D = (degree + 1) * s
    P = points.size
    gg = (gamma[:, :, None] * gamma[:, None, :]).reshape(n, s * s)
    gy = gamma * y[:, None]
    coef = np.full((P, D), np.nan)
    inv = np.full((P, D, D), np.nan) if keep_inverse else None
    reg = np.zeros(P, dtype=bool)
    support = np.zeros(P, dtype=np.intp)
    ok = np.zeros(P, dtype=bool)
    chunk = max(1, _CHUNK_ELEMS // max(n, 1))
    for start in range(0, P, chunk):
        sl = slice(start, min(start + chunk, P))
        pts = points[sl]
        g = pts.size
        t = (u[None, :] - pts[:, None]) / h
        wt = kernel_eval(kernel, t) / h
        wt = np.atleast_2d(wt)
        support[sl] = np.count_nonzero(wt, axis=1)
        M = np.empty((g, D, D))
        rhs = np.empty((g, D))
        for r in range(2 * degree + 1):
            if r:
                wt = wt * t
            S = (wt @ gg).reshape(g, s, s)
            for a in range(max(0, r - degree), min(r, degree) + 1):
                b = r - a
                M[:, a * s:(a + 1) * s, b * s:(b + 1) * s] = S
            if r <= degree:
                rhs[:, r * s:(r + 1) * s] = wt @ gy
        good = support[sl] >= min_factor * D
        if on_failure == "raise" and not good.all():
            i = int(np.flatnonzero(~good)[0])
            raise InsufficientLocalData(
                f"only {support[sl][i]} observations with positive weight at u0={pts[i]:.6g}; "
                f"need {math.ceil(min_factor * D)}", u0=float(pts[i]))
        idx = np.flatnonzero(good)
        if idx.size:
            ev = np.abs(np.linalg.eigvalsh(M[idx]))
            with np.errstate(divide="ignore", invalid="ignore"):
                cond = ev.max(axis=1) / ev.min(axis=1)
            bad = ~(cond <= cond_limit)
            if bad.any():
                if ridge_eps > 0:
                    tr = np.trace(M[idx[bad]], axis1=1, axis2=2)
                    M[idx[bad]] += (ridge_eps * tr / D)[:, None, None] * np.eye(D)
                    reg[start + idx[bad]] = True
                elif on_failure == "raise":
                    i = int(idx[bad][0])
                    raise SingularSystem(
                        f"local normal matrix is numerically singular at u0={pts[i]:.6g} "
                        f"(condition {cond[bad][0]:.3g}); set ridge_eps > 0 to regularize",
                        u0=float(pts[i]))
                else:
                    idx = idx[~bad]
        if idx.size:
            coef[start + idx] = np.linalg.solve(M[idx], rhs[idx][..., None])[..., 0]
            if keep_inverse:
                inv[start + idx] = np.linalg.inv(M[idx])
            ok[start + idx] = True
    return _Batch(coef, inv, reg, support, ok)


def _unscale(coef, h, degree, s):
    """Split scaled Taylor coefficients into ``theta`` and derivative blocks."""
    theta = coef[..., :s]
    derivs = np.stack([coef[..., j * s:(j + 1) * s] * (math.factorial(j) / h ** j)
                       for j in range(1, degree + 1)], axis=-2)
    return theta, derivs


def _solve_on(data, cfg, points, degree, h=None, *, keep_inverse=True, on_failure="raise",
              y=None):
    layout = cfg.layout(data)
    gamma = layout.gamma(data.x, data.z_rows)
    h = cfg.h if h is None else h
    return _local_solve(gamma, data.y if y is None else y, data.u, points, h, cfg.kernel,
                        degree, min_factor=cfg.min_local_obs_factor,
                        ridge_eps=cfg.ridge_eps, cond_limit=cfg.cond_limit,
                        keep_inverse=keep_inverse, on_failure=on_failure)


def _fits_from_batch(batch, points, h, kernel, degree, layout):
    theta, derivs = _unscale(batch.coef, h, degree, layout.s)
    return tuple(
        LocalFit(float(points[i]), theta[i], derivs[i], degree, h, kernel, layout,
                 batch.inv[i], bool(batch.regularized[i]), int(batch.support[i]))
        for i in range(len(points)))


def local_fits(data, points, cfg, degree=1, h=None):
    """Local fits at several points; ``h`` overrides ``cfg.h`` (pilot fits)."""
    points = np.atleast_1d(np.asarray(points, dtype=float))
    h = cfg.h if h is None else h
    batch = _solve_on(data, cfg, points, degree, h)
    return _fits_from_batch(batch, points, h, cfg.kernel, degree, cfg.layout(data))


def local_fit(data, u0, cfg, degree=1):
    """Minimize the local weighted sum of squares at ``u0``.

    Raises
    ------
    InsufficientLocalData
        Fewer than ``cfg.min_local_obs_factor`` times the number of columns
        carry positive weight.
    SingularSystem
        The normal matrix is numerically singular and ``cfg.ridge_eps == 0``.
    """
    return local_fits(data, [u0], cfg, degree)[0]


def fit_curves(data, cfg, degree=1):
    """Fit the coefficient curves on the configured evaluation grid."""
    grid = cfg.grid(data)
    fits = local_fits(data, grid, cfg, degree)
    return CoefficientCurves(grid, fits, cfg, cfg.interval(data), cfg.layout(data), data.n)


def evaluate_at(curves, data, cfg, points, mode="exact"):
    """Coefficient estimates at arbitrary points, shape ``(len(points), s)``.

    ``mode="exact"`` runs a local fit at each point. ``mode="interp"``
    interpolates the grid fits linearly, which is much cheaper and only
    valid inside the grid.
    """
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if mode == "exact":
        batch = _solve_on(data, cfg, points, 1, keep_inverse=False)
        return batch.coef[:, :cfg.layout(data).s].copy()
    if mode == "interp":
        grid = curves.grid
        if points.size and (points.min() < grid[0] or points.max() > grid[-1]):
            raise ValueError("interp mode only covers the evaluation grid "
                             f"[{grid[0]:.6g}, {grid[-1]:.6g}]")
        theta = curves.theta
        return np.column_stack([np.interp(points, grid, theta[:, c])
                                for c in range(theta.shape[1])])
    raise ValueError(f"unknown mode {mode!r}")


def averaging_points(data, cfg):
    """Observation index values entering the constant-coefficient average."""
    if not cfg.trim:
        return data.u
    a, b = cfg.interval(data)
    return data.u[(data.u >= a) & (data.u <= b)]


def constant_estimates(data, cfg):
    """Average of the pointwise estimates of every coefficient, shape ``(s,)``."""
    pts = averaging_points(data, cfg)
    if pts.size == 0:
        raise InsufficientLocalData("no observation points inside the averaging interval")
    batch = _solve_on(data, cfg, pts, 1, keep_inverse=False)
    return batch.coef[:, :cfg.layout(data).s].mean(axis=0)


def estimate_constant(data, cfg, coef):
    """Estimate a coefficient assumed constant by averaging its local fits.

    The average runs over every observation point inside the evaluation
    interval (all points when ``cfg.trim`` is off).
    """
    return float(constant_estimates(data, cfg)[cfg.layout(data).index(coef)])


@dataclass(frozen=True, eq=False)
class UnstructuredFit:
    """Per-cluster varying-coefficient fits ignoring the cluster-level model.

    Attributes
    ----------
    a : ndarray, shape (m, G, p)
        Estimated loadings of each cluster on the grid (NaN where the local
        fit was infeasible and ``on_failure="nan"``).
    intercept : ndarray, shape (m, G) or None
        Per-cluster intercept curve, which absorbs ``Z_i^T beta(u)``.
    ok : ndarray, shape (m, G)
    """

    grid: np.ndarray
    a: np.ndarray
    intercept: np.ndarray | None
    ok: np.ndarray
    a_obs: np.ndarray | None = None


def fit_unstructured(data, h, kernel, grid=None, *, intercept=False, min_local_obs_factor=1.0,
                     ridge_eps=0.0, on_failure="raise", at_observations=False):
    """Local linear fit of ``y`` on ``X`` within each cluster separately.

    With ``intercept`` on, a free intercept curve per cluster takes up the
    cluster-level term ``Z_i^T beta(u)``; otherwise that term is left in the
    noise. ``at_observations`` additionally evaluates each cluster's fit at
    its own index values (attribute ``a_obs``, shape ``(n, p)``).
    """
    if grid is None:
        grid = np.linspace(data.u_min + kernel.c0 * h, data.u_max - kernel.c0 * h, 101)
    grid = np.asarray(grid, dtype=float)
    p = data.p
    a = np.full((data.m, grid.size, p), np.nan)
    icpt = np.full((data.m, grid.size), np.nan) if intercept else None
    ok = np.zeros((data.m, grid.size), dtype=bool)
    a_obs = np.full((data.n, p), np.nan) if at_observations else None
    for i in range(data.m):
        rows = data.cluster_rows(i)
        x = data.x[rows]
        gamma = np.hstack([np.ones((x.shape[0], 1)), x]) if intercept else x
        try:
            batch = _local_solve(gamma, data.y[rows], data.u[rows], grid, h, kernel, 1,
                                 min_factor=min_local_obs_factor, ridge_eps=ridge_eps,
                                 keep_inverse=False, on_failure=on_failure)
        except (InsufficientLocalData, SingularSystem) as exc:
            raise type(exc)(f"cluster {data.ids[i]!r}: {exc}", u0=exc.u0) from exc
        theta = batch.coef[:, :gamma.shape[1]]
        if intercept:
            icpt[i] = theta[:, 0]
            a[i] = theta[:, 1:]
        else:
            a[i] = theta
        ok[i] = batch.ok
        if at_observations:
            own = _local_solve(gamma, data.y[rows], data.u[rows], data.u[rows], h, kernel, 1,
                               min_factor=min_local_obs_factor, ridge_eps=ridge_eps,
                               keep_inverse=False, on_failure="nan")
            a_obs[rows] = own.coef[:, gamma.shape[1] - p:gamma.shape[1]]
    return UnstructuredFit(grid, a, icpt, ok, a_obs)
