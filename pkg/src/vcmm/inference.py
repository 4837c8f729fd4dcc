"""Plug-in bias and variance, simultaneous confidence bands and sup-norm tests.

The bands and tests standardize ``alpha_hat(u) - bias_hat(u) - g(u)`` by the
plug-in standard error and compare the sup over the evaluation grid with the
Gumbel-type limit ``P(T < x) -> exp(-2 exp(-x))`` where
``T = L (sup - omega_n)`` and ``L = sqrt(-2 log(h / (b - a)))``.

The limit is approached at a logarithmic rate, so finite-sample sizes and
coverages can deviate noticeably from nominal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientLocalData, InvalidInterval, SingularSystem, TooFewClusters
from .kernels import kernel_eval, kernel_moments
from .local import averaging_points, constant_estimates, local_fits

_CHUNK_ELEMS = 2_000_000


@dataclass(frozen=True, eq=False)
class BiasEstimate:
    points: np.ndarray
    bias: np.ndarray   # (P, s)
    layout: object

    def alpha(self, k):
        return self.bias[:, self.layout.alpha_slice(k)]

    @property
    def beta(self):
        return self.bias[:, self.layout.beta_slice]

    def coef(self, c):
        return self.bias[:, self.layout.index(c)]


@dataclass(frozen=True, eq=False)
class VarianceEstimate:
    points: np.ndarray
    cov: np.ndarray    # (P, s, s) conditional covariance of theta_hat(u)
    layout: object

    @property
    def se(self):
        return np.sqrt(np.clip(np.diagonal(self.cov, axis1=1, axis2=2), 0, None))

    def alpha(self, k):
        sl = self.layout.alpha_slice(k)
        return self.cov[:, sl, sl]

    @property
    def beta(self):
        sl = self.layout.beta_slice
        return self.cov[:, sl, sl]

    def coef(self, c):
        return self.se[:, self.layout.index(c)]


@dataclass(frozen=True)
class BandResult:
    coef: str
    level: float
    grid: np.ndarray
    estimate: np.ndarray
    bias: np.ndarray
    center: np.ndarray
    se: np.ndarray
    half_width: np.ndarray
    omega: float
    multiplier: float
    interval: tuple

    @property
    def lower(self):
        return self.center - self.half_width

    @property
    def upper(self):
        return self.center + self.half_width

    def covers(self, values):
        """Whether ``values`` on the grid lie inside the band everywhere."""
        return bool(np.all(np.abs(np.asarray(values) - self.center) <= self.half_width))


@dataclass(frozen=True)
class TestResult:
    __test__ = False

    kind: str
    coef: str
    statistic: float
    omega: float
    critical: float
    p_value: float
    reject: bool
    u_star: float
    sup: float
    level: float
    constant: float | None = None


@dataclass(frozen=True)
class ConstantEstimate:
    coef: str
    value: float
    se: float


def _points(data, cfg, points):
    return cfg.grid(data) if points is None else np.atleast_1d(np.asarray(points, dtype=float))


def _moments(gamma, u, pts, h, kernel, orders, weight_power=1):
    """``sum_r w_r**weight_power t_r**k Gamma_r Gamma_r^T`` for each ``k`` in ``orders``."""
    n, s = gamma.shape
    gg = (gamma[:, :, None] * gamma[:, None, :]).reshape(n, s * s)
    t = (u[None, :] - pts[:, None]) / h
    w = np.atleast_2d(kernel_eval(kernel, t) / h) ** weight_power
    return {k: ((w * t ** k) @ gg).reshape(pts.size, s, s) for k in orders}


def bias_from_derivatives(data, cfg, points, second, third, main_fits=None):
    """Conditional bias of the local linear fit given curvature estimates.

    ``second`` and ``third`` have shape ``(P, s)``: the second and third
    derivatives of the coefficient vector at each point. The remainder of a
    local linear expansion is approximated by its quadratic and cubic Taylor
    terms and pushed through the local linear smoother.
    """
    layout = cfg.layout(data)
    s = layout.s
    points = np.atleast_1d(np.asarray(points, dtype=float))
    if main_fits is None:
        main_fits = local_fits(data, points, cfg, 1)
    gamma = layout.gamma(data.x, data.z_rows)
    h = cfg.h
    out = np.empty((points.size, s))
    chunk = max(1, _CHUNK_ELEMS // max(data.n, 1))
    for start in range(0, points.size, chunk):
        sl = slice(start, start + chunk)
        S = _moments(gamma, data.u, points[sl], h, cfg.kernel, (2, 3, 4))
        sec = np.asarray(second)[sl]
        thr = np.asarray(third)[sl]
        xtwr = np.concatenate([
            0.5 * h ** 2 * np.einsum("gab,gb->ga", S[2], sec)
            + h ** 3 / 6 * np.einsum("gab,gb->ga", S[3], thr),
            0.5 * h ** 2 * np.einsum("gab,gb->ga", S[3], sec)
            + h ** 3 / 6 * np.einsum("gab,gb->ga", S[4], thr),
        ], axis=1)
        inv = np.stack([f.gram_inv for f in main_fits[sl]])
        out[sl] = np.einsum("gab,gb->ga", inv[:, :s], xtwr)
    return out


def estimate_bias(data, cfg, points=None):
    """Plug-in conditional bias of the local linear estimates.

    Second and third derivatives come from a local cubic pilot fit with
    bandwidth ``cfg.pilot_bandwidth(n)``.
    """
    points = _points(data, cfg, points)
    pilot = local_fits(data, points, cfg, 3, h=cfg.pilot_bandwidth(data.n))
    second = np.stack([f.derivs[1] for f in pilot])
    third = np.stack([f.derivs[2] for f in pilot])
    bias = bias_from_derivatives(data, cfg, points, second, third)
    return BiasEstimate(points, bias, cfg.layout(data))


def estimate_variance(data, cfg, vc, points=None, main_fits=None):
    """Plug-in conditional covariance ``L V L^T`` of the local linear estimates.

    ``V = sigma2 I + blockdiag(x_i Sigma x_i^T)`` uses the PSD-projected
    ``vc.Sigma``. The block structure is exploited cluster by cluster; the
    ``n x n`` matrix is never formed.
    """
    points = _points(data, cfg, points)
    layout = cfg.layout(data)
    s, p = layout.s, data.p
    if main_fits is None:
        main_fits = local_fits(data, points, cfg, 1)
    gamma = layout.gamma(data.x, data.z_rows)
    gx = (gamma[:, :, None] * data.x[:, None, :]).reshape(data.n, s * p)
    starts = data.offsets[:-1]
    h = cfg.h
    D = 2 * s
    out = np.empty((points.size, s, s))
    chunk = max(1, _CHUNK_ELEMS // max(data.n * s * p, 1))
    for start in range(0, points.size, chunk):
        sl = slice(start, start + chunk)
        pts = points[sl]
        g = pts.size
        S = _moments(gamma, data.u, pts, h, cfg.kernel, (0, 1, 2), weight_power=2)
        mid = np.empty((g, D, D))
        mid[:, :s, :s] = S[0]
        mid[:, :s, s:] = S[1]
        mid[:, s:, :s] = S[1]
        mid[:, s:, s:] = S[2]
        mid *= vc.sigma2
        t = (data.u[None, :] - pts[:, None]) / h
        w = np.atleast_2d(kernel_eval(cfg.kernel, t) / h)
        C = np.concatenate([
            np.add.reduceat(w[:, :, None] * gx[None], starts, axis=1),
            np.add.reduceat((w * t)[:, :, None] * gx[None], starts, axis=1),
        ], axis=2)  # (g, m, D*p) with row blocks of Gamma^T x per cluster
        C = C.reshape(g, data.m, 2, s, p).reshape(g, data.m, D, p)
        Ct = C.transpose(0, 2, 1, 3).reshape(g, D, data.m * p)
        CS = (C @ vc.Sigma).transpose(0, 1, 3, 2).reshape(g, data.m * p, D)
        mid += Ct @ CS
        inv = np.stack([f.gram_inv for f in main_fits[sl]])[:, :s]
        cov = inv @ mid @ np.swapaxes(inv, 1, 2)
        out[sl] = (cov + np.swapaxes(cov, 1, 2)) / 2
    return VarianceEstimate(points, out, layout)


def _log_scale(h, interval):
    a, b = interval
    if not h < b - a:
        raise InvalidInterval(f"bandwidth {h:g} must be smaller than the interval length {b - a:g}")
    return math.sqrt(-2.0 * math.log(h / (b - a)))


def omega_n(moments, h, interval):
    """Centering constant of the sup-deviation limit law.

    Uses ``K(c0)^2`` and a log-log correction when the kernel does not vanish
    at its support edge, and ``int K'^2`` otherwise.
    """
    L = _log_scale(h, interval)
    a, b = interval
    if moments.k_at_c0 != 0:
        corr = (math.log(moments.k_at_c0 ** 2 / (moments.nu0 * math.sqrt(math.pi)))
                + 0.5 * math.log(math.log((b - a) / h)))
    else:
        corr = math.log(moments.dk2 / (4 * moments.nu0 * math.pi))
    return L + corr / L


def band_multiplier(moments, h, interval, alpha):
    """Half-width of the ``1 - alpha`` band in units of the standard error."""
    L = _log_scale(h, interval)
    return omega_n(moments, h, interval) + (math.log(2) - math.log(-math.log1p(-alpha))) / L


def critical_value(alpha):
    """Critical value ``-log(-log(1 - alpha) / 2)`` of the limiting law."""
    return -math.log(-0.5 * math.log1p(-alpha))


def gumbel_pvalue(statistic):
    """``P(T > statistic)`` under ``exp(-2 exp(-x))``."""
    return -math.expm1(-2.0 * math.exp(-statistic)) if statistic > -700 else 1.0


def _check_grid(curves, bias, var):
    for est in (bias, var):
        if est is not None and not np.array_equal(est.points, curves.grid):
            raise ValueError("bias/variance estimates must be evaluated on the curve grid")


def confidence_band(curves, bias, var, coef, level=0.95, *, bias_correct=True):
    """Simultaneous ``level`` band for one coefficient over the evaluation grid.

    With ``bias_correct=False`` the band is centered at the raw estimate
    (variance-only band, for diagnostics).
    """
    _check_grid(curves, bias, var)
    idx = curves.layout.index(coef)
    cfg = curves.config
    mom = kernel_moments(cfg.kernel)
    est = curves.theta[:, idx]
    b = bias.bias[:, idx] if bias_correct else np.zeros_like(est)
    se = var.se[:, idx]
    mult = band_multiplier(mom, cfg.h, curves.interval, 1 - level)
    return BandResult(curves.layout.names[idx], level, curves.grid, est, b, est - b, se,
                      mult * se, omega_n(mom, cfg.h, curves.interval), mult, curves.interval)


def _sup_test(curves, bias, var, idx, null_values, alpha, kind, bias_correct, constant=None):
    cfg = curves.config
    mom = kernel_moments(cfg.kernel)
    L = _log_scale(cfg.h, curves.interval)
    om = omega_n(mom, cfg.h, curves.interval)
    num = curves.theta[:, idx] - null_values
    if bias_correct:
        num = num - bias.bias[:, idx]
    se = var.se[:, idx]
    with np.errstate(divide="ignore", invalid="ignore"):
        dev = np.where(se > 0, np.abs(num) / se, np.where(num == 0, 0.0, np.inf))
    k = int(np.argmax(dev))
    sup = float(dev[k])
    stat = L * (sup - om)
    crit = critical_value(alpha)
    return TestResult(kind, curves.layout.names[idx], stat, om, crit, gumbel_pvalue(stat),
                      bool(stat > crit), float(curves.grid[k]), sup, alpha, constant)


def test_specified(curves, bias, var, coef, null_fn, alpha=0.05, *, bias_correct=True):
    """Sup-norm test of ``H0: coefficient(u) = null_fn(u)`` on the grid."""
    _check_grid(curves, bias, var)
    idx = curves.layout.index(coef)
    null_values = np.broadcast_to(np.asarray(null_fn(curves.grid), dtype=float),
                                  curves.grid.shape)
    return _sup_test(curves, bias, var, idx, null_values, alpha, "specified", bias_correct)


def test_constancy(curves, bias, var, data, cfg, coef, alpha=0.05, *, constant=None,
                   bias_correct=True):
    """Sup-norm test of ``H0: coefficient(u)`` is constant.

    The constant is estimated by averaging the local fits over observation
    points unless ``constant`` is supplied.
    """
    _check_grid(curves, bias, var)
    idx = curves.layout.index(coef)
    if constant is None:
        constant = float(constant_estimates(data, cfg)[idx])
    null_values = np.full(curves.grid.shape, constant)
    return _sup_test(curves, bias, var, idx, null_values, alpha, "constancy", bias_correct,
                     constant)


test_specified.__test__ = False
test_constancy.__test__ = False


def jackknife_se(data, cfg, coefs):
    """Leave-one-cluster-out jackknife SEs of averaged constant coefficients.

    The evaluation interval and pilot bandwidth are pinned on the full data so
    every replicate averages over the same window. Replicates come from
    :func:`jackknife_replicates`.
    """
    if data.m < 2:
        raise TooFewClusters("jackknife needs at least two clusters")
    layout = cfg.layout(data)
    idx = [layout.index(c) for c in coefs]
    cfg = cfg.resolved(data)
    full = constant_estimates(data, cfg)[idx]
    se = jackknife_from_replicates(jackknife_replicates(data, cfg)[:, idx])
    return [ConstantEstimate(layout.names[i], float(v), float(e))
            for i, v, e in zip(idx, full, se)]


def jackknife_replicates(data, cfg):
    """Averaged constants with each cluster left out in turn, shape ``(m, s)``.

    Equivalent to ``constant_estimates(data.drop_cluster(i), cfg)`` for a
    ``cfg`` with a pinned interval, but computed by subtracting each cluster's
    contribution from the local moment matrices instead of refitting.
    """
    if data.m < 2:
        raise TooFewClusters("jackknife needs at least two clusters")
    if cfg.grid_interval is None and cfg.trim:
        raise ValueError("pin the averaging interval first (cfg.resolved(data))")
    layout = cfg.layout(data)
    s, m, n = layout.s, data.m, data.n
    D = 2 * s
    if cfg.trim:
        a, b = cfg.interval(data)
        rows = np.flatnonzero((data.u >= a) & (data.u <= b))
    else:
        rows = np.arange(n)
    pts = data.u[rows]
    owner = data.cluster_index[rows]
    gamma = layout.gamma(data.x, data.z_rows)
    gg = (gamma[:, :, None] * gamma[:, None, :]).reshape(n, s * s)
    gy = gamma * data.y[:, None]
    starts = data.offsets[:-1]
    sums = np.zeros((m, s))
    counts = np.zeros(m)
    need = cfg.min_local_obs_factor * D
    chunk = max(1, _CHUNK_ELEMS // max(m * D * D, 1))
    bounds = list(zip(data.offsets[:-1], data.offsets[1:]))
    for start in range(0, pts.size, chunk):
        sl = slice(start, start + chunk)
        u0 = pts[sl]
        g = u0.size
        t = (data.u[None, :] - u0[:, None]) / cfg.h
        w = np.atleast_2d(kernel_eval(cfg.kernel, t) / cfg.h)
        wts = [w, w * t, w * t * t]
        M = np.empty((g, m, D, D))
        rhs = np.empty((g, m, D))
        for r, wt in enumerate(wts):
            part = np.empty((g, m, s * s))
            for i, (lo, hi) in enumerate(bounds):
                part[:, i] = wt[:, lo:hi] @ gg[lo:hi]
            S = (wt @ gg)[:, None, :] - part
            S = S.reshape(g, m, s, s)
            for a_ in range(max(0, r - 1), min(r, 1) + 1):
                M[:, :, a_ * s:(a_ + 1) * s, (r - a_) * s:(r - a_ + 1) * s] = S
            if r <= 1:
                part = np.empty((g, m, s))
                for i, (lo, hi) in enumerate(bounds):
                    part[:, i] = wt[:, lo:hi] @ gy[lo:hi]
                rhs[:, :, r * s:(r + 1) * s] = (wt @ gy)[:, None, :] - part
        support = np.add.reduceat((w > 0).astype(np.intp), starts, axis=1)
        support = support.sum(axis=1, keepdims=True) - support
        keep = np.ones((g, m), dtype=bool)
        keep[np.arange(g), owner[sl]] = False
        bad = keep & (support < need)
        if bad.any():
            i, k = map(int, np.argwhere(bad)[0])
            raise InsufficientLocalData(
                f"leaving out cluster {data.ids[k]!r} leaves {support[i, k]} weighted "
                f"observations at u0={u0[i]:.6g}", u0=float(u0[i]))
        try:
            sol = np.linalg.solve(M, rhs[..., None])[..., 0][..., :s]
        except np.linalg.LinAlgError as exc:
            raise SingularSystem(f"singular leave-one-cluster-out system: {exc}") from exc
        sol = np.where(keep[..., None], sol, 0.0)
        if not np.all(np.isfinite(sol)):
            raise SingularSystem("non-finite leave-one-cluster-out estimate")
        sums += sol.sum(axis=0)
        counts += keep.sum(axis=0)
    if np.any(counts == 0):
        raise InsufficientLocalData("a leave-one-cluster-out replicate has no averaging points")
    return sums / counts[:, None]


def jackknife_from_replicates(replicates):
    """``sqrt((m - 1) / m * sum_i (r_i - mean)^2)`` along the first axis."""
    reps = np.asarray(replicates, dtype=float)
    m = reps.shape[0]
    if m < 2:
        raise TooFewClusters("jackknife needs at least two replicates")
    dev = reps - reps.mean(axis=0)
    return np.sqrt((m - 1) / m * np.sum(dev ** 2, axis=0))


def cluster_effect(curves, constants, z, e=None):
    """Composed loadings ``a_j(u) = alpha_0j(u) + sum_k alpha_kj(u) z_k (+ e_j)``.

    ``constants`` maps coefficient names (or ids) to values that replace the
    corresponding curve. Returns an array of shape ``(len(grid), p)``.
    """
    layout = curves.layout
    z = np.asarray(z, dtype=float)
    if z.shape != (layout.q,):
        raise ValueError(f"z must have length q={layout.q}")
    theta = curves.theta.copy()
    if isinstance(constants, (list, tuple)):
        constants = {c.coef: c.value for c in constants}
    for c, v in (constants or {}).items():
        theta[:, layout.index(c)] = v
    out = theta[:, layout.alpha_slice(0)].copy()
    for k in range(1, layout.q + 1):
        out += theta[:, layout.alpha_slice(k)] * z[k - 1]
    if e is not None:
        out += np.asarray(e, dtype=float)
    return out
