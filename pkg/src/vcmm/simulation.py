"""Data generator and Monte Carlo studies for the clustered varying-coefficient model.

Random streams: replicate ``r`` of a study with base seed ``S`` draws from
``numpy.random.Generator(PCG64(SeedSequence(S, spawn_key=(r,))))``. Within a
replicate the draws happen in a fixed order: cluster sizes, ``Z``, ``X``,
``U``, random effects, measurement errors. Reports are therefore fully
determined by ``(seed, configs)`` and independent of how replicates are
scheduled.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .config import FitConfig
from .data import ClusterDataset, CoefLayout
from .errors import VCMMError
from .inference import (confidence_band, estimate_bias, estimate_variance,
                        test_constancy)
from .local import _local_solve, constant_estimates, fit_curves, fit_unstructured
from .varcomp import estimate_variance_components

log = logging.getLogger(__name__)


def _sin2pi(u):
    return np.sin(2 * np.pi * u)


def _cos2pi(u):
    return np.cos(2 * np.pi * u)


def _sinpi(u):
    return np.sin(np.pi * u)


@dataclass(frozen=True)
class _Const:
    value: float

    def __call__(self, u):
        return np.full(np.shape(u), self.value, dtype=float)


@dataclass(frozen=True)
class SimTruth:
    """True coefficient functions keyed by coefficient name."""

    layout: CoefLayout
    funcs: dict

    @classmethod
    def default(cls, p=3, q=2, intercept=True):
        """``alpha_0 = sin(2 pi u)``, ``alpha_1 = cos(2 pi u)``, ``alpha_k = sin(pi u)``
        for ``k >= 2``, every ``beta_j`` (and the intercept) ``sin(2 pi u)``."""
        layout = CoefLayout(p, q, intercept)
        funcs = {}
        for name in layout.names:
            if name.startswith("alpha"):
                k = int(name[5:name.index("_")])
                funcs[name] = (_sin2pi, _cos2pi)[k] if k < 2 else _sinpi
            else:
                funcs[name] = _sin2pi
        return cls(layout, funcs)

    @classmethod
    def constant(cls, p=3, q=2, intercept=True, value=0.5):
        layout = CoefLayout(p, q, intercept)
        return cls(layout, {name: _Const(value) for name in layout.names})

    def with_function(self, coef, fn):
        funcs = dict(self.funcs)
        funcs[self.layout.name(coef)] = fn
        return SimTruth(self.layout, funcs)

    def with_constant(self, coef, value):
        return self.with_function(coef, _Const(float(value)))

    def theta(self, u):
        """Coefficient vectors at ``u``, shape ``(len(u), s)``."""
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return np.column_stack([np.broadcast_to(self.funcs[nm](u), u.shape)
                                for nm in self.layout.names])

    def coef(self, c, u):
        return np.broadcast_to(self.funcs[self.layout.name(c)](np.asarray(u, dtype=float)),
                               np.shape(u))


@dataclass(frozen=True)
class SimConfig:
    """Simulation design.

    ``cluster_size=None`` draws ``n_i = floor(|2 xi| + 6)`` with standard
    normal ``xi``; an integer fixes every cluster size. ``Sigma`` may be a
    scalar (times the identity) or a ``p x p`` PSD matrix.
    """

    p: int = 3
    q: int = 2
    m: int = 100
    cluster_size: int | None = None
    Sigma: object = 0.25
    sigma: float = 0.5
    intercept: bool = True
    truth: SimTruth | None = None

    def __post_init__(self):
        if self.p < 1 or self.q < 0 or self.m < 1:
            raise ValueError("need p >= 1, q >= 0, m >= 1")
        if self.cluster_size is not None and self.cluster_size < 1:
            raise ValueError("cluster_size must be positive")
        if not self.sigma >= 0:
            raise ValueError("sigma must be nonnegative")
        S = np.asarray(self.Sigma, dtype=float)
        S = S * np.eye(self.p) if S.ndim == 0 else S
        if S.shape != (self.p, self.p) or not np.allclose(S, S.T):
            raise ValueError("Sigma must be a symmetric p x p matrix")
        if np.linalg.eigvalsh(S).min() < -1e-12:
            raise ValueError("Sigma must be positive semidefinite")
        S.setflags(write=False)
        object.__setattr__(self, "Sigma", S)
        truth = self.truth or SimTruth.default(self.p, self.q, self.intercept)
        if truth.layout != self.layout:
            raise ValueError("truth layout does not match (p, q, intercept)")
        object.__setattr__(self, "truth", truth)

    @property
    def layout(self):
        return CoefLayout(self.p, self.q, self.intercept)

    def fit_config(self, h=0.15, **kw):
        return FitConfig(h=h, intercept=self.intercept, **kw)


@dataclass(frozen=True, eq=False)
class SimDataset:
    data: ClusterDataset
    truth: SimTruth
    e: np.ndarray      # (m, p) latent random effects
    eps: np.ndarray    # (n,) measurement errors


def replicate_rng(seed, rep):
    """Generator for replicate ``rep`` of a study seeded with ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=(rep,))))


def _sqrt_psd(S):
    vals, vecs = np.linalg.eigh(S)
    return vecs * np.sqrt(np.clip(vals, 0, None))


def generate_dataset(sim, seed=0, rep=0):
    """Draw one dataset from ``sim``; deterministic in ``(seed, rep)``."""
    rng = seed if isinstance(seed, np.random.Generator) else replicate_rng(seed, rep)
    m, p, q = sim.m, sim.p, sim.q
    if sim.cluster_size is None:
        sizes = np.floor(np.abs(2 * rng.standard_normal(m)) + 6).astype(np.intp)
    else:
        sizes = np.full(m, sim.cluster_size, dtype=np.intp)
    z = rng.standard_normal((m, q))
    n = int(sizes.sum())
    x = rng.standard_normal((n, p))
    u = rng.uniform(0.0, 1.0, n)
    e = rng.standard_normal((m, p)) @ _sqrt_psd(sim.Sigma).T
    eps = sim.sigma * rng.standard_normal(n)
    cl = np.repeat(np.arange(m), sizes)
    layout = sim.layout
    theta = sim.truth.theta(u)
    gamma = layout.gamma(x, z[cl])
    y = np.einsum("ns,ns->n", gamma, theta) + np.einsum("np,np->n", x, e[cl]) + eps
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    data = ClusterDataset(y, u, x, z, offsets, tuple(range(m)))
    return SimDataset(data, sim.truth, e, eps)


def _trapz_weights(grid):
    w = np.zeros(grid.size)
    d = np.diff(grid)
    w[:-1] += d / 2
    w[1:] += d / 2
    return w


def _vech_names(p):
    return [f"Sigma_{i + 1}{j + 1}" for i in range(p) for j in range(i, p)]


@dataclass(frozen=True, eq=False)
class MiseReport:
    names: tuple
    mise: np.ndarray          # (s,)
    ise: np.ndarray           # (reps_ok, s)
    varcomp_mse: dict
    reps: int
    failed: int
    integration: str

    def as_dict(self):
        return {
            "reps": self.reps,
            "failed": self.failed,
            "integration": self.integration,
            "mise": dict(zip(self.names, map(float, self.mise))),
            "varcomp_mse": {k: float(v) for k, v in self.varcomp_mse.items()},
        }


def mise_study(sim, cfg, reps=100, seed=0, integrate="full"):
    """MISE of every coefficient curve and MSE of the variance components.

    Squared errors are integrated with the trapezoid rule over each
    replicate's evaluation grid, spanning the full data range
    (``integrate="full"``) or trimmed by ``c0 h`` at both ends
    (``integrate="trimmed"``). The
    variance-component MSEs use the unprojected ``Sigma`` estimate. Replicates
    whose fit fails are counted and skipped.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if integrate not in ("full", "trimmed"):
        raise ValueError("integrate must be 'full' or 'trimmed'")
    layout = sim.layout
    cfg = replace(cfg, intercept=sim.intercept, trim=integrate == "trimmed")
    p = sim.p
    iu = np.triu_indices(p)
    ise, s2_err, S_err = [], [], []
    failed = 0
    for r in range(reps):
        sd = generate_dataset(sim, seed, r)
        try:
            curves = fit_curves(sd.data, cfg)
            vc = estimate_variance_components(sd.data, curves, cfg)
        except VCMMError as exc:
            log.warning("replicate %d failed: %s", r, exc)
            failed += 1
            continue
        err = (curves.theta - sd.truth.theta(curves.grid)) ** 2
        ise.append(_trapz_weights(curves.grid) @ err)
        s2_err.append(vc.sigma2 - sim.sigma ** 2)
        S_err.append((vc.Sigma_raw - sim.Sigma)[iu])
    if not ise:
        raise VCMMError("every replicate failed")
    ise = np.array(ise)
    S_mse = np.mean(np.array(S_err) ** 2, axis=0)
    vmse = dict(zip(_vech_names(p), S_mse))
    vmse["sigma2"] = float(np.mean(np.square(s2_err)))
    integ = f"trapezoid over {integrate} grid"
    return MiseReport(layout.names, ise.mean(axis=0), ise, vmse, reps, failed, integ)


@dataclass(frozen=True, eq=False)
class RmiseReport:
    bandwidths: tuple
    rmise_a: np.ndarray
    rmise_beta: np.ndarray
    infeasible: np.ndarray    # fraction of (cluster, grid point) pairs without an unstructured fit
    reps: int

    def as_dict(self):
        return {
            "reps": self.reps,
            "bandwidths": list(map(float, self.bandwidths)),
            "rmise_a": list(map(float, self.rmise_a)),
            "rmise_beta": list(map(float, self.rmise_beta)),
            "infeasible_fraction": list(map(float, self.infeasible)),
        }


def _loadings(theta, layout, z):
    """Cluster loadings ``alpha_0 + sum_k alpha_k z_ik`` on the grid: ``(m, G, p)``."""
    a = np.broadcast_to(theta[:, layout.alpha_slice(0)], (z.shape[0],) + theta[:, :layout.p].shape).copy()
    for k in range(1, layout.q + 1):
        a += z[:, k - 1][:, None, None] * theta[None, :, layout.alpha_slice(k)]
    return a


def rmise_study(sim, bandwidths=(0.1, 0.15, 0.2, 0.25, 0.3), reps=20, seed=0,
                cluster_size=50, kernel=None, integrate="full", unstructured_intercept=False):
    """Loss from ignoring the cluster-level structure of the loadings.

    Clusters have a fixed size and no random effect. For each bandwidth the
    structured fit is compared with per-cluster local linear fits of ``y`` on
    ``X`` (on ``(1, X)`` with ``unstructured_intercept``). ``RMISE(a)`` is the
    ratio of the summed integrated squared errors of the cluster loadings.

    The unstructured ``beta`` is a pooled local linear fit, on ``(1, Z_i)``
    (``Z_i`` without intercept), of the partial residuals
    ``y - X^T a_i_tilde(U)`` left by the per-cluster fits.

    Grid points where a cluster's own fit is infeasible are dropped from both
    numerator and denominator for that cluster; the dropped fraction is
    reported.
    """
    if integrate not in ("full", "trimmed"):
        raise ValueError("integrate must be 'full' or 'trimmed'")
    sim = replace(sim, cluster_size=cluster_size, Sigma=np.zeros((sim.p, sim.p)))
    layout = sim.layout
    nb = len(bandwidths)
    num_a, den_a, num_b, den_b = (np.zeros(nb) for _ in range(4))
    bad = np.zeros(nb)
    tot = np.zeros(nb)
    bsl = layout.beta_slice
    for r in range(reps):
        sd = generate_dataset(sim, seed, r)
        data = sd.data
        for ih, h in enumerate(bandwidths):
            kw = {} if kernel is None else {"kernel": kernel}
            cfg = sim.fit_config(h, trim=integrate == "trimmed", **kw)
            curves = fit_curves(data, cfg)
            grid = curves.grid
            tw = _trapz_weights(grid)
            true_theta = sd.truth.theta(grid)
            a_true = _loadings(true_theta, layout, data.z)
            a_str = _loadings(curves.theta, layout, data.z)
            un = fit_unstructured(data, h, cfg.kernel, grid, intercept=unstructured_intercept,
                                  on_failure="nan", at_observations=True)
            wmask = un.ok * tw[None, :]
            num_a[ih] += np.sum(wmask * np.sum((a_str - a_true) ** 2, axis=2))
            err_un = np.where(un.ok[..., None], un.a - a_true, 0.0)
            den_a[ih] += np.sum(wmask * np.sum(err_un ** 2, axis=2))
            bad[ih] += np.count_nonzero(~un.ok)
            tot[ih] += un.ok.size
            beta_un = _pooled_beta(data, un, grid, h, cfg.kernel, sim.intercept)
            okg = np.all(np.isfinite(beta_un), axis=1)
            num_b[ih] += np.sum(tw[okg] @ (curves.theta[okg][:, bsl] - true_theta[okg][:, bsl]) ** 2)
            den_b[ih] += np.sum(tw[okg] @ (beta_un[okg] - true_theta[okg][:, bsl]) ** 2)
    return RmiseReport(tuple(bandwidths), num_a / den_a, num_b / den_b, bad / tot, reps)


def _pooled_beta(data, un, grid, h, kernel, intercept):
    """Local linear fit of the unstructured partial residuals on ``(1, Z_i)``."""
    keep = np.all(np.isfinite(un.a_obs), axis=1)
    partial = data.y - np.einsum("np,np->n", data.x, np.nan_to_num(un.a_obs))
    zr = data.z_rows
    gamma = np.hstack([np.ones((data.n, 1)), zr]) if intercept else zr
    batch = _local_solve(gamma[keep], partial[keep], data.u[keep], grid, h, kernel, 1,
                         min_factor=1.0, ridge_eps=0.0, keep_inverse=False, on_failure="nan")
    return batch.coef[:, :gamma.shape[1]]


@dataclass(frozen=True, eq=False)
class CalibrationReport:
    coef: str
    level: float
    reject_rate: float
    coverage: float
    statistics: np.ndarray
    p_values: np.ndarray
    constants: np.ndarray     # averaged-constant estimate of the coefficient per replicate
    sigma2: np.ndarray
    reps: int
    failed: int

    def as_dict(self):
        return {
            "coef": self.coef,
            "level": self.level,
            "reps": self.reps,
            "failed": self.failed,
            "constancy_reject_rate": self.reject_rate,
            "band_coverage": self.coverage,
        }


def calibration_study(sim, cfg, coef="alpha0_1", alpha=0.05, reps=200, seed=0):
    """Empirical constancy-test rejection rate and simultaneous band coverage.

    For each replicate: fit, estimate variance components, plug-in bias and
    variance on the grid, test constancy of ``coef`` at level ``alpha`` and
    check whether the ``1 - alpha`` band contains the true curve at every grid
    point. Averaged constants and ``sigma^2`` estimates are kept for rate
    checks.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    if cfg.intercept != sim.intercept:
        cfg = replace(cfg, intercept=sim.intercept)
    name = sim.layout.name(coef)
    idx = sim.layout.index(coef)
    stats, pvals, rejects, covers, consts, s2 = [], [], [], [], [], []
    failed = 0
    for r in range(reps):
        sd = generate_dataset(sim, seed, r)
        data = sd.data
        try:
            curves = fit_curves(data, cfg)
            vc = estimate_variance_components(data, curves, cfg)
            bias = estimate_bias(data, cfg, curves.grid)
            var = estimate_variance(data, cfg, vc, curves.grid, main_fits=curves.fits)
            const = float(constant_estimates(data, cfg)[idx])
            res = test_constancy(curves, bias, var, data, cfg, idx, alpha, constant=const)
            band = confidence_band(curves, bias, var, idx, 1 - alpha)
        except VCMMError as exc:
            log.warning("replicate %d failed: %s", r, exc)
            failed += 1
            continue
        stats.append(res.statistic)
        pvals.append(res.p_value)
        rejects.append(res.reject)
        covers.append(band.covers(sd.truth.coef(idx, curves.grid)))
        consts.append(const)
        s2.append(vc.sigma2)
    if not stats:
        raise VCMMError("every replicate failed")
    return CalibrationReport(name, 1 - alpha, float(np.mean(rejects)), float(np.mean(covers)),
                             np.array(stats), np.array(pvals), np.array(consts), np.array(s2),
                             reps, failed)


@dataclass(frozen=True, eq=False)
class RateReport:
    """Monte Carlo MSEs at ``m`` and ``factor * m`` clusters and their ratios."""

    m: tuple
    names: tuple
    mse_constants: np.ndarray   # (2, len(names))
    mse_sigma2: np.ndarray      # (2,)
    reps: int
    failed: int

    @property
    def ratio_constants(self):
        return self.mse_constants[0] / self.mse_constants[1]

    @property
    def ratio_total(self):
        """Ratio of ``E||C_hat - C||^2`` summed over the tracked constants."""
        tot = self.mse_constants.sum(axis=1)
        return float(tot[0] / tot[1])

    @property
    def ratio_sigma2(self):
        return float(self.mse_sigma2[0] / self.mse_sigma2[1])

    def as_dict(self):
        return {
            "m": list(self.m),
            "reps": self.reps,
            "failed": self.failed,
            "mse_constants": {nm: list(map(float, self.mse_constants[:, i]))
                              for i, nm in enumerate(self.names)},
            "mse_sigma2": list(map(float, self.mse_sigma2)),
            "ratio_constants": dict(zip(self.names, map(float, self.ratio_constants))),
            "ratio_total": self.ratio_total,
            "ratio_sigma2": self.ratio_sigma2,
        }


def rate_study(sim, cfg, reps=200, seed=0, factor=2):
    """MSE of the averaged constants and of ``sigma^2`` at ``m`` and ``factor * m``.

    Only coefficients whose true function is constant are tracked. Under
    root-n consistency each MSE should shrink by about ``factor``.
    """
    if reps < 1:
        raise ValueError("reps must be >= 1")
    cfg = replace(cfg, intercept=sim.intercept)
    idx = [i for i, nm in enumerate(sim.layout.names) if isinstance(sim.truth.funcs[nm], _Const)]
    if not idx:
        raise ValueError("the truth has no constant coefficient")
    names = tuple(sim.layout.names[i] for i in idx)
    truth = np.array([sim.truth.funcs[nm].value for nm in names])
    ms = (sim.m, sim.m * factor)
    mse_c = np.empty((2, len(idx)))
    mse_s = np.empty(2)
    failed = 0
    for k, m in enumerate(ms):
        simk = replace(sim, m=m)
        err_c, err_s = [], []
        for r in range(reps):
            data = generate_dataset(simk, seed, r).data
            try:
                curves = fit_curves(data, cfg)
                vc = estimate_variance_components(data, curves, cfg)
                consts = constant_estimates(data, cfg)[idx]
            except VCMMError as exc:
                log.warning("m=%d replicate %d failed: %s", m, r, exc)
                failed += 1
                continue
            err_c.append(consts - truth)
            err_s.append(vc.sigma2 - sim.sigma ** 2)
        mse_c[k] = np.mean(np.square(err_c), axis=0)
        mse_s[k] = np.mean(np.square(err_s))
    return RateReport(ms, names, mse_c, mse_s, reps, failed)
