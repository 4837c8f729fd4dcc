"""Clustered data containers and the coefficient layout of the model.

Observations are stored cluster-major in flat arrays. A dataset with ``m``
clusters, individual covariates of dimension ``p`` and cluster covariates of
dimension ``q`` carries ``s = (q + 1) p + q`` functional coefficients, laid
out as ``(alpha_0, ..., alpha_q, beta)`` where each ``alpha_k`` has ``p``
entries. An optional intercept function ``beta_0`` is inserted at the head of
the ``beta`` block.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DegenerateIndex, DimensionMismatch, NonFiniteValue


@dataclass(frozen=True)
class Observation:
    y: float
    u: float
    x: tuple


@dataclass(frozen=True)
class Cluster:
    id: Hashable
    z: tuple
    obs: tuple


@dataclass(frozen=True)
class CoefLayout:
    """Position and naming of the entries of the coefficient vector.

    Names follow ``alpha{k}_{j}`` (``k = 0..q``, ``j = 1..p``) and
    ``beta_{j}`` (``j = 1..q``, plus ``beta_0`` for the intercept).
    """

    p: int
    q: int
    intercept: bool = False

    @property
    def s(self):
        return (self.q + 1) * self.p + self.q + int(self.intercept)

    @property
    def beta_offset(self):
        return (self.q + 1) * self.p

    @property
    def names(self):
        out = [f"alpha{k}_{j}" for k in range(self.q + 1) for j in range(1, self.p + 1)]
        if self.intercept:
            out.append("beta_0")
        out += [f"beta_{j}" for j in range(1, self.q + 1)]
        return tuple(out)

    def index(self, coef):
        """Resolve a coefficient id (name, ``(k, j)`` pair or flat index)."""
        if isinstance(coef, (int, np.integer)):
            if not 0 <= coef < self.s:
                raise IndexError(f"coefficient index {coef} out of range 0..{self.s - 1}")
            return int(coef)
        if isinstance(coef, tuple):
            k, j = coef
            if not (0 <= k <= self.q and 1 <= j <= self.p):
                raise KeyError(f"no coefficient alpha{k}_{j}")
            return k * self.p + j - 1
        try:
            return self.names.index(coef)
        except ValueError:
            raise KeyError(f"unknown coefficient {coef!r}") from None

    def name(self, coef):
        return self.names[self.index(coef)]

    def alpha_slice(self, k):
        return slice(k * self.p, (k + 1) * self.p)

    @property
    def beta_slice(self):
        return slice(self.beta_offset, self.s)

    def gamma(self, x, z_rows):
        """Row blocks ``(X, Z (x) X, [1], Z)`` for each observation.

        ``x`` is ``(n, p)``; ``z_rows`` is ``(n, q)``, the cluster covariate of
        each row's cluster.
        """
        n = x.shape[0]
        blocks = [x]
        for k in range(self.q):
            blocks.append(z_rows[:, k:k + 1] * x)
        if self.intercept:
            blocks.append(np.ones((n, 1)))
        blocks.append(z_rows)
        return np.hstack(blocks)


@dataclass(frozen=True, eq=False)
class ClusterDataset:
    """Validated, immutable clustered dataset.

    Use :meth:`from_arrays` or :func:`validate_dataset` to build one; the
    constructor itself runs every check.

    Attributes
    ----------
    y, u : ndarray, shape (n,)
    x : ndarray, shape (n, p)
    z : ndarray, shape (m, q)
    offsets : ndarray, shape (m + 1,)
        Rows ``offsets[i]:offsets[i + 1]`` belong to cluster ``i``.
    ids : tuple
        Cluster identifiers in storage order.
    """

    y: np.ndarray
    u: np.ndarray
    x: np.ndarray
    z: np.ndarray
    offsets: np.ndarray
    ids: tuple
    small_clusters: tuple = field(init=False)

    def __post_init__(self):
        y = np.array(self.y, dtype=float).reshape(-1)
        u = np.array(self.u, dtype=float).reshape(-1)
        x = np.array(self.x, dtype=float)
        z = np.array(self.z, dtype=float)
        offsets = np.array(self.offsets, dtype=np.intp)
        n = y.size
        if x.ndim == 1:
            x = x.reshape(n, -1) if n else x.reshape(0, 0)
        if x.ndim != 2 or x.shape[0] != n or u.size != n:
            raise DimensionMismatch("y, u and x must have the same number of rows")
        if z.ndim == 1:
            z = z.reshape(-1, 1) if z.size else z.reshape(-1, 0)
        m = z.shape[0]
        if m < 1:
            raise DimensionMismatch("dataset needs at least one cluster")
        if offsets.shape != (m + 1,) or offsets[0] != 0 or offsets[-1] != n:
            raise DimensionMismatch("offsets must run from 0 to n with one entry per cluster")
        sizes = np.diff(offsets)
        if np.any(sizes < 1):
            raise DimensionMismatch("every cluster needs at least one observation")
        if len(self.ids) != m:
            raise DimensionMismatch("one id per cluster required")
        for name, arr in (("y", y), ("u", u), ("x", x), ("z", z)):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteValue(f"non-finite value in {name}")
        if np.ptp(u) <= 0:
            raise DegenerateIndex("all index values U are equal")
        for arr in (y, u, x, z, offsets):
            arr.setflags(write=False)
        p = x.shape[1]
        small = tuple(i for i in range(m) if sizes[i] <= p)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "ids", tuple(self.ids))
        object.__setattr__(self, "small_clusters", small)

    @classmethod
    def from_arrays(cls, cluster_ids, y, u, x, z):
        """Build a dataset from per-row arrays.

        ``z`` is either per cluster ``(m, q)`` aligned with the order of first
        appearance of each id, or per row ``(n, q)``; in the latter case the
        first row of each cluster is used. Rows are regrouped cluster-major,
        keeping their original order within a cluster.
        """
        cluster_ids = list(cluster_ids)
        y = np.asarray(y, dtype=float)
        n = len(cluster_ids)
        x = np.asarray(x, dtype=float).reshape(n, -1)
        z = np.asarray(z, dtype=float)
        order_ids = list(dict.fromkeys(cluster_ids))
        pos = {cid: i for i, cid in enumerate(order_ids)}
        codes = np.array([pos[c] for c in cluster_ids], dtype=np.intp)
        perm = np.argsort(codes, kind="stable")
        counts = np.bincount(codes, minlength=len(order_ids))
        offsets = np.concatenate([[0], np.cumsum(counts)])
        if z.ndim == 1:
            z = z.reshape(-1, 1) if z.size else np.zeros((len(z), 0))
        if z.shape[0] == n and n != len(order_ids):
            z = z[perm][offsets[:-1]]
        elif z.shape[0] != len(order_ids):
            raise DimensionMismatch("z must have one row per cluster or per observation")
        return cls(y=y[perm], u=np.asarray(u, dtype=float)[perm], x=x[perm], z=z,
                   offsets=offsets, ids=tuple(order_ids))

    @property
    def n(self):
        return self.y.size

    @property
    def m(self):
        return self.z.shape[0]

    @property
    def p(self):
        return self.x.shape[1]

    @property
    def q(self):
        return self.z.shape[1]

    @property
    def s(self):
        return (self.q + 1) * self.p + self.q

    @property
    def sizes(self):
        return np.diff(self.offsets)

    @property
    def u_min(self):
        return float(self.u.min())

    @property
    def u_max(self):
        return float(self.u.max())

    @property
    def cluster_index(self):
        """Cluster number of each row."""
        return np.repeat(np.arange(self.m), self.sizes)

    @property
    def z_rows(self):
        return self.z[self.cluster_index]

    def layout(self, intercept=False):
        return CoefLayout(self.p, self.q, intercept)

    def cluster_rows(self, i):
        return slice(int(self.offsets[i]), int(self.offsets[i + 1]))

    @property
    def clusters(self):
        """The data as a list of :class:`Cluster` records."""
        out = []
        for i, cid in enumerate(self.ids):
            sl = self.cluster_rows(i)
            obs = tuple(Observation(float(yy), float(uu), tuple(xx))
                        for yy, uu, xx in zip(self.y[sl], self.u[sl], self.x[sl]))
            out.append(Cluster(cid, tuple(self.z[i]), obs))
        return out

    def subset(self, keep):
        """Dataset restricted to the clusters listed in ``keep`` (in that order)."""
        keep = list(keep)
        rows = np.concatenate([np.arange(self.offsets[i], self.offsets[i + 1]) for i in keep])
        sizes = self.sizes[keep]
        return ClusterDataset(self.y[rows], self.u[rows], self.x[rows], self.z[keep],
                              np.concatenate([[0], np.cumsum(sizes)]),
                              tuple(self.ids[i] for i in keep))

    def drop_cluster(self, i):
        return self.subset([j for j in range(self.m) if j != i])

    def with_y(self, y):
        return ClusterDataset(y, self.u, self.x, self.z, self.offsets, self.ids)

    def __eq__(self, other):
        if not isinstance(other, ClusterDataset):
            return NotImplemented
        return (self.ids == other.ids
                and all(np.array_equal(getattr(self, a), getattr(other, a))
                        for a in ("y", "u", "x", "z", "offsets")))

    __hash__ = None


def validate_dataset(raw):
    """Validate ``raw`` and return a :class:`ClusterDataset`.

    ``raw`` may be an existing dataset (returned re-checked, so the call is
    idempotent) or a sequence of :class:`Cluster` records.
    """
    if isinstance(raw, ClusterDataset):
        return ClusterDataset(raw.y, raw.u, raw.x, raw.z, raw.offsets, raw.ids)
    clusters: Sequence[Cluster] = list(raw)
    if not clusters:
        raise DimensionMismatch("dataset needs at least one cluster")
    q = len(clusters[0].z)
    first_obs = next((c.obs[0] for c in clusters if c.obs), None)
    p = len(first_obs.x) if first_obs is not None else 0
    y, u, x, z, sizes = [], [], [], [], []
    for c in clusters:
        if len(c.z) != q:
            raise DimensionMismatch(f"cluster {c.id!r}: z has length {len(c.z)}, expected {q}")
        for o in c.obs:
            if len(o.x) != p:
                raise DimensionMismatch(
                    f"cluster {c.id!r}: observation x has length {len(o.x)}, expected {p}")
            y.append(o.y)
            u.append(o.u)
            x.append(o.x)
        z.append(c.z)
        sizes.append(len(c.obs))
    return ClusterDataset(np.array(y, dtype=float), np.array(u, dtype=float),
                          np.array(x, dtype=float).reshape(len(y), p),
                          np.array(z, dtype=float).reshape(len(clusters), q),
                          np.concatenate([[0], np.cumsum(sizes)]).astype(np.intp),
                          tuple(c.id for c in clusters))
