"""Compactly supported symmetric kernels and their moment constants.

The built-in kernels live on ``[-1, 1]``. A tabulated kernel is given by its
values on a grid of ``[0, c0]`` and extended by symmetry and linear
interpolation; it is rescaled on construction so that it integrates to one.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from .errors import QuadratureFailure

BUILTIN_KINDS = ("epanechnikov", "uniform", "triweight")


@dataclass(frozen=True)
class KernelMoments:
    mu2: float  # int t^2 K(t) dt
    nu0: float  # int K(t)^2 dt
    dk2: float  # int K'(t)^2 dt, inf when K jumps at the support edge
    k_at_c0: float


@dataclass(frozen=True)
class Kernel:
    """Symmetric density with support ``[-c0, c0]``.

    Parameters
    ----------
    kind : str
        ``"epanechnikov"``, ``"uniform"``, ``"triweight"`` or ``"tabulated"``.
    c0 : float
        Half-width of the support. Fixed at 1 for the built-in kernels.
    nodes, values : tuple of float, optional
        Tabulated kernel only: increasing abscissae on ``[0, c0]`` starting at
        0 and the corresponding (unnormalized) kernel values.
    """

    kind: str = "epanechnikov"
    c0: float = 1.0
    nodes: tuple = field(default=(), repr=False)
    values: tuple = field(default=(), repr=False)

    def __post_init__(self):
        kind = self.kind.lower()
        object.__setattr__(self, "kind", kind)
        if kind in BUILTIN_KINDS:
            if self.c0 != 1.0:
                raise ValueError(f"built-in kernel {kind!r} has c0 = 1")
            return
        if kind != "tabulated":
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if nodes.ndim != 1 or nodes.shape != values.shape or nodes.size < 2:
            raise ValueError("tabulated kernel needs matching 1-d nodes and values")
        if nodes[0] != 0.0 or np.any(np.diff(nodes) <= 0):
            raise ValueError("tabulated nodes must start at 0 and increase")
        if not (np.all(np.isfinite(values)) and np.all(values >= 0)):
            raise ValueError("tabulated values must be finite and nonnegative")
        # half-line integral of the piecewise linear interpolant
        half = float(np.sum(np.diff(nodes) * (values[1:] + values[:-1]) / 2))
        if not half > 0:
            raise ValueError("tabulated kernel has zero mass")
        object.__setattr__(self, "c0", float(nodes[-1]))
        object.__setattr__(self, "nodes", tuple(nodes))
        object.__setattr__(self, "values", tuple(values / (2 * half)))

    @classmethod
    def tabulated(cls, nodes, values):
        return cls("tabulated", c0=float(nodes[-1]), nodes=tuple(nodes), values=tuple(values))

    def __call__(self, t):
        return kernel_eval(self, t)


EPANECHNIKOV = Kernel("epanechnikov")
UNIFORM = Kernel("uniform")
TRIWEIGHT = Kernel("triweight")

_ANALYTIC = {
    "epanechnikov": KernelMoments(mu2=1 / 5, nu0=3 / 5, dk2=3 / 2, k_at_c0=0.0),
    "uniform": KernelMoments(mu2=1 / 3, nu0=1 / 2, dk2=math.inf, k_at_c0=0.5),
    "triweight": KernelMoments(mu2=1 / 9, nu0=350 / 429, dk2=35 / 11, k_at_c0=0.0),
}


def kernel_eval(kernel, t):
    """Evaluate ``K(t)``; zero outside ``[-c0, c0]``. Accepts scalars or arrays."""
    a = np.abs(np.asarray(t, dtype=float))
    kind = kernel.kind
    if kind == "epanechnikov":
        out = np.where(a <= 1.0, 0.75 * (1.0 - a * a), 0.0)
    elif kind == "uniform":
        out = np.where(a <= 1.0, 0.5, 0.0)
    elif kind == "triweight":
        out = np.where(a <= 1.0, (35.0 / 32.0) * (1.0 - a * a) ** 3, 0.0)
    else:
        nodes = np.asarray(kernel.nodes)
        out = np.where(a <= kernel.c0, np.interp(a, nodes, kernel.values), 0.0)
    if np.ndim(out) == 0:
        return float(out)
    return out


def _quad(f, c0, points):
    with warnings.catch_warnings():
        warnings.simplefilter("error", integrate.IntegrationWarning)
        limit = max(200, 2 * (0 if points is None else len(points)) + 50)
        try:
            val, err = integrate.quad(f, 0.0, c0, points=points, limit=limit,
                                      epsabs=1e-13, epsrel=1e-11)
        except (integrate.IntegrationWarning, ValueError) as exc:
            raise QuadratureFailure(str(exc)) from exc
    if not np.isfinite(val):
        raise QuadratureFailure("non-finite kernel moment")
    return 2.0 * val


def kernel_moments(kernel):
    """Return :class:`KernelMoments` for ``kernel``.

    Built-in kernels use closed forms. Tabulated kernels are integrated with
    adaptive quadrature split at the table nodes.
    """
    if kernel.kind in _ANALYTIC:
        return _ANALYTIC[kernel.kind]
    nodes = np.asarray(kernel.nodes)
    values = np.asarray(kernel.values)
    inner = nodes[1:-1] if nodes.size > 2 else None

    def k(t):
        return float(np.interp(t, nodes, values))

    mu2 = _quad(lambda t: t * t * k(t), kernel.c0, inner)
    nu0 = _quad(lambda t: k(t) ** 2, kernel.c0, inner)
    k_c0 = float(values[-1])
    if k_c0 == 0.0:
        slopes = np.diff(values) / np.diff(nodes)
        dk2 = float(2.0 * np.sum(slopes ** 2 * np.diff(nodes)))
    else:
        dk2 = math.inf
    return KernelMoments(mu2=mu2, nu0=nu0, dk2=dk2, k_at_c0=k_c0)
