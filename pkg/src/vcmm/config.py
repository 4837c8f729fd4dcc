"""Fit configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InvalidInterval
from .kernels import EPANECHNIKOV, Kernel


@dataclass(frozen=True)
class FitConfig:
    """Settings shared by the local fits, bias/variance plug-ins and bands.

    Parameters
    ----------
    h : float
        Bandwidth of the local linear fit, in units of ``u``.
    kernel : Kernel
    grid_count : int
        Number of equally spaced evaluation points.
    grid_interval : (float, float), optional
        Explicit evaluation interval. When omitted it is derived from the data:
        ``[u_min + c0 h, u_max - c0 h]`` with ``trim`` on, ``[u_min, u_max]``
        otherwise.
    h_pilot : float, optional
        Bandwidth of the local cubic pilot fit. Defaults to
        ``h * n ** (1/5 - 1/7)``.
    min_local_obs_factor : float
        A local fit needs at least this many times as many positively
        weighted rows as it has columns.
    ridge_eps : float
        Relative ridge added to ill-conditioned local systems; 0 raises
        :class:`~vcmm.errors.SingularSystem` instead.
    trim : bool
        Trim the evaluation interval and the averaging set of constant
        coefficients by ``c0 h`` at both ends.
    intercept : bool
        Add an intercept function ``beta_0(u)``.
    """

    h: float
    kernel: Kernel = EPANECHNIKOV
    grid_count: int = 101
    grid_interval: tuple | None = None
    h_pilot: float | None = None
    min_local_obs_factor: float = 2.0
    ridge_eps: float = 0.0
    trim: bool = True
    intercept: bool = False
    cond_limit: float = field(default=1e12, repr=False)

    def __post_init__(self):
        if not (np.isfinite(self.h) and self.h > 0):
            raise ValueError("bandwidth h must be positive")
        if self.h_pilot is not None and not (np.isfinite(self.h_pilot) and self.h_pilot > 0):
            raise ValueError("pilot bandwidth must be positive")
        if int(self.grid_count) != self.grid_count or self.grid_count < 2:
            raise ValueError("grid_count must be an integer >= 2")
        if self.min_local_obs_factor < 1:
            raise ValueError("min_local_obs_factor must be >= 1")
        if self.ridge_eps < 0:
            raise ValueError("ridge_eps must be >= 0")
        if self.grid_interval is not None:
            a, b = map(float, self.grid_interval)
            if not b > a:
                raise ValueError("grid_interval must satisfy a < b")
            object.__setattr__(self, "grid_interval", (a, b))
        object.__setattr__(self, "grid_count", int(self.grid_count))

    def pilot_bandwidth(self, n):
        if self.h_pilot is not None:
            return float(self.h_pilot)
        return float(self.h * n ** (1 / 5 - 1 / 7))

    def interval(self, data):
        """Evaluation interval ``[a, b]`` for ``data``."""
        if self.grid_interval is not None:
            return self.grid_interval
        lo, hi = data.u_min, data.u_max
        if self.trim:
            lo, hi = lo + self.kernel.c0 * self.h, hi - self.kernel.c0 * self.h
        if not hi > lo:
            raise InvalidInterval(
                f"trimmed interval [{lo:g}, {hi:g}] is empty; reduce h or disable trim")
        return (lo, hi)

    def grid(self, data):
        a, b = self.interval(data)
        return np.linspace(a, b, self.grid_count)

    def resolved(self, data):
        """Copy with the interval and pilot bandwidth pinned for ``data``.

        Used when refitting on perturbed data (jackknife) so that every replicate
        shares one grid.
        """
        return replace(self, grid_interval=self.interval(data),
                       h_pilot=self.pilot_bandwidth(data.n))

    def layout(self, data):
        return data.layout(self.intercept)
