import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from vcmm import (EPANECHNIKOV, TRIWEIGHT, UNIFORM, Cluster, ClusterDataset, CoefLayout,
                  FitConfig, Kernel, Observation, SimConfig, generate_dataset, kernel_eval,
                  kernel_moments, validate_dataset)
from vcmm.errors import (DegenerateIndex, DimensionMismatch, InvalidInterval, NonFiniteValue,
                         QuadratureFailure)

BUILTINS = [EPANECHNIKOV, UNIFORM, TRIWEIGHT]


def numeric(f, lo=-1, hi=1):
    return integrate.quad(f, lo, hi, epsabs=1e-13, epsrel=1e-12, limit=200)[0]


class TestKernelEval:
    @pytest.mark.parametrize("t, expected", [(0.0, 0.75), (1.0, 0.0), (0.5, 0.5625),
                                             (-0.5, 0.5625), (1.2, 0.0)])
    def test_epanechnikov_values(self, t, expected):
        assert kernel_eval(EPANECHNIKOV, t) == pytest.approx(expected, abs=1e-15)

    def test_scalar_in_scalar_out(self):
        assert isinstance(kernel_eval(UNIFORM, 0.3), float)

    @given(st.floats(-3, 3, allow_nan=False), st.sampled_from(BUILTINS))
    def test_even(self, t, k):
        assert kernel_eval(k, t) == kernel_eval(k, -t)

    @given(st.floats(1.0000001, 50), st.sampled_from(BUILTINS))
    def test_zero_outside_support(self, t, k):
        assert kernel_eval(k, t) == 0.0

    @pytest.mark.parametrize("k", BUILTINS, ids=lambda k: k.kind)
    def test_normalized(self, k):
        assert numeric(lambda t: kernel_eval(k, t)) == pytest.approx(1.0, abs=1e-10)


class TestKernelMoments:
    def test_epanechnikov_constants(self):
        mom = kernel_moments(EPANECHNIKOV)
        assert mom.mu2 == pytest.approx(0.2, abs=1e-12)
        assert mom.nu0 == pytest.approx(0.6, abs=1e-12)
        assert mom.dk2 == pytest.approx(1.5, abs=1e-12)
        assert mom.k_at_c0 == 0

    def test_uniform_constants(self):
        mom = kernel_moments(UNIFORM)
        assert mom.nu0 == pytest.approx(0.5)
        assert mom.k_at_c0 == 0.5
        assert math.isinf(mom.dk2)

    @pytest.mark.parametrize("k", BUILTINS, ids=lambda k: k.kind)
    def test_closed_forms_match_quadrature(self, k):
        mom = kernel_moments(k)
        assert mom.mu2 == pytest.approx(numeric(lambda t: t * t * kernel_eval(k, t)), rel=1e-8)
        assert mom.nu0 == pytest.approx(numeric(lambda t: kernel_eval(k, t) ** 2), rel=1e-8)
        assert numeric(lambda t: t * kernel_eval(k, t)) == pytest.approx(0.0, abs=1e-12)
        if mom.k_at_c0 == 0:
            eps = 1e-6
            dk = lambda t: (kernel_eval(k, t + eps) - kernel_eval(k, t - eps)) / (2 * eps)  # noqa: E731
            assert mom.dk2 == pytest.approx(numeric(lambda t: dk(t) ** 2), rel=1e-6)

    def test_tabulated_epanechnikov_close_to_closed_form(self):
        nodes = np.linspace(0, 1, 2001)
        k = Kernel.tabulated(nodes, 0.75 * (1 - nodes ** 2))
        mom = kernel_moments(k)
        assert mom.mu2 == pytest.approx(0.2, rel=1e-5)
        assert mom.nu0 == pytest.approx(0.6, rel=1e-5)
        assert mom.dk2 == pytest.approx(1.5, rel=1e-5)
        # trapezoid on the table nodes is exact for the piecewise linear kernel
        vals = kernel_eval(k, nodes)
        assert 2 * np.sum(np.diff(nodes) * (vals[1:] + vals[:-1]) / 2) == pytest.approx(1, abs=1e-12)

    def test_tabulated_is_normalized_and_symmetric(self):
        k = Kernel.tabulated([0, 0.5, 2.0], [3.0, 2.0, 0.0])
        assert k.c0 == 2.0
        assert numeric(lambda t: kernel_eval(k, t), -2, 2) == pytest.approx(1.0, abs=1e-10)
        assert kernel_eval(k, 0.7) == kernel_eval(k, -0.7)

    def test_tabulated_uniform_branch(self):
        k = Kernel.tabulated([0, 1], [1, 1])
        mom = kernel_moments(k)
        assert mom.k_at_c0 == pytest.approx(0.5)
        assert mom.nu0 == pytest.approx(0.5, rel=1e-10)

    def test_quadrature_warning_becomes_error(self, monkeypatch):
        def bad_quad(*a, **k):
            warnings.warn("roundoff", integrate.IntegrationWarning)
            return 0.0, 0.0

        monkeypatch.setattr(integrate, "quad", bad_quad)
        with pytest.raises(QuadratureFailure):
            kernel_moments(Kernel.tabulated([0, 1], [1, 0]))

    def test_bad_kernels_rejected(self):
        with pytest.raises(ValueError):
            Kernel("gaussian")
        with pytest.raises(ValueError):
            Kernel.tabulated([0, 1], [0, 0])
        with pytest.raises(ValueError):
            Kernel.tabulated([0.1, 1], [1, 0])


class TestLayout:
    def test_dimension(self):
        lay = CoefLayout(3, 2)
        assert lay.s == 11
        assert len(lay.names) == 11
        assert CoefLayout(3, 2, intercept=True).s == 12

    def test_names_and_index(self):
        lay = CoefLayout(3, 2, intercept=True)
        assert list(lay.names[:3]) == ["alpha0_1", "alpha0_2", "alpha0_3"]
        assert lay.index("beta_0") == 9
        assert lay.index((1, 2)) == 4
        assert lay.name(10) == "beta_1"

    def test_gamma_row(self):
        lay = CoefLayout(3, 2)
        row = lay.gamma(np.array([[1.0, 0, 0]]), np.array([[0.0, 0]]))
        np.testing.assert_array_equal(row, [[1, 0, 0, 0, 0, 0, 0, 0, 0, 0, 0]])
        row = lay.gamma(np.array([[1.0, 2, 3]]), np.array([[10.0, -1]]))
        np.testing.assert_array_equal(row[0], [1, 2, 3, 10, 20, 30, -1, -2, -3, 10, -1])


def _clusters(x_lengths=(3, 3, 3)):
    obs = tuple(Observation(0.1 * i, 0.1 * i, tuple(range(1, n + 1)))
                for i, n in enumerate(x_lengths))
    return [Cluster("a", (0.0, 1.0), obs)]


class TestValidateDataset:
    def test_ragged_x(self):
        with pytest.raises(DimensionMismatch):
            validate_dataset(_clusters((3, 3, 2)))

    def test_valid_from_clusters(self):
        data = validate_dataset(_clusters())
        assert (data.n, data.m, data.p, data.q, data.s) == (3, 1, 3, 2, 11)
        assert data.small_clusters == (0,)

    def test_simulated_has_no_flags(self, sim_data):
        data = validate_dataset(sim_data.data)
        assert data.small_clusters == ()
        assert data.m == 100 and data.p == 3 and data.q == 2
        assert data.n == data.sizes.sum()

    def test_small_cluster_is_flagged(self):
        rng = np.random.default_rng(0)
        data = ClusterDataset(rng.normal(size=8), rng.uniform(size=8), rng.normal(size=(8, 3)),
                              rng.normal(size=(2, 1)), [0, 2, 8], ("small", "big"))
        assert data.small_clusters == (0,)

    def test_idempotent(self, sim_data):
        once = validate_dataset(sim_data.data)
        assert validate_dataset(once) == once

    def test_non_finite(self):
        with pytest.raises(NonFiniteValue):
            ClusterDataset([1.0, np.nan], [0.0, 1.0], [[1.0], [2.0]], [[0.0]], [0, 2], ("a",))

    def test_degenerate_index(self):
        with pytest.raises(DegenerateIndex):
            ClusterDataset([1.0, 2.0], [0.5, 0.5], [[1.0], [2.0]], [[0.0]], [0, 2], ("a",))

    def test_bad_offsets(self):
        with pytest.raises(DimensionMismatch):
            ClusterDataset([1.0, 2.0], [0.1, 0.5], [[1.0], [2.0]], [[0.0]], [0, 1], ("a",))

    def test_from_arrays_groups_rows(self):
        data = ClusterDataset.from_arrays(["b", "a", "b"], [1, 2, 3], [0.1, 0.2, 0.3],
                                          [[1], [2], [3]], [[5], [6], [5]])
        assert data.ids == ("b", "a")
        np.testing.assert_array_equal(data.y, [1, 3, 2])
        np.testing.assert_array_equal(data.z, [[5], [6]])

    def test_immutable(self, sim_data):
        with pytest.raises(ValueError):
            sim_data.data.y[0] = 1.0


class TestFitConfig:
    def test_defaults(self):
        cfg = FitConfig(h=0.15)
        assert cfg.kernel == EPANECHNIKOV
        assert cfg.grid_count == 101
        assert cfg.min_local_obs_factor == 2.0
        assert cfg.pilot_bandwidth(1000) == pytest.approx(0.15 * 1000 ** (1 / 5 - 1 / 7))

    @pytest.mark.parametrize("kw", [dict(h=0), dict(h=-1), dict(h=0.1, h_pilot=0),
                                    dict(h=0.1, grid_count=1),
                                    dict(h=0.1, min_local_obs_factor=0.5),
                                    dict(h=0.1, ridge_eps=-1)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FitConfig(**kw)

    def test_trimmed_grid(self, sim_data):
        data = sim_data.data
        grid = FitConfig(h=0.15).grid(data)
        assert grid.size == 101
        assert grid[0] == pytest.approx(data.u_min + 0.15)
        assert grid[-1] == pytest.approx(data.u_max - 0.15)
        full = FitConfig(h=0.15, trim=False).grid(data)
        assert full[0] == data.u_min and full[-1] == data.u_max

    def test_empty_trimmed_interval(self, sim_data):
        with pytest.raises(InvalidInterval):
            FitConfig(h=0.6).grid(sim_data.data)

    def test_resolved_pins_interval(self, sim_data):
        data = sim_data.data
        cfg = FitConfig(h=0.15).resolved(data)
        sub = data.drop_cluster(0)
        assert cfg.interval(sub) == FitConfig(h=0.15).interval(data)
        assert cfg.pilot_bandwidth(sub.n) == FitConfig(h=0.15).pilot_bandwidth(data.n)


def test_simulated_dimensions_match_layout():
    sd = generate_dataset(SimConfig(m=5), seed=1)
    assert sd.data.s == 11
    assert sd.truth.layout.s == 12
