import numpy as np
import pytest

from dope import darcy
from dope.data import DarcyInput, oracle_trajectory, stream
from dope.verify import poisson_center_series

N = darcy.N_SIDE


def _solve(a):
    return darcy.solve_darcy(DarcyInput(np.asarray(a, float).ravel(), N, N)).reshape(N, N)


class TestSolver:
    def test_poisson_series_oracle(self):
        # [DERIVED] double sine series for -Laplace u = 1 gives 0.07367 at the center
        u = _solve(np.ones((N, N)))
        assert poisson_center_series() == pytest.approx(0.0736713, abs=1e-6)
        assert abs(u[N // 2, N // 2] - poisson_center_series()) < 2e-3

    def test_boundary_is_zero(self):
        # [TRIVIAL]
        u = _solve(darcy.sample_coefficient(stream(0, "d")).a.reshape(N, N))
        for edge in (u[0], u[-1], u[:, 0], u[:, -1]):
            np.testing.assert_array_equal(edge, 0.0)

    def test_scaling(self):
        # [DERIVED] u(c a) = u(a) / c
        a = darcy.sample_coefficient(stream(1, "d")).a.reshape(N, N)
        np.testing.assert_allclose(_solve(3.0 * a), _solve(a) / 3.0, rtol=1e-11, atol=1e-15)

    def test_symmetries(self):
        # [DERIVED] transposed or mirrored coefficients give transposed or mirrored solutions
        u = _solve(np.ones((N, N)))
        np.testing.assert_allclose(u, u.T, atol=1e-15)
        np.testing.assert_allclose(u, u[::-1], atol=1e-15)
        np.testing.assert_allclose(u, u[:, ::-1], atol=1e-15)

    def test_discrete_residual(self):
        # [DERIVED] the 5-point harmonic-mean stencil applied to u returns the unit source
        a = darcy.sample_coefficient(stream(2, "d")).a.reshape(N, N)
        u = _solve(a)
        h2 = (1.0 / (N - 1)) ** 2
        hm = darcy.harmonic_mean
        i = slice(1, N - 1)
        res = (hm(a[i, i], a[2:, i]) * (u[i, i] - u[2:, i]) + hm(a[i, i], a[:-2, i]) * (u[i, i] - u[:-2, i])
               + hm(a[i, i], a[i, 2:]) * (u[i, i] - u[i, 2:]) + hm(a[i, i], a[i, :-2]) * (u[i, i] - u[i, :-2])) / h2
        np.testing.assert_allclose(res, 1.0, rtol=1e-9)

    def test_positive_solution(self):
        # [DERIVED] maximum principle: positive forcing gives a positive interior
        u = _solve(darcy.sample_coefficient(stream(3, "d")).a.reshape(N, N))
        assert np.all(u[1:-1, 1:-1] > 0)

    def test_nonpositive_coefficient(self):
        # [TRIVIAL]
        with pytest.raises(ValueError):
            _solve(np.zeros((N, N)))


class TestCoefficient:
    def test_floor_and_piecewise_constant(self):
        inp = darcy.sample_coefficient(stream(4, "d"))
        a = inp.a.reshape(N, N)
        assert a.min() >= darcy.A_MIN
        cells = darcy._cell_index(N)
        # 5x5 distinct blocks
        assert len(np.unique(np.round(a, 12))) <= 25
        for r in range(darcy.COARSE):
            block = a[np.ix_(cells == r, cells == r)]
            np.testing.assert_array_equal(block, block[0, 0])

    def test_zero_modes_give_unit_field(self):
        # [TRIVIAL]
        np.testing.assert_allclose(darcy.coefficient_from_modes(np.zeros((3, 3))).a, 1.0)

    def test_harmonic_mean(self):
        # [DERIVED] face coefficients are harmonic means of neighbours
        assert darcy.harmonic_mean(1.0, 3.0) == pytest.approx(1.5)


class TestDesign:
    def test_gradient_magnitude_of_linear(self):
        # [DERIVED] a linear field has constant gradient magnitude
        # centered differences are exact for a linear field; the factor 2 makes them two-cell steps
        x = np.arange(N)[:, None] * np.ones((1, N))
        np.testing.assert_allclose(darcy.gradient_magnitude(x), 2.0)

    def test_design_properties(self):
        obs = darcy.simulate_darcy_sample(stream(5, "d"))
        d = obs.design
        assert d.p.sum() == pytest.approx(1.0)
        assert np.all(d.p > 0)
        # floor bounds the design ratio
        q = np.exp(darcy.DESIGN_TEMPERATURE * 1.0) + darcy.DESIGN_FLOOR
        assert d.p.max() / d.p.min() <= q / (1 + darcy.DESIGN_FLOOR) + 1e-9

    def test_observations(self):
        data = darcy.generate_darcy_dataset(3, 7)
        for o in data:
            assert o.K == darcy.K_OBS
            np.testing.assert_allclose(o.y, oracle_trajectory(o)[o.obs_indices], atol=6 * darcy.SIGMA_EPS)

    def test_features(self):
        data = darcy.generate_darcy_dataset(2, 7)
        f = darcy.darcy_features([o.input for o in data])
        assert f.shape == (2, N * N, 3)
        # row-major: x varies slowest
        np.testing.assert_allclose(f[0, N, 1:], [1 / (N - 1), 0.0])
