import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chargefield.field import (
    SWITCH_RADIUS,
    ChargeSet,
    FieldGradient,
    GaussianCharge,
    eval_density,
    eval_density_total,
    eval_field,
    eval_field_gradient_x,
    eval_param_gradients,
    eval_potential,
    set_threads,
    squared_residual,
)

import oracles

# phi(r) for Q = 2, sigma = 0.15, eps = 1 by radial quadrature (oracles.potential_by_quadrature)
QUADRATURE_PHI = {
    1e-3: 0.8465755415219641,
    0.05: 0.8311622429410215,
    0.15: 0.7243560484700855,
    0.3: 0.5063778372693475,
    0.6: 0.2652414363708536,
    1.5: 0.10610329539459692,
}


def random_set(rng, k, q_range=(0.5, 2.0), sigma_range=(0.05, 0.2)):
    loc = rng.uniform(-0.5, 0.5, size=(k, 3))
    q = np.exp(rng.uniform(math.log(q_range[0]), math.log(q_range[1]), size=k))
    sigma = rng.uniform(*sigma_range, size=k)
    return ChargeSet.from_physical(loc, q, sigma)


class TestSingleCharge:
    def test_matches_frozen_quadrature(self):
        c = GaussianCharge.from_physical([0.2, -0.1, 0.3], 2.0, 0.15)
        for r, expected in QUADRATURE_PHI.items():
            x = c.location + r * np.array([0.6, 0.0, 0.8])
            assert eval_potential(c, x) == pytest.approx(expected, rel=1e-12)

    @pytest.mark.parametrize("r", [0.01, 0.2, 0.45, 1.0, 3.0])
    def test_matches_live_quadrature(self, r):
        c = GaussianCharge.from_physical([0, 0, 0], 0.7, 0.3)
        ref = oracles.potential_by_quadrature(r, 0.7, 0.3)
        assert eval_potential(c, [0, r, 0]) == pytest.approx(ref, rel=1e-11)

    def test_permittivity_scales_inversely(self):
        c = GaussianCharge.from_physical([0, 0, 0], 1.3, 0.1)
        x = np.array([[0.05, 0.02, 0.0], [0.4, 0.1, -0.2]])
        np.testing.assert_allclose(eval_potential(c, x, eps0=2.5), eval_potential(c, x) / 2.5, rtol=1e-15)

    def test_center_uses_series_limit(self):
        q, s = 1.7, 0.04
        c = GaussianCharge.from_physical([0.1, 0.1, 0.1], q, s)
        centre = q * math.sqrt(2 / math.pi) / (4 * math.pi * s)
        assert eval_potential(c, c.location) == pytest.approx(centre, rel=1e-15)

    def test_switch_radius_continuous(self):
        c = GaussianCharge.from_physical([0, 0, 0], 1.0, 0.2)
        r0 = SWITCH_RADIUS * 0.2
        inside = eval_potential(c, [r0 * 0.999, 0, 0])
        outside = eval_potential(c, [r0 * 1.001, 0, 0])
        assert abs(inside - outside) / outside < 1e-13

    def test_density_integrates_to_q(self):
        c = GaussianCharge.from_physical([0, 0, 0], 3.0, 0.2)
        from scipy import integrate

        total = integrate.quad(lambda r: 4 * math.pi * r * r * eval_density(c, [r, 0, 0]), 0, 5)[0]
        assert total == pytest.approx(3.0, rel=1e-10)

    def test_density_matches_formula(self):
        c = GaussianCharge.from_physical([0, 0, 0], 3.0, 0.2)
        for r in (0.0, 0.1, 0.5):
            assert eval_density(c, [0, 0, r]) == pytest.approx(oracles.gaussian_density(r, 3.0, 0.2), rel=1e-14)

    @settings(max_examples=60, deadline=None)
    @given(
        q=st.floats(1e-3, 1e3),
        sigma=st.floats(1e-3, 1.0),
        r1=st.floats(0.0, 5.0),
        r2=st.floats(0.0, 5.0),
    )
    def test_positive_and_radially_decreasing(self, q, sigma, r1, r2):
        c = GaussianCharge.from_physical([0, 0, 0], q, sigma)
        a, b = sorted((r1, r2))
        pa = eval_potential(c, [a, 0, 0])
        pb = eval_potential(c, [0, b, 0])
        assert pa > 0 and pb > 0
        assert pa >= pb * (1 - 1e-14)

    @settings(max_examples=40, deadline=None)
    @given(scale=st.floats(1e-3, 1e3), seed=st.integers(0, 2**16))
    def test_linear_in_q(self, scale, seed):
        rng = np.random.default_rng(seed)
        cs = random_set(rng, 4)
        scaled = ChargeSet(cs.locations, cs.log_q + math.log(scale), cs.log_sigma)
        x = rng.uniform(-1, 1, size=(20, 3))
        np.testing.assert_allclose(eval_field(scaled, x), scale * eval_field(cs, x), rtol=1e-13)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**16))
    def test_translation_invariant(self, seed):
        rng = np.random.default_rng(seed)
        cs = random_set(rng, 3)
        shift = rng.uniform(-2, 2, size=3)
        x = rng.uniform(-1, 1, size=(25, 3))
        np.testing.assert_allclose(eval_field(cs.translated(shift), x + shift), eval_field(cs, x), rtol=1e-12)


class TestSuperposition:
    def test_sum_of_single_potentials(self):
        rng = np.random.default_rng(4)
        cs = random_set(rng, 7)
        x = rng.uniform(-1, 1, size=(300, 3))
        total = sum(eval_potential(c, x) for c in cs.charges)
        np.testing.assert_allclose(eval_field(cs, x), total, rtol=1e-14)

    def test_concat_adds_fields(self):
        rng = np.random.default_rng(5)
        a, b = random_set(rng, 3), random_set(rng, 2)
        x = rng.uniform(-1, 1, size=(50, 3))
        np.testing.assert_allclose(eval_field(a.concat(b), x), eval_field(a, x) + eval_field(b, x), rtol=1e-14)

    def test_total_density_sums(self):
        rng = np.random.default_rng(6)
        cs = random_set(rng, 4)
        x = rng.uniform(-0.5, 0.5, size=(40, 3))
        np.testing.assert_allclose(eval_density_total(cs, x), sum(eval_density(c, x) for c in cs.charges),
                                   rtol=1e-14)

    def test_single_point_returns_scalar(self):
        cs = random_set(np.random.default_rng(0), 2)
        assert np.ndim(eval_field(cs, [0.1, 0.2, 0.3])) == 0
        assert eval_field_gradient_x(cs, [0.1, 0.2, 0.3]).shape == (3,)


class TestPoisson:
    def test_laplacian_matches_density(self):
        rng = np.random.default_rng(11)
        cs = random_set(rng, 5)
        h = 1e-3 * cs.sigma.min()
        pts = cs.locations[rng.integers(0, 5, 200)] + cs.sigma[:, None][rng.integers(0, 5, 200)] * rng.normal(size=(200, 3))
        lap = oracles.laplacian_fd(lambda p: eval_field(cs, p), pts, h)
        rho = eval_density_total(cs, pts)
        np.testing.assert_allclose(lap, -rho / cs.permittivity, rtol=1e-3, atol=1e-3 * rho.max())

    def test_harmonic_far_from_charges(self):
        cs = ChargeSet.from_physical([[0, 0, 0]], 1.0, 0.05)
        pts = np.array([[1.0, 0.2, 0.1], [0.0, -1.5, 0.7]])
        lap = oracles.laplacian_fd(lambda p: eval_field(cs, p), pts, 1e-3)
        assert np.all(np.abs(lap) < 1e-4)


def _fd_param_grad(cs, x, h=1e-6):
    base = np.concatenate([cs.locations.ravel(), cs.log_q, cs.log_sigma])
    k = len(cs)

    def f(v):
        return float(np.sum(eval_field(ChargeSet(v[:3 * k].reshape(k, 3), v[3 * k:4 * k], v[4 * k:]), x)))

    return oracles.central_difference(f, base, h)


class TestGradients:
    @pytest.mark.parametrize("seed", range(5))
    def test_spatial_gradient(self, seed):
        rng = np.random.default_rng(seed)
        cs = random_set(rng, 3)
        x = rng.uniform(-0.7, 0.7, size=(20, 3))
        g = eval_field_gradient_x(cs, x)
        for p, gp in zip(x, g):
            fd = oracles.central_difference(lambda y: float(eval_field(cs, y)), p, 1e-6)
            np.testing.assert_allclose(gp, fd, rtol=1e-5, atol=1e-8 * np.abs(gp).max())

    def test_spatial_gradient_near_center(self):
        # exercises the short-range series branch of the radial factor
        cs = ChargeSet.from_physical([[0, 0, 0]], 1.0, 0.1)
        x = np.array([[0.001, 0.002, -0.001], [0.005, 0, 0], [0.0, 0.0, 0.013]])
        g = eval_field_gradient_x(cs, x)
        for p, gp in zip(x, g):
            fd = oracles.central_difference(lambda y: float(eval_field(cs, y)), p, 1e-7)
            np.testing.assert_allclose(gp, fd, rtol=1e-5, atol=1e-9)

    @pytest.mark.parametrize("seed", range(5))
    def test_parameter_gradient(self, seed):
        rng = np.random.default_rng(100 + seed)
        cs = random_set(rng, 3)
        x = rng.uniform(-0.7, 0.7, size=(10, 3))
        g = eval_param_gradients(cs, x, np.ones(len(x))).flat()
        fd = _fd_param_grad(cs, x)
        np.testing.assert_allclose(g, fd, rtol=1e-5, atol=1e-8 * np.abs(g).max())

    def test_log_q_derivative_is_phi(self):
        cs = ChargeSet.from_physical([[0, 0, 0]], 2.0, 0.1)
        x = np.array([[0.3, 0, 0]])
        g = eval_param_gradients(cs, x, [1.0])
        assert g.d_magnitude_raw[0] == pytest.approx(float(eval_field(cs, x[0])), rel=1e-14)

    def test_location_gradient_is_minus_spatial(self):
        cs = ChargeSet.from_physical([[0.1, 0.2, 0.0]], 1.0, 0.2)
        x = np.array([[0.4, -0.1, 0.3]])
        g = eval_param_gradients(cs, x, [1.0])
        np.testing.assert_allclose(g.d_location[0], -eval_field_gradient_x(cs, x)[0], rtol=1e-14)

    def test_squared_residual_matches_chain_rule(self):
        rng = np.random.default_rng(3)
        cs = random_set(rng, 6)
        x = rng.uniform(-0.6, 0.6, size=(700, 3))
        phi, g = squared_residual(cs, x, 1.0)
        np.testing.assert_array_equal(phi, eval_field(cs, x))
        ref = eval_param_gradients(cs, x, 2.0 * (phi - 1.0))
        np.testing.assert_allclose(g.flat(), ref.flat(), rtol=1e-12, atol=1e-14 * np.abs(ref.flat()).max())

    def test_field_gradient_algebra(self):
        a = FieldGradient(np.ones((2, 3)), np.array([1.0, 2.0]), np.array([3.0, 4.0]))
        b = a + a * 2.0
        np.testing.assert_array_equal(b.d_location, 3 * np.ones((2, 3)))
        np.testing.assert_array_equal(b.flat()[-4:], [3.0, 6.0, 9.0, 12.0])


class TestChargeSet:
    def test_json_round_trip_is_exact(self):
        rng = np.random.default_rng(1)
        cs = random_set(rng, 5)
        cs.iso_value = 0.75
        back = ChargeSet.from_json(cs.to_json())
        np.testing.assert_array_equal(back.locations, cs.locations)
        np.testing.assert_array_equal(back.log_q, cs.log_q)
        np.testing.assert_array_equal(back.log_sigma, cs.log_sigma)
        assert back.iso_value == 0.75
        assert back.to_json() == cs.to_json()

    def test_json_layout(self):
        doc = json.loads(ChargeSet.from_physical([[0, 0, 0]], 1.0, 0.1).to_json())
        assert list(doc) == ["version", "permittivity", "iso_value", "charges"]
        assert list(doc["charges"][0]) == ["s", "log_q", "log_sigma"]

    def test_unknown_version_rejected(self):
        text = ChargeSet.from_physical([[0, 0, 0]], 1.0, 0.1).to_json().replace('"version": 1', '"version": 9')
        with pytest.raises(ValueError, match="version"):
            ChargeSet.from_json(text)

    def test_save_load(self, tmp_path):
        cs = random_set(np.random.default_rng(2), 3)
        cs.save(tmp_path / "c.json")
        assert ChargeSet.load(tmp_path / "c.json").to_json() == cs.to_json()

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(locations=np.zeros((0, 3)), log_q=[], log_sigma=[]),
            dict(locations=[[0, 0, np.nan]], log_q=[0.0], log_sigma=[0.0]),
            dict(locations=[[0, 0, 0]], log_q=[np.inf], log_sigma=[0.0]),
            dict(locations=[[0, 0, 0]], log_q=[0.0], log_sigma=[0.0], permittivity=0.0),
            dict(locations=[[0, 0, 0]], log_q=[0.0], log_sigma=[0.0], iso_value=-1.0),
        ],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            ChargeSet(**kwargs)

    def test_rejects_shape_mismatch(self):
        with pytest.raises(ValueError):
            ChargeSet([[0, 0, 0], [1, 1, 1]], [0.0], [0.0, 0.0])

    def test_physical_round_trip(self):
        cs = ChargeSet.from_physical([[0, 0, 0], [1, 0, 0]], [2.0, 3.0], 0.1)
        np.testing.assert_allclose(cs.q, [2.0, 3.0], rtol=1e-15)
        np.testing.assert_allclose(cs.sigma, [0.1, 0.1], rtol=1e-15)
        assert ChargeSet.from_charges(cs.charges).to_json() == cs.to_json()

    def test_gaussian_charge_validation(self):
        with pytest.raises(ValueError):
            GaussianCharge.from_physical([0, 0, 0], -1.0, 0.1)
        with pytest.raises(ValueError):
            GaussianCharge([0, 0, 0], math.nan, 0.0)


def test_set_threads_bounds():
    import numba

    assert set_threads(1) == 1
    assert set_threads(0) == numba.config.NUMBA_NUM_THREADS
    assert set_threads(10_000) == numba.config.NUMBA_NUM_THREADS
