import json
import math

import numpy as np
import pytest

from chargefield import optim
from chargefield.field import ChargeSet, FieldGradient, eval_field
from chargefield.mesh import SpatialIndex, icosphere
from chargefield.optim import (
    Adam,
    DivergenceError,
    FitConfig,
    cosine_lr,
    fit,
    init_charges,
    loss_bc,
    loss_cr,
    total_loss,
)

import oracles


def flat_params(cs):
    return np.concatenate([cs.locations.ravel(), cs.log_q, cs.log_sigma])


def from_flat(v, like):
    k = len(like)
    return ChargeSet(v[:3 * k].reshape(k, 3), v[3 * k:4 * k], v[4 * k:], like.permittivity, like.iso_value)


class TestConfig:
    def test_defaults(self):
        c = FitConfig()
        assert (c.steps, c.lr_start, c.lr_end, c.lambda_cr, c.tau) == (60_000, 1e-3, 1e-7, 2e-2, 1.0)
        assert (c.surface_pool, c.batch, c.interior_pool, c.init_q) == (250_000, 16_000, 10_000, 1e-7)

    @pytest.mark.parametrize("bad", [dict(steps=0), dict(batch=0), dict(batch=300_000), dict(lambda_cr=-1.0),
                                     dict(lr_start=1e-8), dict(lr_end=0.0), dict(tau=0.0), dict(num_charges=0)])
    def test_invalid(self, bad):
        with pytest.raises(ValueError):
            FitConfig(**bad)

    def test_dict_round_trip(self):
        c = FitConfig(num_charges=7, seed=3)
        assert FitConfig.from_dict(json.loads(json.dumps(c.to_dict()))) == c

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="unknown"):
            FitConfig.from_dict({"stepz": 3})


class TestInit:
    def test_ranges(self):
        cs = init_charges(FitConfig(num_charges=5000, seed=1))
        assert np.all(np.abs(cs.locations) <= 0.5)
        assert np.all(cs.sigma >= 1e-3 * (1 - 1e-15))
        np.testing.assert_array_equal(cs.log_q, math.log(1e-7))
        np.testing.assert_allclose(cs.q, 1e-7, rtol=1e-15)
        # half-normal with std 0.05 has mean 0.05 * sqrt(2 / pi)
        assert cs.sigma.mean() == pytest.approx(0.05 * math.sqrt(2 / math.pi), rel=0.05)

    def test_seeded(self):
        a = init_charges(FitConfig(num_charges=20, seed=9))
        b = init_charges(FitConfig(num_charges=20, seed=9))
        assert a.to_json() == b.to_json()
        assert a.to_json() != init_charges(FitConfig(num_charges=20, seed=10)).to_json()


class TestSchedule:
    def test_endpoints_and_midpoint(self):
        c = FitConfig(steps=1001)
        assert cosine_lr(0, c) == pytest.approx(1e-3, rel=1e-15)
        assert cosine_lr(1000, c) == pytest.approx(1e-7, rel=1e-12)
        assert cosine_lr(500, c) == pytest.approx((1e-3 + 1e-7) / 2, rel=1e-12)

    def test_monotone(self):
        c = FitConfig(steps=300)
        lrs = [cosine_lr(t, c) for t in range(300)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_out_of_range(self):
        with pytest.raises(ValueError):
            cosine_lr(10, FitConfig(steps=10))

    def test_single_step(self):
        assert cosine_lr(0, FitConfig(steps=1, lr_start=0.5, lr_end=0.1)) == 0.5


class TestAdam:
    def test_scripted_three_steps(self):
        # reference update written out by hand for x0 = 1, grads 0.5, -1.0, 2.0, lr = 0.1
        b1, b2, eps, lr = 0.9, 0.999, 1e-8, 0.1
        x, m, v = 1.0, 0.0, 0.0
        expected = []
        for t, g in enumerate([0.5, -1.0, 2.0], start=1):
            m = b1 * m + (1 - b1) * g
            v = b2 * v + (1 - b2) * g * g
            x = x - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
            expected.append(x)
        opt = Adam(1)
        p = np.array([1.0])
        got = []
        for g in (0.5, -1.0, 2.0):
            p = opt.step(p, np.array([g]), lr)
            got.append(p[0])
        assert got == expected

    def test_first_step_is_lr_sized(self):
        # bias correction makes the first step exactly lr * sign(g) (up to eps)
        g = np.array([1e-9, -4.0, 1e3])
        p = Adam(3).step(np.zeros(3), g, 0.01)
        np.testing.assert_allclose(p, -0.01 * g / (np.abs(g) + 1e-8), rtol=1e-14)
        assert np.allclose(np.abs(p[1:]), 0.01, rtol=1e-8)


class TestLosses:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.cs = ChargeSet.from_physical(rng.uniform(-0.3, 0.3, (4, 3)), rng.uniform(0.5, 2, 4),
                                          rng.uniform(0.05, 0.2, 4))
        self.batch = rng.uniform(-0.6, 0.6, (50, 3))

    def test_bc_hand_evaluated(self):
        cs = ChargeSet.from_physical([[0, 0, 0]], 2.0, 0.1)
        pts = np.array([[0.2, 0, 0], [0, 0.5, 0], [0, 0, 1.0]])
        phi = [2.0 * math.erf(r / (math.sqrt(2) * 0.1)) / (4 * math.pi * r) for r in (0.2, 0.5, 1.0)]
        expected = sum((p - 1.0) ** 2 for p in phi) / 3
        assert loss_bc(cs, pts)[0] == pytest.approx(expected, rel=1e-13)

    def test_bc_zero_at_iso_surface(self):
        r = oracles.iso_radius(3.0, 0.1, 1.0)
        cs = ChargeSet.from_physical([[0, 0, 0]], 3.0, 0.1)
        d = np.random.default_rng(1).normal(size=(20, 3))
        pts = r * d / np.linalg.norm(d, axis=1, keepdims=True)
        value, grad = loss_bc(cs, pts)
        assert value < 1e-26
        assert np.abs(grad.flat()).max() < 1e-12

    def test_bc_gradient_fd(self):
        _, g = loss_bc(self.cs, self.batch)
        fd = oracles.central_difference(lambda v: loss_bc(from_flat(v, self.cs), self.batch)[0],
                                        flat_params(self.cs), 1e-6)
        np.testing.assert_allclose(g.flat(), fd, rtol=1e-4, atol=1e-7 * np.abs(fd).max())

    def test_cr_single_charge(self):
        cs = ChargeSet.from_physical([[0.3, 0.4, 0.0]], 1.0, 0.1)
        value, grad = loss_cr(cs, SpatialIndex([[0, 0, 0], [5, 5, 5]]))
        assert value == pytest.approx(0.25, rel=1e-15)
        np.testing.assert_allclose(grad.d_location[0], [0.6, 0.8, 0.0])
        assert np.all(grad.d_magnitude_raw == 0) and np.all(grad.d_spread_raw == 0)

    def test_cr_zero_on_interior_points(self):
        index = SpatialIndex(self.cs.locations.copy())
        value, grad = loss_cr(self.cs, index)
        assert value == 0.0
        assert np.all(grad.flat() == 0)

    def test_cr_gradient_fd(self):
        rng = np.random.default_rng(5)
        index = SpatialIndex(rng.uniform(-0.5, 0.5, (200, 3)))
        _, g = loss_cr(self.cs, index)
        fd = oracles.central_difference(lambda v: loss_cr(from_flat(v, self.cs), index)[0],
                                        flat_params(self.cs), 1e-7)
        np.testing.assert_allclose(g.flat(), fd, rtol=1e-4, atol=1e-10)

    def test_total_is_weighted_sum(self):
        index = SpatialIndex(np.random.default_rng(2).uniform(-0.5, 0.5, (100, 3)))
        bc, gbc = loss_bc(self.cs, self.batch)
        cr, gcr = loss_cr(self.cs, index)
        value, grads, parts = total_loss(self.cs, self.batch, index, 2e-2)
        assert value == bc + 0.02 * cr
        assert parts == (bc, cr)
        np.testing.assert_allclose(grads.flat(), gbc.flat() + 0.02 * gcr.flat(), rtol=1e-15)
        v0, g0, _ = total_loss(self.cs, self.batch, index, 0.0)
        assert v0 == bc
        np.testing.assert_array_equal(g0.flat(), gbc.flat())

    def test_empty_batch(self):
        with pytest.raises(ValueError):
            loss_bc(self.cs, np.zeros((0, 3)))


SMALL = dict(num_charges=20, steps=60, lr_start=2e-2, batch=500, surface_pool=2000, interior_pool=500,
             log_every=10)


@pytest.fixture(scope="module")
def sphere():
    return icosphere(3, 0.5)


class TestFit:
    def test_loss_decreases_and_history(self, sphere):
        seen = []
        cs, rep = fit(sphere, FitConfig(**SMALL, seed=0), seen.append)
        assert [h["step"] for h in rep.history] == list(range(0, 60, 10)) + [59]
        assert seen == rep.history
        assert np.median(rep.trace_total[-3:]) < np.median(rep.trace_total[:3])
        assert all(math.isfinite(h["loss"]) for h in rep.history)
        assert np.all(np.isfinite(cs.q)) and np.all(cs.q > 0) and np.all(cs.sigma > 0)
        doc = json.loads(rep.to_json())
        assert doc["seed"] == 0 and doc["config"]["num_charges"] == 20

    def test_deterministic(self, sphere):
        a, _ = fit(sphere, FitConfig(**SMALL, seed=4))
        b, _ = fit(sphere, FitConfig(**SMALL, seed=4))
        assert a.to_json() == b.to_json()

    def test_initial_and_checkpoints(self, sphere, tmp_path):
        start = ChargeSet.from_physical(np.zeros((3, 3)), 0.1, 0.1, iso_value=5.0)
        cfg = FitConfig(**{**SMALL, "steps": 25})
        cs, _ = fit(sphere, cfg, initial=start, checkpoint_dir=tmp_path, checkpoint_every=10)
        assert len(cs) == 3 and cs.iso_value == 1.0
        assert sorted(p.name for p in tmp_path.iterdir()) == ["charges_0000010.json", "charges_0000020.json"]
        assert start.iso_value == 5.0

    def test_divergence_snapshot(self, sphere, monkeypatch):
        def broken(cs, x, tau):
            return np.full(len(x), np.nan), FieldGradient.zeros(len(cs))

        monkeypatch.setattr(optim, "squared_residual", broken)
        with pytest.raises(DivergenceError) as exc:
            fit(sphere, FitConfig(**SMALL))
        assert exc.value.snapshot["step"] == 0
        assert "stats" in exc.value.snapshot

    def test_epoch_covers_pool(self, sphere, monkeypatch):
        # every pool point is used exactly once per epoch
        seen = []
        real = optim.loss_bc

        def spy(cs, pts):
            seen.append(np.asarray(pts).copy())
            return real(cs, pts)

        monkeypatch.setattr(optim, "loss_bc", spy)
        fit(sphere, FitConfig(**{**SMALL, "steps": 4}))
        used = np.concatenate(seen)
        assert len(np.unique(used, axis=0)) == 2000


def test_fit_reduces_field_error_on_sphere():
    sphere = icosphere(3, 0.5)
    cs, rep = fit(sphere, FitConfig(num_charges=40, steps=400, lr_start=5e-2, batch=1000, surface_pool=5000,
                                    interior_pool=1000, seed=1))
    assert rep.trace_bc[-1] < 1e-3 * rep.trace_bc[0]
    assert np.all(eval_field(cs, np.zeros(3)) > 0)
