import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from propmap.config import from_dict
from propmap.errors import SingularFitError, UnderdeterminedError, ValidationError
from propmap.fieldsim import SensorSamples, make_grid
from propmap.localinterp import (
    Kernel,
    ObservationSet,
    batch_fit,
    build_observation_index,
    fit_local,
    interpolate_entries,
    kernel_eval,
    uniform_sample_size,
)
from propmap.pipeline import make_scene

KINDS = ["epanechnikov", "gaussian"]


def midpoint_grid(n=1000):
    h = 2.0 / n
    t = -1.0 + h * (np.arange(n) + 0.5)
    X, Y = np.meshgrid(t, t)
    return X, Y, h * h


def samples_from(z, f):
    z = np.asarray(z, dtype=float)
    return SensorSamples(z, f(z[:, 0], z[:, 1]))


class TestKernel:
    @pytest.mark.parametrize("kind", KINDS)
    def test_zero_outside_support(self, kind):
        assert kernel_eval(kind, [1.5, 0.0]) == 0.0
        assert kernel_eval(kind, [0.6, 0.8]) == 0.0  # boundary is excluded
        assert kernel_eval(kind, [0.0, 0.999]) > 0.0

    def test_epanechnikov_shape_ratio(self):
        k = Kernel("epanechnikov")
        assert k([0.0, 0.0]) / k([0.5, 0.0]) == pytest.approx(1 / 0.75, rel=1e-14)
        assert k([0.0, 0.0]) == pytest.approx(k.norm)

    def test_gaussian_shape_ratio(self):
        k = Kernel("gaussian")
        assert k([0.0, 0.0]) / k([0.5, 0.0]) == pytest.approx(math.exp(0.125), rel=1e-14)

    @pytest.mark.parametrize("kind", KINDS)
    def test_integrates_to_one(self, kind):
        # independent oracle: 10^6-point midpoint rule on [-1, 1]^2
        X, Y, dA = midpoint_grid()
        u = np.stack([X, Y], axis=-1)
        total = Kernel(kind)(u).sum() * dA
        assert total == pytest.approx(1.0, abs=1e-4)

    def test_epanechnikov_constant_closed_form(self):
        # integral of (1 - r^2) over the unit disk is pi / 2
        assert Kernel("epanechnikov").norm == pytest.approx(2 / math.pi, rel=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    @pytest.mark.parametrize("p0", [1, 2])
    @pytest.mark.parametrize("p1,p2", [(1, 1), (1, 3), (3, 1), (3, 3), (1, 0), (0, 3)])
    def test_odd_moments_vanish(self, kind, p0, p1, p2):
        X, Y, dA = midpoint_grid(400)
        K = Kernel(kind)(np.stack([X, Y], axis=-1))
        m = np.sum(K ** p0 * X ** p1 * Y ** p2) * dA
        assert abs(m) < 1e-10

    @given(st.floats(-2, 2), st.floats(-2, 2))
    def test_symmetric_nonnegative(self, x, y):
        for kind in KINDS:
            k = Kernel(kind)
            assert k([x, y]) >= 0.0
            assert k([x, y]) == k([-x, -y])

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            Kernel("triangle")


class TestObservationIndex:
    def test_sensor_aware_empty(self):
        g = make_grid(2, 2.0)
        assert build_observation_index(g, np.array([[1.0, 1.0]]), "sensor-aware", b=0.1, M0=1) == []

    def test_sensor_aware_all(self):
        g = make_grid(2, 2.0)
        got = build_observation_index(g, np.array([[1.0, 1.0]]), "sensor-aware", b=0.8, M0=1)
        assert got == [(0, 0), (0, 1), (1, 0), (1, 1)]

    def test_sensor_aware_matches_brute_force(self):
        rng = np.random.default_rng(3)
        g = make_grid(8, 10.0)
        z = rng.uniform(0, 10, size=(40, 2))
        got = build_observation_index(g, z, "sensor-aware", b=1.7, M0=3)
        want = []
        for i in range(8):
            for j in range(8):
                c = g.center(i, j)
                n = sum(math.dist(c, p) < 1.7 for p in z)
                if n >= 3:
                    want.append((i, j))
        assert got == want

    def test_uniform_count(self):
        g = make_grid(30, 2000.0)
        got = build_observation_index(g, None, "uniform", C=1.6, seed=1)
        assert len(got) == math.ceil(1.6 * 30 * math.log(30) ** 2) == 556
        assert len(set(got)) == len(got)
        assert all(0 <= i < 30 and 0 <= j < 30 for i, j in got)

    def test_uniform_capped(self):
        assert uniform_sample_size(5, 10.0) == 25
        g = make_grid(5, 1.0)
        assert len(build_observation_index(g, None, "uniform", C=10.0, seed=0)) == 25

    def test_uniform_seeded(self):
        g = make_grid(20, 1.0)
        a = build_observation_index(g, None, "uniform", seed=5)
        b = build_observation_index(g, None, "uniform", seed=5)
        c = build_observation_index(g, None, "uniform", seed=6)
        assert a == b and a != c

    @pytest.mark.parametrize("kw", [dict(b=0.0), dict(b=-1.0), dict(b=None), dict(b=1.0, M0=0)])
    def test_sensor_aware_preconditions(self, kw):
        with pytest.raises(ValidationError):
            build_observation_index(make_grid(3, 3.0), np.zeros((1, 2)), "sensor-aware", **kw)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.05, 1.0), st.floats(0.0, 1.0), st.integers(1, 4))
    def test_monotone_in_b(self, seed, b1, frac, M0):
        rng = np.random.default_rng(seed)
        g = make_grid(6, 2.0)
        z = rng.uniform(0, 2, size=(15, 2))
        b2 = b1 + frac
        small = set(build_observation_index(g, z, "sensor-aware", b=b1, M0=M0))
        big = set(build_observation_index(g, z, "sensor-aware", b=b2, M0=M0))
        assert small <= big


class TestFitLocal:
    def test_constant_equidistant(self):
        t = np.linspace(0, 2 * np.pi, 5, endpoint=False)
        z = np.c_[np.cos(t), np.sin(t)] * 0.5
        s = SensorSamples(z, np.full(5, 7.0))
        assert fit_local(0, [0, 0], s, 1.0).alpha == pytest.approx(7.0, abs=1e-14)

    def test_order0_hand_weights(self):
        z = np.array([[0.0, 0.0], [0.5, 0.0], [0.0, 0.8]])
        g = np.array([1.0, 2.0, 4.0])
        # Epanechnikov weights at b = 1: 1, 0.75, 0.36 (normalization cancels)
        want = (1 * 1.0 + 0.75 * 2.0 + 0.36 * 4.0) / (1 + 0.75 + 0.36)
        fit = fit_local(0, [0, 0], SensorSamples(z, g), 1.0)
        assert fit.alpha == pytest.approx(want, rel=1e-13)

    def test_plane_reproduction(self):
        rng = np.random.default_rng(0)
        s = samples_from(rng.uniform(0, 4, size=(30, 2)), lambda x, y: 2 + 3 * x - y)
        fit = fit_local(1, [2.1, 1.7], s, 1.5)
        assert abs(fit.alpha - (2 + 3 * 2.1 - 1.7)) < 1e-9
        np.testing.assert_allclose(fit.beta, [3.0, -1.0], atol=1e-9)
        assert np.all(np.linalg.norm(s.z[fit.indices] - [2.1, 1.7], axis=1) < 1.5)

    def test_quadratic_hessian(self):
        rng = np.random.default_rng(1)
        f = lambda x, y: 1 - x + 2 * y + 0.5 * x * x - 3 * x * y + 4 * y * y
        s = samples_from(rng.uniform(-1, 1, size=(60, 2)), f)
        c = np.array([0.1, -0.2])
        fit = fit_local(2, c, s, 0.9)
        assert abs(fit.alpha - f(*c)) < 1e-9
        np.testing.assert_allclose(fit.beta, [-1 + c[0] - 3 * c[1], 2 - 3 * c[0] + 8 * c[1]], atol=1e-9)
        np.testing.assert_allclose(fit.hessian, [[1.0, -3.0], [-3.0, 8.0]], atol=1e-8)
        np.testing.assert_array_equal(fit.hessian, fit.hessian.T)

    def test_physical_units(self):
        # large coordinates and windows must not hurt reproduction
        rng = np.random.default_rng(2)
        s = samples_from(rng.uniform(0, 2000, size=(200, 2)), lambda x, y: 5 + 1e-3 * x - 2e-3 * y)
        fit = fit_local(1, [1000, 1000], s, 400.0)
        assert abs(fit.alpha - 4.0) < 1e-9
        np.testing.assert_allclose(fit.beta, [1e-3, -2e-3], atol=1e-12)

    def test_underdetermined(self):
        s = SensorSamples(np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 5.0]]), np.ones(3))
        with pytest.raises(UnderdeterminedError):
            fit_local(1, [0, 0], s, 1.0)
        with pytest.raises(UnderdeterminedError):
            fit_local(0, [3, 3], s, 1.0)

    def test_collinear_is_singular(self):
        z = np.c_[np.linspace(-0.5, 0.5, 6), np.zeros(6)]
        with pytest.raises(SingularFitError):
            fit_local(1, [0, 0], SensorSamples(z, np.ones(6)), 1.0)

    def test_bad_arguments(self):
        s = SensorSamples(np.zeros((3, 2)), np.ones(3))
        with pytest.raises(ValidationError):
            fit_local(3, [0, 0], s, 1.0)
        with pytest.raises(ValidationError):
            fit_local(0, [0, 0], s, 0.0)


def random_setup(seed, M=25):
    rng = np.random.default_rng(seed)
    z = rng.uniform(0, 1, size=(M, 2))
    g = rng.normal(size=M)
    c = rng.uniform(0.3, 0.7, size=2)
    return z, g, c


class TestFitProperties:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(0.3, 0.8))
    def test_locality(self, seed, b):
        z, g, c = random_setup(seed)
        outside = np.linalg.norm(z - c, axis=1) >= b
        g2 = g.copy()
        g2[outside] += 100.0
        try:
            a = fit_local(1, c, SensorSamples(z, g), b)
        except (UnderdeterminedError, SingularFitError):
            return
        bb = fit_local(1, c, SensorSamples(z, g2), b)
        assert a.alpha == bb.alpha

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-50, 50), st.sampled_from([0, 1, 2]))
    def test_scale(self, seed, lam, order):
        z, g, c = random_setup(seed, 40)
        try:
            a = fit_local(order, c, SensorSamples(z, g), 0.7)
        except (UnderdeterminedError, SingularFitError):
            return
        bb = fit_local(order, c, SensorSamples(z, lam * g), 0.7)
        assert bb.alpha == pytest.approx(lam * a.alpha, rel=1e-9, abs=1e-9)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.floats(-100, 100), st.floats(-100, 100))
    def test_translation(self, seed, dx, dy):
        z, g, c = random_setup(seed, 40)
        shift = np.array([dx, dy])
        try:
            a = fit_local(1, c, SensorSamples(z, g), 0.7)
        except (UnderdeterminedError, SingularFitError):
            return
        bb = fit_local(1, c + shift, SensorSamples(z + shift, g), 0.7)
        assert bb.alpha == pytest.approx(a.alpha, abs=1e-9)
        np.testing.assert_allclose(bb.beta, a.beta, atol=1e-8)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2 ** 32 - 1), st.sampled_from([0, 1, 2]))
    def test_polynomial_reproduction(self, seed, order):
        rng = np.random.default_rng(seed)
        coef = rng.normal(size=6)
        basis = lambda x, y: np.stack([np.ones_like(x), x, y, x * x, x * y, y * y])
        p = {0: 1, 1: 3, 2: 6}[order]
        f = lambda x, y: coef[:p] @ basis(x, y)[:p]
        z = rng.uniform(0, 1, size=(50, 2))
        c = rng.uniform(0.3, 0.7, size=2)
        try:
            fit = fit_local(order, c, samples_from(z, f), 0.6)
        except (UnderdeterminedError, SingularFitError):
            return
        assert abs(fit.alpha - f(np.array([c[0]]), np.array([c[1]]))[0]) < 1e-9

    def test_batch_matches_single(self):
        rng = np.random.default_rng(4)
        z = rng.uniform(0, 1, size=(60, 2))
        g = rng.normal(size=60)
        centers = rng.uniform(0, 1, size=(25, 2))
        b = rng.uniform(0.15, 0.5, size=25)
        for order in (0, 1, 2):
            batch = batch_fit(order, centers, z, b, gamma=g)
            pred = batch.predict(g)
            for k, c in enumerate(centers):
                try:
                    fit = fit_local(order, c, SensorSamples(z, g), b[k])
                except UnderdeterminedError:
                    assert batch.status[k] == 1
                    continue
                except SingularFitError:
                    assert batch.status[k] == 2
                    continue
                assert batch.ok[k]
                # the normal-equation route loses accuracy with conditioning
                tol = max(1e-10, 1e-14 * batch.cond[k])
                assert pred[k] == pytest.approx(fit.alpha, abs=tol)
                assert batch.coef[k, 0] == pytest.approx(fit.alpha, abs=tol)
                if order >= 1:
                    np.testing.assert_allclose(batch.coef[k, 1:3] * b[k], fit.beta * b[k], atol=100 * tol)

    def test_hat_rows_reproduce_constants(self):
        rng = np.random.default_rng(5)
        z = rng.uniform(0, 1, size=(80, 2))
        fit = batch_fit(1, rng.uniform(0.2, 0.8, size=(10, 2)), z, 0.4)
        np.testing.assert_allclose(fit.hat[fit.ok].sum(axis=1), 1.0, atol=1e-12)


def straight_line_interp(grid, index, z, gamma, b):
    """Plain loop over Eqs. (6) and (12): explicit weights, normal matrix, solve."""
    out = []
    for i, j in index:
        c = grid.center(i, j)
        D, w, y = [], [], []
        for m in range(len(z)):
            d = z[m] - c
            r2 = (d[0] ** 2 + d[1] ** 2) / b ** 2
            if r2 < 1:
                D.append([1.0, d[0], d[1]])
                w.append(1.0 - r2)
                y.append(gamma[m])
        D, W, y = np.array(D).T, np.diag(w), np.array(y)
        theta = np.linalg.solve(D @ W @ D.T, D @ W @ y)
        out.append(theta[0])
    return np.array(out)


class TestInterpolateEntries:
    def test_constant_field(self):
        rng = np.random.default_rng(6)
        g = make_grid(6, 1.0)
        s = SensorSamples(rng.uniform(0, 1, size=(80, 2)), np.full(80, 3.5))
        idx = [(i, j) for i in range(6) for j in range(6)]
        for order in (0, 1, 2):
            obs = interpolate_entries(g, idx, s, 0.45, order=order)
            np.testing.assert_allclose(obs.H_hat, 3.5, atol=1e-12)

    def test_planar_field(self):
        rng = np.random.default_rng(7)
        g = make_grid(5, 1.0)
        s = samples_from(rng.uniform(0, 1, size=(100, 2)), lambda x, y: 2 + 3 * x - y)
        idx = [(i, j) for i in range(5) for j in range(5)]
        obs = interpolate_entries(g, idx, s, 0.4, order=1)
        c = np.array([g.center(i, j) for i, j in obs.index])
        np.testing.assert_allclose(obs.H_hat, 2 + 3 * c[:, 0] - c[:, 1], atol=1e-9)

    def test_matches_straight_line_oracle(self):
        cfg = from_dict({"sensors": {"M": 400}})
        scene = make_scene(cfg, 400, 11)
        grid, s = scene.grid, scene.samples
        b = 0.2 * grid.L
        idx = [(i, j) for i in range(grid.N) for j in range(grid.N)]
        obs = interpolate_entries(grid, idx, s, b, order=1)
        assert not obs.dropped
        want = straight_line_interp(grid, idx, s.z, s.gamma, b)
        H = scene.truth.H
        got_err = np.mean((obs.H_hat - H[obs.rows, obs.cols]) ** 2)
        want_err = np.mean((want - H[obs.rows, obs.cols]) ** 2)
        assert abs(got_err - want_err) <= 1e-12 * max(1.0, want_err)
        np.testing.assert_allclose(obs.H_hat, want, rtol=1e-9, atol=1e-12)

    def test_drops_unfittable_cells(self):
        g = make_grid(4, 4.0)
        s = SensorSamples(np.array([[0.4, 0.4], [0.6, 0.5], [0.5, 0.7], [0.3, 0.6]]), np.ones(4))
        obs = interpolate_entries(g, [(0, 0), (3, 3)], s, 1.0, order=1)
        assert obs.index == [(0, 0)]
        assert obs.dropped == [(3, 3, "underdetermined")]

    def test_per_cell_windows(self):
        rng = np.random.default_rng(8)
        g = make_grid(3, 3.0)
        s = samples_from(rng.uniform(0, 3, size=(60, 2)), lambda x, y: x * y)
        idx = [(0, 0), (1, 1)]
        by_map = interpolate_entries(g, idx, s, {(0, 0): 1.2, (1, 1): 0.9})
        arr = np.full((3, 3), 0.9)
        arr[0, 0] = 1.2
        by_arr = interpolate_entries(g, idx, s, arr)
        np.testing.assert_array_equal(by_map.H_hat, by_arr.H_hat)
        np.testing.assert_array_equal(by_map.b, [1.2, 0.9])
        single = fit_local(1, g.center(0, 0), s, 1.2).alpha
        assert by_map.H_hat[0] == pytest.approx(single, abs=1e-12)

    def test_empty_index(self):
        obs = interpolate_entries(make_grid(3, 1.0), [], SensorSamples(np.zeros((1, 2)), np.ones(1)), 0.5)
        assert len(obs) == 0


class TestObservationSet:
    def test_matrix_and_mask(self):
        obs = ObservationSet([0, 2], [1, 0], [1.5, -2.0], 0.0, [0.1, 0.2], 1.0, N=3)
        m = obs.matrix(fill=0.0)
        assert m[0, 1] == 1.5 and m[2, 0] == -2.0 and m.sum() == -0.5
        assert obs.mask().sum() == 2
        sub = obs.subset([False, True])
        assert sub.index == [(2, 0)] and sub.nu[0] == 0.2

    def test_rejects_duplicates(self):
        with pytest.raises(ValidationError):
            ObservationSet([0, 0], [1, 1], [1.0, 2.0], 0, 0, 1, N=3)

    def test_rejects_outside_grid(self):
        with pytest.raises(ValidationError):
            ObservationSet([3], [0], [1.0], 0, 0, 1, N=3)

    def test_rejects_negative_nu(self):
        with pytest.raises(ValidationError):
            ObservationSet([0], [0], [1.0], 0, -0.1, 1, N=3)
