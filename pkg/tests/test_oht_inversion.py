import numpy as np
import pytest
import scipy.sparse.linalg as spla

from flexshift.exceptions import SaddleSingular
from flexshift.oht_inversion import (
    CovarianceOperator,
    GaussNewtonState,
    GeostatModel,
    GNConfig,
    adjoint_solve,
    assemble_jacobian,
    covariance_assemble,
    forward_measurements,
    gauss_newton_step,
    invert,
    l2_errors,
    objective,
    sensitivity_rows,
)
from flexshift.oht_model import AquiferModel, Grid, KernelSpec, discretize, forward_solve
from flexshift.scenarios import franke_scenario, inversion_frequencies, sensor_box
from flexshift.shifted_krylov import SolverConfig

TIGHT = SolverConfig(tol=1e-13, max_m=60)


def small_model(n=9, seed=0, sensors=((3, 4), (5, 5)), log_k=None):
    rng = np.random.default_rng(seed)
    g = Grid.square(n, 100.0)
    s = -5 + 0.5 * rng.standard_normal(g.n_nodes) if log_k is None else np.full(g.n_nodes, log_k)
    return AquiferModel(g, s, -9.0, [(g.node(n // 2, n // 2), 1.0)], [g.node(*p) for p in sensors])


def fd_jacobian(model, freqs, cells, delta=1e-5):
    cols = []
    for j in cells:
        s = model.log_conductivity.copy()
        s[j] += delta
        hp, _, _ = forward_measurements(model.with_log_conductivity(s), freqs, TIGHT)
        s[j] -= 2 * delta
        hm, _, _ = forward_measurements(model.with_log_conductivity(s), freqs, TIGHT)
        cols.append((hp - hm) / (2 * delta))
    return np.array(cols).T


class TestCovariance:
    def test_spot_values(self):
        g = Grid.square(3, 2.0)
        k = KernelSpec(variance=2.0, decay=3.0, length=4.0)
        Q = covariance_assemble(g, k)
        assert Q[0, 0] == pytest.approx(2.0 * (1 + 1e-10), rel=1e-15)
        assert Q[0, 4] == pytest.approx(2.0 * np.exp(-3.0 * np.sqrt(2.0) / 4.0), rel=1e-14)
        assert Q[0, 8] == pytest.approx(2.0 * np.exp(-3.0 * np.sqrt(8.0) / 4.0), rel=1e-14)
        assert np.array_equal(Q, Q.T)

    def test_operator_matches_dense(self, rng):
        g = Grid.square(12, 50.0)
        k = KernelSpec()
        Q = covariance_assemble(g, k)
        op = CovarianceOperator(g.coords(), k, block=17)
        B = rng.standard_normal((g.n_nodes, 3))
        np.testing.assert_allclose(op @ B, Q @ B, rtol=1e-12)
        np.testing.assert_allclose(op @ B[:, 0], Q @ B[:, 0], rtol=1e-12)

    def test_positive_semidefinite(self):
        Q = covariance_assemble(Grid.square(8, 100.0), KernelSpec())
        assert np.linalg.eigvalsh(Q).min() > 0

    def test_dense_limit(self):
        with pytest.raises(MemoryError):
            covariance_assemble(Grid.square(10), KernelSpec(), limit=50)


class TestAdjoint:
    def test_matches_dense(self):
        m = small_model(19, sensors=((4, 6),))
        s = discretize(m, [0.01, 0.1, 1.0])
        res = adjoint_solve(s, m.sensors[0], TIGHT)
        K, M = s.K.toarray(), s.M.toarray()
        for w, psi in zip(s.frequencies, res.fields):
            ref = s.expand(np.linalg.solve(K + 1j * w * M, -s.point_load(m.sensors[0])))
            assert np.linalg.norm(psi - ref) <= 1e-9 * np.linalg.norm(ref)

    def test_same_operator_as_forward(self):
        m = small_model(sensors=((4, 4),))
        s = discretize(m, [0.2, 0.5])
        adj = adjoint_solve(s, m.sensors[0], TIGHT).fields
        fwd = forward_solve(s, TIGHT).fields
        np.testing.assert_allclose(adj, -fwd / m.sources[0][1], rtol=1e-10, atol=1e-14)

    def test_basis_reuse(self):
        m = small_model(21, sensors=((4, 6),))
        freqs = np.linspace(0.01, 1.0, 10)
        s = discretize(m, freqs)
        rng_ = (0.01, 1.0)
        res = adjoint_solve(s, m.sensors[0], TIGHT, shift_range=rng_)
        slowest = freqs[int(np.argmax([sol.iterations for sol in res.solutions]))]
        many = res.report.counts
        one = adjoint_solve(s, m.sensors[0], TIGHT, frequencies=[slowest], shift_range=rng_).report.counts
        assert many.operator_applications <= 1.1 * one.operator_applications


class TestJacobian:
    def test_finite_differences_cells(self, rng):
        m = small_model()
        freqs = [0.05, 0.5]
        jac = assemble_jacobian(m, freqs, TIGHT)
        cells = rng.choice(m.free_nodes(), 20, replace=False)
        fd = fd_jacobian(m, freqs, cells)
        err = np.abs(jac.J[:, cells] - fd).max(axis=0) / np.abs(fd).max(axis=0)
        assert err.max() < 1e-5

    def test_full_rows_and_family_count(self):
        m = small_model()
        freqs = [0.05, 0.5]
        jac = assemble_jacobian(m, freqs, TIGHT)
        assert jac.J.shape == (8, 81) and np.all(np.isfinite(jac.J))
        fd = fd_jacobian(m, freqs, range(81))
        row_err = np.linalg.norm(jac.J - fd, axis=1) / np.linalg.norm(fd, axis=1)
        assert row_err.max() < 1e-4
        assert jac.family_solves == 3
        assert assemble_jacobian(m, [0.05, 0.2, 0.5, 1.0], TIGHT).family_solves == 3

    def test_reflection_symmetry(self):
        # source and sensor swap under x -> L - x; reciprocity makes the pattern mirror-symmetric
        g = Grid.square(9, 100.0)
        m = AquiferModel(g, np.full(81, -5.0), -9.0, [(g.node(3, 4), 1.0)], [g.node(5, 4)])
        jac = assemble_jacobian(m, [0.3], TIGHT)
        for row in jac.J:
            img = row.reshape(9, 9)
            np.testing.assert_allclose(img, img[:, ::-1], rtol=1e-8, atol=1e-12 * np.abs(img).max())

    def test_sensor_relabeling(self):
        a = small_model(log_k=-5.0, sensors=((3, 4), (6, 2)))
        b = small_model(log_k=-5.0, sensors=((6, 2), (3, 4)))
        Ja = assemble_jacobian(a, [0.1, 0.4], TIGHT).J.reshape(2, 2, 2, -1)
        Jb = assemble_jacobian(b, [0.1, 0.4], TIGHT).J.reshape(2, 2, 2, -1)
        np.testing.assert_allclose(Ja, Jb[:, ::-1], rtol=1e-9, atol=1e-12 * np.abs(Ja).max())

    def test_rows_are_real_and_minus_imag(self):
        m = small_model()
        s = discretize(m, [0.3])
        phi = forward_solve(s, TIGHT).fields[0]
        psi = adjoint_solve(s, m.sensors[0], TIGHT).fields[0]
        r = sensitivity_rows(phi, psi, s)
        assert r.shape == (2, 81)
        r2 = sensitivity_rows(phi, 1j * psi, s)
        np.testing.assert_allclose(r2[0], r[1], atol=1e-300)


class TestGaussNewtonStep:
    def test_kriging_linear_map(self, rng):
        g = Grid.square(10, 100.0)
        Q = covariance_assemble(g, KernelSpec())
        J = rng.standard_normal((12, g.n_nodes))
        s_true = -4 + np.linalg.cholesky(Q) @ rng.standard_normal(g.n_nodes)
        y = J @ s_true
        geo = GeostatModel.with_noise(Q, y, 1e-8)
        s0 = np.full(g.n_nodes, -7.0)
        state = GaussNewtonState(s0, np.zeros(12), np.array([-7.0]), np.zeros(g.n_nodes))
        new, info = gauss_newton_step(state, J, J @ s0, geo)
        # generalized least squares for the drift, then simple kriging of the remainder
        X = np.ones((g.n_nodes, 1))
        Psi = J @ Q @ J.T + geo.R
        JX = J @ X
        beta = np.linalg.solve(JX.T @ np.linalg.solve(Psi, JX), JX.T @ np.linalg.solve(Psi, y))
        s_ref = X @ beta + Q @ J.T @ np.linalg.solve(Psi, y - JX @ beta)
        np.testing.assert_allclose(new.s, s_ref, rtol=1e-8)
        np.testing.assert_allclose(J @ new.s, y, rtol=1e-6)
        assert info["saddle_residual"] < 1e-10

    def test_fixed_point(self):
        m = small_model(log_k=-5.0)
        freqs = [0.1, 0.5]
        jac = assemble_jacobian(m, freqs, TIGHT)
        Q = covariance_assemble(m.grid, KernelSpec())
        geo = GeostatModel.with_noise(Q, jac.h, 1e-6)
        s = m.log_conductivity
        state = GaussNewtonState(s, np.zeros(len(jac.h)), np.array([-5.0]), np.zeros(len(s)))
        new, _ = gauss_newton_step(state, jac.J, jac.h, geo)
        assert np.linalg.norm(new.s - s) <= 1e-8 * np.linalg.norm(s)

    def test_singular_saddle(self):
        Q = np.eye(4)
        geo = GeostatModel(Q, np.ones((4, 1)), np.zeros((2, 2)), np.zeros(2))
        J = np.zeros((2, 4))
        state = GaussNewtonState(np.zeros(4), np.zeros(2), np.zeros(1), np.zeros(4))
        with pytest.raises(SaddleSingular):
            gauss_newton_step(state, J, np.zeros(2), geo)

    def test_objective(self):
        geo = GeostatModel(np.eye(2), np.ones((2, 1)), 4.0 * np.eye(2), np.array([1.0, 3.0]))
        val = objective(geo, np.array([0.0, 1.0]), np.array([2.0, 3.0]), np.array([1.0]), np.array([1.0, 2.0]))
        assert val == pytest.approx(0.5 * (1 / 4 + 4 / 4) + 0.5 * (1 * 1 + 2 * 2))


def franke_small():
    true, _, cfg = franke_scenario(dict(n=21, source_amplitude=5e-5))
    return true, cfg


class TestInvert:
    def test_homogeneous_in_drift_space(self):
        g = Grid.square(11, 100.0)
        true = AquiferModel(g, np.full(g.n_nodes, -5.0), -9.0, [(g.node(5, 5), 1.0)],
                            [g.node(3, 5), g.node(7, 6)])
        freqs = [0.05, 0.3]
        y, _, _ = forward_measurements(true, freqs, TIGHT)
        geo = GeostatModel.with_noise(covariance_assemble(g, KernelSpec()), y, 1e-12)
        res = invert(true, freqs, geo, np.full(g.n_nodes, -5.05), TIGHT, GNConfig(max_iter=2))
        assert len(res.history) - 1 <= 2
        assert l2_errors(g, res.s, true.log_conductivity)["total_l2"] < 1e-3

    def test_objective_non_increasing(self):
        true, cfg = franke_small()
        freqs = inversion_frequencies(cfg, 5)
        y, _, _ = forward_measurements(true, freqs)
        geo = GeostatModel.with_noise(covariance_assemble(true.grid, KernelSpec(**cfg["prior_kernel"])),
                                      y, cfg["eta"])
        s0 = np.full(true.grid.n_nodes, np.mean(cfg["log_conductivity_range"]))
        res = invert(true, freqs, geo, s0, gn=GNConfig(max_iter=5, step_tol=0, line_search=True))
        obj = [h["objective"] for h in res.history]
        assert len(obj) == 6
        assert all(b <= a for a, b in zip(obj, obj[1:]))

    def test_frequency_permutation(self):
        true, cfg = franke_small()
        freqs = inversion_frequencies(cfg, 4)
        perm = [2, 0, 3, 1]
        s0 = np.full(true.grid.n_nodes, -6.5)
        Q = covariance_assemble(true.grid, KernelSpec(**cfg["prior_kernel"]))
        out = []
        for f in (freqs, freqs[perm]):
            y, _, _ = forward_measurements(true, f, TIGHT)
            geo = GeostatModel.with_noise(Q, y, cfg["eta"])
            out.append(invert(true, f, geo, s0, TIGHT, GNConfig(max_iter=3, line_search=True)).s)
        assert np.linalg.norm(out[0] - out[1]) <= 1e-10 * np.linalg.norm(out[0])

    def test_reconstruction_improves_on_prior(self):
        true, cfg = franke_small()
        freqs = inversion_frequencies(cfg, 5)
        y, _, _ = forward_measurements(true, freqs)
        geo = GeostatModel.with_noise(covariance_assemble(true.grid, KernelSpec(**cfg["prior_kernel"])),
                                      y, cfg["eta"])
        s0 = np.full(true.grid.n_nodes, np.mean(cfg["log_conductivity_range"]))
        res = invert(true, freqs, geo, s0, gn=GNConfig(line_search=True))
        box = sensor_box(cfg)
        before = l2_errors(true.grid, s0, true.log_conductivity, box)
        after = l2_errors(true.grid, res.s, true.log_conductivity, box)
        assert res.converged and after["box_l2"] < 0.5 * before["box_l2"]


class TestErrors:
    def test_hand_values(self):
        g = Grid.square(3, 2.0)
        s_true = np.full(9, 2.0)
        s_est = s_true.copy()
        s_est[4] = 3.0
        e = l2_errors(g, s_est, s_true, (0.5, 1.5, 0.5, 1.5))
        # centre cell has area 1 out of a total area 4
        assert e["total_l2"] == pytest.approx(np.sqrt(1.0 / 16.0))
        assert e["box_l2"] == pytest.approx(0.5)

    def test_zero_error(self):
        g = Grid.square(4, 1.0)
        s = np.linspace(1, 2, 16)
        assert l2_errors(g, s, s)["total_l2"] == 0
