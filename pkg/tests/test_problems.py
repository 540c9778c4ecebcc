import io

import numpy as np
import pytest

from reflora import problems
from reflora.refactor import LowRankFactors

from conftest import gen, rel_err


def fd_grad_pair(problem, f, h=1e-6):
    """Central finite differences of the factor loss, entry by entry."""
    def loss_of(a, b):
        return problem.loss_at_factors(LowRankFactors(a, b))

    g_a = np.zeros_like(f.a)
    for i in range(f.a.shape[0]):
        for j in range(f.a.shape[1]):
            up, down = f.a.copy(), f.a.copy()
            up[i, j] += h
            down[i, j] -= h
            g_a[i, j] = (loss_of(up, f.b) - loss_of(down, f.b)) / (2 * h)
    g_b = np.zeros_like(f.b)
    for i in range(f.b.shape[0]):
        for j in range(f.b.shape[1]):
            up, down = f.b.copy(), f.b.copy()
            up[i, j] += h
            down[i, j] -= h
            g_b[i, j] = (loss_of(f.a, up) - loss_of(f.a, down)) / (2 * h)
    return g_a, g_b


class TestMakeMf:
    def test_exact_fit_has_zero_loss(self):
        problem, inst = problems.make_mf(10, 8, 3, seed=5)
        u, s, vt = np.linalg.svd(inst.y, full_matrices=False)
        f = LowRankFactors(u[:, :3] * s[:3], vt[:3].T)
        assert problem.loss_at_factors(f) <= 1e-20 * np.sum(inst.y ** 2)
        w = problem.full_weight(f)
        assert np.linalg.norm(problem.grad(w)) <= 1e-10

    def test_zero_factor_loss(self):
        problem, inst = problems.make_mf(10, 8, 3, seed=5)
        f = LowRankFactors(np.zeros((10, 3)), np.zeros((8, 3)))
        assert problem.loss_at_factors(f) == pytest.approx(
            0.5 * np.sum(inst.y ** 2))

    def test_default_instance(self):
        problem, inst = problems.make_mf(128, 100, 8, seed=0)
        assert np.linalg.matrix_rank(inst.y) == 8
        f = problems.init_factors(128, 100, 8, seed=0)
        assert np.linalg.norm(f.b) == 0.0
        assert problem.loss_at_factors(f) == pytest.approx(
            0.5 * np.sum(inst.y ** 2))
        assert problem.lipschitz == 1.0

    def test_invalid_dims(self):
        with pytest.raises(ValueError):
            problems.make_mf(4, 3, 5, seed=0)


class TestMakeLinreg:
    def test_normal_equations_zero_gradient(self):
        problem, inst = problems.make_linreg(3, 4, 6, seed=2)
        w_star = inst.y @ np.linalg.pinv(inst.x)
        assert np.linalg.norm(problem.grad(w_star)) <= 1e-9

    def test_identity_design_reduces_to_mf(self, rng):
        problem = problems.LinearRegressionProblem(np.eye(3), np.zeros((4, 3)))
        f = LowRankFactors(rng.standard_normal((4, 2)),
                           rng.standard_normal((3, 2)))
        assert problem.loss_at_factors(f) == pytest.approx(
            0.5 * np.sum(f.product() ** 2))

    def test_lipschitz_is_top_eigenvalue(self):
        # power-iteration oracle on X X^T
        problem, inst = problems.make_linreg(2, 2, 2, seed=3)
        xxt = inst.x @ inst.x.T
        v = np.ones(2)
        for _ in range(500):
            v = xxt @ v
            v /= np.linalg.norm(v)
        lam = float(v @ xxt @ v)
        assert problem.lipschitz == pytest.approx(lam, rel=1e-10)

    def test_lipschitz_bound_on_gradient_differences(self, rng):
        problem, _ = problems.make_linreg(4, 5, 7, seed=4)
        for _ in range(50):
            w1 = rng.standard_normal((4, 5))
            w2 = rng.standard_normal((4, 5))
            lhs = np.linalg.norm(problem.grad(w1) - problem.grad(w2))
            rhs = problem.lipschitz * np.linalg.norm(w1 - w2)
            assert lhs <= rhs * (1 + 1e-12)


class TestGradPair:
    def test_zero_b_structured(self, rng):
        problem, inst = problems.make_mf(9, 7, 2, seed=6)
        f = LowRankFactors(rng.standard_normal((9, 2)), np.zeros((7, 2)))
        gp = problem.grad_pair(f)
        assert np.linalg.norm(gp.g_a) == 0.0
        assert rel_err(gp.g_b, -inst.y.T @ f.a) < 1e-14

    def test_zero_gradient(self):
        problem, inst = problems.make_mf(8, 6, 2, seed=7)
        u, s, vt = np.linalg.svd(inst.y, full_matrices=False)
        f = LowRankFactors(u[:, :2] * s[:2], vt[:2].T)
        gp = problem.grad_pair(f)
        assert np.linalg.norm(gp.g_a) <= 1e-10
        assert np.linalg.norm(gp.g_b) <= 1e-10

    def test_matches_dense_path(self, rng):
        problem, _ = problems.make_mf(12, 9, 3, seed=8)
        f = LowRankFactors(rng.standard_normal((12, 3)),
                           rng.standard_normal((9, 3)))
        gp = problem.grad_pair(f)
        g = problem.grad(problem.full_weight(f))
        assert rel_err(gp.g_a, g @ f.b) < 1e-12
        assert rel_err(gp.g_b, g.T @ f.a) < 1e-12

    def test_finite_differences_seed43(self):
        g = gen(43)
        problem, _ = problems.make_mf(6, 5, 2, seed=43)
        f = LowRankFactors(g.standard_normal((6, 2)),
                           g.standard_normal((5, 2)))
        gp = problem.grad_pair(f)
        fd_a, fd_b = fd_grad_pair(problem, f)
        assert np.max(np.abs(gp.g_a - fd_a) / np.maximum(1.0, np.abs(fd_a))) <= 1e-5
        assert np.max(np.abs(gp.g_b - fd_b) / np.maximum(1.0, np.abs(fd_b))) <= 1e-5

    def test_adapter_scale_chain_rule(self):
        g = gen(44)
        problem, _ = problems.make_mf(5, 4, 2, seed=44)
        f = LowRankFactors(g.standard_normal((5, 2)),
                           g.standard_normal((4, 2)))
        scale = 0.25
        gp = problem.grad_pair(f, scale=scale)
        h = 1e-6
        up, down = f.a.copy(), f.a.copy()
        up[0, 0] += h
        down[0, 0] -= h
        fd = (problem.loss_at_factors(LowRankFactors(up, f.b), scale)
              - problem.loss_at_factors(LowRankFactors(down, f.b), scale)) / (2 * h)
        assert gp.g_a[0, 0] == pytest.approx(fd, rel=1e-5)


class TestQuadraticBound:
    def test_bound_holds_for_random_probes(self, rng):
        for maker in (lambda: problems.make_mf(8, 6, 2, seed=9),
                      lambda: problems.make_linreg(5, 4, 6, seed=9)):
            problem, _ = maker()
            for _ in range(30):
                w = rng.standard_normal((problem.m, problem.n))
                dw = rng.standard_normal((problem.m, problem.n))
                lhs = problem.loss(w + dw)
                rhs = (problem.loss(w) + np.sum(problem.grad(w) * dw)
                       + 0.5 * problem.lipschitz * np.sum(dw * dw))
                assert lhs <= rhs + 1e-9 * max(1.0, abs(rhs))

    def test_equality_in_top_direction(self, rng):
        problem, inst = problems.make_linreg(4, 3, 5, seed=10)
        w = rng.standard_normal((4, 3))
        lam, vecs = np.linalg.eigh(inst.x @ inst.x.T)
        dw = np.outer(rng.standard_normal(4), vecs[:, -1])
        lhs = problem.loss(w + dw)
        rhs = (problem.loss(w) + np.sum(problem.grad(w) * dw)
               + 0.5 * problem.lipschitz * np.sum(dw * dw))
        assert lhs == pytest.approx(rhs, rel=1e-12)


class TestDeterminism:
    def test_same_seed_same_instance(self):
        _, a = problems.make_mf(16, 12, 4, seed=11)
        _, b = problems.make_mf(16, 12, 4, seed=11)
        assert np.array_equal(a.y, b.y)
        _, c = problems.make_linreg(3, 4, 5, seed=11)
        _, d = problems.make_linreg(3, 4, 5, seed=11)
        assert np.array_equal(c.x, d.x)
        assert np.array_equal(c.y, d.y)

    def test_instance_and_init_streams_differ(self):
        _, inst = problems.make_mf(6, 6, 2, seed=12)
        f = problems.init_factors(6, 6, 2, seed=12, sigma_a=1.0, sigma_b=1.0)
        assert not np.allclose(inst.y[:, :2], f.a)


class TestSerialization:
    def test_matrix_round_trip(self, rng):
        m = rng.standard_normal((3, 5))
        buf = io.StringIO()
        problems.write_matrix_text(buf, m)
        buf.seek(0)
        assert np.array_equal(problems.read_matrix_text(buf), m)

    def test_instance_round_trip(self, tmp_path):
        _, inst = problems.make_mf(6, 5, 2, seed=13)
        path = tmp_path / "inst.txt"
        problems.save_instance(path, inst)
        loaded = problems.load_instance(path)
        assert isinstance(loaded, problems.MfInstance)
        assert loaded.seed == 13
        assert np.array_equal(loaded.y, inst.y)

        _, linreg = problems.make_linreg(3, 4, 5, seed=14)
        path2 = tmp_path / "inst2.txt"
        problems.save_instance(path2, linreg)
        loaded2 = problems.load_instance(path2)
        assert np.array_equal(loaded2.x, linreg.x)
        assert np.array_equal(loaded2.y, linreg.y)
