import numpy as np
import pytest

from reflora import linalg, refactor
from reflora.errors import InvalidEta, RankDeficient, ZeroFactor
from reflora.refactor import LowRankFactors

from conftest import gen, random_orthogonal, rel_err

# Frozen oracle: the stationarity equation S (A^T A) S = B^T B was solved
# in a separate scripting session by eigendecomposing
# (A^T A)^{1/2} B^T B (A^T A)^{1/2} with a Schur-based square root and
# back-substituting.

GEO_A = np.array(
    [[-0.7515655465895388, 0.8553678569552229],
     [0.41485848661538494, -0.5380294292208245],
     [-0.3359619070097133, 0.9136526273029888],
     [-0.2807732538058441, -0.5570561271637801]])
GEO_B = np.array(
    [[-0.4700318842420266, -1.6723184947016325],
     [0.9346043618433958, -0.1861968696483505],
     [-0.26112758793430985, -1.6874600683160412]])
GEO_EXPECTED = np.array(
    [[1.5801846972622222, 0.8688442519068259],
     [0.8688442519068259, 1.9775343063610924]])


def random_factors(g, m, n, r):
    return LowRankFactors(g.standard_normal((m, r)), g.standard_normal((n, r)))


def g_oracle(f, s):
    # direct evaluation of ||A S^{1/2}||_F^2 + ||B S^{-1/2}||_F^2 through
    # an explicit eigendecomposition, independent of the trace-based path
    w, v = np.linalg.eigh(0.5 * (s + s.T))
    s_half = (v * np.sqrt(w)) @ v.T
    s_inv_half = (v / np.sqrt(w)) @ v.T
    return float(np.sum((f.a @ s_half) ** 2) + np.sum((f.b @ s_inv_half) ** 2))


class TestGeometricMean:
    def test_balanced_input_is_fixed_point(self, rng):
        q1 = random_orthogonal(rng, 5)[:, :3]
        q2 = random_orthogonal(rng, 6)[:, :3]
        f = LowRankFactors(q1, q2)  # both Grams are I
        assert rel_err(refactor.geometric_mean_s(f), np.eye(3)) < 1e-12

    def test_rank_one_ratio(self):
        a = np.zeros((4, 1)); a[0, 0] = 2.0
        b = np.zeros((3, 1)); b[1, 0] = 6.0
        s = refactor.geometric_mean_s(LowRankFactors(a, b))
        assert s[0, 0] == pytest.approx(3.0, rel=1e-14)

    def test_oracle_seeds_5_6(self):
        f = LowRankFactors(GEO_A, GEO_B)
        assert rel_err(refactor.geometric_mean_s(f), GEO_EXPECTED) < 1e-12

    def test_stationarity(self):
        g = gen(200)
        for _ in range(100):
            f = random_factors(g, 8, 7, 3)
            s = refactor.geometric_mean_s(f)
            gb = f.b.T @ f.b
            assert rel_err(s @ (f.a.T @ f.a) @ s, gb) <= 1e-8

    def test_gram_product_form(self):
        # matches (A^T A)^{-1} (A^T A B^T B)^{1/2}
        g = gen(201)
        for _ in range(100):
            f = random_factors(g, 9, 6, 3)
            s = refactor.geometric_mean_s(f)
            ga = f.a.T @ f.a
            alt = np.linalg.solve(ga, linalg.nonsym_psd_sqrt(ga, f.b.T @ f.b))
            assert rel_err(s, alt) <= 1e-9

    def test_balance(self):
        g = gen(202)
        for _ in range(100):
            f = random_factors(g, 10, 8, 4)
            s = refactor.geometric_mean_s(f)
            a_t = f.a @ linalg.spd_sqrt(s)
            b_t = f.b @ linalg.spd_inv_sqrt(s)
            ga = a_t.T @ a_t
            assert np.linalg.norm(ga - b_t.T @ b_t) <= 1e-8 * np.linalg.norm(ga)

    def test_congruence_invariance(self):
        g = gen(203)
        for _ in range(50):
            f = random_factors(g, 8, 9, 3)
            p = g.standard_normal((3, 3)) + np.eye(3)
            s = refactor.geometric_mean_s(f)
            s_p = refactor.geometric_mean_s(
                LowRankFactors(f.a @ p, f.b @ np.linalg.inv(p).T))
            p_inv = np.linalg.inv(p)
            assert rel_err(s_p, p_inv @ s @ p_inv.T) <= 1e-8

    def test_rank_deficient_rejected(self):
        a = np.ones((4, 2))  # identical columns
        b = np.arange(6.0).reshape(3, 2)
        with pytest.raises(RankDeficient):
            refactor.geometric_mean_s(LowRankFactors(a, b))


class TestOptimalS:
    def test_balanced_always_ignores_eta(self, rng):
        f = random_factors(rng, 6, 5, 2)
        res = refactor.optimal_s(f, 1e-9, refactor.balanced_mode())
        assert res.branch == refactor.BRANCH_BALANCED
        assert rel_err(res.s_matrix, refactor.geometric_mean_s(f)) == 0.0
        assert res.g_value == pytest.approx(res.c_tilde, rel=1e-8)

    def test_boundary_returns_balanced(self, rng):
        f = random_factors(rng, 6, 5, 2)
        lip = 1.0
        eta_c = 1.0 / (refactor.c_tilde(f) * lip)
        res = refactor.optimal_s(f, eta_c, refactor.theorem_exact_mode(lip))
        assert res.branch == refactor.BRANCH_BALANCED
        assert rel_err(res.s_matrix, refactor.geometric_mean_s(f)) < 1e-10

    def test_forced_scaling_rank_one(self):
        # unit vectors, a = b: threshold constant 2; L = 1, eta = 1/4
        a = np.zeros((3, 1)); a[0, 0] = 1.0
        f = LowRankFactors(a, a.copy())
        plus = refactor.optimal_s(f, 0.25, refactor.theorem_exact_mode(1.0, "plus"))
        minus = refactor.optimal_s(f, 0.25, refactor.theorem_exact_mode(1.0, "minus"))
        assert plus.s_matrix[0, 0] == pytest.approx(2.0 + np.sqrt(3.0), rel=1e-12)
        assert minus.s_matrix[0, 0] == pytest.approx(2.0 - np.sqrt(3.0), rel=1e-12)
        assert plus.branch == refactor.BRANCH_SMALL_ETA_PLUS
        assert minus.branch == refactor.BRANCH_SMALL_ETA_MINUS

    def test_small_eta_hits_target_seed9(self):
        g = gen(9)
        f = random_factors(g, 7, 5, 3)
        lip = 2.0
        eta = 0.01 / (refactor.c_tilde(f) * lip)
        for root in ("plus", "minus"):
            res = refactor.optimal_s(f, eta, refactor.theorem_exact_mode(lip, root))
            target = 1.0 / (lip * eta)
            assert abs(g_oracle(f, res.s_matrix) - target) <= 1e-8 * target
            assert res.g_value == pytest.approx(target, rel=1e-12)

    def test_negative_eta_is_balanced(self, rng):
        f = random_factors(rng, 5, 4, 2)
        res = refactor.optimal_s(f, -0.3, refactor.theorem_exact_mode(1.0))
        assert res.branch == refactor.BRANCH_BALANCED

    def test_eta_zero_rejected(self, rng):
        f = random_factors(rng, 5, 4, 2)
        with pytest.raises(InvalidEta):
            refactor.optimal_s(f, 0.0, refactor.theorem_exact_mode(1.0))

    def test_identity_mode(self, rng):
        f = random_factors(rng, 5, 4, 2)
        res = refactor.optimal_s(f, 0.1, refactor.identity_mode())
        assert res.branch == refactor.BRANCH_IDENTITY
        assert rel_err(res.s_matrix, np.eye(2)) == 0.0
        expected = float(np.sum(f.a ** 2) + np.sum(f.b ** 2))
        assert res.g_value == pytest.approx(expected, rel=1e-12)


class TestOptimalScalar:
    def test_norm_ratio_large_eta(self):
        a = np.zeros((3, 1)); a[0, 0] = 2.0
        b = np.zeros((4, 1)); b[2, 0] = 1.0
        f = LowRankFactors(a, b)
        res = refactor.optimal_scalar(f, 10.0, refactor.scalar_mode())
        assert res.s_scalar == pytest.approx(0.5, rel=1e-15)
        assert res.branch == refactor.BRANCH_BALANCED

    def test_forced_small_eta(self):
        # unit norms and 1/(L eta) = 4 force s = 2 +/- sqrt(3)
        a = np.zeros((2, 1)); a[0, 0] = 1.0
        b = np.zeros((2, 1)); b[1, 0] = 1.0
        f = LowRankFactors(a, b)
        mode_p = refactor.scalar_theorem_exact_mode(1.0, "plus")
        mode_m = refactor.scalar_theorem_exact_mode(1.0, "minus")
        assert refactor.optimal_scalar(f, 0.25, mode_p).s_scalar == \
            pytest.approx(2.0 + np.sqrt(3.0), rel=1e-12)
        assert refactor.optimal_scalar(f, 0.25, mode_m).s_scalar == \
            pytest.approx(2.0 - np.sqrt(3.0), rel=1e-12)

    def test_small_eta_residual_seed13(self):
        g = gen(13)
        f = random_factors(g, 6, 5, 2)
        a2 = float(np.sum(f.a ** 2))
        b2 = float(np.sum(f.b ** 2))
        lip = 1.0
        eta = 0.05 / (2.0 * np.sqrt(a2 * b2) * lip)
        for root in ("plus", "minus"):
            mode = refactor.scalar_theorem_exact_mode(lip, root)
            s = refactor.optimal_scalar(f, eta, mode).s_scalar
            h = (a2 * s + b2 / s - 1.0 / (lip * eta)) ** 2
            assert h <= 1e-16

    def test_zero_factor_rejected(self):
        f = LowRankFactors(np.ones((3, 1)), np.zeros((3, 1)))
        with pytest.raises(ZeroFactor):
            refactor.optimal_scalar(f, 0.1, refactor.scalar_mode())

    def test_critical_point(self, rng):
        for _ in range(50):
            f = random_factors(rng, 7, 6, 3)
            s = refactor.optimal_scalar(f, 1.0, refactor.scalar_mode()).s_scalar
            a2 = float(np.sum(f.a ** 2))
            b2 = float(np.sum(f.b ** 2))
            assert a2 * s * s == pytest.approx(b2, rel=1e-12)


class TestGObjective:
    def test_identity_value(self, rng):
        f = random_factors(rng, 6, 4, 2)
        expected = float(np.sum(f.a ** 2) + np.sum(f.b ** 2))
        assert refactor.g_objective(f, np.eye(2)) == pytest.approx(expected)

    def test_minimum_is_twice_nuclear_norm(self):
        g = gen(204)
        for _ in range(100):
            f = random_factors(g, 8, 7, 3)
            s = refactor.geometric_mean_s(f)
            target = 2.0 * linalg.nuclear_norm(f.a @ f.b.T)
            assert abs(refactor.g_objective(f, s) - target) <= 1e-8 * target

    def test_other_spd_is_larger_seed17(self):
        g = gen(17)
        f = random_factors(g, 8, 7, 3)
        s = refactor.geometric_mean_s(f)
        floor = 2.0 * linalg.nuclear_norm(f.a @ f.b.T)
        for _ in range(100):
            c = g.standard_normal((3, 3))
            s_other = c @ c.T + 0.1 * np.eye(3)
            if rel_err(s_other, s) < 1e-6:
                continue
            assert refactor.g_objective(f, s_other) > floor

    def test_dimension_mismatch(self, rng):
        f = random_factors(rng, 6, 4, 2)
        with pytest.raises(ValueError):
            refactor.g_objective(f, np.eye(3))


class TestUpperBoundEval:
    def test_eta_zero_returns_const(self, rng):
        f = random_factors(rng, 5, 4, 2)
        got = refactor.upper_bound_eval(f, np.eye(2), 0.0, 1.0, 3.0,
                                        loss_now=7.0, const_terms=1.25)
        assert got == 1.25

    def test_zero_of_squared_term(self, rng):
        f = random_factors(rng, 5, 4, 2)
        lip, eta = 2.0, 0.01
        # scale the balanced matrix so g(S) equals exactly 1/(L eta)
        res = refactor.optimal_s(f, eta, refactor.theorem_exact_mode(lip))
        got = refactor.upper_bound_eval(f, res.s_matrix, eta, lip, 5.0,
                                        loss_now=0.0, const_terms=4.5)
        assert got == pytest.approx(4.5, abs=1e-10)

    def test_quadratic_in_grad_norm(self, rng):
        f = random_factors(rng, 5, 4, 2)
        s = refactor.geometric_mean_s(f)
        b1 = refactor.upper_bound_eval(f, s, 0.1, 1.0, 1.0, 0.0, 0.0)
        b2 = refactor.upper_bound_eval(f, s, 0.1, 1.0, 2.0, 0.0, 0.0)
        assert b2 == pytest.approx(4.0 * b1, rel=1e-12)


class TestProductNuclearNorm:
    def test_paths_agree(self):
        g = gen(205)
        for _ in range(50):
            f = random_factors(g, 12, 9, 4)
            dense = refactor.product_nuclear_norm(f, dense_limit=512)
            gram = refactor.product_nuclear_norm(f, dense_limit=0)
            assert gram == pytest.approx(dense, rel=1e-10)


class TestLowRankFactors:
    def test_shape_validation(self):
        with pytest.raises(ValueError):
            LowRankFactors(np.ones((3, 2)), np.ones((3, 3)))
        with pytest.raises(ValueError):
            LowRankFactors(np.ones((2, 3)), np.ones((4, 3)))

    def test_finite_validation(self):
        with pytest.raises(ValueError):
            LowRankFactors(np.array([[np.inf], [1.0]]), np.ones((2, 1)))

    def test_full_rank_flag(self, rng):
        f = random_factors(rng, 6, 5, 2)
        assert f.is_full_rank()
        tiny = LowRankFactors(np.hstack([f.a[:, :1], f.a[:, :1] * 1e-14]), f.b)
        assert not tiny.is_full_rank()
