import numpy as np
import pytest

from jointflip.errors import DegenerateVariance, SingularCovariance, TooManyHypotheses
from jointflip.flips import make_exhaustive, make_plan
from jointflip.glm import fit_null_batch
from jointflip.multitest import (
    CombiningFunction,
    bonferroni_holm,
    closed_testing,
    flip_covariance,
    global_result,
    global_test,
    mahalanobis_global,
    maxt_single_step,
    maxt_step_down,
    perm_pvalue,
    raw_pvalues,
)
from jointflip.scores import build_matrix, decompose_batch

from conftest import small_instance
from oracles import (
    all_signs,
    closed_testing_loop,
    count_pvalue,
    holm_definition,
    stepdown_iterative,
    stepdown_recursive,
)


class TestPermPvalue:
    def test_strict_maximum(self, rng):
        col = rng.permutation(20).astype(float)
        col[[0, col.argmax()]] = col[[col.argmax(), 0]]
        assert perm_pvalue(col) == 1 / 20

    def test_all_equal(self):
        assert perm_pvalue(np.full(30, 2.5)) == 1.0

    def test_nan_counts_against(self):
        assert perm_pvalue([3.0, np.nan, 1.0, 2.0]) == 0.5

    def test_nan_observed_raises(self):
        with pytest.raises(DegenerateVariance):
            perm_pvalue([np.nan, 1.0])

    def test_exhaustive_gaussian_bruteforce(self, rng):
        # n=3: w=8 flips of a tiny gaussian model, counted by hand
        n = 3
        x, y = rng.standard_normal(n), rng.standard_normal(n)
        M = build_matrix(
            decompose_batch(fit_null_batch("gaussian", y[:, None], x, None, dispersion=1.0), x, None),
            make_exhaustive(n),
            standardized=False,
        )
        stats = [abs(np.dot(g, x * y)) / np.sqrt(n) for g in all_signs(n)]
        assert perm_pvalue(M.m_stats[:, 0]) == count_pvalue(stats, abs(x @ y) / np.sqrt(n))


class TestGlobalTest:
    def test_single_column_reduction(self, rng):
        M = rng.standard_normal((50, 4)) ** 2
        assert global_test(M, [2], "max_abs") == perm_pvalue(M[:, 2])

    def test_identical_columns_max_vs_sum(self, rng):
        col = np.abs(rng.standard_normal(200))
        M = np.column_stack([col] * 3)
        assert global_test(M, [0, 1, 2], "max_abs") == global_test(M, [0, 1, 2], "sum_abs")

    def test_sum_square_bruteforce(self, rng):
        M = small_instance(rng, 3, 8)
        S = M.m_stats
        T = [sum(S[j, l] ** 2 for l in range(3)) for j in range(256)]
        assert global_test(M, [0, 1, 2], "sum_square") == count_pvalue(T, T[0])

    def test_sum_square_needs_two_sided(self, rng):
        M = small_instance(rng, 2, 6, alternative="greater")
        with pytest.raises(ValueError):
            global_test(M, [0, 1], "sumsq")

    @pytest.mark.parametrize("kind", ["max_abs", "sum_abs", "sum_square"])
    def test_combining_monotone(self, rng, kind):
        psi = CombiningFunction(kind)
        a = np.abs(rng.standard_normal((100, 5)))
        b = a + np.abs(rng.standard_normal((100, 5))) * (rng.random((100, 5)) < 0.5)
        assert np.all(psi(b) >= psi(a))

    def test_unknown_psi(self):
        with pytest.raises(ValueError):
            CombiningFunction("median")
        with pytest.raises(ValueError):
            CombiningFunction("mahalanobis")


class TestMaxT:
    def test_m1_reduction(self, rng):
        M = np.abs(rng.standard_normal((1000, 1)))
        M[0] = 2.2
        for alpha in (0.01, 0.05, 0.1):
            res = maxt_single_step(M, alpha)
            p = perm_pvalue(M[:, 0])
            assert res.adj_p[0] == p
            assert res.rejected[0] == (p <= np.floor(alpha * 1000) / 1000)

    def test_identical_columns(self, rng):
        col = np.abs(rng.standard_normal(500))
        M = np.column_stack([col] * 6)
        for fn in (maxt_single_step, maxt_step_down):
            res = fn(M)
            np.testing.assert_array_equal(res.adj_p, res.raw_p)

    def test_single_step_matches_closed_shortcut(self, rng):
        # the adjusted p-values of single-step bound the closed ones from above
        M = small_instance(rng, 5, 10)
        single = maxt_single_step(M).adj_p
        closed = closed_testing(M, "max_abs").adj_p
        assert np.all(closed <= single + 1e-15)

    @pytest.mark.parametrize("seed", range(8))
    def test_step_down_matches_subset_recursion(self, seed):
        rng = np.random.default_rng(seed)
        M = small_instance(rng, 5, 7)
        np.testing.assert_array_equal(maxt_step_down(M).adj_p, stepdown_recursive(M.m_stats))

    @pytest.mark.parametrize("seed", range(8))
    @pytest.mark.parametrize("alpha", [0.05, 0.2])
    def test_step_down_matches_iterative_removal(self, seed, alpha):
        rng = np.random.default_rng(seed)
        M = small_instance(rng, 6, 8)
        got = set(np.flatnonzero(maxt_step_down(M, alpha).rejected))
        assert got == stepdown_iterative(M.m_stats, alpha)

    def test_step_down_equals_single_step_when_nothing_rejected(self, rng):
        M = np.abs(rng.standard_normal((400, 5)))
        M[0] = 0.1
        a, b = maxt_single_step(M), maxt_step_down(M)
        assert not a.rejected.any()
        np.testing.assert_array_equal(a.rejected, b.rejected)

    @pytest.mark.parametrize("seed", range(20))
    def test_nesting(self, seed):
        rng = np.random.default_rng(seed)
        M = small_instance(rng, 6, 9)
        for alpha in (0.05, 0.2):
            ss, sd = maxt_single_step(M, alpha), maxt_step_down(M, alpha)
            assert np.all(sd.adj_p <= ss.adj_p)
            assert np.all(sd.rejected >= ss.rejected)

    def test_monotone_in_observed(self, rng):
        M = np.abs(rng.standard_normal((500, 6)))
        M[0] = rng.uniform(1, 3, 6)
        base = maxt_step_down(M).adj_p
        for l in range(6):
            bumped = M.copy()
            bumped[0, l] += 0.5
            adj = maxt_step_down(bumped).adj_p
            assert adj[l] <= base[l]

    def test_permutation_equivariance(self, rng):
        M = np.abs(rng.standard_normal((300, 7)))
        M[0] *= 2
        perm = rng.permutation(7)
        for fn in (maxt_single_step, maxt_step_down):
            a, b = fn(M), fn(M[:, perm])
            np.testing.assert_array_equal(b.adj_p, a.adj_p[perm])
            np.testing.assert_array_equal(b.raw_stat, a.raw_stat[perm])

    def test_result_invariants(self, rng):
        M = small_instance(rng, 6, 9)
        for res in (maxt_single_step(M, 0.1), maxt_step_down(M, 0.1), closed_testing(M, "sum_abs", 0.1)):
            assert np.all(res.adj_p >= res.raw_p)
            assert np.all((res.raw_p >= 1 / res.w) & (res.adj_p <= 1))
            np.testing.assert_array_equal(res.rejected, res.adj_p <= np.floor(0.1 * res.w) / res.w + 1e-12)

    def test_fwer_exchangeable_null(self):
        # columns are an exchangeable null: equicorrelated normals with symmetric flips
        rng = np.random.default_rng(99)
        reps, n, m, w, alpha = 5000, 20, 8, 200, 0.05
        signs = make_plan(n, w, seed=1).signs.astype(float)
        hits = 0
        for _ in range(reps):
            common = rng.standard_normal((n, 1))
            E = 0.6 * common + 0.8 * rng.standard_normal((n, m))
            M = np.abs(signs @ E) / np.sqrt(n)
            hits += maxt_single_step(M, alpha).rejected.any()
        assert hits / reps <= alpha + 2 * np.sqrt(alpha * (1 - alpha) / reps)

    def test_alpha_range(self):
        with pytest.raises(ValueError):
            maxt_single_step(np.ones((5, 2)), 1.5)


class TestClosedTesting:
    def test_m1(self, rng):
        M = np.abs(rng.standard_normal((100, 1)))
        assert closed_testing(M).adj_p[0] == perm_pvalue(M[:, 0])

    @pytest.mark.parametrize("psi", ["max_abs", "sum_abs", "sum_square"])
    def test_m2_definition(self, rng, psi):
        M = np.abs(rng.standard_normal((300, 2)))
        M[0] = [1.8, 1.2]
        adj = closed_testing(M, psi).adj_p
        p12 = global_test(M, [0, 1], psi)
        assert adj[0] == max(perm_pvalue(M[:, 0]), p12)
        assert adj[1] == max(perm_pvalue(M[:, 1]), p12)

    @pytest.mark.parametrize("psi,fn", [
        ("max_abs", max),
        ("sum_abs", sum),
        ("sum_square", lambda v: sum(t * t for t in v)),
    ])
    def test_matches_loop_oracle(self, rng, psi, fn):
        M = small_instance(rng, 4, 7)
        np.testing.assert_array_equal(closed_testing(M, psi).adj_p, closed_testing_loop(M.m_stats, fn))

    @pytest.mark.parametrize("seed", range(10))
    def test_max_equals_step_down(self, seed):
        M = small_instance(np.random.default_rng(seed), 5, 8)
        np.testing.assert_array_equal(closed_testing(M, "max_abs").adj_p, maxt_step_down(M).adj_p)

    def test_too_many(self):
        with pytest.raises(TooManyHypotheses):
            closed_testing(np.ones((4, 21)))


class TestMahalanobis:
    def test_m1_equals_two_sided(self, rng):
        S = rng.standard_normal((500, 1))
        assert mahalanobis_global(S, [[2.0]]) == perm_pvalue(np.abs(S[:, 0]))

    def test_identity_cov_is_sum_square(self, rng):
        M = small_instance(rng, 3, 8, standardized=False, alternative="greater")
        S = M.m_stats
        expected = global_test(np.abs(S), [0, 1, 2], "sum_square")
        assert mahalanobis_global(S, np.eye(3)) == expected

    def test_dense_oracle(self, rng):
        S = small_instance(rng, 3, 8, standardized=False, alternative="greater").m_stats
        cov = flip_covariance(S)
        # independent construction of the ridged covariance
        centered = S - S.mean(axis=0)
        ref_cov = centered.T @ centered / (S.shape[0] - 1)
        ref_cov += 1e-8 * np.trace(ref_cov) / 3 * np.eye(3)
        np.testing.assert_allclose(cov, ref_cov, rtol=1e-12)
        inv = np.linalg.inv(ref_cov)
        T = [float(s @ inv @ s) for s in S]
        assert mahalanobis_global(S, cov) == count_pvalue(T, T[0])

    def test_singular(self):
        with pytest.raises(SingularCovariance):
            mahalanobis_global(np.ones((10, 2)), np.zeros((2, 2)))

    def test_shape_check(self):
        with pytest.raises(ValueError):
            mahalanobis_global(np.ones((10, 2)), np.eye(3))

    def test_global_result(self, rng):
        M = np.abs(rng.standard_normal((200, 3)))
        res = global_result(M, "max_abs", 0.05)
        assert res.method == "global_only"
        np.testing.assert_array_equal(res.adj_p, np.maximum(raw_pvalues(M), res.global_p))


class TestHolm:
    def test_m1(self):
        assert bonferroni_holm([0.3])[0] == 0.3

    def test_hand_example(self):
        np.testing.assert_allclose(bonferroni_holm([0.01, 0.04]), [0.02, 0.04])

    @pytest.mark.parametrize("seed", range(10))
    def test_definition_oracle(self, seed):
        p = np.random.default_rng(seed).random(12) ** 3
        np.testing.assert_allclose(bonferroni_holm(p), holm_definition(list(p)), rtol=1e-14)

    def test_capped(self):
        assert np.all(bonferroni_holm([0.5, 0.6, 0.9]) <= 1)
