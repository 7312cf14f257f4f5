import numpy as np
import pytest

from eigenbounds.synthetic import (
    ValidationResult,
    closest_holds,
    make_pencil,
    perturbation_sensitivity,
    random_pencil,
    ritz_pairs,
    run_validation,
    spectral_distance,
)


class TestPencils:
    def test_prescribed_spectrum(self):
        pencil = make_pencil([1.0, 2.0, 5.0], np.random.default_rng(0))
        assert np.allclose(pencil.spectrum, [1.0, 2.0, 5.0], atol=1e-10)
        assert np.allclose(pencil.a, pencil.a.T)
        gram = pencil.vectors.T @ pencil.b @ pencil.vectors
        assert np.allclose(gram, np.eye(3), atol=1e-10)

    def test_rejects_nonpositive_spectrum(self):
        with pytest.raises(ValueError, match="positive"):
            make_pencil([0.0, 1.0])

    def test_random_pencil_is_definite_and_sorted(self):
        rng = np.random.default_rng(1)
        for _ in range(5):
            pencil = random_pencil(rng, 7)
            assert np.all(np.linalg.eigvalsh(pencil.b) > 0)
            assert np.all(np.diff(pencil.spectrum) >= 0)
            assert pencil.spectrum[0] > 0

    def test_duplicate_eigenvalues_occur(self):
        rng = np.random.default_rng(2)
        gaps = [np.diff(random_pencil(rng, 6).spectrum).min()
                for _ in range(40)]
        assert min(gaps) < 1e-10


class TestRitzPairs:
    def test_values_bound_spectrum_from_above(self):
        rng = np.random.default_rng(3)
        pencil = random_pencil(rng, 8)
        pairs = ritz_pairs(pencil, rng.standard_normal((8, 4)))
        assert np.all(pairs.values >= pencil.spectrum[:4] - 1e-12)

    def test_projected_problem_solved_exactly(self):
        rng = np.random.default_rng(4)
        pencil = random_pencil(rng, 6)
        pairs = ritz_pairs(pencil, rng.standard_normal((6, 3)))
        va = pairs.vectors.T @ pencil.a @ pairs.vectors
        vb = pairs.vectors.T @ pencil.b @ pairs.vectors
        scale = np.abs(pairs.values).max()
        assert np.allclose(va, np.diag(pairs.values), atol=1e-10 * scale)
        assert np.allclose(vb, np.eye(3), atol=1e-12 * scale)

    def test_residual_norm_matches_direct_solve(self):
        rng = np.random.default_rng(5)
        pencil = random_pencil(rng, 5)
        pairs = ritz_pairs(pencil, rng.standard_normal((5, 2)))
        u = pairs.vectors[:, 1]
        w = np.linalg.solve(
            pencil.a, pencil.a @ u - pairs.values[1] * pencil.b @ u)
        assert pairs.etas[1] == pytest.approx(
            np.sqrt(w @ pencil.a @ w), rel=1e-10)

    def test_aligned_basis_has_tiny_residuals(self):
        rng = np.random.default_rng(6)
        pencil = random_pencil(rng, 6)
        pairs = ritz_pairs(pencil, pencil.vectors[:, :3])
        assert np.allclose(pairs.values, pencil.spectrum[:3], rtol=1e-12)
        assert np.all(pairs.etas <= 1e-6)

    def test_block_slicing(self):
        rng = np.random.default_rng(7)
        pencil = random_pencil(rng, 6)
        pairs = ritz_pairs(pencil, rng.standard_normal((6, 4)))
        block = pairs.block(2, 4)
        assert block.first == 2 and len(block.values) == 3
        assert block.values[0] == pairs.values[1]


class TestOracleHelpers:
    def test_spectral_distance_bruteforce(self):
        pencil = make_pencil([1.0, 4.0, 9.0], np.random.default_rng(8))
        lam_star = 3.0
        by_hand = min((lam - 3.0) ** 2 / lam for lam in pencil.spectrum)
        assert spectral_distance(pencil, lam_star) == pytest.approx(by_hand)

    def test_closest_holds_cases(self):
        lam = np.array([1.0, 4.0, 9.0])
        # first index: no left neighbour, right test only
        assert closest_holds(lam, 1, 1.5)
        assert not closest_holds(lam, 1, 2.5)
        # middle index: both sides active
        assert closest_holds(lam, 2, 4.5)
        assert not closest_holds(lam, 2, 1.5)
        # last index: no right neighbour
        assert closest_holds(lam, 3, 100.0)


class TestValidation:
    def test_small_sweep_is_clean(self):
        result = run_validation(trials=60, seed=5)
        assert result.ok and result.trials == 60
        assert result.kato_checks > 1000
        assert result.weinstein_checks > 20
        assert result.distance_checks > 100
        assert "ok" in result.summary()

    def test_violation_list_is_capped(self):
        result = ValidationResult()
        for k in range(80):
            result.flag(k, "kato", "detail")
        assert len(result.violations) == 51
        assert result.violations[-1]["kind"] == "truncated"
        assert not result.ok
        assert "violations" in result.summary()

    def test_deterministic_given_seed(self):
        a = run_validation(trials=20, seed=9)
        b = run_validation(trials=20, seed=9)
        assert (a.kato_checks, a.weinstein_checks, a.distance_checks) \
            == (b.kato_checks, b.weinstein_checks, b.distance_checks)

    def test_perturbed_pairs_do_break_the_bound(self):
        # exact projected pairs are a real hypothesis, not bookkeeping
        frac = perturbation_sensitivity(seed=3, trials=60)
        assert 0 < frac <= 1
