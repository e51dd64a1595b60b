import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sfb.errors import ConflictingCertainty, InvalidProbability, ZeroMass
from sfb.probability import (
    check_simplex,
    combine_binary,
    combine_multiclass,
    logit,
    project_to_simplex,
    sigmoid,
)

probs = st.floats(min_value=1e-6, max_value=1 - 1e-6)


def ac_posterior_by_enumeration(beta, xs, xu):
    """Pr[Y=1 | X_S=xs, X_U=xu] for the anti-causal generator, by brute force."""
    num = den = 0.0
    for y, ns, nu in itertools.product((-1, 1), (-1, 1), (-1, 1)):
        p = 0.5 * (0.75 if ns == 1 else 0.25) * (beta if nu == 1 else 1 - beta)
        if y * ns == xs and y * nu == xu:
            den += p
            if y == 1:
                num += p
    return num / den


class TestLogit:
    def test_symmetry_point(self):
        assert logit(0.5) == 0.0

    def test_three_to_one_odds(self):
        assert logit(0.75) == pytest.approx(math.log(3), abs=1e-15)

    def test_saturation(self):
        assert logit(1.0) == math.inf
        assert logit(0.0) == -math.inf
        assert sigmoid(math.inf) == 1.0
        assert sigmoid(-math.inf) == 0.0

    def test_rejects_out_of_range(self):
        with pytest.raises(InvalidProbability):
            logit(1.5)

    def test_roundtrip(self):
        p = np.linspace(1e-12, 1 - 1e-12, 10001)
        np.testing.assert_allclose(sigmoid(logit(p)), p, rtol=0, atol=1e-10)


class TestCombineBinary:
    def test_uninformative_unstable(self):
        assert combine_binary(0.75, 0.5, 0.5) == pytest.approx(0.75, abs=1e-15)

    def test_matches_enumerated_ac_posterior(self):
        expected = ac_posterior_by_enumeration(0.1, 1, 1)
        assert expected == pytest.approx(0.25, abs=1e-12)
        assert combine_binary(0.75, 0.1, 0.5) == pytest.approx(expected, abs=1e-12)

    def test_all_ac_cells(self):
        for beta in (0.1, 0.3, 0.7, 0.95):
            for xs, xu in itertools.product((-1, 1), repeat=2):
                ps = 0.75 if xs == 1 else 0.25
                pu = beta if xu == 1 else 1 - beta
                assert combine_binary(ps, pu, 0.5) == pytest.approx(
                    ac_posterior_by_enumeration(beta, xs, xu), abs=1e-12)

    def test_saturated_stable_dominates(self):
        assert combine_binary(1.0, 0.3, 0.5) == 1.0
        assert combine_binary(0.2, 0.0, 0.5) == 0.0

    def test_conflict_rejected(self):
        with pytest.raises(ConflictingCertainty):
            combine_binary(1.0, 0.0, 0.5)
        with pytest.raises(ConflictingCertainty):
            combine_binary(np.array([0.5, 0.0]), np.array([0.5, 1.0]), 0.5)

    def test_prior_must_be_interior(self):
        with pytest.raises(InvalidProbability):
            combine_binary(0.5, 0.5, 1.0)

    @given(probs, probs)
    def test_prior_as_unstable_is_identity(self, p, prior):
        assert combine_binary(p, prior, prior) == pytest.approx(p, rel=1e-9, abs=1e-12)

    @given(probs, probs, probs)
    def test_symmetric(self, a, b, prior):
        assert combine_binary(a, b, prior) == pytest.approx(combine_binary(b, a, prior), abs=1e-14)


class TestCombineMulticlass:
    def test_two_class_example(self):
        out = combine_multiclass([0.25, 0.75], [0.9, 0.1], [0.5, 0.5])
        np.testing.assert_allclose(out, [0.75, 0.25], atol=1e-15)

    def test_uniform_fixed_point(self):
        u = np.full(3, 1 / 3)
        np.testing.assert_allclose(combine_multiclass(u, u, u), u, atol=1e-15)

    def test_prior_cancels(self):
        rng = np.random.default_rng(0)
        ps = rng.dirichlet(np.ones(5), size=20)
        prior = rng.dirichlet(np.ones(5))
        np.testing.assert_allclose(combine_multiclass(ps, prior, prior), ps, atol=1e-12)

    def test_zero_mass(self):
        with pytest.raises(ZeroMass):
            combine_multiclass([1.0, 0.0], [0.0, 1.0], [0.5, 0.5])

    def test_agrees_with_binary_on_grid(self):
        grid = np.linspace(0.01, 0.99, 50)
        priors = np.linspace(0.1, 0.9, 9)
        ps, pu, pr = np.meshgrid(grid, grid, priors, indexing="ij")
        ps, pu, pr = ps.ravel(), pu.ravel(), pr.ravel()
        binary = combine_binary(ps, pu, pr)
        multi = combine_multiclass(np.stack([1 - ps, ps], 1), np.stack([1 - pu, pu], 1),
                                   np.stack([1 - pr, pr], 1))
        np.testing.assert_allclose(multi[:, 1], binary, rtol=0, atol=1e-12)


def brute_force_projection(v, step=1e-3):
    best, best_d = None, np.inf
    for a in np.arange(0, 1 + step / 2, step):
        x = np.array([a, 1 - a])
        d = np.sum((x - v) ** 2)
        if d < best_d:
            best, best_d = x, d
    return best


class TestProjection:
    def test_on_simplex(self):
        np.testing.assert_allclose(project_to_simplex([0.5, 0.5]), [0.5, 0.5])

    def test_against_grid_search(self):
        v = np.array([1.2, -0.2])
        np.testing.assert_allclose(project_to_simplex(v), brute_force_projection(v), atol=1e-3)
        np.testing.assert_allclose(project_to_simplex(v), [1.0, 0.0], atol=1e-15)

    def test_symmetric(self):
        np.testing.assert_allclose(project_to_simplex([2.0, 2.0, 2.0]), np.full(3, 1 / 3))

    @settings(max_examples=200)
    @given(st.lists(st.floats(-10, 10), min_size=2, max_size=8))
    def test_output_is_simplex_and_idempotent(self, v):
        p = project_to_simplex(v)
        check_simplex(p)
        np.testing.assert_allclose(project_to_simplex(p), p, atol=1e-12)

    def test_optimal_against_random_candidates(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            v = rng.normal(size=4) * 2
            p = project_to_simplex(v)
            cands = rng.dirichlet(np.ones(4), size=2000)
            assert np.sum((p - v) ** 2) <= np.min(np.sum((cands - v) ** 2, axis=1)) + 1e-12


def test_check_simplex_renormalizes_within_tolerance():
    out = check_simplex([0.5 + 4e-10, 0.5])
    assert out.sum() == pytest.approx(1.0, abs=1e-15)
    with pytest.raises(InvalidProbability):
        check_simplex([0.6, 0.5])
