import itertools

import numpy as np
import pytest
from scipy import special

from cubature import gauss_hermite, gaussian_expectation, hermite_nodes, rule_from_tag, transform_points, ut5
from errors import CubatureBudgetError


def _normal_moment(power: int) -> float:
    """E[x^power] for x ~ N(0, 1)."""
    return 0.0 if power % 2 else float(special.factorial2(power - 1, exact=True)) if power else 1.0


def _multi_indices(dim: int, max_degree: int):
    for degree in range(max_degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), degree):
            yield np.bincount(np.array(combo, dtype=int), minlength=dim)


@pytest.mark.parametrize("dim", range(1, 7))
def test_ut5_integrates_all_monomials_up_to_degree_five(dim):
    rule = ut5(dim)
    assert rule.num_points == 2 * dim ** 2 + 1
    for powers in _multi_indices(dim, 5):
        estimate = rule.weights @ np.prod(rule.points ** powers, axis=1)
        expected = np.prod([_normal_moment(int(p)) for p in powers])
        assert estimate == pytest.approx(expected, abs=1e-10), powers


def test_gauss_hermite_20_is_exact_up_to_degree_39():
    nodes, weights = hermite_nodes(20)
    assert weights.sum() == pytest.approx(1.0, abs=1e-14)
    for power in range(0, 40):
        expected = _normal_moment(power)
        estimate = weights @ nodes ** power
        if expected:
            assert estimate == pytest.approx(expected, rel=1e-8), power
        else:
            assert abs(estimate) < 1e-8 * _normal_moment(power + 1), power


def test_gauss_hermite_nodes_match_numpy():
    nodes, weights = hermite_nodes(12)
    ref_nodes, ref_weights = np.polynomial.hermite_e.hermegauss(12)
    np.testing.assert_allclose(nodes, ref_nodes, atol=1e-12)
    np.testing.assert_allclose(weights, ref_weights / ref_weights.sum(), rtol=1e-10)


def test_gauss_hermite_tensor_grid_shape_and_weights():
    rule = gauss_hermite(2, 5)
    assert rule.points.shape == (25, 2)
    assert rule.weights.sum() == pytest.approx(1.0)
    assert rule.order_tag == "GH(5)"


def test_gauss_hermite_respects_the_point_budget():
    with pytest.raises(CubatureBudgetError, match="20\\^6"):
        gauss_hermite(6, 20)


@pytest.mark.parametrize("tag, dim, expected", [
    ("auto", 1, "GH(20)"),
    ("auto", 3, "GH(20)"),
    ("auto", 4, "UT5"),
    ("gh7", 2, "GH(7)"),
    ("UT5", 2, "UT5"),
])
def test_rule_from_tag(tag, dim, expected):
    assert rule_from_tag(tag, dim).order_tag == expected


def test_rule_from_tag_rejects_unknown_names():
    with pytest.raises(ValueError):
        rule_from_tag("simpson", 1)


@pytest.mark.parametrize("tag", ["gh20", "ut5"])
def test_gaussian_expectation_of_a_quadratic_form(tag):
    mean = np.array([0.3, -1.0, 2.0])
    A = np.array([[2.0, 0.5, 0.1], [0.5, 1.0, -0.3], [0.1, -0.3, 0.7]])
    cov = A @ A.T
    rule = rule_from_tag(tag, 3)
    M = np.array([[1.0, 0.2, 0.0], [0.2, 3.0, 0.4], [0.0, 0.4, 0.5]])
    value = gaussian_expectation(rule, lambda f: np.einsum("ni,ij,nj->n", f, M, f), mean, cov)
    assert value == pytest.approx(np.trace(M @ cov) + mean @ M @ mean, rel=1e-10)


def test_transform_points_checks_dimensions():
    with pytest.raises(ValueError):
        transform_points(ut5(2), np.zeros(3), np.eye(3))
