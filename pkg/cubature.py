"""Gaussian cubature rules: Gauss-Hermite tensor grids and the symmetric degree-5 (UT5) rule."""

import logging
import re
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Tuple

import numpy as np
from scipy import linalg

from errors import CubatureBudgetError
from gaussian import robust_cholesky

LOGGER = logging.getLogger(__name__)

DEFAULT_GH_ORDER = 20
DEFAULT_POINT_BUDGET = 200_000
UT5_MIN_DIM = 4


@dataclass(frozen=True)
class CubatureRule:
    """Abscissae of the unit Gaussian N(0, I) and weights summing to one."""

    points: np.ndarray
    weights: np.ndarray
    order_tag: str

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def num_points(self) -> int:
        return self.points.shape[0]


@lru_cache(maxsize=None)
def hermite_nodes(order: int) -> Tuple[np.ndarray, np.ndarray]:
    """Probabilists' Gauss-Hermite nodes/weights.

    Nodes are the eigenvalues of the Jacobi matrix of the Hermite recurrence; weights are
    the Christoffel numbers 1 / sum_k p_k(x)^2 over the orthonormal polynomials, which keeps
    the tiny outer weights accurate to full relative precision.
    """
    if order < 1:
        raise ValueError(f"Gauss-Hermite order must be >= 1, got {order}")
    if order == 1:
        return np.zeros(1), np.ones(1)
    nodes = linalg.eigh_tridiagonal(np.zeros(order), np.sqrt(np.arange(1, order, dtype=float)),
                                    eigvals_only=True)
    # enforce exact symmetry about zero
    nodes = 0.5 * (nodes - nodes[::-1])
    p_prev, p = np.zeros(order), np.ones(order)
    total = np.ones(order)
    for k in range(order - 1):
        p_prev, p = p, (nodes * p - np.sqrt(k) * p_prev) / np.sqrt(k + 1)
        total += p ** 2
    weights = 1.0 / total
    weights = 0.5 * (weights + weights[::-1])
    weights = weights / weights.sum()
    nodes.flags.writeable = False
    weights.flags.writeable = False
    return nodes, weights


@lru_cache(maxsize=None)
def gauss_hermite(dim: int, order: int = DEFAULT_GH_ORDER, budget: int = DEFAULT_POINT_BUDGET) -> CubatureRule:
    if dim < 1:
        raise ValueError(f"cubature dimension must be >= 1, got {dim}")
    if order ** dim > budget:
        raise CubatureBudgetError(
            f"Gauss-Hermite grid of {order}^{dim} = {order ** dim} points exceeds the budget of {budget}")
    nodes, weights = hermite_nodes(order)
    grids = np.meshgrid(*([nodes] * dim), indexing="ij")
    wgrids = np.meshgrid(*([weights] * dim), indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=1)
    wts = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    return CubatureRule(points=points, weights=wts, order_tag=f"GH({order})")


@lru_cache(maxsize=None)
def ut5(dim: int) -> CubatureRule:
    """Fully symmetric degree-5 rule with 2 dim^2 + 1 points: origin, axial pairs and diagonal pairs at radius sqrt(3)."""
    if dim < 1:
        raise ValueError(f"cubature dimension must be >= 1, got {dim}")
    n = dim
    u = np.sqrt(3.0)
    points = [np.zeros(n)]
    weights = [(n * n - 7 * n + 18) / 18.0]
    for i in range(n):
        for sign in (1.0, -1.0):
            p = np.zeros(n)
            p[i] = sign * u
            points.append(p)
            weights.append((4.0 - n) / 18.0)
    for i in range(n):
        for j in range(i + 1, n):
            for si in (1.0, -1.0):
                for sj in (1.0, -1.0):
                    p = np.zeros(n)
                    p[i], p[j] = si * u, sj * u
                    points.append(p)
                    weights.append(1.0 / 36.0)
    return CubatureRule(points=np.array(points), weights=np.array(weights), order_tag="UT5")


def rule_from_tag(tag: str, dim: int) -> CubatureRule:
    """'gh20', 'gh<n>', 'ut5' or 'auto' (GH20 below four dimensions, UT5 from four)."""
    tag = tag.lower()
    if tag == "auto":
        return ut5(dim) if dim >= UT5_MIN_DIM else gauss_hermite(dim, DEFAULT_GH_ORDER)
    if tag == "ut5":
        return ut5(dim)
    match = re.fullmatch(r"gh(\d+)", tag)
    if match:
        return gauss_hermite(dim, int(match.group(1)))
    raise ValueError(f"unknown cubature {tag!r}; expected 'ghN', 'ut5' or 'auto'")


def transform_points(rule: CubatureRule, mean, cov, sqrt_cov: Optional[np.ndarray] = None) -> np.ndarray:
    """Sigma points mean + S x_i for S S^T = cov (Cholesky by default)."""
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    if mean.shape[0] != rule.dim:
        raise ValueError(f"rule is {rule.dim}-dimensional but mean has {mean.shape[0]} entries")
    S = robust_cholesky(np.atleast_2d(cov)) if sqrt_cov is None else np.atleast_2d(sqrt_cov)
    return mean[None, :] + rule.points @ S.T


def gaussian_expectation(rule: CubatureRule, g: Callable[[np.ndarray], np.ndarray], mean, cov,
                         sqrt_cov: Optional[np.ndarray] = None):
    """E[g(f)] for f ~ N(mean, cov); g maps an (N, dim) batch to an (N, ...) array."""
    f = transform_points(rule, mean, cov, sqrt_cov)
    values = np.asarray(g(f), dtype=float)
    return np.tensordot(rule.weights, values, axes=(0, 0))
