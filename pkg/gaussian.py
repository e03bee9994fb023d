"""Gaussian moment containers and the small linear-algebra helpers every module shares."""

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from errors import CholeskyError

LOGGER = logging.getLogger(__name__)

JITTER_START = 1e-10
JITTER_STOP = 1e-4


@dataclass(frozen=True)
class GaussianMoments:
    """Mean/covariance pair. Used for predictions, filtered and smoothed states, marginals and cavities."""

    mean: np.ndarray
    cov: np.ndarray

    @classmethod
    def create(cls, mean, cov) -> "GaussianMoments":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.atleast_2d(np.asarray(cov, dtype=float))
        return cls(mean=mean, cov=symmetrise(cov))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def project(self, H: np.ndarray) -> "GaussianMoments":
        """Marginal of f = H x."""
        return GaussianMoments(mean=H @ self.mean, cov=symmetrise(H @ self.cov @ H.T))


def symmetrise(mat: np.ndarray) -> np.ndarray:
    return 0.5 * (mat + mat.T)


def clip_to_psd(cov: np.ndarray):
    """(cov, repaired): negative eigenvalues raised to the jitter floor.

    PSD input comes back as is; `repaired` is False when the negative part was only roundoff.
    """
    cov = symmetrise(np.atleast_2d(np.asarray(cov, dtype=float)))
    eigval, eigvec = np.linalg.eigh(cov)
    if eigval[0] >= 0:
        return cov, False
    size = max(float(np.max(np.abs(eigval))), np.finfo(float).tiny)
    floor = JITTER_START * max(float(np.mean(np.abs(eigval))), np.finfo(float).tiny)
    clipped = symmetrise((eigvec * np.maximum(eigval, floor)) @ eigvec.T)
    return clipped, bool(eigval[0] < -JITTER_START * size)


def robust_cholesky(cov: np.ndarray, lower: bool = True) -> np.ndarray:
    """Cholesky factor with a jitter ladder of 1e-10..1e-4 times the mean diagonal."""
    cov = symmetrise(np.atleast_2d(np.asarray(cov, dtype=float)))
    try:
        return linalg.cholesky(cov, lower=lower)
    except linalg.LinAlgError:
        pass
    dim = cov.shape[0]
    scale = max(np.trace(cov) / dim, np.finfo(float).tiny)
    jitter = JITTER_START
    while jitter <= JITTER_STOP * (1 + 1e-9):
        try:
            chol = linalg.cholesky(cov + jitter * scale * np.eye(dim), lower=lower)
            LOGGER.warning("cholesky needed jitter %.1e x %.3g", jitter, scale)
            return chol
        except linalg.LinAlgError:
            jitter *= 10.0
    raise CholeskyError(f"Cholesky failed after jitter up to {JITTER_STOP:g} x trace/dim on a {dim}x{dim} matrix")


def inv_psd(cov: np.ndarray) -> np.ndarray:
    chol = robust_cholesky(cov)
    return symmetrise(linalg.cho_solve((chol, True), np.eye(cov.shape[0])))


def solve_psd(cov: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    chol = robust_cholesky(cov)
    return linalg.cho_solve((chol, True), rhs)
