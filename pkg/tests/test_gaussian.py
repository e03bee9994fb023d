import logging

import numpy as np
import pytest

from errors import CholeskyError
from gaussian import clip_to_psd, robust_cholesky


def test_clip_leaves_psd_matrices_alone():
    cov = np.array([[2.0, 0.5], [0.5, 1.0]])
    out, repaired = clip_to_psd(cov)
    np.testing.assert_array_equal(out, cov)
    assert not repaired


def test_clip_repairs_an_indefinite_matrix():
    out, repaired = clip_to_psd(np.array([[-1.0, -0.9], [-0.9, -0.62]]))
    assert repaired
    assert np.min(np.linalg.eigvalsh(out)) > 0


def test_clip_does_not_flag_roundoff():
    v = np.array([1.0, -1.0]) / np.sqrt(2)
    cov = np.eye(2) - np.outer(v, v) * (1.0 + 1e-14)
    out, repaired = clip_to_psd(cov)
    assert not repaired
    assert np.min(np.linalg.eigvalsh(out)) >= 0


def test_jitter_escalation_is_a_warning(caplog):
    with caplog.at_level(logging.WARNING, logger="gaussian"):
        chol = robust_cholesky(np.ones((2, 2)))
    assert "cholesky needed jitter" in caplog.text
    np.testing.assert_allclose(chol @ chol.T, np.ones((2, 2)), atol=1e-8)


def test_cholesky_gives_up_past_the_jitter_ladder():
    with pytest.raises(CholeskyError):
        robust_cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))
