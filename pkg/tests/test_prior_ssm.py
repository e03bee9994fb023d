import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import linalg

from errors import KernelSpecError
from prior_ssm import (MATERN_ORDERS, KernelSpec, discretize, evaluate_kernel, matern, stack_latents,
                       stationary_prior, to_state_space)

LAGS = np.array([0.0, 0.05, 0.3, 1.0, 2.5, 7.0])

KERNELS = [
    KernelSpec("Matern12", variance=1.3, lengthscale=0.7),
    KernelSpec("Matern32", variance=0.8, lengthscale=1.5),
    KernelSpec("Matern52", variance=2.0, lengthscale=0.4),
    KernelSpec("Matern72", variance=1.0, lengthscale=2.2),
    KernelSpec("Cosine", variance=0.5, frequency=3.0),
    KernelSpec("QuasiPeriodic", variance=1.1, lengthscale=1.7, frequency=4.0),
    KernelSpec("Periodic", variance=0.9, lengthscale=1.0, period=2.0, harmonics=12),
    KernelSpec("Sum", components=(KernelSpec("Matern32", lengthscale=0.5), KernelSpec("Matern12", variance=0.3))),
    KernelSpec("Product", components=(KernelSpec("Matern52", lengthscale=3.0), KernelSpec("Cosine", frequency=2.0))),
    KernelSpec("Product", components=(KernelSpec("Periodic", period=1.0, harmonics=12),
                                      KernelSpec("Matern32", lengthscale=4.0))),
]


def _ssm_covariance(ssm, tau):
    return np.array([(ssm.H @ linalg.expm(ssm.F * lag) @ ssm.Pinf @ ssm.H.T)[0, 0] for lag in tau])


@pytest.mark.parametrize("kernel", KERNELS, ids=lambda k: k.variant + "-" + "-".join(c.variant for c in k.components))
def test_state_space_reproduces_covariance_function(kernel):
    ssm = to_state_space(kernel)
    np.testing.assert_allclose(_ssm_covariance(ssm, LAGS), evaluate_kernel(kernel, LAGS), rtol=1e-8, atol=1e-10)


@pytest.mark.parametrize("variant", sorted(MATERN_ORDERS))
def test_matern_stationary_covariance_solves_lyapunov(variant):
    ssm = to_state_space(KernelSpec(variant, variance=1.7, lengthscale=0.6))
    scale = np.max(np.abs(ssm.L @ ssm.Qc @ ssm.L.T))
    assert np.max(np.abs(ssm.lyapunov_residual())) < 1e-9 * scale
    assert np.all(np.linalg.eigvalsh(ssm.Pinf) > 0)
    assert ssm.Pinf[0, 0] == pytest.approx(1.7)
    assert ssm.state_dim == MATERN_ORDERS[variant] + 1


def test_periodic_truncation_improves_with_harmonics():
    lags = np.linspace(0, 3, 40)
    errors = []
    for harmonics in (3, 6, 12):
        kernel = KernelSpec("Periodic", lengthscale=0.8, period=1.5, harmonics=harmonics)
        errors.append(np.max(np.abs(_ssm_covariance(to_state_space(kernel), lags) - evaluate_kernel(kernel, lags))))
    assert errors[0] > errors[1] > errors[2]
    assert errors[2] < 1e-8


def test_discretize_zero_step_is_identity():
    ssm = to_state_space(matern(2))
    trans = discretize(ssm, 0.0)
    np.testing.assert_array_equal(trans.A, np.eye(3))
    np.testing.assert_array_equal(trans.Q, np.zeros((3, 3)))


def test_discretize_noise_keeps_the_prior_stationary():
    ssm = to_state_space(KernelSpec("Matern32", variance=2.0, lengthscale=0.3))
    trans = discretize(ssm, 0.25)
    np.testing.assert_allclose(trans.A @ ssm.Pinf @ trans.A.T + trans.Q, ssm.Pinf, atol=1e-12)
    assert np.all(np.linalg.eigvalsh(trans.Q) > -1e-12)


def test_discretize_caches_by_step():
    ssm = to_state_space(matern(1))
    assert discretize(ssm, 0.5) is discretize(ssm, 0.5)
    assert discretize(ssm, 0.5) is not discretize(ssm, 0.25)


@pytest.mark.parametrize("dt", [-1.0, np.inf, np.nan])
def test_discretize_rejects_bad_steps(dt):
    with pytest.raises(ValueError):
        discretize(to_state_space(matern(0)), dt)


def test_stack_latents_reads_each_block_into_its_own_row():
    ssm = stack_latents([matern(1), matern(2)])
    assert ssm.H.shape == (2, 5)
    np.testing.assert_array_equal(ssm.H, [[1, 0, 0, 0, 0], [0, 0, 1, 0, 0]])
    np.testing.assert_array_equal(stationary_prior(ssm).cov, ssm.Pinf)


def test_stack_latents_needs_a_kernel():
    with pytest.raises(KernelSpecError):
        stack_latents([])


@pytest.mark.parametrize("spec", [
    {"variant": "Matern42"},
    {"variant": "Matern32", "lengthscale": -1.0},
    {"variant": "Matern32", "variance": 0.0},
    {"variant": "Sum", "components": [{"variant": "Matern12"}]},
    {"variant": "Product", "components": [{"variant": "Sum", "components": [{"variant": "Matern12"}] * 2},
                                         {"variant": "Cosine"}]},
    {"variant": "Matern32", "period": 1.0, "colour": "red"},
    {"variant": "Matern32", "fixed": ["period"]},
    {"variant": "Periodic", "harmonics": 0},
    {"lengthscale": 1.0},
])
def test_invalid_kernel_specs_are_rejected(spec):
    with pytest.raises(KernelSpecError):
        KernelSpec.from_dict(spec)


def test_kernel_dict_form_survives_a_round_trip():
    kernel = KERNELS[-1]
    assert KernelSpec.from_dict(kernel.to_dict()) == kernel


def test_parameter_names_skip_fixed_values():
    kernel = KernelSpec.from_dict({"variant": "Sum", "components": [
        {"variant": "Matern52", "fixed": ["variance"]},
        {"variant": "Periodic", "period": 7.0, "fixed": ["period"]},
    ]})
    assert kernel.parameter_names() == ["sum[0].lengthscale", "sum[1].variance", "sum[1].lengthscale"]
    assert kernel.unconstrained().shape == (3,)


@given(st.lists(st.floats(min_value=-4, max_value=4), min_size=3, max_size=3))
def test_unconstrained_parameters_map_to_positive_values(theta):
    kernel = KernelSpec("QuasiPeriodic").with_unconstrained(theta)
    assert kernel.variance > 0 and kernel.lengthscale > 0 and kernel.frequency > 0
    np.testing.assert_allclose(kernel.unconstrained(), theta, atol=1e-12)


def test_with_unconstrained_checks_the_parameter_count():
    with pytest.raises(KernelSpecError):
        matern(1).with_unconstrained([0.0])


@pytest.mark.parametrize("kernel", KERNELS[:7], ids=lambda k: k.variant)
@pytest.mark.parametrize("dt1, dt2", [(0.1, 0.25), (0.7, 1.3)])
def test_transitions_compose_over_consecutive_steps(kernel, dt1, dt2):
    ssm = to_state_space(kernel)
    first, second, whole = discretize(ssm, dt1), discretize(ssm, dt2), discretize(ssm, dt1 + dt2)
    scale = np.max(np.abs(ssm.Pinf))
    np.testing.assert_allclose(whole.A, second.A @ first.A, rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(whole.Q, second.A @ first.Q @ second.A.T + second.Q, atol=1e-10 * scale)


def test_sum_kernel_variance_is_the_sum_of_its_parts():
    parts = (KernelSpec("Matern32", variance=0.7, lengthscale=0.5), KernelSpec("Cosine", variance=0.4, frequency=2.0),
             KernelSpec("Matern12", variance=0.3))
    ssm = to_state_space(KernelSpec("Sum", components=parts))
    prior = stationary_prior(ssm)
    assert (ssm.H @ prior.cov @ ssm.H.T)[0, 0] == pytest.approx(1.4)
    assert evaluate_kernel(KernelSpec("Sum", components=parts), np.zeros(1))[0] == pytest.approx(1.4)
