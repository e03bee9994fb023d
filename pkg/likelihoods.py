"""Observation models in probabilistic form p(y|f) and measurement form y = h(f, sigma).

Every method is vectorised over leading axes of f: `f` has shape (..., latent_dim),
`sigma` has shape (..., noise_dim). Observations `y` are (obs_dim,) vectors.
"""

import abc
import logging
from dataclasses import dataclass, fields, replace
from typing import ClassVar, Dict, Tuple

import numpy as np
from scipy import linalg, special

from cubature import CubatureRule, transform_points
from errors import LikelihoodError, SkippedUpdate
from gaussian import robust_cholesky

LOGGER = logging.getLogger(__name__)

LOG_2PI = np.log(2 * np.pi)
VARIANCE_FLOOR = 1e-8


def softplus(x):
    return np.logaddexp(0.0, x)


def _weighted_exponentials(weights: np.ndarray, log_values: np.ndarray):
    """Split sum_i w_i exp(a_i) into exp(a_max) * sum_i r_i for stable normalisers."""
    a_max = np.max(log_values)
    if not np.isfinite(a_max):
        raise SkippedUpdate("likelihood is zero at every cubature point")
    return a_max, weights * np.exp(log_values - a_max)


class Likelihood(abc.ABC):
    variant: ClassVar[str] = ""
    latent_dim: ClassVar[int] = 1
    obs_dim: ClassVar[int] = 1
    noise_dim: ClassVar[int] = 1
    trainable: ClassVar[Tuple[str, ...]] = ()
    conjugate: ClassVar[bool] = False

    @abc.abstractmethod
    def log_density(self, y, f) -> np.ndarray:
        """log p(y | f)."""

    @abc.abstractmethod
    def conditional_moments(self, f) -> Tuple[np.ndarray, np.ndarray]:
        """(E[y|f], Cov[y|f]) with shapes (..., d) and (..., d, d)."""

    @abc.abstractmethod
    def measurement(self, f, sigma) -> np.ndarray:
        """h(f, sigma)."""

    @abc.abstractmethod
    def jacobians(self, f, sigma) -> Tuple[np.ndarray, np.ndarray]:
        """(dh/df, dh/dsigma) with shapes (..., d, m) and (..., d, d)."""

    def measurement_target(self, y) -> np.ndarray:
        """Observation expressed on the scale of E[y|f]."""
        return np.atleast_1d(np.asarray(y, dtype=float))

    # cubature-based integrals; conjugate models override with closed forms

    def log_expected_density(self, y, mean, cov, rule: CubatureRule, power: float = 1.0) -> float:
        """log of the integral of p(y|f)^power N(f | mean, cov)."""
        f = transform_points(rule, mean, cov)
        a_max, r = _weighted_exponentials(rule.weights, power * self.log_density(y, f))
        total = r.sum()
        if not total > 0:
            return -np.inf
        return float(a_max + np.log(total))

    def tilted_moments(self, y, mean, cov, rule: CubatureRule, power: float = 1.0):
        """(log Z, mean, cov) of the tilted distribution p(y|f)^power N(f | mean, cov) / Z."""
        f = transform_points(rule, mean, cov)
        a_max, r = _weighted_exponentials(rule.weights, power * self.log_density(y, f))
        total = r.sum()
        if not (np.isfinite(total) and total > 0):
            raise SkippedUpdate(f"tilted normaliser not positive ({total:g})")
        m_hat = r @ f / total
        dev = f - m_hat
        c_hat = (r[:, None] * dev).T @ dev / total
        return float(a_max + np.log(total)), m_hat, 0.5 * (c_hat + c_hat.T)

    def expected_log_density(self, y, mean, cov, rule: CubatureRule):
        """(E[log p(y|f)], gradient, Hessian) w.r.t. the mean of N(f | mean, cov)."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        chol = robust_cholesky(np.atleast_2d(cov))
        f = mean[None, :] + rule.points @ chol.T
        logp = self.log_density(y, f)
        w = rule.weights * logp
        value = float(w.sum())
        x = rule.points
        eye = np.eye(mean.shape[0])
        first = x.T @ w
        second = (x * w[:, None]).T @ x - value * eye
        grad = linalg.solve_triangular(chol, first, lower=True, trans="T")
        tmp = linalg.solve_triangular(chol, second, lower=True, trans="T")
        hess = linalg.solve_triangular(chol, tmp.T, lower=True, trans="T")
        return value, grad, 0.5 * (hess + hess.T)

    def statistical_linearisation(self, mean, cov, rule: CubatureRule):
        """(mu, S, C): E[y], Cov[y] and Cov[f, y] under f ~ N(mean, cov), additive-noise form."""
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        f = transform_points(rule, mean, cov)
        cond_mean, cond_cov = self.conditional_moments(f)
        w = rule.weights
        mu = w @ cond_mean
        dev = cond_mean - mu
        S = (dev * w[:, None]).T @ dev + np.tensordot(w, cond_cov, axes=(0, 0))
        C = ((f - mean) * w[:, None]).T @ dev
        return mu, 0.5 * (S + S.T), C

    def predictive_log_density(self, y, mean, cov, rule: CubatureRule) -> float:
        return self.log_expected_density(y, mean, cov, rule, power=1.0)

    def predictive_mean(self, mean, cov, rule: CubatureRule) -> np.ndarray:
        f = transform_points(rule, mean, cov)
        return rule.weights @ self.conditional_moments(f)[0]

    # parameters

    def unconstrained(self) -> np.ndarray:
        return np.log([getattr(self, name) for name in self.trainable]).astype(float)

    def with_unconstrained(self, theta) -> "Likelihood":
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != len(self.trainable):
            raise LikelihoodError(f"{self.variant} expects {len(self.trainable)} parameters, got {theta.shape[0]}")
        return replace(self, **{name: float(np.exp(v)) for name, v in zip(self.trainable, theta)})

    def parameter_names(self):
        return list(self.trainable)

    def to_dict(self) -> Dict:
        out = {"variant": self.variant}
        out.update({f.name: getattr(self, f.name) for f in fields(self)})
        return out


@dataclass(frozen=True)
class Gaussian(Likelihood):
    variance: float = 1.0

    variant: ClassVar[str] = "Gaussian"
    trainable: ClassVar[Tuple[str, ...]] = ("variance",)
    conjugate: ClassVar[bool] = True

    def __post_init__(self):
        if not self.variance > 0:
            raise LikelihoodError(f"Gaussian variance must be positive, got {self.variance}")

    def log_density(self, y, f):
        f = np.asarray(f, dtype=float)
        y = np.atleast_1d(y)[0]
        return -0.5 * (LOG_2PI + np.log(self.variance)) - 0.5 * (y - f[..., 0]) ** 2 / self.variance

    def conditional_moments(self, f):
        f = np.asarray(f, dtype=float)
        return f[..., :1].copy(), np.full(f.shape[:-1] + (1, 1), self.variance)

    def measurement(self, f, sigma):
        return np.asarray(f, dtype=float)[..., :1] + np.sqrt(self.variance) * np.asarray(sigma, dtype=float)[..., :1]

    def jacobians(self, f, sigma):
        shape = np.asarray(f).shape[:-1] + (1, 1)
        return np.ones(shape), np.full(shape, np.sqrt(self.variance))

    def log_expected_density(self, y, mean, cov, rule=None, power=1.0):
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        y = float(np.ravel(y)[0])
        var = self.variance / power + v
        return float(0.5 * (1 - power) * (LOG_2PI + np.log(self.variance)) - 0.5 * np.log(power)
                     - 0.5 * (LOG_2PI + np.log(var)) - 0.5 * (y - m) ** 2 / var)

    def tilted_moments(self, y, mean, cov, rule=None, power=1.0):
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        y_obs = float(np.ravel(y)[0])
        c_hat = 1.0 / (1.0 / v + power / self.variance)
        m_hat = c_hat * (m / v + power * y_obs / self.variance)
        log_z = self.log_expected_density(y, mean, cov, power=power)
        return log_z, np.array([m_hat]), np.array([[c_hat]])

    def expected_log_density(self, y, mean, cov, rule=None):
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        y = float(np.ravel(y)[0])
        value = -0.5 * (LOG_2PI + np.log(self.variance)) - 0.5 * ((y - m) ** 2 + v) / self.variance
        return value, np.array([(y - m) / self.variance]), np.array([[-1.0 / self.variance]])

    def predictive_mean(self, mean, cov, rule=None):
        return np.atleast_1d(np.asarray(mean, dtype=float))[:1].copy()


@dataclass(frozen=True)
class Poisson(Likelihood):
    """Counts with log-intensity f; the mean count of a bin is binsize * exp(f)."""

    binsize: float = 1.0

    variant: ClassVar[str] = "Poisson"

    def _check_counts(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not np.all(np.isfinite(y)) or np.any(y < 0) or np.any(y != np.round(y)):
            raise LikelihoodError(f"Poisson observations must be non-negative integers, got {y.tolist()}")
        return y[0]

    def _rate(self, f):
        return self.binsize * np.exp(np.asarray(f, dtype=float)[..., 0])

    def log_density(self, y, f):
        y = self._check_counts(y)
        f = np.asarray(f, dtype=float)[..., 0]
        return y * (f + np.log(self.binsize)) - self.binsize * np.exp(f) - special.gammaln(y + 1)

    def conditional_moments(self, f):
        rate = self._rate(f)
        return rate[..., None], np.maximum(rate, VARIANCE_FLOOR)[..., None, None]

    def measurement(self, f, sigma):
        rate = self._rate(f)
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        return (rate + np.sqrt(np.maximum(rate, VARIANCE_FLOOR)) * sigma)[..., None]

    def jacobians(self, f, sigma):
        rate = self._rate(f)
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        root = np.sqrt(np.maximum(rate, VARIANCE_FLOOR))
        droot = np.where(rate > VARIANCE_FLOOR, 0.5 * root, 0.0)
        return (rate + droot * sigma)[..., None, None], root[..., None, None]

    def expected_log_density(self, y, mean, cov, rule=None):
        y = self._check_counts(y)
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        expected_rate = self.binsize * np.exp(m + 0.5 * v)
        value = y * (m + np.log(self.binsize)) - expected_rate - special.gammaln(y + 1)
        return float(value), np.array([y - expected_rate]), np.array([[-expected_rate]])

    def predictive_mean(self, mean, cov, rule=None):
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        return np.array([self.binsize * np.exp(m + 0.5 * v)])


class _Bernoulli(Likelihood):
    """Binary labels; y == 1 is the positive class, 0 or -1 the negative class."""

    def _check_label(self, y):
        y = np.atleast_1d(np.asarray(y, dtype=float))
        if not np.all(np.isin(y, (-1.0, 0.0, 1.0))):
            raise LikelihoodError(f"{self.variant} labels must be -1, 0 or 1, got {y.tolist()}")
        return y

    def _prob(self, f):
        raise NotImplementedError

    def _log_prob(self, f):
        raise NotImplementedError

    def _prob_derivative(self, f):
        raise NotImplementedError

    def measurement_target(self, y):
        return (self._check_label(y) == 1).astype(float)

    def log_density(self, y, f):
        f = np.asarray(f, dtype=float)[..., 0]
        positive = self._check_label(y)[0] == 1
        return self._log_prob(f) if positive else self._log_prob(-f)

    def _variance(self, f):
        return np.maximum(self._prob(f) * self._prob(-f), VARIANCE_FLOOR)

    def conditional_moments(self, f):
        f = np.asarray(f, dtype=float)[..., 0]
        return self._prob(f)[..., None], self._variance(f)[..., None, None]

    def measurement(self, f, sigma):
        f = np.asarray(f, dtype=float)[..., 0]
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        return (self._prob(f) + np.sqrt(self._variance(f)) * sigma)[..., None]

    def jacobians(self, f, sigma):
        f = np.asarray(f, dtype=float)[..., 0]
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        psi = self._prob(f)
        dpsi = self._prob_derivative(f)
        raw = psi * self._prob(-f)
        root = np.sqrt(self._variance(f))
        droot = np.where(raw > VARIANCE_FLOOR, (1 - 2 * psi) * dpsi / (2 * root), 0.0)
        return (dpsi + droot * sigma)[..., None, None], root[..., None, None]


@dataclass(frozen=True)
class BernoulliLogit(_Bernoulli):
    variant: ClassVar[str] = "BernoulliLogit"

    def _prob(self, f):
        return special.expit(f)

    def _log_prob(self, f):
        return special.log_expit(f)

    def _prob_derivative(self, f):
        return special.expit(f) * special.expit(-f)


@dataclass(frozen=True)
class BernoulliProbit(_Bernoulli):
    variant: ClassVar[str] = "BernoulliProbit"

    def _prob(self, f):
        return special.ndtr(f)

    def _log_prob(self, f):
        return special.log_ndtr(f)

    def _prob_derivative(self, f):
        return np.exp(-0.5 * np.asarray(f) ** 2 - 0.5 * LOG_2PI)

    def predictive_mean(self, mean, cov, rule=None):
        m = float(np.ravel(mean)[0])
        v = float(np.ravel(cov)[0])
        return np.array([special.ndtr(m / np.sqrt(1.0 + v))])


@dataclass(frozen=True)
class Heteroscedastic(Likelihood):
    """y = f1 + softplus(f2 - shift) * sigma."""

    shift: float = 0.5

    variant: ClassVar[str] = "Heteroscedastic"
    latent_dim: ClassVar[int] = 2

    def _scale(self, f2):
        return softplus(f2 - self.shift)

    def log_density(self, y, f):
        f = np.asarray(f, dtype=float)
        y = np.atleast_1d(y)[0]
        scale = self._scale(f[..., 1])
        return -0.5 * LOG_2PI - np.log(scale) - 0.5 * (y - f[..., 0]) ** 2 / scale ** 2

    def conditional_moments(self, f):
        f = np.asarray(f, dtype=float)
        return f[..., :1].copy(), (self._scale(f[..., 1]) ** 2)[..., None, None]

    def measurement(self, f, sigma):
        f = np.asarray(f, dtype=float)
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        return (f[..., 0] + self._scale(f[..., 1]) * sigma)[..., None]

    def jacobians(self, f, sigma):
        f = np.asarray(f, dtype=float)
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        j_f = np.stack([np.ones_like(f[..., 0]), special.expit(f[..., 1] - self.shift) * sigma], axis=-1)
        return j_f[..., None, :], self._scale(f[..., 1])[..., None, None]

    def predictive_mean(self, mean, cov, rule=None):
        return np.atleast_1d(np.asarray(mean, dtype=float))[:1].copy()


@dataclass(frozen=True)
class ProductAudio(Likelihood):
    """y = sum_i sub_i * softplus(amp_i - shift) + noise, latents ordered (sub_1..sub_c, amp_1..amp_c)."""

    components: int = 3
    variance: float = 0.1
    shift: float = 0.0

    variant: ClassVar[str] = "ProductAudio"
    trainable: ClassVar[Tuple[str, ...]] = ("variance",)

    def __post_init__(self):
        if int(self.components) < 1:
            raise LikelihoodError(f"ProductAudio needs at least one component, got {self.components}")
        if not self.variance > 0:
            raise LikelihoodError(f"ProductAudio variance must be positive, got {self.variance}")

    @property
    def latent_dim(self) -> int:
        return 2 * int(self.components)

    def _signal(self, f):
        f = np.asarray(f, dtype=float)
        c = int(self.components)
        return np.sum(f[..., :c] * softplus(f[..., c:] - self.shift), axis=-1)

    def log_density(self, y, f):
        y = np.atleast_1d(y)[0]
        return -0.5 * (LOG_2PI + np.log(self.variance)) - 0.5 * (y - self._signal(f)) ** 2 / self.variance

    def conditional_moments(self, f):
        signal = self._signal(f)
        return signal[..., None], np.full(signal.shape + (1, 1), self.variance)

    def measurement(self, f, sigma):
        sigma = np.asarray(sigma, dtype=float)[..., 0]
        return (self._signal(f) + np.sqrt(self.variance) * sigma)[..., None]

    def jacobians(self, f, sigma):
        f = np.asarray(f, dtype=float)
        c = int(self.components)
        amp = f[..., c:] - self.shift
        j_f = np.concatenate([softplus(amp), f[..., :c] * special.expit(amp)], axis=-1)
        return j_f[..., None, :], np.full(f.shape[:-1] + (1, 1), np.sqrt(self.variance))


LIKELIHOODS = {
    cls.variant: cls for cls in (Gaussian, Poisson, BernoulliLogit, BernoulliProbit, Heteroscedastic, ProductAudio)
}


def likelihood_from_dict(spec: Dict) -> Likelihood:
    spec = dict(spec)
    variant = spec.pop("variant", None)
    if variant not in LIKELIHOODS:
        raise LikelihoodError(f"unknown likelihood {variant!r}; expected one of {sorted(LIKELIHOODS)}")
    cls = LIKELIHOODS[variant]
    allowed = {f.name for f in fields(cls)}
    unknown = set(spec) - allowed
    if unknown:
        raise LikelihoodError(f"{variant} has no parameters {sorted(unknown)}")
    return cls(**spec)
