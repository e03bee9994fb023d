"""Local site updates: power EP, extended EP, statistically-linearised EP and natural-gradient VI.

Sites are Gaussian factors exp(-0.5 f^T P f + b^T f) over the latent vector f at one
time step and are stored in natural parameters (P, b). A singular P describes a site
with infinite variance along its null space, which is how a linearisation that carries
no information about some latent function is represented.
"""

import logging
from dataclasses import dataclass, asdict
from typing import Dict, Optional

import numpy as np

from cubature import CubatureRule, rule_from_tag
from errors import CavityNotPSD, CholeskyError, ConfigError, SkippedUpdate
from gaussian import GaussianMoments, inv_psd, solve_psd, symmetrise
from likelihoods import Likelihood

LOGGER = logging.getLogger(__name__)

RULES = ("PEP", "EEP", "SLEP", "CVI")
SMALL_ALPHA = 0.01
ACTIVE_TOL = 1e-12
MAX_CONDITION = 1e14

Cavity = GaussianMoments


@dataclass(frozen=True)
class Site:
    precision: np.ndarray
    nat1: np.ndarray

    @classmethod
    def from_moments(cls, mean, cov) -> "Site":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = symmetrise(np.atleast_2d(np.asarray(cov, dtype=float)))
        if not np.all(np.isfinite(cov)) or np.linalg.cond(cov) > MAX_CONDITION:
            raise SkippedUpdate("site covariance is singular")
        precision = symmetrise(np.linalg.inv(cov))
        return cls(precision=precision, nat1=precision @ mean)

    @classmethod
    def inactive(cls, dim: int) -> "Site":
        return cls(precision=np.zeros((dim, dim)), nat1=np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.nat1.shape[0]

    def active_dims(self) -> np.ndarray:
        diag = np.abs(np.diag(self.precision))
        scale = max(1.0, float(np.max(np.abs(self.precision), initial=0.0)))
        return diag > ACTIVE_TOL * scale

    @property
    def cov(self) -> np.ndarray:
        """Site covariance; inactive dimensions carry infinite variance."""
        active = self.active_dims()
        cov = np.zeros((self.dim, self.dim))
        if active.any():
            block = self.precision[np.ix_(active, active)]
            cov[np.ix_(active, active)] = symmetrise(np.linalg.inv(block))
        cov[~active, ~active] = np.inf
        return cov

    @property
    def mean(self) -> np.ndarray:
        active = self.active_dims()
        mean = np.zeros(self.dim)
        if active.any():
            mean[active] = np.linalg.solve(self.precision[np.ix_(active, active)], self.nat1[active])
        return mean

    def marginal_natural(self):
        """Per-dimension (precision, nat1) of the site's marginals.

        Taken from the site moments pinv(P) and pinv(P) b; dimensions along which the
        site has infinite variance get (0, 0).
        """
        eigval, eigvec = np.linalg.eigh(self.precision)
        scale = max(1.0, float(np.max(np.abs(eigval), initial=0.0)))
        null = np.abs(eigval) <= ACTIVE_TOL * scale
        inv = np.zeros_like(eigval)
        inv[~null] = 1.0 / eigval[~null]
        cov = (eigvec * inv) @ eigvec.T
        var = np.diag(cov)
        unbounded = np.any(np.abs(eigvec[:, null]) > np.sqrt(ACTIVE_TOL), axis=1)
        bounded = ~unbounded & (var != 0)
        precision = np.zeros(self.dim)
        nat1 = np.zeros(self.dim)
        precision[bounded] = 1.0 / var[bounded]
        nat1[bounded] = (cov @ self.nat1)[bounded] / var[bounded]
        return precision, nat1

    def natural_vector(self) -> np.ndarray:
        return np.concatenate([self.nat1, self.precision.ravel()])


def damp(new: Site, previous: Optional[Site], damping: float) -> Site:
    """Blend natural parameters: previous + damping * (new - previous)."""
    if previous is None or damping >= 1.0:
        return new
    return Site(
        precision=symmetrise((1 - damping) * previous.precision + damping * new.precision),
        nat1=(1 - damping) * previous.nat1 + damping * new.nat1,
    )


@dataclass(frozen=True)
class RuleConfig:
    rule: str = "PEP"
    cubature: Optional[str] = "gh20"
    alpha: float = 1.0
    damping: float = 1.0

    def __post_init__(self):
        rule = str(self.rule).upper()
        object.__setattr__(self, "rule", rule)
        if rule not in RULES:
            raise ConfigError(f"unknown rule {self.rule!r}; expected one of {RULES}")
        if rule == "PEP" and not 0 < self.alpha <= 1:
            raise ConfigError(f"PEP needs alpha in (0, 1], got {self.alpha}")
        if rule in ("EEP", "SLEP") and not 0 <= self.alpha <= 1:
            raise ConfigError(f"{rule} needs alpha in [0, 1], got {self.alpha}")
        if rule in ("PEP", "SLEP", "CVI") and not self.cubature:
            raise ConfigError(f"{rule} needs a cubature rule")
        if not 0 < self.damping <= 1:
            raise ConfigError(f"damping must be in (0, 1], got {self.damping}")

    @classmethod
    def preset(cls, name: str) -> "RuleConfig":
        try:
            return PRESETS[name.lower()]
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}; expected one of {sorted(PRESETS)}") from None

    def cubature_rule(self, dim: int) -> Optional[CubatureRule]:
        if not self.cubature:
            return None
        return rule_from_tag(self.cubature, dim)

    def to_dict(self) -> Dict:
        return asdict(self)


PRESETS = {
    "ep": RuleConfig("PEP", "gh20", 1.0),
    "pep": RuleConfig("PEP", "gh20", SMALL_ALPHA),
    "eep": RuleConfig("EEP", None, 1.0),
    "ekf": RuleConfig("EEP", None, 1.0),
    "eks": RuleConfig("EEP", None, 0.0),
    "uep": RuleConfig("SLEP", "ut5", 1.0),
    "ghep": RuleConfig("SLEP", "gh20", 1.0),
    "ukf": RuleConfig("SLEP", "ut5", 1.0),
    "uks": RuleConfig("SLEP", "ut5", 0.0),
    "ghkf": RuleConfig("SLEP", "gh20", 1.0),
    "ghks": RuleConfig("SLEP", "gh20", 0.0),
    "vi": RuleConfig("CVI", "gh20", 1.0),
    "cvi": RuleConfig("CVI", "gh20", 1.0),
}


def compute_cavity(posterior: GaussianMoments, site: Optional[Site], alpha: float) -> Cavity:
    """Remove a fraction alpha of the site from the posterior marginal.

    With more than one latent dimension the removal is element-wise: each marginal loses
    alpha times the matching marginal of the site, and site cross-terms are dropped.
    """
    if site is None or alpha == 0:
        return GaussianMoments(mean=posterior.mean.copy(), cov=posterior.cov.copy())
    var = np.diag(posterior.cov)
    site_precision, site_nat1 = site.marginal_natural()
    precision = 1.0 / var - alpha * site_precision
    nat1 = posterior.mean / var - alpha * site_nat1
    if np.any(precision <= 0) or not np.all(np.isfinite(precision)):
        with np.errstate(divide="ignore"):
            raise CavityNotPSD(1.0 / precision)
    cav_var = 1.0 / precision
    return GaussianMoments(mean=cav_var * nat1, cov=np.diag(cav_var))


def pep_update(cavity: Cavity, y, likelihood: Likelihood, alpha: float, cubature: CubatureRule) -> Site:
    if alpha <= 0:
        raise ValueError(f"power EP needs alpha > 0, got {alpha}")
    mean, cov = cavity.mean, cavity.cov
    _, m_hat, c_hat = likelihood.tilted_moments(y, mean, cov, cubature, power=alpha)
    cov_inv = inv_psd(cov)
    grad = cov_inv @ (m_hat - mean)
    # Hessian of log Z: the squared-gradient term cancels the outer product of (m_hat - mean)
    hess = symmetrise(cov_inv @ c_hat @ cov_inv - cov_inv)
    if not np.all(np.isfinite(hess)) or np.linalg.cond(hess) > MAX_CONDITION:
        raise SkippedUpdate("log-normaliser Hessian is singular")
    hess_inv = np.linalg.inv(hess)
    site_cov = -alpha * (cov + hess_inv)
    site_mean = mean - hess_inv @ grad
    return Site.from_moments(site_mean, site_cov)


def _linearised_site(mean, cov, jac, noise_cov, residual, alpha) -> Site:
    """Site of the linear-Gaussian model y ~ N(offset + jac f, noise_cov) with residual y - prediction at the cavity."""
    try:
        noise_inv = inv_psd(noise_cov)
        W = symmetrise(jac.T @ noise_inv @ jac)
        innovation_cov = noise_cov + alpha * jac @ cov @ jac.T
        gain = jac.T @ solve_psd(innovation_cov, residual)
    except CholeskyError as exc:
        raise SkippedUpdate(f"linearised noise covariance not positive definite: {exc}") from exc
    if not np.max(np.abs(W), initial=0.0) > 0:
        raise SkippedUpdate("linearisation carries no information about the latent")
    nat1 = W @ mean + (np.eye(mean.shape[0]) + alpha * W @ cov) @ gain
    return Site(precision=W, nat1=nat1)


def eep_update(cavity: Cavity, y, likelihood: Likelihood, alpha: float) -> Site:
    """First-order Taylor linearisation of h at (cavity mean, 0)."""
    zero = np.zeros(likelihood.noise_dim)
    h = likelihood.measurement(cavity.mean, zero)
    j_f, j_sigma = likelihood.jacobians(cavity.mean, zero)
    residual = likelihood.measurement_target(y) - h
    return _linearised_site(cavity.mean, cavity.cov, j_f, j_sigma @ j_sigma.T, residual, alpha)


def slep_update(cavity: Cavity, y, likelihood: Likelihood, alpha: float, cubature: CubatureRule) -> Site:
    """Statistical linear regression of E[y|f] under the cavity."""
    mean, cov = cavity.mean, cavity.cov
    mu, S, C = likelihood.statistical_linearisation(mean, cov, cubature)
    cov_inv = inv_psd(cov)
    omega = C.T @ cov_inv
    noise_cov = symmetrise(S - C.T @ cov_inv @ C)
    residual = likelihood.measurement_target(y) - mu
    return _linearised_site(mean, cov, omega, noise_cov, residual, alpha)


def cvi_update(posterior: GaussianMoments, y, likelihood: Likelihood, cubature: CubatureRule,
               previous_site: Optional[Site] = None, damping: float = 1.0) -> Site:
    _, grad, hess = likelihood.expected_log_density(y, posterior.mean, posterior.cov, cubature)
    if not np.all(np.isfinite(hess)) or np.max(np.linalg.eigvalsh(hess)) >= 0:
        raise SkippedUpdate("expected log-likelihood is not locally concave")
    new = Site(precision=symmetrise(-hess), nat1=grad - hess @ posterior.mean)
    return damp(new, previous_site, damping)


def local_update(config: RuleConfig, likelihood: Likelihood, y, marginal: GaussianMoments,
                 site: Optional[Site], cubature: Optional[CubatureRule], alpha: Optional[float] = None) -> Site:
    """One site update from a marginal of f; `alpha` overrides the configured power (first pass uses 1)."""
    alpha = config.alpha if alpha is None else alpha
    if config.rule == "CVI":
        return cvi_update(marginal, y, likelihood, cubature, site, config.damping)
    cavity = compute_cavity(marginal, site, alpha)
    if config.rule == "PEP":
        new = pep_update(cavity, y, likelihood, alpha, cubature)
    elif config.rule == "EEP":
        new = eep_update(cavity, y, likelihood, alpha)
    else:
        new = slep_update(cavity, y, likelihood, alpha, cubature)
    return damp(new, site, config.damping)
