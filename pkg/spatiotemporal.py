"""Separable space-time GPs as m coupled temporal processes, one per spatial inducing location.

The joint state stacks the temporal state of every inducing point, so
A = I_m (x) A_t, Q = K_uu (x) Q_t and Pinf = K_uu (x) Pinf_t. An observation at
spatial location r reads the state through [k(r, r_u) K_uu^-1] (x) H_t.
"""

import logging
import threading
from dataclasses import dataclass
from typing import Dict, List

import numpy as np
from scipy import linalg
from scipy.spatial.distance import cdist

from cubature import rule_from_tag
from errors import ConfigError, KernelSpecError
from gaussian import GaussianMoments, robust_cholesky, symmetrise
from likelihoods import Likelihood
from prior_ssm import (MATERN_ORDERS, DiscreteTransition, KernelSpec, discretize, evaluate_kernel,
                       to_state_space)
from sequential_engine import SiteStore, TimeGrid, forward_pass, smoothing_pass
from site_rules import RuleConfig

LOGGER = logging.getLogger(__name__)

MODES = ("inducing", "grid")
DEFAULT_NUM_INDUCING = 15
KUU_JITTER = 1e-8
GRID_MATCH_TOL = 1e-9
LATTICE_SIZE = 100


@dataclass(frozen=True)
class SpatialConfig:
    kernel: KernelSpec
    inducing: np.ndarray
    mode: str = "inducing"

    def __post_init__(self):
        inducing = np.asarray(self.inducing, dtype=float)
        if inducing.ndim == 1:
            inducing = inducing[:, None]
        object.__setattr__(self, "inducing", inducing)
        if inducing.shape[0] < 1:
            raise ConfigError("at least one inducing location is required")
        if not np.all(np.isfinite(inducing)):
            raise ConfigError("inducing locations must be finite")
        if np.unique(inducing, axis=0).shape[0] != inducing.shape[0]:
            raise ConfigError("inducing locations must be distinct")
        if self.kernel.variant not in MATERN_ORDERS:
            raise KernelSpecError(f"spatial kernel must be a Matern, got {self.kernel.variant}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown spatial mode {self.mode!r}; expected one of {MODES}")

    @property
    def num_inducing(self) -> int:
        return self.inducing.shape[0]

    @classmethod
    def from_locations(cls, kernel: KernelSpec, r, num_inducing: int = DEFAULT_NUM_INDUCING,
                       mode: str = "inducing") -> "SpatialConfig":
        """Equally spaced quantiles of a 1D spatial coordinate; grid mode uses the distinct locations."""
        r = np.asarray(r, dtype=float)
        r = r[:, None] if r.ndim == 1 else r
        if mode == "grid":
            return cls(kernel=kernel, inducing=np.unique(r, axis=0), mode=mode)
        if r.shape[1] != 1:
            raise ConfigError("default inducing points need a 1D spatial coordinate; pass them explicitly")
        inducing = np.unique(np.quantile(r[:, 0], np.linspace(0.0, 1.0, num_inducing)))
        return cls(kernel=kernel, inducing=inducing, mode=mode)


class SpatioTemporalGP:
    """Same interface as MarkovGP: transition, initial_state, measurement_matrix and parameter transforms."""

    def __init__(self, spatial: SpatialConfig, temporal: KernelSpec, likelihood: Likelihood):
        if likelihood.latent_dim != 1:
            raise KernelSpecError(f"spatio-temporal models need a single latent function, "
                                  f"{likelihood.variant} has {likelihood.latent_dim}")
        self.spatial = spatial
        self.temporal = temporal
        self.likelihood = likelihood
        self.temporal_ssm = to_state_space(temporal)
        K_uu = self.spatial_gram(spatial.inducing, spatial.inducing)
        # jitter enters as a nugget on coincident locations so K_fu at a node matches its K_uu row
        self.nugget = KUU_JITTER * float(np.mean(np.diag(K_uu)))
        self.K_uu = symmetrise(K_uu + self.nugget * np.eye(K_uu.shape[0]))
        self._chol_uu = robust_cholesky(self.K_uu)
        self._cache: Dict[bytes, DiscreteTransition] = {}
        self._lock = threading.Lock()

    @property
    def num_inducing(self) -> int:
        return self.spatial.num_inducing

    @property
    def state_dim(self) -> int:
        return self.num_inducing * self.temporal_ssm.state_dim

    def spatial_gram(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return evaluate_kernel(self.spatial.kernel, cdist(a, b))

    def initial_state(self) -> GaussianMoments:
        return GaussianMoments(mean=np.zeros(self.state_dim), cov=np.kron(self.K_uu, self.temporal_ssm.Pinf))

    def transition(self, dt: float) -> DiscreteTransition:
        key = np.float64(dt).tobytes()
        cached = self._cache.get(key)
        if cached is not None:
            return cached
        base = discretize(self.temporal_ssm, dt)
        trans = DiscreteTransition(A=np.kron(np.eye(self.num_inducing), base.A),
                                   Q=symmetrise(np.kron(self.K_uu, base.Q)), dt=base.dt)
        with self._lock:
            return self._cache.setdefault(key, trans)

    def spatial_weights(self, r) -> np.ndarray:
        """Rows k(r, r_u) K_uu^-1; in grid mode the one-hot row of the matching grid location."""
        r = np.asarray(r, dtype=float)
        r = r.reshape(-1, self.spatial.inducing.shape[1])
        if self.spatial.mode == "grid":
            dist = cdist(r, self.spatial.inducing)
            nearest = np.argmin(dist, axis=1)
            if np.any(dist[np.arange(r.shape[0]), nearest] > GRID_MATCH_TOL):
                raise ValueError("grid mode needs every location to lie on the grid")
            return np.eye(self.num_inducing)[nearest]
        dist = cdist(r, self.spatial.inducing)
        K_fu = evaluate_kernel(self.spatial.kernel, dist) + self.nugget * (dist == 0.0)
        return linalg.cho_solve((self._chol_uu, True), K_fu.T).T

    def measurement_at(self, r) -> np.ndarray:
        return np.kron(self.spatial_weights(r), self.temporal_ssm.H)

    def measurement_matrix(self, grid: TimeGrid, k: int) -> np.ndarray:
        if grid.locations is None:
            raise ValueError("spatio-temporal grids need per-row locations")
        return self.measurement_at(grid.locations[k])

    def parameter_names(self) -> List[str]:
        return ([f"temporal.{n}" for n in self.temporal.parameter_names()]
                + [f"spatial.{n}" for n in self.spatial.kernel.parameter_names()]
                + [f"likelihood.{n}" for n in self.likelihood.parameter_names()])

    def unconstrained(self) -> np.ndarray:
        return np.concatenate([self.temporal.unconstrained(), self.spatial.kernel.unconstrained(),
                               self.likelihood.unconstrained()])

    def with_unconstrained(self, theta) -> "SpatioTemporalGP":
        theta = np.asarray(theta, dtype=float)
        n_t = len(self.temporal.parameter_names())
        n_r = len(self.spatial.kernel.parameter_names())
        temporal = self.temporal.with_unconstrained(theta[:n_t])
        spatial_kernel = self.spatial.kernel.with_unconstrained(theta[n_t:n_t + n_r])
        spatial = SpatialConfig(kernel=spatial_kernel, inducing=self.spatial.inducing, mode=self.spatial.mode)
        return SpatioTemporalGP(spatial, temporal, self.likelihood.with_unconstrained(theta[n_t + n_r:]))


def build_state(spatial: SpatialConfig, temporal: KernelSpec, likelihood: Likelihood) -> SpatioTemporalGP:
    return SpatioTemporalGP(spatial, temporal, likelihood)


def order_by_time(r, t, y) -> TimeGrid:
    """Steps ordered by the sequential coordinate t; points sharing a t become rows of one step."""
    return TimeGrid.from_points(t, y, locations=r)


@dataclass
class LatticePrediction:
    t_axis: np.ndarray
    r_axis: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    predictive_mean: np.ndarray


def _resume_sites(sites: SiteStore, old_times: np.ndarray, new_times: np.ndarray) -> SiteStore:
    resumed = SiteStore(new_times.size)
    for k, idx in enumerate(np.searchsorted(new_times, old_times)):
        resumed[idx] = sites[k]
    return resumed


def predict_on_lattice(model: SpatioTemporalGP, grid: TimeGrid, sites: SiteStore, rule_config: RuleConfig,
                       size: int = LATTICE_SIZE, t_range=None, r_range=None) -> LatticePrediction:
    """Posterior of f and of E[y] on a (t, r) lattice using the fitted sites.

    The lattice is size x size; in grid mode the spatial axis is the grid itself.

    Lattice times are inserted into the grid as unobserved steps; one filter and smoother pass
    with the sites held fixed gives the state posterior there.
    """
    if model.spatial.inducing.shape[1] != 1:
        raise ValueError("lattice prediction needs a 1D spatial coordinate")
    locs = np.concatenate(grid.locations)[:, 0]
    t_lo, t_hi = t_range if t_range is not None else (grid.times[0], grid.times[-1])
    r_lo, r_hi = r_range if r_range is not None else (locs.min(), locs.max())
    t_axis = np.linspace(t_lo, t_hi, size)
    if model.spatial.mode == "grid":
        r_axis = np.sort(model.spatial.inducing[:, 0])
    else:
        r_axis = np.linspace(r_lo, r_hi, size)
    dense = grid.with_extra_steps(t_axis, locations=model.spatial.inducing[:1])
    dense_sites = _resume_sites(sites, grid.times, dense.times)
    cubature = rule_config.cubature_rule(1)
    filtered, _ = forward_pass(model, dense, rule_config, dense_sites, cubature)
    posterior = smoothing_pass(model, dense, rule_config, filtered, dense_sites, cubature, update_sites=False)
    H = model.measurement_at(r_axis[:, None])
    shape = (t_axis.size, r_axis.size)
    mean = np.zeros(shape)
    var = np.zeros(shape)
    pred = np.zeros(shape)
    rule = rule_from_tag("gh20", 1)
    for i, k in enumerate(np.searchsorted(dense.times, t_axis)):
        marginal = posterior[k].project(H)
        mean[i] = marginal.mean
        var[i] = np.diag(marginal.cov)
        pred[i] = [model.likelihood.predictive_mean(np.array([mean[i, j]]), np.array([[var[i, j]]]), rule)[0]
                   for j in range(r_axis.size)]
    LOGGER.debug("lattice prediction on %d x %d points", *shape)
    return LatticePrediction(t_axis=t_axis, r_axis=r_axis, mean=mean, var=var, predictive_mean=pred)
