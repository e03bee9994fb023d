"""Kalman filter / RTS smoother core shared by every site-update rule.

A forward pass predicts through the prior dynamics, accumulates the one-step-ahead
energy, and conditions on the stored sites as Gaussian pseudo-observations of f = H x.
The backward pass smooths and, at every observed step, recomputes the cavity from
the smoothed marginal and refreshes the site. Hyperparameters are trained by
descending the energy with finite-difference gradients.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from tqdm import trange

from cubature import CubatureRule, rule_from_tag
from errors import (CavityNotPSD, CholeskyError, KernelSpecError, MarkovGPError, SkippedUpdate, StepError,
                    TrainingAborted)
from gaussian import GaussianMoments, clip_to_psd, robust_cholesky, symmetrise
from likelihoods import Likelihood
from prior_ssm import DiscreteTransition, KernelSpec, discretize, stack_latents, stationary_prior
from site_rules import RuleConfig, Site, local_update

LOGGER = logging.getLogger(__name__)

CONVERGENCE_TOL = 1e-6
ACCEPT_TOL = 1e-6
MAX_CONDITION = 1e14
SKIP_WARN_FRACTION = 0.05
NLPD_CUBATURE = "gh20"


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing step times; each step holds one or more observation rows.

    NaN rows are unobserved. `locations` holds the spatial input of every row for
    spatio-temporal models. `origin[i]` is the (step, row) of the i-th input point.
    """

    times: np.ndarray
    observations: Tuple[np.ndarray, ...]
    locations: Optional[Tuple[np.ndarray, ...]] = None
    origin: Optional[np.ndarray] = None

    def __post_init__(self):
        times = np.asarray(self.times, dtype=float)
        if times.ndim != 1 or times.size == 0:
            raise ValueError("a time grid needs at least one timestamp")
        if np.any(np.diff(times) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if len(self.observations) != times.size:
            raise ValueError(f"{len(self.observations)} observation blocks for {times.size} steps")
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "observations", tuple(np.atleast_2d(np.asarray(o, dtype=float))
                                                       for o in self.observations))

    @classmethod
    def from_points(cls, t, y, locations=None) -> "TimeGrid":
        """Sort by t and group co-located timestamps into one step with stacked rows."""
        t = np.asarray(t, dtype=float).ravel()
        y = np.asarray(y, dtype=float).reshape(t.size, -1)
        r = None if locations is None else np.asarray(locations, dtype=float).reshape(t.size, -1)
        order = np.argsort(t, kind="stable")
        times, starts = np.unique(t[order], return_index=True)
        bounds = list(starts) + [t.size]
        observations, locs = [], []
        origin = np.zeros((t.size, 2), dtype=int)
        for k in range(times.size):
            idx = order[bounds[k]:bounds[k + 1]]
            observations.append(y[idx])
            if r is not None:
                locs.append(r[idx])
            origin[idx, 0] = k
            origin[idx, 1] = np.arange(idx.size)
        return cls(times=times, observations=tuple(observations),
                   locations=None if r is None else tuple(locs), origin=origin)

    @property
    def n_steps(self) -> int:
        return self.times.size

    @property
    def dts(self) -> np.ndarray:
        return np.concatenate([[0.0], np.diff(self.times)])

    def observed_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(~np.any(np.isnan(self.observations[k]), axis=1))

    @property
    def mask(self) -> np.ndarray:
        return np.array([self.observed_rows(k).size > 0 for k in range(self.n_steps)])

    def num_points(self) -> int:
        return sum(o.shape[0] for o in self.observations)

    def with_masked(self, points: Sequence[Tuple[int, int]]) -> "TimeGrid":
        observations = [o.copy() for o in self.observations]
        for k, row in points:
            observations[k][row] = np.nan
        return replace(self, observations=tuple(observations))

    def with_extra_steps(self, times, locations=None) -> "TimeGrid":
        """Insert unobserved steps (one NaN row each, or one per location) at new times."""
        extra = np.setdiff1d(np.asarray(times, dtype=float), self.times)
        all_times = np.concatenate([self.times, extra])
        order = np.argsort(all_times, kind="stable")
        d = self.observations[0].shape[1]
        n_extra_rows = 1 if locations is None else np.atleast_2d(locations).shape[0]
        observations = list(self.observations) + [np.full((n_extra_rows, d), np.nan)] * extra.size
        locs = None
        if self.locations is not None:
            locs = list(self.locations) + [np.atleast_2d(locations)] * extra.size
            locs = tuple(locs[i] for i in order)
        origin = None
        if self.origin is not None:
            new_step = np.argsort(order)
            origin = self.origin.copy()
            origin[:, 0] = new_step[origin[:, 0]]
        return TimeGrid(times=all_times[order], observations=tuple(observations[i] for i in order),
                        locations=locs, origin=origin)


@dataclass
class EnergyLedger:
    per_step: np.ndarray
    observed: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.per_step[self.observed]))


@dataclass
class Diagnostics:
    skipped_updates: int = 0
    cavity_failures: int = 0
    site_updates: int = 0
    psd_repairs: int = 0
    iterations: int = 0
    converged: bool = False
    site_change: float = np.inf

    def to_dict(self) -> Dict:
        return {
            "skipped_updates": self.skipped_updates,
            "cavity_failures": self.cavity_failures,
            "site_updates": self.site_updates,
            "psd_repairs": self.psd_repairs,
            "iterations": self.iterations,
            "converged": self.converged,
            "site_change": float(self.site_change),
        }


class SiteStore:
    """Per-step sites over the observed rows of that step; None until first initialised."""

    def __init__(self, n_steps: int):
        self._sites: List[Optional[Site]] = [None] * n_steps

    def __len__(self):
        return len(self._sites)

    def __getitem__(self, k: int) -> Optional[Site]:
        return self._sites[k]

    def __setitem__(self, k: int, site: Optional[Site]):
        self._sites[k] = site

    @property
    def initialised(self) -> bool:
        return any(s is not None for s in self._sites)

    def copy(self) -> "SiteStore":
        other = SiteStore(len(self))
        other._sites = list(self._sites)
        return other

    def max_change(self, other: "SiteStore") -> float:
        change = 0.0
        for a, b in zip(self._sites, other._sites):
            if a is None and b is None:
                continue
            if a is None or b is None:
                return np.inf
            change = max(change, float(np.max(np.abs(a.natural_vector() - b.natural_vector()))))
        return change


class MarkovGP:
    """Temporal GP prior (one independent kernel per latent function) with a likelihood."""

    def __init__(self, kernels: Sequence[KernelSpec], likelihood: Likelihood):
        self.kernels = tuple(kernels)
        self.likelihood = likelihood
        if len(self.kernels) != likelihood.latent_dim:
            raise KernelSpecError(
                f"{likelihood.variant} has {likelihood.latent_dim} latent functions but {len(self.kernels)} kernels were given")
        self.ssm = stack_latents(self.kernels)

    @property
    def state_dim(self) -> int:
        return self.ssm.state_dim

    def initial_state(self) -> GaussianMoments:
        return stationary_prior(self.ssm)

    def transition(self, dt: float) -> DiscreteTransition:
        return discretize(self.ssm, dt)

    def measurement_matrix(self, grid: TimeGrid, k: int) -> np.ndarray:
        rows = grid.observations[k].shape[0]
        return self.ssm.H if rows == 1 else np.vstack([self.ssm.H] * rows)

    def parameter_names(self) -> List[str]:
        names = []
        for i, kernel in enumerate(self.kernels):
            names += [f"kernel[{i}].{n}" for n in kernel.parameter_names()]
        return names + [f"likelihood.{n}" for n in self.likelihood.parameter_names()]

    def unconstrained(self) -> np.ndarray:
        parts = [k.unconstrained() for k in self.kernels] + [self.likelihood.unconstrained()]
        return np.concatenate(parts)

    def with_unconstrained(self, theta) -> "MarkovGP":
        theta = np.asarray(theta, dtype=float)
        kernels, offset = [], 0
        for kernel in self.kernels:
            n = len(kernel.parameter_names())
            kernels.append(kernel.with_unconstrained(theta[offset:offset + n]))
            offset += n
        return MarkovGP(kernels, self.likelihood.with_unconstrained(theta[offset:]))


def predict(prev: GaussianMoments, trans: DiscreteTransition) -> GaussianMoments:
    A = trans.A
    return GaussianMoments(mean=A @ prev.mean, cov=symmetrise(A @ prev.cov @ A.T + trans.Q))


def site_update_step(pred: GaussianMoments, H: np.ndarray, site: Optional[Site],
                     step_index: Optional[int] = None, diagnostics: Optional[Diagnostics] = None) -> GaussianMoments:
    """Condition on the site as a pseudo-observation of f = H x (Joseph form).

    With site precision P and natural mean b the gain is G P, G = P_pred H^T (I + P H P_pred H^T)^-1,
    which stays defined when P is singular (infinite site variance). Sites with negative
    precision can leave the result indefinite; it is then clipped back onto the PSD cone.
    """
    if site is None:
        return pred
    P_site, b_site = site.precision, site.nat1
    PHt = pred.cov @ H.T
    system = np.eye(H.shape[0]) + P_site @ (H @ PHt)
    if not np.all(np.isfinite(system)) or np.linalg.cond(system) > MAX_CONDITION:
        raise StepError("innovation covariance is singular", step_index=-1 if step_index is None else step_index)
    G = np.linalg.solve(system.T, PHt.T).T
    gain = G @ P_site
    mean = pred.mean + G @ (b_site - P_site @ (H @ pred.mean))
    IKH = np.eye(pred.dim) - gain @ H
    cov = IKH @ pred.cov @ IKH.T + G @ P_site @ G.T
    return GaussianMoments(mean=mean, cov=_psd_or_fail(cov, "filtered", step_index, diagnostics))


def rts_smooth_step(filt: GaussianMoments, post_next: GaussianMoments, trans_next: DiscreteTransition,
                    step_index: Optional[int] = None, diagnostics: Optional[Diagnostics] = None) -> GaussianMoments:
    pred = predict(filt, trans_next)
    try:
        chol = robust_cholesky(pred.cov)
    except CholeskyError as exc:
        raise StepError(f"smoother predictive covariance is singular: {exc}",
                        step_index=-1 if step_index is None else step_index) from exc
    G = linalg.cho_solve((chol, True), trans_next.A @ filt.cov).T
    mean = filt.mean + G @ (post_next.mean - pred.mean)
    cov = filt.cov + G @ (post_next.cov - pred.cov) @ G.T
    return GaussianMoments(mean=mean, cov=_psd_or_fail(cov, "smoothed", step_index, diagnostics))


def _psd_or_fail(cov, what: str, step_index: Optional[int], diagnostics: Optional[Diagnostics]) -> np.ndarray:
    if not np.all(np.isfinite(cov)):
        raise StepError(f"{what} covariance is not finite", step_index=-1 if step_index is None else step_index)
    cov, clipped = clip_to_psd(cov)
    if clipped:
        LOGGER.debug("%s covariance clipped to PSD at step %s", what, step_index)
        if diagnostics is not None:
            diagnostics.psd_repairs += 1
    return cov


def _row_blocks(m: int, rows: int):
    return [slice(r * m, (r + 1) * m) for r in range(rows)]


def energy_step(marginal: GaussianMoments, y_rows: np.ndarray, likelihood: Likelihood, config: RuleConfig,
                cubature: Optional[CubatureRule], step_index: Optional[int] = None) -> float:
    """-log p(y_k | y_{1:k-1}) from the predicted marginal of f over the observed rows."""
    m = likelihood.latent_dim
    blocks = _row_blocks(m, y_rows.shape[0])
    mean, cov = marginal.mean, marginal.cov
    if likelihood.conjugate or config.rule == "EEP":
        residuals, jacs, noises = [], [], []
        zero = np.zeros(likelihood.noise_dim)
        for r, sl in enumerate(blocks):
            h = likelihood.measurement(mean[sl], zero)
            j_f, j_sigma = likelihood.jacobians(mean[sl], zero)
            residuals.append(likelihood.measurement_target(y_rows[r]) - h)
            jacs.append(j_f)
            noises.append(j_sigma @ j_sigma.T)
        J = linalg.block_diag(*jacs)
        E = symmetrise(linalg.block_diag(*noises) + J @ cov @ J.T)
        v = np.concatenate(residuals)
        try:
            chol = robust_cholesky(E)
        except CholeskyError as exc:
            raise StepError(f"energy covariance is singular: {exc}", step_index=-1 if step_index is None else step_index) from exc
        alpha = linalg.solve_triangular(chol, v, lower=True)
        energy = 0.5 * v.size * np.log(2 * np.pi) + np.sum(np.log(np.diag(chol))) + 0.5 * alpha @ alpha
    else:
        if cubature is None:
            cubature = rule_from_tag(NLPD_CUBATURE, m)
        try:
            energy = -sum(likelihood.log_expected_density(y_rows[r], mean[sl], cov[sl, sl], cubature)
                          for r, sl in enumerate(blocks))
        except CholeskyError as exc:
            raise StepError(f"predictive marginal is singular: {exc}",
                            step_index=-1 if step_index is None else step_index) from exc
    if not np.isfinite(energy):
        raise StepError("energy is not finite", step_index=-1 if step_index is None else step_index)
    return float(energy)


def _observed_measurement(model, grid: TimeGrid, k: int, rows: np.ndarray) -> np.ndarray:
    H = model.measurement_matrix(grid, k)
    m = model.likelihood.latent_dim
    if rows.size == grid.observations[k].shape[0]:
        return H
    idx = np.concatenate([np.arange(r * m, (r + 1) * m) for r in rows])
    return H[idx]


def _update_step_site(config: RuleConfig, likelihood: Likelihood, y_rows: np.ndarray, marginal: GaussianMoments,
                      previous: Optional[Site], cubature, alpha: Optional[float], diagnostics: Diagnostics) -> Optional[Site]:
    """Per-row site updates; the step site is block diagonal over rows."""
    m = likelihood.latent_dim
    blocks = _row_blocks(m, y_rows.shape[0])
    precisions, nat1s = [], []
    for r, sl in enumerate(blocks):
        row_marginal = marginal if len(blocks) == 1 else GaussianMoments(mean=marginal.mean[sl], cov=marginal.cov[sl, sl])
        row_prev = None
        if previous is not None:
            row_prev = previous if len(blocks) == 1 else Site(precision=previous.precision[sl, sl], nat1=previous.nat1[sl])
        diagnostics.site_updates += 1
        try:
            new = local_update(config, likelihood, y_rows[r], row_marginal, row_prev, cubature, alpha)
        except CavityNotPSD as exc:
            diagnostics.cavity_failures += 1
            LOGGER.debug("cavity failure: %s", exc)
            new = row_prev
        except SkippedUpdate as exc:
            diagnostics.skipped_updates += 1
            LOGGER.debug("skipped update: %s", exc.reason)
            new = row_prev
        if new is None:
            new = Site.inactive(m)
        precisions.append(new.precision)
        nat1s.append(new.nat1)
    if len(blocks) == 1:
        return Site(precision=precisions[0], nat1=nat1s[0])
    return Site(precision=linalg.block_diag(*precisions), nat1=np.concatenate(nat1s))


def forward_pass(model, grid: TimeGrid, config: RuleConfig, sites: SiteStore, cubature=None,
                 initialise: bool = False, diagnostics: Optional[Diagnostics] = None, pass_index: Optional[int] = None):
    """Filter with the stored sites; with `initialise` each site is first set from the prediction with alpha = 1."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    likelihood = model.likelihood
    n = grid.n_steps
    dts = grid.dts
    filtered: List[GaussianMoments] = []
    energies = np.zeros(n)
    observed = np.zeros(n, dtype=bool)
    state = model.initial_state()
    for k in range(n):
        pred = predict(state, model.transition(dts[k])) if k > 0 else state
        rows = grid.observed_rows(k)
        if rows.size:
            observed[k] = True
            H = _observed_measurement(model, grid, k, rows)
            y_rows = grid.observations[k][rows]
            marginal = pred.project(H)
            try:
                energies[k] = energy_step(marginal, y_rows, likelihood, config, cubature, step_index=k)
                if initialise:
                    sites[k] = _update_step_site(config, likelihood, y_rows, marginal, None, cubature, 1.0, diagnostics)
                state = site_update_step(pred, H, sites[k], step_index=k, diagnostics=diagnostics)
            except StepError as exc:
                exc.pass_index = pass_index
                raise
        else:
            state = pred
        filtered.append(state)
    return filtered, EnergyLedger(per_step=energies, observed=observed)


def smoothing_pass(model, grid: TimeGrid, config: RuleConfig, filtered: List[GaussianMoments], sites: SiteStore,
                   cubature=None, diagnostics: Optional[Diagnostics] = None, update_sites: bool = True,
                   pass_index: Optional[int] = None) -> List[GaussianMoments]:
    """RTS recursion; each observed step's site is refreshed from its smoothed marginal as the sweep passes it."""
    diagnostics = diagnostics if diagnostics is not None else Diagnostics()
    n = grid.n_steps
    dts = grid.dts
    posterior: List[Optional[GaussianMoments]] = [None] * n
    for k in range(n - 1, -1, -1):
        if k == n - 1:
            posterior[k] = filtered[k]
        else:
            try:
                posterior[k] = rts_smooth_step(filtered[k], posterior[k + 1], model.transition(dts[k + 1]), step_index=k,
                                               diagnostics=diagnostics)
            except StepError as exc:
                exc.pass_index = pass_index
                raise
        rows = grid.observed_rows(k)
        if update_sites and rows.size:
            H = _observed_measurement(model, grid, k, rows)
            sites[k] = _update_step_site(config, model.likelihood, grid.observations[k][rows], posterior[k].project(H),
                                         sites[k], cubature, None, diagnostics)
    return posterior


@dataclass
class InferenceResult:
    posterior: List[GaussianMoments]
    filtered: List[GaussianMoments]
    sites: SiteStore
    energy: EnergyLedger
    diagnostics: Diagnostics
    energy_trace: List[float] = field(default_factory=list)


def run_inference(model, grid: TimeGrid, rule_config: RuleConfig, num_iters: int = 1,
                  sites: Optional[SiteStore] = None, tol: float = CONVERGENCE_TOL) -> InferenceResult:
    """Alternate filtering (energy) and smoothing (site refresh) until the sites stop moving."""
    if num_iters < 1:
        raise ValueError(f"num_iters must be >= 1, got {num_iters}")
    sites = sites if sites is not None else SiteStore(grid.n_steps)
    cubature = rule_config.cubature_rule(model.likelihood.latent_dim)
    diagnostics = Diagnostics()
    trace = []
    for it in range(num_iters):
        initialise = not sites.initialised
        start = replace(diagnostics)
        filtered, ledger = forward_pass(model, grid, rule_config, sites, cubature, initialise, diagnostics, pass_index=it)
        trace.append(ledger.total)
        before = sites.copy()
        posterior = smoothing_pass(model, grid, rule_config, filtered, sites, cubature, diagnostics, pass_index=it)
        diagnostics.iterations = it + 1
        diagnostics.site_change = np.inf if initialise else before.max_change(sites)
        _warn_failures(diagnostics, start, it)
        LOGGER.debug("pass %d: energy %.6f, site change %.3e", it, ledger.total, diagnostics.site_change)
        if diagnostics.site_change < tol:
            diagnostics.converged = True
            LOGGER.info("sites converged after %d passes", it + 1)
            break
    return InferenceResult(posterior=posterior, filtered=filtered, sites=sites, energy=ledger,
                           diagnostics=diagnostics, energy_trace=trace)


def _warn_failures(diagnostics: Diagnostics, since: Optional[Diagnostics] = None, pass_index: Optional[int] = None):
    """One WARNING for the counts accumulated after `since`: any cavity failure or PSD clip, or skips above 5%."""
    since = since if since is not None else Diagnostics()
    updates = diagnostics.site_updates - since.site_updates
    cavity = diagnostics.cavity_failures - since.cavity_failures
    failed = diagnostics.skipped_updates - since.skipped_updates + cavity
    clipped = diagnostics.psd_repairs - since.psd_repairs
    if not (cavity or clipped or (updates and failed > SKIP_WARN_FRACTION * updates)):
        return
    where = "" if pass_index is None else f"pass {pass_index}: "
    LOGGER.warning("%s%d of %d site updates skipped (%d cavity failures), %d covariances clipped to PSD",
                   where, failed, updates, cavity, clipped)


def posterior_marginals(model, grid: TimeGrid, posterior: List[GaussianMoments]) -> List[GaussianMoments]:
    """Marginal of f over every row (observed or not) of every step."""
    return [posterior[k].project(model.measurement_matrix(grid, k)) for k in range(grid.n_steps)]


def predictive_nlpd(model, grid: TimeGrid, posterior: List[GaussianMoments], points: Sequence[Tuple[int, int]],
                    targets: np.ndarray, cubature: str = NLPD_CUBATURE) -> np.ndarray:
    """-log p(y* | data) for each held-out (step, row), from the smoothed marginal."""
    likelihood = model.likelihood
    m = likelihood.latent_dim
    rule = rule_from_tag("auto" if cubature == NLPD_CUBATURE else cubature, m)
    out = np.zeros(len(points))
    for i, (k, row) in enumerate(points):
        H = model.measurement_matrix(grid, k)[row * m:(row + 1) * m]
        marginal = posterior[k].project(H)
        out[i] = -likelihood.predictive_log_density(targets[i], marginal.mean, marginal.cov, rule)
    return out


# hyperparameter learning

class Adam:
    def __init__(self, step_size: float = 0.1, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.step_size = step_size
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self._m = self._v = None
        self._t = 0

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self._m is None:
            self._m = np.zeros_like(theta)
            self._v = np.zeros_like(theta)
        self._t += 1
        self._m = self.beta1 * self._m + (1 - self.beta1) * grad
        self._v = self.beta2 * self._v + (1 - self.beta2) * grad ** 2
        m_hat = self._m / (1 - self.beta1 ** self._t)
        v_hat = self._v / (1 - self.beta2 ** self._t)
        return theta - self.step_size * m_hat / (np.sqrt(v_hat) + self.eps)

    def shrink(self):
        self.step_size *= 0.5


class GradientDescent:
    def __init__(self, step_size: float = 0.1):
        self.step_size = step_size

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        return theta - self.step_size * grad

    def shrink(self):
        self.step_size *= 0.5


OPTIMISERS = {"adam": Adam, "sgd": GradientDescent}


@dataclass
class TrainingHistory:
    energies: List[float] = field(default_factory=list)
    parameters: List[List[float]] = field(default_factory=list)
    gradients: List[List[float]] = field(default_factory=list)
    accepted: List[bool] = field(default_factory=list)
    parameter_names: List[str] = field(default_factory=list)

    def record(self, energy: float, theta: np.ndarray, grad: np.ndarray, accepted: bool):
        self.energies.append(float(energy))
        self.parameters.append([float(v) for v in theta])
        self.gradients.append([float(v) for v in grad])
        self.accepted.append(bool(accepted))

    def to_dict(self) -> Dict:
        return {
            "parameter_names": list(self.parameter_names),
            "energies": list(self.energies),
            "parameters": [list(p) for p in self.parameters],
            "accepted": list(self.accepted),
        }


def finite_difference_gradient(fn: Callable[[np.ndarray], float], theta: np.ndarray, step: float = 1e-5) -> np.ndarray:
    theta = np.asarray(theta, dtype=float)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        e = np.zeros_like(theta)
        e[i] = step
        grad[i] = (fn(theta + e) - fn(theta - e)) / (2 * step)
    return grad


def forward_energy(model, grid: TimeGrid, config: RuleConfig, sites: SiteStore, cubature=None) -> float:
    """Total energy of one forward pass with the sites held fixed."""
    _, ledger = forward_pass(model, grid, config, sites, cubature, initialise=False)
    return ledger.total


def fit_hyperparameters(model, grid: TimeGrid, rule_config: RuleConfig, num_iters: int = 250,
                        step_size: float = 0.1, optimiser: str = "adam", fd_step: float = 1e-5,
                        line_search: bool = False, progress: bool = False):
    """Per outer iteration: forward pass (energy), gradient, optimiser step, smoothing pass (site refresh).

    Returns (trained model, history, sites).
    """
    if optimiser not in OPTIMISERS:
        raise ValueError(f"unknown optimiser {optimiser!r}; expected one of {sorted(OPTIMISERS)}")
    opt = OPTIMISERS[optimiser](step_size)
    theta = model.unconstrained()
    sites = SiteStore(grid.n_steps)
    cubature = rule_config.cubature_rule(model.likelihood.latent_dim)
    diagnostics = Diagnostics()
    history = TrainingHistory(parameter_names=model.parameter_names())

    def energy_at(th):
        return forward_energy(model.with_unconstrained(th), grid, rule_config, sites, cubature)

    for i in trange(num_iters, disable=not progress, desc="training", leave=False):
        current = model.with_unconstrained(theta)
        filtered, ledger = forward_pass(current, grid, rule_config, sites, cubature,
                                        initialise=not sites.initialised, diagnostics=diagnostics, pass_index=i)
        energy = ledger.total
        if not np.isfinite(energy):
            raise TrainingAborted(f"energy not finite at iteration {i}", history)
        grad = finite_difference_gradient(energy_at, theta, fd_step) if theta.size else theta
        if not np.all(np.isfinite(grad)):
            raise TrainingAborted(f"gradient not finite at iteration {i}", history)
        proposal = opt.step(theta, grad)
        accepted = True
        if line_search and theta.size:
            try:
                trial = energy_at(proposal)
            except MarkovGPError as exc:
                LOGGER.debug("proposal rejected: %s", exc)
                trial = np.inf
            if not trial <= energy + ACCEPT_TOL:
                accepted = False
                opt.shrink()
                proposal = theta
        history.record(energy, theta, grad, accepted)
        smoothing_pass(current, grid, rule_config, filtered, sites, cubature, diagnostics, pass_index=i)
        theta = proposal
        if i % 25 == 0:
            LOGGER.debug("iteration %d: energy %.6f", i, energy)
    _warn_failures(diagnostics)
    return model.with_unconstrained(theta), history, sites
