"""Kernel specifications and their state-space (SDE / discrete LGSSM) realisations.

A kernel maps to a continuous linear time-invariant SDE

    dx/dt = F x + L w,    f = H x,    E[w w^T] = Qc delta,

whose stationary covariance Pinf solves F Pinf + Pinf F^T + L Qc L^T = 0.
Between two time points the solution is a linear-Gaussian transition
x_k = A x_{k-1} + q_k with A = expm(F dt) and Q = Pinf - A Pinf A^T.
"""

import logging
import threading
from dataclasses import dataclass, field, replace
from math import comb
from typing import Dict, List, Sequence, Tuple

import numpy as np
from scipy import linalg, special

from errors import KernelSpecError
from gaussian import GaussianMoments, symmetrise

LOGGER = logging.getLogger(__name__)

MATERN_ORDERS = {"Matern12": 0, "Matern32": 1, "Matern52": 2, "Matern72": 3}
LEAF_PARAMETERS = {
    "Matern12": ("variance", "lengthscale"),
    "Matern32": ("variance", "lengthscale"),
    "Matern52": ("variance", "lengthscale"),
    "Matern72": ("variance", "lengthscale"),
    "Cosine": ("variance", "frequency"),
    "QuasiPeriodic": ("variance", "lengthscale", "frequency"),
    "Periodic": ("variance", "lengthscale", "period"),
}
COMPOSITES = ("Sum", "Product")
DEFAULT_HARMONICS = 6


@dataclass(frozen=True)
class KernelSpec:
    """A stationary kernel. `frequency` is angular (the Cosine kernel is cos(frequency * tau))."""

    variant: str
    variance: float = 1.0
    lengthscale: float = 1.0
    frequency: float = 1.0
    period: float = 1.0
    harmonics: int = DEFAULT_HARMONICS
    components: Tuple["KernelSpec", ...] = ()
    fixed: Tuple[str, ...] = ()

    def __post_init__(self):
        if self.variant not in LEAF_PARAMETERS and self.variant not in COMPOSITES:
            raise KernelSpecError(f"unknown kernel variant {self.variant!r}")
        object.__setattr__(self, "components", tuple(self.components))
        object.__setattr__(self, "fixed", tuple(self.fixed))
        if self.variant == "Sum" and len(self.components) < 2:
            raise KernelSpecError(f"Sum needs at least 2 components, got {len(self.components)}")
        if self.variant == "Product":
            if len(self.components) != 2:
                raise KernelSpecError(f"Product needs exactly 2 components, got {len(self.components)}")
            if any(c.variant == "Sum" for c in self.components):
                raise KernelSpecError("Product of a Sum is not supported; expand it into a Sum of Products")
        if self.variant in LEAF_PARAMETERS:
            for name in LEAF_PARAMETERS[self.variant]:
                value = getattr(self, name)
                if not np.isfinite(value) or value <= 0:
                    raise KernelSpecError(f"{self.variant}.{name} must be positive, got {value}")
            unknown = set(self.fixed) - set(LEAF_PARAMETERS[self.variant])
            if unknown:
                raise KernelSpecError(f"{self.variant} has no parameters {sorted(unknown)}")
        if self.variant == "Periodic" and int(self.harmonics) < 1:
            raise KernelSpecError(f"Periodic.harmonics must be >= 1, got {self.harmonics}")

    @classmethod
    def from_dict(cls, spec: Dict) -> "KernelSpec":
        spec = dict(spec)
        if "variant" not in spec:
            raise KernelSpecError(f"kernel spec needs a 'variant': {spec}")
        allowed = {"variant", "variance", "lengthscale", "frequency", "period", "harmonics", "components", "fixed"}
        unknown = set(spec) - allowed
        if unknown:
            raise KernelSpecError(f"unknown kernel keys {sorted(unknown)}")
        spec["components"] = tuple(cls.from_dict(c) for c in spec.get("components", ()))
        spec["fixed"] = tuple(spec.get("fixed", ()))
        return cls(**spec)

    def to_dict(self) -> Dict:
        if self.variant in COMPOSITES:
            return {"variant": self.variant, "components": [c.to_dict() for c in self.components]}
        out = {"variant": self.variant}
        for name in LEAF_PARAMETERS[self.variant]:
            out[name] = float(getattr(self, name))
        if self.variant == "Periodic":
            out["harmonics"] = int(self.harmonics)
        if self.fixed:
            out["fixed"] = list(self.fixed)
        return out

    def parameter_names(self) -> List[str]:
        if self.variant in COMPOSITES:
            return [f"{self.variant.lower()}[{i}].{name}"
                    for i, c in enumerate(self.components) for name in c.parameter_names()]
        return [name for name in LEAF_PARAMETERS[self.variant] if name not in self.fixed]

    def unconstrained(self) -> np.ndarray:
        """Trainable parameters as log values."""
        if self.variant in COMPOSITES:
            parts = [c.unconstrained() for c in self.components]
            return np.concatenate(parts) if parts else np.zeros(0)
        return np.log([getattr(self, name) for name in self.parameter_names()]).astype(float)

    def with_unconstrained(self, theta: Sequence[float]) -> "KernelSpec":
        theta = np.asarray(theta, dtype=float)
        if theta.shape[0] != len(self.parameter_names()):
            raise KernelSpecError(f"expected {len(self.parameter_names())} parameters, got {theta.shape[0]}")
        if self.variant in COMPOSITES:
            new_components, offset = [], 0
            for c in self.components:
                n = len(c.parameter_names())
                new_components.append(c.with_unconstrained(theta[offset:offset + n]))
                offset += n
            return replace(self, components=tuple(new_components))
        values = {name: float(np.exp(v)) for name, v in zip(self.parameter_names(), theta)}
        return replace(self, **values)


def matern(order: int, variance: float = 1.0, lengthscale: float = 1.0) -> KernelSpec:
    variant = {v: k for k, v in MATERN_ORDERS.items()}[order]
    return KernelSpec(variant, variance=variance, lengthscale=lengthscale)


def evaluate_kernel(kernel: KernelSpec, tau) -> np.ndarray:
    """kappa(tau) for a stationary kernel; tau may be any array of lags or distances."""
    tau = np.abs(np.asarray(tau, dtype=float))
    v = kernel.variant
    if v in MATERN_ORDERS:
        p = MATERN_ORDERS[v]
        lam = np.sqrt(2 * p + 1) / kernel.lengthscale
        r = lam * tau
        poly = {
            0: np.ones_like(r),
            1: 1 + r,
            2: 1 + r + r ** 2 / 3,
            3: 1 + r + 2 * r ** 2 / 5 + r ** 3 / 15,
        }[p]
        return kernel.variance * poly * np.exp(-r)
    if v == "Cosine":
        return kernel.variance * np.cos(kernel.frequency * tau)
    if v == "QuasiPeriodic":
        return kernel.variance * np.exp(-tau / kernel.lengthscale) * np.cos(kernel.frequency * tau)
    if v == "Periodic":
        s = np.sin(np.pi * tau / kernel.period)
        return kernel.variance * np.exp(-2 * s ** 2 / kernel.lengthscale ** 2)
    if v == "Sum":
        return sum(evaluate_kernel(c, tau) for c in kernel.components)
    return evaluate_kernel(kernel.components[0], tau) * evaluate_kernel(kernel.components[1], tau)


@dataclass(frozen=True)
class DiscreteTransition:
    A: np.ndarray
    Q: np.ndarray
    dt: float


@dataclass(frozen=True)
class ContinuousSSM:
    F: np.ndarray
    L: np.ndarray
    Qc: np.ndarray
    H: np.ndarray
    Pinf: np.ndarray
    _cache: Dict[bytes, DiscreteTransition] = field(default_factory=dict, compare=False, repr=False)
    _lock: threading.Lock = field(default_factory=threading.Lock, compare=False, repr=False)

    @property
    def state_dim(self) -> int:
        return self.F.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.H.shape[0]

    def lyapunov_residual(self) -> np.ndarray:
        return self.F @ self.Pinf + self.Pinf @ self.F.T + self.L @ self.Qc @ self.L.T


def _matern_ssm(kernel: KernelSpec) -> ContinuousSSM:
    p = MATERN_ORDERS[kernel.variant]
    s = p + 1
    lam = np.sqrt(2 * p + 1) / kernel.lengthscale
    F = np.diag(np.ones(s - 1), k=1)
    F[-1, :] = [-comb(s, i) * lam ** (s - i) for i in range(s)]
    L = np.zeros((s, 1))
    L[-1, 0] = 1.0
    q = 2 * kernel.variance * np.sqrt(np.pi) * lam ** (2 * p + 1) * special.gamma(p + 1) / special.gamma(p + 0.5)
    Qc = np.array([[q]])
    Pinf = linalg.solve_continuous_lyapunov(F, -L @ Qc @ L.T)
    # odd-order derivative cross-covariances vanish at lag zero
    idx = np.add.outer(np.arange(s), np.arange(s))
    Pinf = symmetrise(np.where(idx % 2 == 1, 0.0, Pinf))
    H = np.zeros((1, s))
    H[0, 0] = 1.0
    return ContinuousSSM(F=F, L=L, Qc=Qc, H=H, Pinf=Pinf)


def _rotation_ssm(variance: float, frequency: float) -> ContinuousSSM:
    F = np.array([[0.0, -frequency], [frequency, 0.0]])
    return ContinuousSSM(F=F, L=np.eye(2), Qc=np.zeros((2, 2)), H=np.array([[1.0, 0.0]]), Pinf=variance * np.eye(2))


def _kronecker_product(a: ContinuousSSM, b: ContinuousSSM) -> ContinuousSSM:
    F = np.kron(a.F, np.eye(b.state_dim)) + np.kron(np.eye(a.state_dim), b.F)
    Pinf = np.kron(a.Pinf, b.Pinf)
    Qc = symmetrise(-(F @ Pinf + Pinf @ F.T))
    return ContinuousSSM(F=F, L=np.eye(F.shape[0]), Qc=Qc, H=np.kron(a.H, b.H), Pinf=Pinf)


def _block_stack(parts: Sequence[ContinuousSSM], stack_h: bool) -> ContinuousSSM:
    H = linalg.block_diag(*[p.H for p in parts]) if stack_h else np.hstack([p.H for p in parts])
    return ContinuousSSM(
        F=linalg.block_diag(*[p.F for p in parts]),
        L=linalg.block_diag(*[p.L for p in parts]),
        Qc=linalg.block_diag(*[p.Qc for p in parts]),
        H=H,
        Pinf=linalg.block_diag(*[p.Pinf for p in parts]),
    )


def _periodic_ssm(kernel: KernelSpec) -> ContinuousSSM:
    w0 = 2 * np.pi / kernel.period
    z = kernel.lengthscale ** -2
    blocks = []
    for j in range(int(kernel.harmonics)):
        weight = (1.0 if j == 0 else 2.0) * special.ive(j, z)
        blocks.append(_rotation_ssm(kernel.variance * weight, j * w0))
    return _block_stack(blocks, stack_h=False)


def to_state_space(kernel: KernelSpec) -> ContinuousSSM:
    v = kernel.variant
    if v in MATERN_ORDERS:
        return _matern_ssm(kernel)
    if v == "Cosine":
        return _rotation_ssm(kernel.variance, kernel.frequency)
    if v == "QuasiPeriodic":
        return _kronecker_product(_rotation_ssm(kernel.variance, kernel.frequency),
                                  _matern_ssm(KernelSpec("Matern12", lengthscale=kernel.lengthscale)))
    if v == "Periodic":
        return _periodic_ssm(kernel)
    if v == "Sum":
        return _block_stack([to_state_space(c) for c in kernel.components], stack_h=False)
    if v == "Product":
        return _kronecker_product(*[to_state_space(c) for c in kernel.components])
    raise KernelSpecError(f"no state-space form for {v!r}")


def stack_latents(kernels: Sequence[KernelSpec]) -> ContinuousSSM:
    """Independent GPs, one per latent function; H reads each block into its own row."""
    if not kernels:
        raise KernelSpecError("at least one latent kernel is required")
    if len(kernels) == 1:
        return to_state_space(kernels[0])
    return _block_stack([to_state_space(k) for k in kernels], stack_h=True)


def discretize(ssm: ContinuousSSM, dt: float) -> DiscreteTransition:
    dt = float(dt)
    if dt < 0 or not np.isfinite(dt):
        raise ValueError(f"dt must be a finite non-negative number, got {dt}")
    key = np.float64(dt).tobytes()
    cached = ssm._cache.get(key)
    if cached is not None:
        return cached
    s = ssm.state_dim
    if dt == 0.0:
        trans = DiscreteTransition(A=np.eye(s), Q=np.zeros((s, s)), dt=0.0)
    else:
        A = linalg.expm(ssm.F * dt)
        Q = symmetrise(ssm.Pinf - A @ ssm.Pinf @ A.T)
        trans = DiscreteTransition(A=A, Q=Q, dt=dt)
    with ssm._lock:
        return ssm._cache.setdefault(key, trans)


def stationary_prior(ssm: ContinuousSSM) -> GaussianMoments:
    return GaussianMoments(mean=np.zeros(ssm.state_dim), cov=ssm.Pinf.copy())
