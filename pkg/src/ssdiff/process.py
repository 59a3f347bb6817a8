"""The generalized linear diffusion process.

Forward marginals are isotropic by construction,
``q(x_t | x_0) = N(M_{1:t} x_0, sigma_t^2 I)``, and the reverse posterior is

    mean = mu_{t-1} + rho * M_t^T (x_t - M_t mu_{t-1})
    cov  = sigma_{t-1}^2 (I - rho * M_t^T M_t),   rho = sigma_{t-1}^2 / sigma_t^2

All functions accept a leading batch axis on tensor arguments.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import DomainError, ParameterError, ShapeError, StateError
from .lanczos import LanczosConfig, lanczos_sqrt_apply
from .linops import (
    LinearOperator,
    ScaledIdentity,
    check_psd_feasibility,
    cumulative_M,
    image_shape,
    lambda_max,
    materialize_dense,
    resize_chain,
    step_operator,
)
from .schedules import NoiseSchedule, ResolutionSchedule

log = logging.getLogger(__name__)

EXACT = "exact"
ISOTROPIC_APPROX = "isotropic_approx"
MODES = (EXACT, ISOTROPIC_APPROX)


@dataclass(frozen=True)
class DiffusionProcess:
    noise: NoiseSchedule
    resolution: ResolutionSchedule
    channels: int = 1
    lanczos: LanczosConfig = field(default_factory=LanczosConfig)

    def __post_init__(self):
        if self.noise.T != self.resolution.T:
            raise ParameterError(
                f"noise schedule has T={self.noise.T}, resolution schedule T={self.resolution.T}"
            )
        if self.infeasible_steps:
            log.warning(
                "posterior covariance is infeasible at steps %s", sorted(self.infeasible_steps)
            )

    @property
    def T(self) -> int:
        return self.noise.T

    def shape(self, t: int) -> tuple[int, int, int]:
        return image_shape(self.channels, self.resolution.r(t))

    def step_op(self, t: int) -> LinearOperator:
        return step_operator(self.noise, self.resolution, t, self.channels)

    def cumulative_op(self, t: int) -> LinearOperator:
        return cumulative_M(self.noise, self.resolution, t, self.channels)

    def resize_chain(self, t: int) -> LinearOperator:
        return resize_chain(self.resolution, t, self.channels)

    @cached_property
    def infeasible_steps(self) -> frozenset[int]:
        # scalar steps satisfy the bound identically (the margin is beta_t), so
        # only resolution-changing steps need the spectral check
        bad = set()
        for t in self.resolution.transitions:
            if not self._transition_feasible(t):
                bad.add(t)
        return frozenset(bad)

    def _transition_feasible(self, t: int) -> bool:
        lam = lambda_max(self.step_op(t)).value
        return self.noise.sigma[t] ** 2 >= self.noise.sigma[t - 1] ** 2 * lam

    def psd_report(self):
        return check_psd_feasibility(self.noise, self.resolution, self.channels)

    def require_feasible(self, t: int) -> None:
        if t in self.infeasible_steps:
            raise StateError(f"posterior covariance at t={t} is not positive semi-definite")


def _expect(x: np.ndarray, shape, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != tuple(shape):
        raise ShapeError(f"{what}: expected trailing shape {tuple(shape)}, got {x.shape}")
    return x


def marginal_sample(p: DiffusionProcess, x0: np.ndarray, t: int, eps: np.ndarray) -> np.ndarray:
    """``x_t = M_{1:t} x0 + sigma_t * eps``."""
    t = p.noise.check_t(t)
    x0 = _expect(x0, p.shape(0), "x0")
    eps = _expect(eps, p.shape(t), "eps")
    return p.cumulative_op(t).apply(x0) + p.noise.sigma[t] * eps


def transition_cov_apply(p: DiffusionProcess, t: int, v: np.ndarray) -> np.ndarray:
    """``(sigma_t^2 I - sigma_{t-1}^2 M_t M_t^T) v``."""
    t = p.noise.check_t(t, allow_zero=False)
    p.require_feasible(t)
    v = _expect(v, p.shape(t), "v")
    M = p.step_op(t)
    return p.noise.sigma[t] ** 2 * v - p.noise.sigma[t - 1] ** 2 * M.apply(M.adjoint(v))


@dataclass(frozen=True)
class PosteriorParams:
    t: int
    mean: np.ndarray
    rho: float
    operator: LinearOperator
    sigma_tminus1: float

    def cov_apply(self, v: np.ndarray) -> np.ndarray:
        """``Sigma_{t->t-1} v`` without materialising the covariance."""
        M = self.operator
        return self.sigma_tminus1**2 * (v - self.rho * M.adjoint(M.apply(v)))

    def normalized_cov_apply(self, v: np.ndarray) -> np.ndarray:
        """``(I - rho M^T M) v``; the covariance divided by ``sigma_{t-1}^2``."""
        M = self.operator
        return v - self.rho * M.adjoint(M.apply(v))

    @property
    def scalar_variance(self) -> float | None:
        """Per-pixel variance when the step operator is a scaled identity."""
        if not isinstance(self.operator, ScaledIdentity):
            return None
        c2 = self.operator.scale**2
        return self.sigma_tminus1**2 * (1.0 - self.rho * c2)


def posterior_params(
    p: DiffusionProcess, x_t: np.ndarray, mu_tminus1: np.ndarray, t: int
) -> PosteriorParams:
    """Posterior of ``x_{t-1}`` given ``x_t`` and the (scaled) mean ``mu_{t-1} = M_{1:t-1} x0``."""
    t = int(t)
    if t < 1:
        raise DomainError("posterior is defined for t >= 1")
    t = p.noise.check_t(t, allow_zero=False)
    x_t = _expect(x_t, p.shape(t), "x_t")
    mu = _expect(mu_tminus1, p.shape(t - 1), "mu_tminus1")
    M = p.step_op(t)
    s_prev = float(p.noise.sigma[t - 1])
    rho = s_prev**2 / float(p.noise.sigma[t]) ** 2
    mean = mu + rho * M.adjoint(x_t - M.apply(mu)) if rho > 0 else mu.copy()
    return PosteriorParams(t=t, mean=mean, rho=rho, operator=M, sigma_tminus1=s_prev)


def posterior_sample(
    p: DiffusionProcess,
    params: PosteriorParams,
    eps: np.ndarray,
    mode: str = EXACT,
    eps_aux: np.ndarray | None = None,
    match_mean: bool = False,
) -> np.ndarray:
    """Draw ``x_{t-1}`` from the posterior.

    ``exact`` colours ``eps`` with the Lanczos square root of the covariance.
    ``isotropic_approx`` (resolution-changing steps only) first draws that
    non-isotropic reference, measures its per-channel variance over height and
    width, and returns white noise ``eps_aux`` scaled to that variance. With
    ``match_mean=True`` the reference's per-channel mean is added as well.
    Resolution-preserving steps are identical in both modes.
    """
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    t = params.t
    eps = _expect(eps, p.shape(t - 1), "eps")
    if params.sigma_tminus1 == 0.0:
        return np.broadcast_to(params.mean, np.broadcast_shapes(params.mean.shape, eps.shape)).copy()
    p.require_feasible(t)

    var = params.scalar_variance
    if var is not None:
        if var < 0:
            raise StateError(f"negative posterior variance at t={t}")
        return params.mean + math.sqrt(var) * eps

    batch_ndim = eps.ndim - 3
    colored = lanczos_sqrt_apply(params.normalized_cov_apply, eps, p.lanczos, batch_ndim)
    noise = params.sigma_tminus1 * colored
    if mode == ISOTROPIC_APPROX:
        if eps_aux is None:
            raise ParameterError("isotropic_approx needs an auxiliary white-noise draw")
        eps_aux = _expect(eps_aux, p.shape(t - 1), "eps_aux")
        std = noise.std(axis=(-2, -1), keepdims=True)
        iso = std * eps_aux
        if match_mean:
            iso = iso + noise.mean(axis=(-2, -1), keepdims=True)
        noise = iso
    return params.mean + noise


def ddpm_posterior(ns: NoiseSchedule, x_t: np.ndarray, x0: np.ndarray, t: int) -> tuple[np.ndarray, float]:
    """Textbook DDPM posterior mean and variance (used for collapse checks)."""
    t = ns.check_t(t, allow_zero=False)
    ab, ab_prev, b, al = ns.alpha_bar[t], ns.alpha_bar[t - 1], ns.beta[t], ns.alpha[t]
    mean = (np.sqrt(al) * (1 - ab_prev) * x_t + np.sqrt(ab_prev) * b * x0) / (1 - ab)
    return mean, float((1 - ab_prev) / (1 - ab) * b)


@dataclass(frozen=True)
class ConsistencyReport:
    t: int
    cov_error: float
    mean_error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.cov_error <= self.tol and self.mean_error <= self.tol


def forward_consistency_check(p: DiffusionProcess, t: int, tol: float = 1e-8) -> ConsistencyReport:
    """Dense check that one transition composed with the ``t-1`` marginal gives the ``t`` marginal.

    Covariance: ``M_t Sigma_{t-1} M_t^T + Sigma_{t|t-1} == sigma_t^2 I`` with
    ``Sigma_{t|t-1}`` obtained by probing :func:`transition_cov_apply`.
    Mean: ``M_t M_{1:t-1} == M_{1:t}`` as dense matrices.
    """
    t = p.noise.check_t(t, allow_zero=False)
    n_t = math.prod(p.shape(t))
    D_step = materialize_dense(p.step_op(t))
    sig_prev2 = p.noise.sigma[t - 1] ** 2
    basis = np.eye(n_t).reshape((n_t,) + p.shape(t))
    trans_cov = transition_cov_apply(p, t, basis).reshape(n_t, n_t).T
    composed = D_step @ (sig_prev2 * np.eye(D_step.shape[1])) @ D_step.T + trans_cov
    cov_err = float(np.max(np.abs(composed - p.noise.sigma[t] ** 2 * np.eye(n_t))))

    D_prev = materialize_dense(p.cumulative_op(t - 1))
    D_cur = materialize_dense(p.cumulative_op(t))
    mean_err = float(np.max(np.abs(D_step @ D_prev - D_cur)))
    return ConsistencyReport(t, cov_err, mean_err, tol)
