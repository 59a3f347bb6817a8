"""Dense linear-algebra references for the implicit process machinery.

These build explicit matrices and invert them directly, so they share no code
path with the operator-based implementation beyond ``materialize_dense``.
Only usable at desk scale (flattened images up to the dense cap).
"""

from __future__ import annotations

import numpy as np

from .linops import materialize_dense
from .process import DiffusionProcess


def dense_step(p: DiffusionProcess, t: int) -> np.ndarray:
    return materialize_dense(p.step_op(t))


def dense_transition_cov(p: DiffusionProcess, t: int) -> np.ndarray:
    """``Sigma_t - M_t Sigma_{t-1} M_t^T`` with isotropic marginals."""
    M = dense_step(p, t)
    return p.noise.sigma[t] ** 2 * np.eye(M.shape[0]) - p.noise.sigma[t - 1] ** 2 * (M @ M.T)


def dense_posterior_unsimplified(
    p: DiffusionProcess, x_t: np.ndarray, mu_tminus1: np.ndarray, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Information-form posterior: explicit inverses of both covariances.

    ``cov = (Sigma_{t-1}^{-1} + M^T Sigma_{t|t-1}^{-1} M)^{-1}`` and
    ``mean = cov (Sigma_{t-1}^{-1} mu_{t-1} + M^T Sigma_{t|t-1}^{-1} x_t)``.
    Requires ``t >= 2`` (``sigma_{t-1} > 0``) and a strictly feasible step.
    """
    M = dense_step(p, t)
    n_prev = M.shape[1]
    prev_cov_inv = np.eye(n_prev) / p.noise.sigma[t - 1] ** 2
    trans_inv = np.linalg.inv(dense_transition_cov(p, t))
    cov = np.linalg.inv(prev_cov_inv + M.T @ trans_inv @ M)
    cov = 0.5 * (cov + cov.T)
    rhs = prev_cov_inv @ np.ravel(mu_tminus1) + M.T @ trans_inv @ np.ravel(x_t)
    return cov @ rhs, cov


def dense_posterior_simplified(
    p: DiffusionProcess, x_t: np.ndarray, mu_tminus1: np.ndarray, t: int
) -> tuple[np.ndarray, np.ndarray]:
    """Woodbury-simplified posterior evaluated with dense matrices."""
    M = dense_step(p, t)
    s_prev2 = p.noise.sigma[t - 1] ** 2
    rho = s_prev2 / p.noise.sigma[t] ** 2
    mu = np.ravel(mu_tminus1)
    mean = mu + rho * M.T @ (np.ravel(x_t) - M @ mu)
    cov = s_prev2 * np.eye(M.shape[1]) - s_prev2 * rho * (M.T @ M)
    return mean, cov


def dense_sqrtm_psd(A: np.ndarray) -> np.ndarray:
    evals, evecs = np.linalg.eigh(0.5 * (A + A.T))
    return (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
