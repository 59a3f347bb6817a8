"""Information-degradation curves, covariance diagnostics and timestep backtracking."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erfc
from scipy.stats import binom, norm

from .errors import DomainError, NotFoundError, ParameterError, ResourceError, ShapeError
from .linops import DENSE_CAP
from .schedules import NoiseSchedule

TIMESTEP = "timestep"
RESOLUTION = "resolution"

# Phi(-y) < 1e-17 beyond this point, so the integrand is zero in double precision
_TAIL = 8.5


@dataclass(frozen=True)
class InfoCurve:
    axis: str
    coords: np.ndarray
    values: np.ndarray

    @property
    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.coords.tolist(), self.values.tolist()))


def norm_cdf(x):
    """Standard normal CDF through ``erfc``; accurate in both tails."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) / math.sqrt(2.0))


def _simpson(y: np.ndarray, h: float) -> float:
    return h / 3.0 * float(y[0] + y[-1] + 4.0 * y[1:-1:2].sum() + 2.0 * y[2:-1:2].sum())


def info_from_s(s: float, quad_points: int = 512) -> float:
    """``1 - 2 * int_0^1 Phi(-s x) dx`` by composite Simpson.

    The integrand is negligible past ``x = 8.5 / s``, so the grid only covers
    ``[0, min(1, 8.5 / s)]``; this keeps the rule accurate for large ``s``.
    """
    if quad_points < 16:
        raise ParameterError("quad_points must be >= 16")
    if s < 0 or math.isnan(s):
        raise DomainError("s must be non-negative")
    if math.isinf(s):
        return 1.0
    if s == 0.0:
        return 0.0
    n = quad_points + (quad_points % 2)
    upper = min(1.0, _TAIL / s)
    x = np.linspace(0.0, upper, n + 1)
    integral = _simpson(norm_cdf(-s * x), upper / n)
    return min(1.0, max(0.0, 1.0 - 2.0 * integral))


def info_closed_form(s: float) -> float:
    """Exact value via ``int_0^s Phi(-y) dy = s Phi(-s) - phi(s) + phi(0)``."""
    if s == 0.0:
        return 0.0
    if math.isinf(s):
        return 1.0
    pdf = lambda y: math.exp(-0.5 * y * y) / math.sqrt(2 * math.pi)  # noqa: E731
    return 1.0 - 2.0 * (s * float(norm_cdf(-s)) - pdf(s) + pdf(0.0)) / s


def info_t_curve(ns: NoiseSchedule, quad_points: int = 512, include_zero: bool = False) -> InfoCurve:
    """``Info(t)`` for ``t = 1..T`` (optionally ``t = 0``, where it is 1)."""
    start = 0 if include_zero else 1
    ts = np.arange(start, ns.T + 1)
    vals = []
    for t in ts:
        ab = float(ns.alpha_bar[t])
        s = math.inf if ab >= 1.0 else math.sqrt(ab / (1.0 - ab))
        vals.append(info_from_s(s, quad_points))
    return InfoCurve(TIMESTEP, ts.astype(np.float64), np.array(vals))


def info_r_curve(points: int = 101) -> InfoCurve:
    """Relative resolution ``r`` on a uniform grid of ``[0, 1]`` against ``r^2``."""
    if points < 2:
        raise ParameterError("points must be >= 2")
    r = np.linspace(0.0, 1.0, points)
    return InfoCurve(RESOLUTION, r, r * r)


def backtrack_c(ns: NoiseSchedule, t: int, s: int) -> float:
    ab_t, ab_s = float(ns.alpha_bar[t]), float(ns.alpha_bar[s])
    return ab_s * (1.0 - ab_t) / (ab_t * (1.0 - ab_s))


def backtrack_timestep(ns: NoiseSchedule, t: int, c: float) -> tuple[int, float]:
    """Noisier timestep ``s >= t`` whose ``c`` value is nearest the requested one.

    Exhaustive over integer ``s``; ties go to the smaller ``s``.
    """
    if not (0.0 < c <= 0.25):
        raise DomainError(f"c must lie in (0, 0.25], got {c}")
    t = ns.check_t(t, allow_zero=False)
    s_vals = np.arange(t, ns.T + 1)
    ab_t = ns.alpha_bar[t]
    ab_s = ns.alpha_bar[s_vals]
    achieved = ab_s * (1.0 - ab_t) / (ab_t * (1.0 - ab_s))
    k = int(np.argmin(np.abs(achieved - c)))
    s = int(s_vals[k])
    got = backtrack_c(ns, t, s)
    if not (c / 2.0 <= got <= 2.0 * c):
        raise NotFoundError(f"no s in [{t}, {ns.T}] reaches c={c} within a factor of 2 (best {got:.4g} at s={s})")
    return s, got


def empirical_covariance(samples, cap: int = DENSE_CAP) -> np.ndarray:
    """Unbiased covariance of flattened samples (rows are samples)."""
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim < 2 or X.shape[0] < 2:
        raise ShapeError("need at least two samples")
    X = X.reshape(X.shape[0], -1)
    if X.shape[1] > cap:
        raise ResourceError(f"sample dimension {X.shape[1]} exceeds the dense cap {cap}")
    Xc = X - X.mean(axis=0)
    return Xc.T @ Xc / (X.shape[0] - 1)


def covariance_stderr(samples, cov: np.ndarray | None = None) -> np.ndarray:
    """Standard error of each entry of the sample covariance, ``sqrt(Var(x_i x_j) / n)``."""
    X = np.asarray(samples, dtype=np.float64)
    X = X.reshape(X.shape[0], -1)
    Xc = X - X.mean(axis=0)
    n = X.shape[0]
    second = (Xc**2).T @ (Xc**2) / n
    if cov is None:
        cov = Xc.T @ Xc / n
    return np.sqrt(np.maximum(second - cov**2, 0.0) / n)


@dataclass(frozen=True)
class EntrywiseAgreement:
    """How many entries of an estimate sit more than ``k`` standard errors from their target.

    With ``m`` entries, about ``m * P(|Z| > k)`` exceedances are expected even
    from a perfect sampler, so the check bounds the exceedance count by a
    binomial quantile and the worst ``|z|`` by a Bonferroni threshold, both at
    family-wise level ``alpha``.
    """

    entries: int
    exceed: int
    allowed: int
    max_z: float
    z_limit: float

    @property
    def passed(self) -> bool:
        return self.exceed <= self.allowed and self.max_z <= self.z_limit


def entrywise_agreement(
    estimate: np.ndarray,
    target: np.ndarray,
    stderr: np.ndarray,
    k: float = 3.0,
    alpha: float = 1e-3,
    diagonal: bool = True,
) -> EntrywiseAgreement:
    """Compare the upper triangles of two symmetric matrices (strict if ``diagonal`` is off)."""
    iu = np.triu_indices(estimate.shape[0], 0 if diagonal else 1)
    diff = np.abs(estimate - target)[iu]
    se = stderr[iu]
    z = np.where(se > 0, diff / np.where(se > 0, se, 1.0), np.where(diff > 0, np.inf, 0.0))
    m = z.size
    p_tail = 2.0 * float(norm.sf(k))
    allowed = int(binom.ppf(1.0 - alpha, m, p_tail))
    z_limit = float(norm.isf(alpha / (2.0 * m)))
    return EntrywiseAgreement(m, int(np.sum(z > k)), allowed, float(z.max()), z_limit)
