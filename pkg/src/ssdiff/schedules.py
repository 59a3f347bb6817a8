"""Noise schedules, SNR weights, and timestep-to-resolution schedules.

Conventions
-----------
Timesteps run ``0..T``. Index 0 is the clean image: ``alpha_bar[0] = 1`` so
``sigma[0] = 0`` and ``a[0] = 1``. Per-step arrays (``beta``, ``alpha``) are
stored with a padding entry at index 0 (``beta[0] = 0``, ``alpha[0] = 1``) so
that every array can be indexed directly by ``t``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .errors import ConstructionError, DomainError, ParameterError

DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 0.02
SCHEDULE_KINDS = ("equal", "convex", "tanh", "sigmoid", "explicit")


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray
    sigma: np.ndarray
    a: np.ndarray

    @classmethod
    def from_betas(cls, betas: Sequence[float]) -> "NoiseSchedule":
        """Build a schedule from the per-step variances ``beta[1..T]``."""
        b = np.asarray(betas, dtype=np.float64).ravel()
        if b.size < 1:
            raise ParameterError("need at least one timestep")
        if not np.all((b > 0.0) & (b < 1.0)):
            raise ParameterError("every beta must lie in (0, 1)")
        beta = np.concatenate([[0.0], b])
        alpha = 1.0 - beta
        alpha_bar = np.cumprod(alpha)
        return cls(
            T=int(b.size),
            beta=_frozen(beta),
            alpha=_frozen(alpha),
            alpha_bar=_frozen(alpha_bar),
            sigma=_frozen(np.sqrt(1.0 - alpha_bar)),
            a=_frozen(np.sqrt(alpha_bar)),
        )

    def check_t(self, t: int, *, allow_zero: bool = True) -> int:
        t = int(t)
        lo = 0 if allow_zero else 1
        if not lo <= t <= self.T:
            raise DomainError(f"timestep {t} outside [{lo}, {self.T}]")
        return t

    def posterior_variance(self, t: int) -> float:
        """DDPM posterior variance ``(1 - abar[t-1]) / (1 - abar[t]) * beta[t]``."""
        t = self.check_t(t, allow_zero=False)
        return float((1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t]) * self.beta[t])


def linear_beta_schedule(
    T: int,
    beta_start: float = DEFAULT_BETA_START,
    beta_end: float = DEFAULT_BETA_END,
) -> NoiseSchedule:
    if int(T) != T or T < 1:
        raise ParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ParameterError(
            f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
        )
    return NoiseSchedule.from_betas(np.linspace(beta_start, beta_end, int(T)))


def snr(sched: NoiseSchedule, t: int) -> float:
    """Signal-to-noise ratio ``abar[t] / (1 - abar[t])``; undefined at ``t = 0``."""
    t = sched.check_t(t, allow_zero=False)
    ab = sched.alpha_bar[t]
    return float(ab / (1.0 - ab))


def min_snr_weight(sched: NoiseSchedule, t: int, gamma: float = 5.0) -> float:
    if gamma <= 0:
        raise ParameterError("gamma must be positive")
    return min(snr(sched, t), float(gamma))


# --- continuous resolution-schedule shapes -------------------------------------


def _cubic(w):
    # -2x^3 + 3x^2 - 0.5 written in w = x - 0.5; avoids cancellation near the centre
    return 1.5 * w - 2.0 * w**3


def _stretch(v, gamma: float):
    # odd power map, kept inside [-0.5, 0.5] where the cubic is monotone
    return np.clip(np.sign(v) * np.abs(v) ** gamma, -0.5, 0.5)


def tanh_like(u, gamma: float):
    """Monotone map [0, 1] -> [0, 1], flat in the middle for ``gamma > 1``."""
    u = np.asarray(u, dtype=np.float64)
    norm = _cubic(_stretch(0.5, gamma))
    p_hat = _cubic(_stretch(u - 0.5, gamma)) / norm
    return 0.5 * p_hat + 0.5


def _bisect_preimage(y, gamma: float, tol: float, strict: bool):
    lo = np.zeros_like(y)
    hi = np.ones_like(y)
    while np.max(hi - lo, initial=0.0) > tol:
        mid = 0.5 * (lo + hi)
        v = tanh_like(mid, gamma)
        left = v < y if strict else v <= y
        lo = np.where(left, mid, lo)
        hi = np.where(left, hi, mid)
    return 0.5 * (lo + hi)


def sigmoid_like(y, gamma: float, tol: float = 1e-10):
    """Inverse of :func:`tanh_like` on [0, 1], by bisection.

    Returns the centre of the preimage interval of ``y``. That interval is
    wider than ``tol`` only where ``tanh_like`` is flat to machine precision
    (around 0.5 for large ``gamma``, whole plateaus for ``gamma < 1``). The
    endpoints are pinned to 0 and 1 so the map is monotone onto [0, 1].
    """
    y = np.asarray(y, dtype=np.float64)
    lower = _bisect_preimage(y, gamma, tol, strict=True)
    upper = _bisect_preimage(y, gamma, tol, strict=False)
    return np.where(y <= 0.0, 0.0, np.where(y >= 1.0, 1.0, 0.5 * (lower + upper)))


def decay_fraction(kind: str, tau, gamma: float = 1.0):
    """Fraction of the level ladder already descended at normalised time ``tau``.

    0 means full resolution, 1 means the coarsest level. The continuous
    resolution is ``r_min * 2 ** ((n - 1) * (1 - decay_fraction))``.
    """
    tau = np.clip(np.asarray(tau, dtype=np.float64), 0.0, 1.0)
    if kind in ("equal", "explicit"):
        return tau
    if kind == "convex":
        return 1.0 - (1.0 - tau) ** gamma
    if kind == "tanh":
        return 1.0 - tanh_like(1.0 - tau, gamma)
    if kind == "sigmoid":
        return 1.0 - sigmoid_like(1.0 - tau, gamma)
    raise ParameterError(f"unknown schedule kind {kind!r}")


def continuous_resolution(kind: str, tau, gamma: float, r_min: float, n: int):
    return r_min * 2.0 ** ((n - 1) * (1.0 - decay_fraction(kind, tau, gamma)))


# --- discrete resolution schedules ---------------------------------------------


@dataclass(frozen=True)
class ResolutionSchedule:
    levels: tuple[int, ...]
    T: int
    kind: str
    gamma: float
    r_of_t: np.ndarray = field(repr=False)

    @property
    def r_max(self) -> int:
        return self.levels[-1]

    @property
    def r_min(self) -> int:
        return self.levels[0]

    def r(self, t: int) -> int:
        return int(self.r_of_t[t])

    def is_transition(self, t: int) -> bool:
        return 1 <= t <= self.T and self.r_of_t[t] != self.r_of_t[t - 1]

    @cached_property
    def transitions(self) -> tuple[int, ...]:
        """Steps ``t`` with ``r(t) != r(t-1)``, ascending."""
        return tuple(int(t) + 1 for t in np.flatnonzero(np.diff(self.r_of_t)))


def _raw_indices(kind: str, gamma: float, n: int, T: int) -> np.ndarray:
    t = np.arange(T + 1)
    if kind in ("equal", "explicit"):
        # integer arithmetic avoids floor() landing just below an exact multiple
        idx = n - 1 - (n * t) // (T - 1)
    else:
        f = decay_fraction(kind, t / (T - 1), gamma)
        idx = n - 1 - np.floor(n * f).astype(np.int64)
    return np.clip(idx, 0, n - 1)


def _spread_transitions(idx: np.ndarray, n: int, T: int) -> np.ndarray:
    """Force one level change per transition step.

    Coarse ``T`` with steep shapes can drop two levels in one step; the
    transition step of each level boundary is pushed later (then earlier, if
    it runs past ``T``) so that every level is visited.
    """
    # steps[j] = first t whose index is at or below n - 1 - j, j = 1..n-1
    steps = [int(np.argmax(idx <= n - 1 - j)) for j in range(1, n)]
    for j in range(1, len(steps)):
        steps[j] = max(steps[j], steps[j - 1] + 1)
    for j in range(len(steps) - 1, -1, -1):
        cap = T - (len(steps) - 1 - j)
        steps[j] = min(steps[j], cap)
        if j + 1 < len(steps):
            steps[j] = min(steps[j], steps[j + 1] - 1)
    out = np.full(T + 1, n - 1, dtype=np.int64)
    for j, s in enumerate(steps, start=1):
        out[s:] = n - 1 - j
    return out


def make_resolution_schedule(
    kind: str,
    gamma: float,
    levels: Sequence[int],
    T: int,
    table: Sequence[int] | None = None,
) -> ResolutionSchedule:
    """Build ``r(t)`` for ``t = 0..T`` from a named family.

    ``kind`` is one of ``equal``, ``convex``, ``tanh``, ``sigmoid`` or
    ``explicit``. For ``explicit`` a full ``table`` of ``T + 1`` resolutions
    may be given; without one the levels are spread with the ``equal`` rule.
    """
    if kind not in SCHEDULE_KINDS:
        raise ParameterError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    levels = tuple(int(r) for r in levels)
    n = len(levels)
    if n == 0 or any(r < 1 for r in levels):
        raise ParameterError("levels must be a nonempty list of positive resolutions")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ParameterError(f"levels must be strictly ascending, got {levels}")
    T = int(T)
    if T < max(n, 1):
        raise ParameterError(f"T={T} must be at least the number of levels ({n})")
    if kind in ("convex", "tanh", "sigmoid") and not gamma > 0:
        raise ParameterError("gamma must be positive")

    if table is not None:
        if kind != "explicit":
            raise ParameterError("an explicit table requires kind='explicit'")
        r_of_t = np.asarray(table, dtype=np.int64)
        if r_of_t.shape != (T + 1,):
            raise ConstructionError(f"table must have T+1={T + 1} entries")
        if not set(r_of_t.tolist()) <= set(levels):
            raise ConstructionError("table contains resolutions outside levels")
    elif n == 1:
        r_of_t = np.full(T + 1, levels[0], dtype=np.int64)
    else:
        idx = _spread_transitions(_raw_indices(kind, gamma, n, T), n, T)
        r_of_t = np.asarray(levels, dtype=np.int64)[idx]

    if np.any(np.diff(r_of_t) > 0):
        raise ConstructionError("resolution schedule is not non-increasing in t")
    if r_of_t[0] != levels[-1] or r_of_t[-1] != levels[0]:
        raise ConstructionError("schedule must start at r_max and end at r_min")
    if int(np.count_nonzero(np.diff(r_of_t))) != n - 1:
        raise ConstructionError("every level must be visited exactly once in order")
    return ResolutionSchedule(
        levels=levels,
        T=T,
        kind=kind,
        gamma=float(gamma),
        r_of_t=_frozen(r_of_t),
    )


def single_level_schedule(resolution: int, T: int) -> ResolutionSchedule:
    """The DDPM degenerate case: one resolution for every timestep."""
    return make_resolution_schedule("equal", 1.0, [resolution], T)


def transition_steps(rs: ResolutionSchedule) -> list[int]:
    return list(rs.transitions)


def parse_schedule_spec(spec: str) -> tuple[str, float]:
    """Parse ``"convex:0.5"``-style strings into ``(kind, gamma)``."""
    aliases = {
        "equal": "equal",
        "convex": "convex",
        "convexdecay": "convex",
        "tanh": "tanh",
        "tanhlikedecay": "tanh",
        "sigmoid": "sigmoid",
        "sigmoidlikedecay": "sigmoid",
        "explicit": "explicit",
    }
    name, _, g = spec.partition(":")
    key = name.strip().lower().replace("_", "")
    if key not in aliases:
        raise ParameterError(f"unknown schedule {spec!r}")
    gamma = float(g) if g else 1.0
    return aliases[key], gamma
