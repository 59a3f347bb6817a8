"""Lanczos approximation of ``A^{1/2} x`` for implicit symmetric PSD operators.

The operator is a callable acting on arrays with any number of leading batch
axes. Several right-hand sides are processed together, each with its own
Krylov basis; the per-vector recurrences are vectorised over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import ParameterError

MatVec = Callable[[np.ndarray], np.ndarray]

_BREAKDOWN = 1e-12
# right-hand sides solved together; bounds the Krylov basis at CHUNK x n x max_iters
CHUNK = 2048


@dataclass(frozen=True)
class LanczosConfig:
    max_iters: int = 32
    reorthogonalize: bool = True
    eig_floor: float = 0.0
    tol: float = 1e-6

    def __post_init__(self):
        if self.max_iters < 1:
            raise ParameterError("max_iters must be >= 1")
        if self.eig_floor < 0:
            raise ParameterError("eig_floor must be >= 0")


@dataclass(frozen=True)
class LanczosInfo:
    iterations: int
    converged: bool
    breakdown: bool


def _sqrt_tridiag_e1(alphas: np.ndarray, betas: np.ndarray, floor: float) -> np.ndarray:
    """``f(T) e_1`` for a batch of tridiagonals; ``alphas (B, k)``, ``betas (B, k-1)``."""
    k = alphas.shape[1]
    T = np.zeros((alphas.shape[0], k, k))
    idx = np.arange(k)
    T[:, idx, idx] = alphas
    if k > 1:
        T[:, idx[:-1], idx[1:]] = betas
        T[:, idx[1:], idx[:-1]] = betas
    evals, evecs = np.linalg.eigh(T)
    fvals = np.sqrt(np.maximum(evals, floor))
    return np.einsum("bij,bj,bj->bi", evecs, fvals, evecs[:, 0, :])


def lanczos_sqrt(
    matvec: MatVec,
    x: np.ndarray,
    cfg: LanczosConfig = LanczosConfig(),
    batch_ndim: int = 0,
) -> tuple[np.ndarray, LanczosInfo]:
    """Return ``A^{1/2} x`` and iteration diagnostics.

    ``x`` has shape ``batch + vshape`` where ``batch`` spans the first
    ``batch_ndim`` axes. ``matvec`` must accept arrays of that same shape.
    Zero right-hand sides map to zero.
    """
    x = np.asarray(x, dtype=np.float64)
    batch = x.shape[:batch_ndim]
    vshape = x.shape[batch_ndim:]
    B = int(np.prod(batch, dtype=np.int64))
    if B > CHUNK:
        flat = x.reshape((B,) + vshape)
        parts = [lanczos_sqrt(matvec, flat[i : i + CHUNK], cfg, 1) for i in range(0, B, CHUNK)]
        y = np.concatenate([pt[0] for pt in parts]).reshape(x.shape)
        infos = [pt[1] for pt in parts]
        return y, LanczosInfo(
            max(i.iterations for i in infos),
            all(i.converged for i in infos),
            all(i.breakdown for i in infos),
        )
    X = x.reshape(B, -1)

    def A(q):
        return np.asarray(matvec(q.reshape(batch + vshape)), dtype=np.float64).reshape(B, -1)

    norms = np.linalg.norm(X, axis=1)
    live = norms > 0
    safe = np.where(live, norms, 1.0)
    q = X / safe[:, None]
    Q = [q]
    alphas: list[np.ndarray] = []
    betas: list[np.ndarray] = []
    q_prev = np.zeros_like(q)
    beta_prev = np.zeros(B)
    y = np.zeros_like(X)
    converged = False
    broke = False
    k = 0
    for k in range(1, cfg.max_iters + 1):
        w = A(q)
        alpha = np.einsum("bi,bi->b", q, w)
        alphas.append(alpha)
        w = w - alpha[:, None] * q - beta_prev[:, None] * q_prev
        if cfg.reorthogonalize:
            Qm = np.stack(Q, axis=2)
            for _ in range(2):
                w = w - np.einsum("bik,bk->bi", Qm, np.einsum("bik,bi->bk", Qm, w))
        beta = np.linalg.norm(w, axis=1)
        scale = np.abs(alpha) + beta_prev + 1.0
        done = beta <= _BREAKDOWN * scale

        coeffs = _sqrt_tridiag_e1(np.stack(alphas, 1), np.stack(betas, 1) if betas else np.zeros((B, 0)), cfg.eig_floor)
        y_new = norms[:, None] * np.einsum("bik,bk->bi", np.stack(Q, axis=2), coeffs)
        change = np.linalg.norm(y_new - y, axis=1)
        ynorm = np.linalg.norm(y_new, axis=1)
        small = change <= cfg.tol * np.where(ynorm > 0, ynorm, 1.0)
        y = y_new
        if np.all(done | ~live):
            broke = True
            converged = True
            break
        if k > 1 and np.all(small | done | ~live):
            converged = True
            break
        if k == cfg.max_iters:
            break
        # frozen vectors carry zero basis vectors, which leave f(T) e1 unchanged
        q_next = np.where(done[:, None], 0.0, w / np.where(done, 1.0, beta)[:, None])
        beta = np.where(done, 0.0, beta)
        betas.append(beta)
        q_prev, q, beta_prev = q, q_next, beta
        Q.append(q)
    return y.reshape(x.shape), LanczosInfo(k, converged, broke)


def lanczos_sqrt_apply(
    matvec: MatVec,
    x: np.ndarray,
    cfg: LanczosConfig = LanczosConfig(),
    batch_ndim: int = 0,
) -> np.ndarray:
    return lanczos_sqrt(matvec, x, cfg, batch_ndim)[0]


def symmetry_defect(matvec: MatVec, shape: tuple[int, ...], trials: int = 4, seed: int = 0) -> float:
    """Largest relative ``|<u, A v> - <A u, v>|`` over random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        u = rng.standard_normal(shape)
        v = rng.standard_normal(shape)
        Au, Av = matvec(u), matvec(v)
        lhs, rhs = float(np.vdot(u, Av)), float(np.vdot(Au, v))
        denom = np.linalg.norm(u) * np.linalg.norm(Av) + np.linalg.norm(Au) * np.linalg.norm(v)
        worst = max(worst, abs(lhs - rhs) / max(denom, 1e-300))
    return worst
