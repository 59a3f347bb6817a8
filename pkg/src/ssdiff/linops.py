"""Implicit linear operators on image tensors.

Operators act on arrays shaped ``(..., C, H, W)``; leading axes are treated
as a batch. Flattening for dense work is channel-major row-major, i.e. index
``(c * H + y) * W + x``, which is plain C order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
import numpy as np

from .errors import ParameterError, ResourceError, ShapeError
from .schedules import NoiseSchedule, ResolutionSchedule

Shape = tuple[int, int, int]

DENSE_CAP = 4096


@lru_cache(maxsize=256)
def resize_weights(n_in: int, n_out: int) -> np.ndarray:
    """1-D antialiased bilinear interpolation matrix of shape ``(n_out, n_in)``.

    Output sample ``i`` sits at source coordinate ``(i + 0.5) * s - 0.5`` with
    ``s = n_in / n_out``. The triangle kernel is widened by ``s`` when
    downsampling, and each row is normalised to sum to one.
    """
    if n_in < 1 or n_out < 1:
        raise ParameterError("sizes must be positive")
    s = n_in / n_out
    support = max(s, 1.0)
    centers = (np.arange(n_out) + 0.5) * s - 0.5
    src = np.arange(n_in)
    w = np.maximum(0.0, 1.0 - np.abs(src[None, :] - centers[:, None]) / support)
    w /= w.sum(axis=1, keepdims=True)
    w.setflags(write=False)
    return w


def _check_shape(x: np.ndarray, shape: Shape, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-3:] != tuple(shape):
        raise ShapeError(f"{what}: expected trailing shape {tuple(shape)}, got {x.shape}")
    return x


class LinearOperator:
    in_shape: Shape
    out_shape: Shape

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = _check_shape(x, self.in_shape, "apply")
        return self._apply(x)

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        v = _check_shape(v, self.out_shape, "adjoint")
        return self._adjoint(v)

    __call__ = apply

    @property
    def T(self) -> "LinearOperator":
        return AdjointOperator(self)

    @property
    def in_size(self) -> int:
        return math.prod(self.in_shape)

    @property
    def out_size(self) -> int:
        return math.prod(self.out_shape)

    def _apply(self, x):
        raise NotImplementedError

    def _adjoint(self, v):
        raise NotImplementedError


@dataclass(frozen=True)
class ScaledIdentity(LinearOperator):
    scale: float
    shape: Shape

    @property
    def in_shape(self) -> Shape:
        return self.shape

    @property
    def out_shape(self) -> Shape:
        return self.shape

    def _apply(self, x):
        return self.scale * x

    def _adjoint(self, v):
        return self.scale * v


@dataclass(frozen=True)
class Resize(LinearOperator):
    """``scale * BilinearAntialiasResize``, separable along height and width."""

    in_shape: Shape
    out_shape: Shape
    scale: float = 1.0

    def __post_init__(self):
        if self.in_shape[0] != self.out_shape[0]:
            raise ShapeError("resize cannot change the channel count")

    @property
    def weights(self) -> tuple[np.ndarray, np.ndarray]:
        return (
            resize_weights(self.in_shape[1], self.out_shape[1]),
            resize_weights(self.in_shape[2], self.out_shape[2]),
        )

    def _apply(self, x):
        wh, ww = self.weights
        return self.scale * np.einsum("ij,...cjk,lk->...cil", wh, x, ww, optimize=True)

    def _adjoint(self, v):
        wh, ww = self.weights
        return self.scale * np.einsum("ij,...cil,lk->...cjk", wh, v, ww, optimize=True)


@dataclass(frozen=True)
class Composite(LinearOperator):
    """Apply ``ops[0]`` first, then ``ops[1]``, and so on."""

    ops: tuple[LinearOperator, ...]

    def __post_init__(self):
        if not self.ops:
            raise ParameterError("composite needs at least one operator")
        for a, b in zip(self.ops, self.ops[1:]):
            if a.out_shape != b.in_shape:
                raise ShapeError(f"cannot chain {a.out_shape} into {b.in_shape}")

    @property
    def in_shape(self) -> Shape:
        return self.ops[0].in_shape

    @property
    def out_shape(self) -> Shape:
        return self.ops[-1].out_shape

    def _apply(self, x):
        for op in self.ops:
            x = op._apply(x)
        return x

    def _adjoint(self, v):
        for op in reversed(self.ops):
            v = op._adjoint(v)
        return v


@dataclass(frozen=True)
class AdjointOperator(LinearOperator):
    base: LinearOperator

    @property
    def in_shape(self) -> Shape:
        return self.base.out_shape

    @property
    def out_shape(self) -> Shape:
        return self.base.in_shape

    def _apply(self, x):
        return self.base._adjoint(x)

    def _adjoint(self, v):
        return self.base._apply(v)

    @property
    def T(self) -> LinearOperator:
        return self.base


def image_shape(channels: int, res: int) -> Shape:
    return (int(channels), int(res), int(res))


def resize_op(
    res_in: int,
    res_out: int,
    a_t: float,
    a_tminus1: float,
    channels: int = 1,
) -> LinearOperator:
    """Per-step operator: resize ``res_in -> res_out`` and attenuate by ``a_t / a_{t-1}``."""
    if res_in < 1 or res_out < 1:
        raise ParameterError("resolutions must be positive")
    if a_tminus1 == 0:
        raise ParameterError("a_{t-1} must be nonzero")
    scale = float(a_t) / float(a_tminus1)
    if res_in == res_out:
        return ScaledIdentity(scale, image_shape(channels, res_in))
    return Resize(image_shape(channels, res_in), image_shape(channels, res_out), scale)


def step_operator(
    ns: NoiseSchedule, rs: ResolutionSchedule, t: int, channels: int = 1
) -> LinearOperator:
    """``M_t``, mapping resolution ``r(t-1)`` to ``r(t)``."""
    t = ns.check_t(t, allow_zero=False)
    return resize_op(rs.r(t - 1), rs.r(t), ns.a[t], ns.a[t - 1], channels)


def resize_chain(rs: ResolutionSchedule, t: int, channels: int = 1) -> LinearOperator:
    """Unattenuated resize chain ``r_max -> r(t)``, one resize per level crossed."""
    ops: list[LinearOperator] = [ScaledIdentity(1.0, image_shape(channels, rs.r_max))]
    for s in rs.transitions:
        if s > t:
            break
        ops.append(Resize(image_shape(channels, rs.r(s - 1)), image_shape(channels, rs.r(s))))
    return ops[0] if len(ops) == 1 else Composite(tuple(ops[1:]))


def cumulative_M(
    ns: NoiseSchedule, rs: ResolutionSchedule, t: int, channels: int = 1
) -> LinearOperator:
    """``M_{1:t} = M_t ... M_1``, i.e. ``a_t`` times :func:`resize_chain`."""
    t = ns.check_t(t)
    chain = resize_chain(rs, t, channels)
    head = ScaledIdentity(float(ns.a[t]), chain.in_shape)
    if isinstance(chain, ScaledIdentity):
        return head
    return Composite((head,) + chain.ops)


def materialize_dense(op: LinearOperator, cap: int = DENSE_CAP) -> np.ndarray:
    """Dense matrix ``D`` with ``D @ x.ravel() == op.apply(x).ravel()``."""
    n = op.in_size
    if n > cap:
        raise ResourceError(f"operator input has {n} elements, above the dense cap {cap}")
    basis = np.eye(n).reshape((n,) + tuple(op.in_shape))
    return op.apply(basis).reshape(n, op.out_size).T.copy()


@dataclass(frozen=True)
class PowerIterationResult:
    value: float
    iterations: int
    converged: bool


def lambda_max(
    op: LinearOperator,
    iters: int = 200,
    tol: float = 1e-9,
    seed: int = 0,
    structured: bool = True,
) -> PowerIterationResult:
    """Largest eigenvalue of ``M M^T`` by power iteration on ``v -> M(M^T v)``.

    With ``structured`` set, scaled identities and separable resizes are
    solved in closed form: the resize Gram matrix is a Kronecker product of
    two 1-D Gram matrices, whose top eigenvalues multiply. Power iteration
    stalls on those operators because their leading eigenvalues cluster.
    """
    if iters < 1:
        raise ParameterError("iters must be >= 1")
    if isinstance(op, ScaledIdentity):
        return PowerIterationResult(op.scale**2, 0, True)
    if structured and isinstance(op, Resize):
        wh, ww = op.weights
        top = np.linalg.eigvalsh(wh @ wh.T)[-1] * np.linalg.eigvalsh(ww @ ww.T)[-1]
        return PowerIterationResult(float(op.scale**2 * top), 0, True)
    v = np.random.default_rng(seed).standard_normal(op.out_shape)
    v /= np.linalg.norm(v)
    est = 0.0
    for k in range(1, iters + 1):
        w = op.apply(op.adjoint(v))
        new = float(np.vdot(v, w))
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return PowerIterationResult(0.0, k, True)
        v = w / norm
        if abs(new - est) <= tol * abs(new):
            return PowerIterationResult(new, k, True)
        est = new
    return PowerIterationResult(est, iters, False)


@dataclass(frozen=True)
class PSDRow:
    t: int
    sigma_t2: float
    bound: float
    margin: float
    lam: float
    transition: bool
    passed: bool


@dataclass(frozen=True)
class PSDReport:
    rows: tuple[PSDRow, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    def transitions(self) -> list[PSDRow]:
        return [r for r in self.rows if r.transition]


def check_psd_feasibility(
    ns: NoiseSchedule,
    rs: ResolutionSchedule,
    channels: int = 1,
    iters: int = 200,
    tol: float = 1e-9,
) -> PSDReport:
    """Check ``sigma_t^2 >= sigma_{t-1}^2 * lambda_max(M_t M_t^T)`` for every step."""
    if ns.T != rs.T:
        raise ParameterError(f"noise schedule has T={ns.T}, resolution schedule T={rs.T}")
    rows = []
    for t in range(1, ns.T + 1):
        op = step_operator(ns, rs, t, channels)
        scalar = isinstance(op, ScaledIdentity)
        if scalar:
            lam = float(ns.alpha[t])
        else:
            lam = lambda_max(op, iters=iters, tol=tol).value
        s2 = float(ns.sigma[t] ** 2)
        bound = float(ns.sigma[t - 1] ** 2) * lam
        margin = s2 - bound
        rows.append(PSDRow(t, s2, bound, margin, lam, not scalar, margin >= 0.0))
    return PSDReport(tuple(rows))
