"""Reverse-diffusion generation from noise at ``r(T)`` down to ``x_0`` at ``r_max``.

Randomness is counter-based: every draw comes from a Philox stream keyed by
``(seed, chain, t, stream)``, so two runs that visit the same step consume the
same noise regardless of what happened elsewhere in the chain.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser
from .errors import ChainError, ParameterError, SSDError
from .process import EXACT, ISOTROPIC_APPROX, MODES, DiffusionProcess, posterior_params, posterior_sample

EPS_STREAM = 0
AUX_STREAM = 1
INIT_STREAM = 2


@dataclass(frozen=True)
class ChainRng:
    seed: int
    chain: int = 0

    def generator(self, t: int, stream: int) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.seed), int(self.chain), int(t), int(stream)])
        return np.random.Generator(np.random.Philox(ss))

    def normal(self, t: int, stream: int, shape) -> np.ndarray:
        return self.generator(t, stream).standard_normal(shape)


@dataclass(frozen=True)
class TrajectoryStep:
    t: int
    x_t: np.ndarray
    prediction: np.ndarray


@dataclass
class Trajectory:
    stride: int
    steps: list[TrajectoryStep] = field(default_factory=list)

    def resolutions(self) -> list[tuple[int, int]]:
        return [(s.t, s.x_t.shape[-1]) for s in self.steps]


def _recorded(t: int, T: int, stride: int, p: DiffusionProcess) -> bool:
    return (T - t) % stride == 0 or t == 1 or p.resolution.is_transition(t)


def _run(
    p: DiffusionProcess,
    d: Denoiser,
    rngs: list[ChainRng],
    mode: str,
    record: bool,
    stride: int,
    match_mean: bool,
):
    if mode not in MODES:
        raise ParameterError(f"unknown mode {mode!r}")
    if stride < 1:
        raise ParameterError("stride must be >= 1")
    T = p.T

    def draw(t, stream):
        return np.stack([g.normal(t, stream, p.shape(t - 1 if stream != INIT_STREAM else t)) for g in rngs])

    x = draw(T, INIT_STREAM)
    trajs = [Trajectory(stride) for _ in rngs] if record else None
    for t in range(T, 0, -1):
        try:
            pred = np.asarray(d.predict(x, t), dtype=np.float64)
        except SSDError as exc:
            raise ChainError(t, f"denoiser failed: {exc}") from exc
        want = (len(rngs),) + p.shape(t - 1)
        if pred.shape != want:
            raise ChainError(t, f"denoiser returned shape {pred.shape}, expected {want}")
        mu = p.noise.a[t - 1] * pred
        params = posterior_params(p, x, mu, t)
        aux = draw(t, AUX_STREAM) if mode == ISOTROPIC_APPROX and p.resolution.is_transition(t) else None
        if record and _recorded(t, T, stride, p):
            for i, tr in enumerate(trajs):
                tr.steps.append(TrajectoryStep(t, x[i].copy(), pred[i].copy()))
        x = posterior_sample(p, params, draw(t, EPS_STREAM), mode, aux, match_mean)
    return x, trajs


def sample_chain(
    p: DiffusionProcess,
    d: Denoiser,
    rng: ChainRng,
    mode: str = EXACT,
    record: bool = False,
    stride: int = 1,
    match_mean: bool = False,
) -> tuple[np.ndarray, Trajectory | None]:
    """Run one reverse chain; returns unclamped ``x_0`` and an optional trajectory."""
    x, trajs = _run(p, d, [rng], mode, record, stride, match_mean)
    return x[0], (trajs[0] if trajs else None)


def sample_batch(
    p: DiffusionProcess,
    d: Denoiser,
    n: int,
    seed: int,
    mode: str = EXACT,
    record: bool = False,
    stride: int = 1,
    match_mean: bool = False,
) -> tuple[list[np.ndarray], list[Trajectory] | None]:
    """``n`` chains advanced together; chain ``i`` uses ``ChainRng(seed, i)``."""
    if n < 1:
        raise ParameterError("n must be >= 1")
    x, trajs = _run(p, d, [ChainRng(seed, i) for i in range(n)], mode, record, stride, match_mean)
    return list(x), trajs
