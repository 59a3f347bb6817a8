"""Oracle invariant suite behind ``ssd verify``.

Each check compares the operator-based implementation with an independent
dense computation at desk scale and reports its worst deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .denoiser import OracleDenoiser
from .lanczos import LanczosConfig, lanczos_sqrt_apply
from .linops import Resize, ScaledIdentity, check_psd_feasibility, image_shape, materialize_dense
from .oracles import dense_posterior_simplified, dense_posterior_unsimplified, dense_sqrtm_psd, dense_step
from .process import DiffusionProcess, ddpm_posterior, forward_consistency_check, posterior_params
from .sampler import ChainRng, sample_chain
from .schedules import linear_beta_schedule, make_resolution_schedule, single_level_schedule


@dataclass(frozen=True)
class CheckResult:
    name: str
    value: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.value <= self.tol)


def three_level_process(T: int = 100, channels: int = 1, levels=(2, 4, 8)) -> DiffusionProcess:
    ns = linear_beta_schedule(T)
    return DiffusionProcess(ns, make_resolution_schedule("equal", 1.0, list(levels), T), channels)


def adjoint_defect(seed: int, pairs: int = 100) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n_in, n_out in ((8, 4), (16, 8), (32, 16), (8, 8)):
        op = Resize(image_shape(1, n_in), image_shape(1, n_out))
        for _ in range(pairs):
            x = rng.standard_normal(op.in_shape)
            v = rng.standard_normal(op.out_shape)
            Mx, Mtv = op.apply(x), op.adjoint(v)
            lhs, rhs = float(np.vdot(v, Mx)), float(np.vdot(Mtv, x))
            scale = np.linalg.norm(v) * np.linalg.norm(Mx) + np.linalg.norm(Mtv) * np.linalg.norm(x)
            worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def woodbury_defect(seed: int) -> float:
    p = three_level_process()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in p.resolution.transitions:
        x_t = rng.standard_normal(p.shape(t))
        mu = rng.standard_normal(p.shape(t - 1))
        m5, c5 = dense_posterior_unsimplified(p, x_t, mu, t)
        m6, c6 = dense_posterior_simplified(p, x_t, mu, t)
        impl = posterior_params(p, x_t, mu, t).mean.ravel()
        worst = max(worst, np.abs(m5 - m6).max(), np.abs(c5 - c6).max(), np.abs(impl - m5).max())
    return float(worst)


def lanczos_posterior_error(seed: int, max_iters: int = 32) -> float:
    """Relative error of ``A^{1/2} x`` on the posterior operator of an 8 -> 4 step."""
    p = three_level_process(levels=(4, 8))
    t = p.resolution.transitions[0]
    params = posterior_params(p, np.zeros(p.shape(t)), np.zeros(p.shape(t - 1)), t)
    M = dense_step(p, t)
    A = np.eye(M.shape[1]) - params.rho * M.T @ M
    x = np.random.default_rng(seed).standard_normal(p.shape(t - 1))
    got = lanczos_sqrt_apply(params.normalized_cov_apply, x, LanczosConfig(max_iters=max_iters))
    want = dense_sqrtm_psd(A) @ x.ravel()
    return float(np.linalg.norm(got.ravel() - want) / np.linalg.norm(want))


def lanczos_diagonal_error(seed: int, k: int = 32) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for distinct in (1, 2, 5, k):
        vals = rng.uniform(0.1, 4.0, size=distinct)
        d = vals[rng.integers(0, distinct, size=64)]
        d[:distinct] = vals
        x = rng.standard_normal(64)
        got = lanczos_sqrt_apply(lambda v: d * v, x, LanczosConfig(max_iters=k, tol=0.0))
        want = np.sqrt(d) * x
        worst = max(worst, float(np.linalg.norm(got - want) / np.linalg.norm(want)))
    return worst


def ddpm_collapse_defect(seed: int, T: int = 1000) -> float:
    ns = linear_beta_schedule(T)
    p = DiffusionProcess(ns, single_level_schedule(4, T), 1)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in range(1, T + 1):
        x_t = rng.standard_normal(p.shape(t))
        x0 = rng.uniform(-1, 1, p.shape(0))
        params = posterior_params(p, x_t, ns.a[t - 1] * x0, t)
        mean, var = ddpm_posterior(ns, x_t, x0, t)
        worst = max(worst, float(np.abs(params.mean - mean).max()), abs(params.scalar_variance - var))
    return worst


def forward_consistency_defect() -> float:
    p = three_level_process()
    worst = 0.0
    for t in range(1, p.T + 1):
        r = forward_consistency_check(p, t)
        worst = max(worst, r.cov_error, r.mean_error)
    return worst


def psd_margin_defect() -> float:
    p = three_level_process()
    report = check_psd_feasibility(p.noise, p.resolution, p.channels)
    worst = 0.0
    for row in report.rows:
        op = p.step_op(row.t)
        if isinstance(op, ScaledIdentity):
            lam = op.scale**2
        else:
            D = materialize_dense(op)
            lam = float(np.linalg.eigvalsh(D @ D.T)[-1])
        dense_margin = p.noise.sigma[row.t] ** 2 - p.noise.sigma[row.t - 1] ** 2 * lam
        worst = max(worst, abs(row.margin - dense_margin))
        if not row.transition:
            worst = max(worst, abs(row.margin - p.noise.beta[row.t]))
    return float(worst)


def reconstruction_error(seed: int, T: int = 1000) -> float:
    worst = 0.0
    for channels, levels in ((1, (2, 4, 8)), (3, (4, 8, 16))):
        p = three_level_process(T, channels, levels)
        x0 = np.random.default_rng(seed).uniform(-1, 1, p.shape(0))
        x, _ = sample_chain(p, OracleDenoiser(x0, p), ChainRng(seed))
        worst = max(worst, float(np.abs(x - x0).max()))
    return worst


def run_verify(seed: int = 0) -> list[CheckResult]:
    return [
        CheckResult("adjoint_identity", adjoint_defect(seed), 1e-8),
        CheckResult("woodbury_equivalence", woodbury_defect(seed), 1e-8),
        CheckResult("lanczos_posterior_8to4", lanczos_posterior_error(seed), 1e-4),
        CheckResult("lanczos_diagonal_exact", lanczos_diagonal_error(seed), 1e-10),
        CheckResult("ddpm_collapse", ddpm_collapse_defect(seed), 1e-10),
        CheckResult("forward_consistency", forward_consistency_defect(), 1e-8),
        CheckResult("psd_margins", psd_margin_defect(), 1e-8),
        CheckResult("oracle_reconstruction", reconstruction_error(seed), 1e-5),
    ]


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>10}  {'tol':>8}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        val = "nan" if math.isnan(r.value) else f"{r.value:10.3e}"
        lines.append(f"{r.name:<{width}}  {val:>10}  {r.tol:8.0e}  {status}")
    return "\n".join(lines)
