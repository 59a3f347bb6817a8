"""Denoisers predicting the unscaled clean image at ``r(t-1)`` from ``(x_t, t)``.

``OracleDenoiser`` knows ``x0`` and returns the exact target. ``MlpDenoiser``
is a desk-scale learned stand-in: one small fully connected network per
``(r(t), r(t-1))`` pair, trained with explicit backpropagation and AdamW.
"""

from __future__ import annotations

import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .errors import FormatError, ParameterError, ShapeError, TrainingError
from .process import DiffusionProcess
from .schedules import ResolutionSchedule

log = logging.getLogger(__name__)

EMBED_DIM = 32
SNR_GAMMA = 5.0


class Denoiser(Protocol):
    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray: ...


@dataclass(frozen=True)
class OracleDenoiser:
    """Returns ``M_{1:t-1} x0 / a_{t-1}``, i.e. the resize chain applied to ``x0``."""

    x0: np.ndarray
    process: DiffusionProcess

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        t = self.process.noise.check_t(t, allow_zero=False)
        target = self.process.resize_chain(t - 1).apply(self.x0)
        x_t = np.asarray(x_t)
        batch = x_t.shape[:-3]
        return np.broadcast_to(target, batch + target.shape[-3:]).copy()


def oracle_predict(o: OracleDenoiser, p: DiffusionProcess, x_t: np.ndarray, t: int) -> np.ndarray:
    return OracleDenoiser(o.x0, p).predict(x_t, t)


def timestep_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """Sinusoidal features ``[sin(t w_k), cos(t w_k)]`` with geometric frequencies."""
    if dim % 2:
        raise ParameterError("embedding dimension must be even")
    t = np.asarray(t, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = t[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _silu(z):
    s = 1.0 / (1.0 + np.exp(-z))
    return z * s, s


LAYERS = ("W1", "b1", "W2", "b2", "W3", "b3")


class Mlp:
    """``in -> hidden -> hidden -> out`` with SiLU between affine layers."""

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = params

    @classmethod
    def init(cls, n_in: int, hidden: int, n_out: int, rng: np.random.Generator, zero_output: bool = True):
        def he(fan_in, fan_out):
            return rng.standard_normal((fan_in, fan_out)) * math.sqrt(2.0 / fan_in)

        W3 = np.zeros((hidden, n_out)) if zero_output else he(hidden, n_out) * 0.1
        return cls(
            {
                "W1": he(n_in, hidden),
                "b1": np.zeros(hidden),
                "W2": he(hidden, hidden),
                "b2": np.zeros(hidden),
                "W3": W3,
                "b3": np.zeros(n_out),
            }
        )

    @property
    def n_in(self) -> int:
        return self.params["W1"].shape[0]

    @property
    def hidden(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def n_out(self) -> int:
        return self.params["W3"].shape[1]

    def forward(self, X: np.ndarray):
        P = self.params
        z1 = X @ P["W1"] + P["b1"]
        h1, s1 = _silu(z1)
        z2 = h1 @ P["W2"] + P["b2"]
        h2, s2 = _silu(z2)
        out = h2 @ P["W3"] + P["b3"]
        return out, (X, z1, s1, h1, z2, s2, h2)

    def backward(self, cache, d_out: np.ndarray) -> dict[str, np.ndarray]:
        X, z1, s1, h1, z2, s2, h2 = cache
        P = self.params
        g = {"W3": h2.T @ d_out, "b3": d_out.sum(0)}
        d_h2 = d_out @ P["W3"].T
        d_z2 = d_h2 * (s2 * (1.0 + z2 * (1.0 - s2)))
        g["W2"] = h1.T @ d_z2
        g["b2"] = d_z2.sum(0)
        d_h1 = d_z2 @ P["W2"].T
        d_z1 = d_h1 * (s1 * (1.0 + z1 * (1.0 - s1)))
        g["W1"] = X.T @ d_z1
        g["b1"] = d_z1.sum(0)
        return g


def _pair_key(r_in: int, r_out: int) -> str:
    return f"r{r_in}_to_r{r_out}"


@dataclass
class MlpDenoiser:
    """Per-resolution-pair MLPs over ``[flatten(x_t), embed(t)]``."""

    resolution: ResolutionSchedule
    channels: int
    nets: dict[tuple[int, int], Mlp]
    embed_dim: int = EMBED_DIM

    @classmethod
    def create(
        cls,
        resolution: ResolutionSchedule,
        channels: int,
        hidden: int = 256,
        seed: int = 0,
        embed_dim: int = EMBED_DIM,
        zero_output: bool = True,
    ) -> "MlpDenoiser":
        rng = np.random.default_rng(seed)
        pairs = sorted({(resolution.r(t), resolution.r(t - 1)) for t in range(1, resolution.T + 1)})
        nets = {
            (ri, ro): Mlp.init(channels * ri * ri + embed_dim, hidden, channels * ro * ro, rng, zero_output)
            for ri, ro in pairs
        }
        m = cls(resolution, channels, nets, embed_dim)
        log.info("MLP denoiser: %d networks, %d parameters", len(nets), m.parameter_count)
        return m

    @property
    def parameter_count(self) -> int:
        return sum(v.size for net in self.nets.values() for v in net.params.values())

    def pair(self, t: int) -> tuple[int, int]:
        return self.resolution.r(t), self.resolution.r(t - 1)

    def _inputs(self, x_t: np.ndarray, ts: np.ndarray) -> np.ndarray:
        flat = x_t.reshape(x_t.shape[0], -1)
        return np.concatenate([flat, timestep_embedding(ts, self.embed_dim)], axis=1)

    def forward(self, x_t: np.ndarray, ts: np.ndarray):
        """Batched forward; every ``t`` in ``ts`` must map to the same resolution pair."""
        ts = np.asarray(ts, dtype=np.int64)
        key = self.pair(int(ts[0]))
        if any(self.pair(int(t)) != key for t in ts[1:]):
            raise ParameterError("a batch must share one (r(t), r(t-1)) pair")
        r_in, r_out = key
        if x_t.shape[1:] != (self.channels, r_in, r_in):
            raise ShapeError(f"expected x_t of shape (B, {self.channels}, {r_in}, {r_in}), got {x_t.shape}")
        net = self.nets[key]
        out, cache = net.forward(self._inputs(x_t, ts))
        return out.reshape(len(ts), self.channels, r_out, r_out), (net, cache)

    def predict(self, x_t: np.ndarray, t: int) -> np.ndarray:
        x_t = np.asarray(x_t, dtype=np.float64)
        batch = x_t.shape[:-3]
        flat = x_t.reshape((-1,) + x_t.shape[-3:])
        out, _ = self.forward(flat, np.full(flat.shape[0], int(t)))
        return out.reshape(batch + out.shape[1:])

    # -- checkpoint I/O ---------------------------------------------------------

    def named_tensors(self) -> dict[str, np.ndarray]:
        return {f"{_pair_key(*k)}.{n}": net.params[n] for k, net in self.nets.items() for n in LAYERS}


CHECKPOINT_MAGIC = b"SSDW"
CHECKPOINT_VERSION = 1


def encode_checkpoint(tensors: dict[str, np.ndarray]) -> bytes:
    """``SSDW | version u32 | records``; record = ``u32 name length, name, u8 rank, u32 dims, f32 data``."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an SSDW checkpoint")
    if len(buf) < 8:
        raise FormatError("truncated checkpoint header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    off = 8
    out: dict[str, np.ndarray] = {}
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode("utf-8")
            off += n
            rank = buf[off]
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = math.prod(dims)
            if off + 4 * count > len(buf):
                raise FormatError(f"truncated data for {name!r}")
            out[name] = np.frombuffer(buf, "<f4", count, off).reshape(dims).astype(np.float64)
            off += 4 * count
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise FormatError(f"corrupt checkpoint: {exc}") from exc
    return out


def save_checkpoint(path: str | Path, m: MlpDenoiser) -> None:
    Path(path).write_bytes(encode_checkpoint(m.named_tensors()))


def load_checkpoint(path: str | Path, resolution: ResolutionSchedule, channels: int) -> MlpDenoiser:
    tensors = decode_checkpoint(Path(path).read_bytes())
    nets = {}
    embed_dim = None
    for ri, ro in sorted({(resolution.r(t), resolution.r(t - 1)) for t in range(1, resolution.T + 1)}):
        prefix = _pair_key(ri, ro)
        try:
            params = {n: tensors[f"{prefix}.{n}"] for n in LAYERS}
        except KeyError as exc:
            raise FormatError(f"checkpoint lacks {exc.args[0]}") from exc
        net = Mlp(params)
        if net.n_out != channels * ro * ro:
            raise FormatError(f"{prefix}: output size {net.n_out} does not match {channels}x{ro}x{ro}")
        embed_dim = net.n_in - channels * ri * ri
        nets[(ri, ro)] = net
    return MlpDenoiser(resolution, channels, nets, embed_dim or EMBED_DIM)


# -- optimisation ---------------------------------------------------------------


@dataclass
class AdamW:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    moments: dict = field(default_factory=dict)

    def step(self, params: dict, grads: dict, prefix: str = "") -> None:
        self.step_count += 1
        c1 = 1.0 - self.beta1**self.step_count
        c2 = 1.0 - self.beta2**self.step_count
        for name, g in grads.items():
            key = prefix + name
            m, v = self.moments.get(key, (np.zeros_like(g), np.zeros_like(g)))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.moments[key] = (m, v)
            p = params[name]
            p -= self.lr * (m / c1 / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p)


def sample_timesteps_batch(rs: ResolutionSchedule, batch: int, rng: np.random.Generator) -> list[int]:
    """One ``t`` for a transition step, else ``batch`` draws from its resolution-preserving level."""
    if batch < 1:
        raise ParameterError("batch must be >= 1")
    t = int(rng.integers(1, rs.T + 1))
    if rs.is_transition(t):
        return [t] * batch
    r = rs.r(t)
    pool = np.array([s for s in range(1, rs.T + 1) if rs.r(s) == r and not rs.is_transition(s)])
    return [int(s) for s in rng.choice(pool, size=batch)]


def loss_and_grads(
    m: MlpDenoiser,
    p: DiffusionProcess,
    x0_batch: np.ndarray,
    ts,
    eps: np.ndarray,
    with_grads: bool = True,
):
    """Min-SNR weighted x0 loss for fixed ``(t, eps)`` draws.

    Returns ``(loss, grads, key)`` where ``grads`` holds the gradients of the
    single network addressed by this batch.
    """
    ts = np.asarray(ts, dtype=np.int64)
    x0_batch = np.asarray(x0_batch, dtype=np.float64)
    t0 = int(ts[0])
    a = p.noise.a[ts][:, None, None, None]
    sig = p.noise.sigma[ts][:, None, None, None]
    x_t = a * p.resize_chain(t0).apply(x0_batch) + sig * eps
    target = p.resize_chain(t0 - 1).apply(x0_batch)
    ab = p.noise.alpha_bar[ts]
    w = np.minimum(ab / (1.0 - ab), SNR_GAMMA)
    pred, (net, cache) = m.forward(x_t, ts)
    diff = pred - target
    per = np.sum(diff.reshape(len(ts), -1) ** 2, axis=1)
    loss = float(np.mean(w * per))
    key = m.pair(t0)
    if not with_grads:
        return loss, None, key
    d_out = (2.0 / len(ts)) * w[:, None] * diff.reshape(len(ts), -1)
    return loss, net.backward(cache, d_out), key


def train_iter(
    m: MlpDenoiser,
    p: DiffusionProcess,
    x0_batch: np.ndarray,
    rng: np.random.Generator,
    opt_state: AdamW,
) -> float:
    """One optimisation step; returns the batch loss before the update."""
    ts = sample_timesteps_batch(p.resolution, len(x0_batch), rng)
    eps = rng.standard_normal((len(ts),) + p.shape(ts[0]))
    loss, grads, key = loss_and_grads(m, p, x0_batch, ts, eps)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} at t={ts[0]} (pair {key})")
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradients in {bad} at t={ts[0]} (pair {key})")
    opt_state.step(m.nets[key].params, grads, prefix=_pair_key(*key) + ".")
    return loss


def finite_difference_check(
    m: MlpDenoiser,
    p: DiffusionProcess,
    x0_batch: np.ndarray,
    ts,
    eps: np.ndarray,
    n_params: int = 10,
    h: float = 1e-4,
    seed: int = 0,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Probes ``n_params`` coordinates spread over every parameter tensor.
    """
    _, grads, key = loss_and_grads(m, p, x0_batch, ts, eps)
    params = m.nets[key].params
    rng = np.random.default_rng(seed)
    names = [LAYERS[i % len(LAYERS)] for i in range(n_params)]
    worst = 0.0
    for name in names:
        arr = params[name]
        idx = tuple(int(rng.integers(0, s)) for s in arr.shape)
        old = arr[idx]
        arr[idx] = old + h
        lp = loss_and_grads(m, p, x0_batch, ts, eps, with_grads=False)[0]
        arr[idx] = old - h
        lm = loss_and_grads(m, p, x0_batch, ts, eps, with_grads=False)[0]
        arr[idx] = old
        num = (lp - lm) / (2 * h)
        ana = grads[name][idx]
        denom = max(abs(num), abs(ana), 1e-12)
        worst = max(worst, abs(num - ana) / denom)
    return worst


# -- synthetic data -------------------------------------------------------------


def gaussian_blobs(n: int, channels: int = 3, res: int = 8, seed: int = 0) -> np.ndarray:
    """``n`` images in ``[-1, 1]``: a few soft coloured blobs on a dark background."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:res, 0:res] + 0.5
    out = np.empty((n, channels, res, res))
    for i in range(n):
        img = np.zeros((channels, res, res))
        for _ in range(int(rng.integers(1, 4))):
            cy, cx = rng.uniform(0, res, size=2)
            width = rng.uniform(0.1, 0.3) * res
            colour = rng.uniform(0.3, 1.0, size=channels)
            bump = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
            img += colour[:, None, None] * bump
        out[i] = 2.0 * np.clip(img, 0.0, 1.0) - 1.0
    return out


@dataclass(frozen=True)
class EvalPanel:
    """Fixed ``(x0, t, eps)`` draws used to track training progress without sampling noise."""

    x0: np.ndarray
    groups: tuple[tuple[np.ndarray, np.ndarray, np.ndarray], ...]

    @classmethod
    def build(cls, p: DiffusionProcess, data: np.ndarray, n_groups: int = 64, seed: int = 1234):
        rng = np.random.default_rng(seed)
        groups = []
        for _ in range(n_groups):
            idx = rng.integers(0, len(data), size=len(data) if len(data) < 16 else 16)
            ts = np.array(sample_timesteps_batch(p.resolution, len(idx), rng))
            eps = rng.standard_normal((len(ts),) + p.shape(int(ts[0])))
            groups.append((idx, ts, eps))
        return cls(np.asarray(data), tuple(groups))

    def loss(self, m: MlpDenoiser, p: DiffusionProcess) -> float:
        return float(
            np.mean([loss_and_grads(m, p, self.x0[i], ts, e, with_grads=False)[0] for i, ts, e in self.groups])
        )


@dataclass
class TrainResult:
    model: MlpDenoiser
    losses: list[float]
    eval_losses: dict[int, float]


def train(
    p: DiffusionProcess,
    data: np.ndarray,
    iters: int,
    batch: int = 16,
    lr: float = 1e-4,
    hidden: int = 256,
    seed: int = 0,
    eval_at: tuple[int, ...] = (),
    panel: EvalPanel | None = None,
) -> TrainResult:
    """Train a fresh ``MlpDenoiser``; ``eval_at`` iterations report the panel loss."""
    rng = np.random.default_rng(seed)
    m = MlpDenoiser.create(p.resolution, p.channels, hidden=hidden, seed=seed)
    opt = AdamW(lr=lr)
    if eval_at and panel is None:
        panel = EvalPanel.build(p, data)
    losses, evals = [], {}
    for it in range(1, iters + 1):
        idx = rng.integers(0, len(data), size=batch)
        losses.append(train_iter(m, p, data[idx], rng, opt))
        if it in eval_at:
            evals[it] = panel.loss(m, p)
    return TrainResult(m, losses, evals)
