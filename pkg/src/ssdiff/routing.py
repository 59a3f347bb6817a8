"""Shape-level routing and cost model for a resolution-adaptive UNet.

Level ``k`` of an ``L``-level UNet runs at ``r_max / 2**k`` pixels per side.
An input at ``r_in`` enters the encoder at depth ``log2(r_max / r_in)``; the
decoder leaves at depth ``log2(r_max / r_out)``. When the output is one level
finer than the input, the skips of the bypassed encoder levels are zero-filled.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ParameterError
from .schedules import ResolutionSchedule

DEFAULT_CHANNELS = (64, 128, 256, 512)
KERNEL = 3


def channel_profile(L: int, base: tuple[int, ...] = DEFAULT_CHANNELS) -> tuple[int, ...]:
    """``base`` truncated to ``L`` levels, or extended by repeating its last entry."""
    if L < 1:
        raise ParameterError("L must be >= 1")
    return tuple(base[:L]) + (base[-1],) * max(0, L - len(base))


@dataclass(frozen=True)
class RoutingPlan:
    unet_levels: int
    entry_depth: int
    exit_depth: int
    active_encoder_blocks: tuple[int, ...]
    active_decoder_blocks: tuple[int, ...]
    zero_filled_skips: tuple[int, ...]
    mac_estimate: int


def _depth(r_max: int, r: int) -> int:
    if r < 1 or r > r_max or r_max % r:
        raise ParameterError(f"resolution {r} does not divide r_max={r_max}")
    q = r_max // r
    if q & (q - 1):
        raise ParameterError(f"resolution {r} is not r_max / 2^k")
    return q.bit_length() - 1


def level_cost(level: int, r_max: int, channels: tuple[int, ...]) -> int:
    res = r_max >> level
    return res * res * channels[level] ** 2 * KERNEL**2


def plan_route(
    r_in: int,
    r_out: int,
    L: int,
    r_max: int,
    channels: tuple[int, ...] | None = None,
) -> RoutingPlan:
    if r_out not in (r_in, 2 * r_in):
        raise ParameterError(f"r_out must equal r_in or 2 * r_in, got {r_in} -> {r_out}")
    entry = _depth(r_max, r_in)
    exit_ = _depth(r_max, r_out)
    if not (0 <= exit_ <= entry <= L - 1):
        raise ParameterError(f"depths {entry}/{exit_} fall outside a {L}-level UNet")
    ch = channel_profile(L) if channels is None else tuple(channels)
    if len(ch) < L:
        raise ParameterError(f"channel profile has {len(ch)} entries, need {L}")
    enc = tuple(range(entry, L))
    dec = tuple(range(L - 1, exit_ - 1, -1))
    skips = tuple(range(exit_, entry))
    macs = sum(level_cost(k, r_max, ch) for k in enc + dec)
    return RoutingPlan(L, entry, exit_, enc, dec, skips, macs)


def chain_costs(rs: ResolutionSchedule, L: int, channels: tuple[int, ...] | None = None) -> list[int]:
    """Per-step routed MACs for ``t = 1..T`` (step ``t`` maps ``r(t) -> r(t-1)``)."""
    plans = {}
    out = []
    for t in range(1, rs.T + 1):
        key = (rs.r(t), rs.r(t - 1))
        if key not in plans:
            plans[key] = plan_route(key[0], key[1], L, rs.r_max, channels).mac_estimate
        out.append(plans[key])
    return out


def full_unet_costs(rs: ResolutionSchedule, L: int, channels: tuple[int, ...] | None = None) -> list[int]:
    """Baseline: every step runs the whole network at ``r_max``."""
    full = plan_route(rs.r_max, rs.r_max, L, rs.r_max, channels).mac_estimate
    return [full] * rs.T
