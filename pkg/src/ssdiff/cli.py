"""``ssd`` command-line entry point."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .analysis import backtrack_timestep, info_r_curve, info_t_curve
from .config import RunConfig, load_config, merge_overrides
from .denoiser import (
    EvalPanel,
    OracleDenoiser,
    gaussian_blobs,
    load_checkpoint,
    save_checkpoint,
    train,
)
from .errors import (
    ConstructionError,
    DomainError,
    FormatError,
    ParameterError,
    ShapeError,
    SSDError,
)
from .process import EXACT, MODES
from .routing import chain_costs, full_unet_costs
from .sampler import sample_batch
from .tensor import read_stf, write_pnm, write_stf
from .verify import format_table, run_verify

log = logging.getLogger("ssdiff")

CONFIG_ERRORS = (ParameterError, DomainError, ConstructionError, FormatError, ShapeError)


class UsageError(Exception):
    pass


@contextmanager
def _sink(path: str | None):
    if path is None or path == "-":
        yield sys.stdout
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            yield fh


def _write_csv(path: str | None, header: list[str], rows) -> None:
    with _sink(path) as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _levels(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from exc


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from exc


def _add_run_options(sp: argparse.ArgumentParser) -> None:
    g = sp.add_argument_group("run configuration (flags override --config)")
    g.add_argument("--config", help="JSON RunConfig file")
    g.add_argument("--schedule", help="schedule family, e.g. equal or convex:0.5")
    g.add_argument("--levels", type=_levels, help="comma-separated ascending resolutions")
    g.add_argument("--T", dest="T", type=int, help="number of diffusion steps")
    g.add_argument("--beta-start", type=float)
    g.add_argument("--beta-end", type=float)
    g.add_argument("--channels", type=int)
    g.add_argument("--seed", type=int)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    return merge_overrides(
        cfg,
        schedule=getattr(args, "schedule", None),
        levels=getattr(args, "levels", None),
        T=getattr(args, "T", None),
        beta_start=getattr(args, "beta_start", None),
        beta_end=getattr(args, "beta_end", None),
        channels=getattr(args, "channels", None),
        seed=getattr(args, "seed", None),
    )


# -- subcommands -------------------------------------------------------------------


def cmd_verify(args) -> int:
    results = run_verify(args.seed if args.seed is not None else 0)
    print(format_table(results))
    return 0 if all(r.passed for r in results) else 1


def cmd_schedule(args) -> int:
    rs = _config(args).resolution()
    _write_csv(
        args.out,
        ["t", "resolution", "transition"],
        ((t, rs.r(t), int(rs.is_transition(t))) for t in range(rs.T + 1)),
    )
    return 0


def cmd_info_curves(args) -> int:
    ns = _config(args).noise()
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ct = info_t_curve(ns, args.quad_points)
    cr = info_r_curve(args.points)
    _write_csv(str(out / "info_t.csv"), ["t", "info"], ((int(t), repr(v)) for t, v in ct.points))
    _write_csv(str(out / "info_r.csv"), ["r", "info"], ((repr(r), repr(v)) for r, v in cr.points))
    print(f"wrote {out / 'info_t.csv'} and {out / 'info_r.csv'}")
    return 0


def cmd_psd_check(args) -> int:
    cfg = _config(args)
    report = cfg.process().psd_report()
    _write_csv(
        args.out,
        ["t", "sigma_t2", "bound", "margin", "lambda_max", "transition", "passed"],
        (
            (r.t, repr(r.sigma_t2), repr(r.bound), repr(r.margin), repr(r.lam), int(r.transition), int(r.passed))
            for r in report.rows
        ),
    )
    if not report.passed:
        bad = [r.t for r in report.rows if not r.passed]
        print(f"infeasible steps: {bad}", file=sys.stderr)
    return 0


def cmd_backtrack(args) -> int:
    ns = _config(args).noise()
    rows = []
    for c in args.c:
        s, got = backtrack_timestep(ns, args.t, c)
        rows.append((args.t, repr(c), s, repr(got)))
    _write_csv(args.out, ["t", "c", "s", "achieved_c"], rows)
    return 0


def _load_data(cfg: RunConfig) -> np.ndarray:
    if cfg.data_path:
        data = np.asarray(read_stf(cfg.data_path), dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.ndim != 4:
            raise ShapeError(f"dataset tensor must have rank 3 or 4, got {data.ndim}")
        return data
    s = cfg.synthetic
    return gaussian_blobs(s.n, s.channels, s.res, s.seed)


def cmd_train_toy(args) -> int:
    cfg = _config(args)
    data = _load_data(cfg)
    if data.shape[-1] != cfg.levels[-1]:
        raise ParameterError(f"data resolution {data.shape[-1]} does not match r_max={cfg.levels[-1]}")
    tr = cfg.train
    iters = args.iters if args.iters is not None else tr.iters
    p = cfg.process(channels=data.shape[1])
    panel = EvalPanel.build(p, data)
    every = max(1, args.eval_every)
    res = train(
        p,
        data,
        iters,
        batch=tr.batch,
        lr=tr.lr,
        hidden=tr.hidden,
        seed=cfg.seed,
        eval_at=tuple(range(every, iters + 1, every)),
        panel=panel,
    )
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out / "model.ssdw", res.model)
    _write_csv(
        str(out / "loss.csv"),
        ["iter", "batch_loss", "panel_loss"],
        ((i, repr(l), repr(res.eval_losses[i]) if i in res.eval_losses else "") for i, l in enumerate(res.losses, 1)),
    )
    print(f"trained {res.model.parameter_count} parameters for {iters} iterations; wrote {out}")
    return 0


def cmd_sample(args) -> int:
    cfg = _config(args)
    if (args.oracle is None) == (args.checkpoint is None):
        raise ParameterError("give exactly one of --oracle or --checkpoint")
    if args.oracle is not None:
        x0 = np.asarray(read_stf(args.oracle), dtype=np.float64)
        if x0.ndim != 3 or x0.shape[1] != x0.shape[2]:
            raise ShapeError(f"oracle tensor must be (C, R, R), got {x0.shape}")
        if x0.shape[-1] != cfg.levels[-1]:
            raise ParameterError(f"oracle resolution {x0.shape[-1]} does not match r_max={cfg.levels[-1]}")
        p = cfg.process(channels=x0.shape[0])
        d = OracleDenoiser(x0, p)
    else:
        p = cfg.process()
        d = load_checkpoint(args.checkpoint, p.resolution, p.channels)
    xs, trajs = sample_batch(p, d, args.n, cfg.seed, args.mode, record=args.trajectory, stride=args.stride)
    out = Path(args.out_dir or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, x in enumerate(xs):
        export = x if args.no_clamp else np.clip(x, -1.0, 1.0)
        write_stf(out / f"sample_{i:03d}.stf", export)
        if x.shape[0] in (1, 3):
            write_pnm(out / f"sample_{i:03d}.{'pgm' if x.shape[0] == 1 else 'ppm'}", x)
        if trajs:
            tdir = out / f"trajectory_{i:03d}"
            tdir.mkdir(exist_ok=True)
            for step in trajs[i].steps:
                write_stf(tdir / f"t{step.t:05d}_x.stf", step.x_t)
                write_stf(tdir / f"t{step.t:05d}_pred.stf", step.prediction)
    print(f"wrote {len(xs)} samples to {out}")
    return 0


def cmd_flops(args) -> int:
    cfg = _config(args)
    rs = cfg.resolution()
    L = args.L if args.L is not None else len(cfg.levels)
    channels = tuple(args.channel_profile) if args.channel_profile else None
    flexi = chain_costs(rs, L, channels)
    full = full_unet_costs(rs, L, channels)
    _write_csv(
        args.out,
        ["t", "r_in", "r_out", "flexi_macs", "full_macs"],
        ((t, rs.r(t), rs.r(t - 1), flexi[t - 1], full[t - 1]) for t in range(1, rs.T + 1)),
    )
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["routing", "total_macs"])
    w.writerow(["flexi", sum(flexi)])
    w.writerow(["full_unet", sum(full)])
    (sys.stdout if args.out not in (None, "-") else sys.stderr).write(buf.getvalue())
    return 0


# -- parser ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="ssd", description="Scale-space diffusion toolkit")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("verify", help="run the dense-oracle invariant suite")
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("schedule", help="emit the resolution schedule as CSV")
    _add_run_options(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_schedule)

    sp = sub.add_parser("info-curves", help="write Info(t) and Info(r) CSVs")
    _add_run_options(sp)
    sp.add_argument("--out-dir", default=".")
    sp.add_argument("--quad-points", type=int, default=512)
    sp.add_argument("--points", type=int, default=101)
    sp.set_defaults(func=cmd_info_curves)

    sp = sub.add_parser("psd-check", help="per-step covariance feasibility margins")
    _add_run_options(sp)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_psd_check)

    sp = sub.add_parser("backtrack", help="noisier timestep for a given c")
    _add_run_options(sp)
    sp.add_argument("--t", dest="t", type=int, required=True)
    sp.add_argument("--c", type=_floats, required=True, help="comma-separated values in (0, 0.25]")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_backtrack)

    sp = sub.add_parser("train-toy", help="train the MLP denoiser on desk-scale data")
    _add_run_options(sp)
    sp.add_argument("--iters", type=int)
    sp.add_argument("--eval-every", type=int, default=50)
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_train_toy)

    sp = sub.add_parser("sample", help="generate samples")
    _add_run_options(sp)
    sp.add_argument("--oracle", help="STF tensor used by the oracle denoiser")
    sp.add_argument("--checkpoint", help="SSDW checkpoint from train-toy")
    sp.add_argument("--n", type=int, default=1)
    sp.add_argument("--mode", choices=MODES, default=EXACT)
    sp.add_argument("--trajectory", action="store_true", help="dump per-step states")
    sp.add_argument("--stride", type=int, default=1, help="trajectory thinning stride")
    sp.add_argument("--no-clamp", action="store_true", help="keep out-of-range values in STF output")
    sp.add_argument("--out-dir")
    sp.set_defaults(func=cmd_sample)

    sp = sub.add_parser("flops", help="routed vs full-network MAC estimates")
    _add_run_options(sp)
    sp.add_argument("--L", dest="L", type=int, help="UNet depth (default: number of levels)")
    sp.add_argument("--channel-profile", type=_levels)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_flops)
    return ap


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (*CONFIG_ERRORS, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SSDError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
