"""Command line entry point ``derivlab``."""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from . import experiments as ex
from .diffusion import derivative_sup_bound, eval_derivative_closed, eval_derivative_fd
from .moments import MomentQuery, second_moment_exact
from .montecarlo import SamplerConfig, estimate_moment, sample_exact
from .setpart import PartitionError, enumerate_partitions
from .spectral import RegimeError, SpectralVector, norm, test_tuple_u


def _cmd_partitions(args) -> int:
    try:
        fam = enumerate_partitions(args.n, allow_large=args.allow_large)
    except PartitionError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    for part in fam:
        print(part)
    print(f"# {len(fam)} partitions of {{1..{args.n}}}")
    return ex.EXIT_OK


def _random_vector(rng: np.random.Generator, modes: int = 10) -> SpectralVector:
    return SpectralVector.from_arrays(range(1, modes + 1), rng.uniform(-2.0, 2.0, modes))


def _cmd_bcheck(args) -> int:
    n = args.order
    if n < 1:
        print("error: --order must be >= 1", file=sys.stderr)
        return ex.EXIT_CONFIG
    rng = np.random.default_rng(args.seed)
    bound = derivative_sup_bound(n)
    worst_fd = 0.0
    worst_ratio = 0.0
    violations = 0
    for _ in range(args.trials):
        v0 = _random_vector(rng)
        dirs = [_random_vector(rng) for _ in range(n)]
        closed = eval_derivative_closed(v0, dirs).scalar
        ratio = abs(closed) / math.prod(norm(d) for d in dirs)
        worst_ratio = max(worst_ratio, ratio)
        violations += ratio > bound
        if n <= 4:
            fd = eval_derivative_fd(v0, dirs).scalar
            worst_fd = max(worst_fd, abs(closed - fd) / max(1.0, abs(closed)))
    ok = violations == 0 and (n > 4 or worst_fd <= 1e-5)
    fd_text = f"{worst_fd:.3e}" if n <= 4 else "skipped (n > 4)"
    print(
        f"order={n} trials={args.trials} max_fd_rel_err={fd_text} "
        f"max_norm_ratio={worst_ratio:.6e} sup_bound={bound:.6g} violations={violations} "
        f"{'PASS' if ok else 'FAIL'}"
    )
    return ex.EXIT_OK if ok else ex.EXIT_FAILED


def _load(path):
    cfg = ex.load_config(path)
    fam = ex.resolve_family(cfg)
    return cfg, fam


def _cmd_moment(args) -> int:
    try:
        cfg, fam = _load(args.config)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except RegimeError as exc:
        print(f"regime violation: {exc}", file=sys.stderr)
        return ex.EXIT_REGIME
    N = cfg.n_grid[-1]
    spec = fam.spec(cfg, N)
    res = second_moment_exact(cfg.params, MomentQuery(cfg.n, test_tuple_u(cfg.params, spec), cfg.t, cfg.q))
    print(f"N={N} eps_vector={fam.eps:.6g} m={fam.m}")
    print(f"deterministic_part={res.deterministic_part:.16e}")
    print(f"noise_variance={res.noise_variance:.16e}")
    print(f"second_moment={res.second_moment:.16e}")
    return ex.EXIT_OK


def _cmd_ratio(args) -> int:
    outcome = ex.run_config(args.config, strict=args.strict, workers=args.workers)
    if outcome.series is None:
        print(outcome.summary, file=sys.stderr)
        return outcome.status
    if outcome.out:
        print(outcome.summary)
    else:
        sys.stdout.write(ex.series_to_csv(outcome.series))
        print(outcome.summary, file=sys.stderr)
    return outcome.status


def _cmd_mc_validate(args) -> int:
    try:
        cfg, fam = _load(args.config)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return ex.EXIT_CONFIG
    except RegimeError as exc:
        print(f"regime violation: {exc}", file=sys.stderr)
        return ex.EXIT_REGIME
    seed = cfg.seed if cfg.seed is not None else 0
    N = cfg.n_grid[-1]
    spec = fam.spec(cfg, N)
    query = MomentQuery(cfg.n, test_tuple_u(cfg.params, spec), cfg.t, cfg.q)
    exact = second_moment_exact(cfg.params, query).second_moment
    mean, se = estimate_moment(sample_exact(cfg.params, query, SamplerConfig(seed, args.samples)), cfg.q)
    ok = abs(mean - exact) <= 4.0 * se + 1e-12 * abs(exact)
    print(
        f"N={N} samples={args.samples} exact={exact:.10e} mc_mean={mean:.10e} se={se:.3e} "
        f"z={(mean - exact) / se if se > 0 else 0.0:+.3f} {'PASS' if ok else 'FAIL'}"
    )
    return ex.EXIT_OK if ok else ex.EXIT_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="derivlab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("partitions", help="list the set partitions of {1..n}")
    p.add_argument("n", type=int)
    p.add_argument("--allow-large", action="store_true", help="lift the n <= 12 cap")
    p.set_defaults(func=_cmd_partitions)

    p = sub.add_parser("bcheck", help="check derivatives of B against finite differences and the sup bound")
    p.add_argument("--order", type=int, required=True)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_bcheck)

    p = sub.add_parser("moment", help="exact second moment at the largest grid N")
    p.add_argument("--config", required=True)
    p.set_defaults(func=_cmd_moment)

    p = sub.add_parser("ratio", help="ratio series, verdict and CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--strict", action="store_true", help="exit 4 unless the verdict matches the regime")
    p.add_argument("--workers", type=int, default=None, help="process pool size for grid points")
    p.set_defaults(func=_cmd_ratio)

    p = sub.add_parser("mc-validate", help="Monte Carlo check of the exact second moment")
    p.add_argument("--config", required=True)
    p.add_argument("--samples", type=int, default=ex.DEFAULT_MC_SAMPLES)
    p.set_defaults(func=_cmd_mc_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
