"""``bench`` command line entry point."""

from __future__ import annotations

import argparse
import sys
from typing import Optional, Sequence

from .bench import (
    AllocatorKind,
    BenchConfig,
    amdahl_speedup,
    format_csv,
    run_faultcost,
    run_montecarlo,
    run_reallocbench,
    write_csv,
)
from .costmodel import load_cost_model, profile
from .errors import ConfigError, DomainError, IoError

EXIT_CONFIG = 2
EXIT_IO = 3

DEFAULT_FAULTCOST_SIZES = "4096,16384,65536,262144,1048576,4194304"


def _byte_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated byte counts, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bench", description="Allocator benchmarks over the page simulator.")
    sub = parser.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=42)
    common.add_argument("--iterations", type=int, default=None)
    common.add_argument("--ring", type=int, default=512, help="live blocks kept before the oldest is freed")
    common.add_argument("--min", type=int, default=4096, dest="min_size", help="smallest block in bytes")
    common.add_argument("--max", type=int, default=8 * 1024 * 1024, dest="max_size", help="largest block in bytes")
    common.add_argument("--allocator", default=AllocatorKind.UMPA.value,
                        help="one of " + ", ".join(k.value for k in AllocatorKind))
    common.add_argument("--preload", action="store_true", help="fill the lookaside cache before timing")
    common.add_argument("--cost-model", metavar="FILE", help="key = value overrides for cycle charges")
    common.add_argument("--profile", choices=["windows", "linux"], default="windows")
    common.add_argument("--csv", metavar="FILE", help="write bin statistics here instead of stdout")

    sub.add_parser("montecarlo", parents=[common], help="random sizes through a ring buffer")
    fc = sub.add_parser("faultcost", parents=[common], help="cycles per page, lazily faulted vs eagerly mapped")
    fc.add_argument("--sizes", type=_byte_list, default=_byte_list(DEFAULT_FAULTCOST_SIZES))
    sub.add_parser("reallocbench", parents=[common], help="doubling realloc, remap vs copy")

    am = sub.add_parser("amdahl", help="overall speedup from an allocator speedup")
    am.add_argument("--p", type=float, required=True, help="fraction of run time spent allocating")
    am.add_argument("--s", type=float, required=True, help="allocator speedup factor")
    return parser


def _config(args, default_iterations: int) -> BenchConfig:
    iterations = default_iterations if args.iterations is None else args.iterations
    return BenchConfig(
        seed=args.seed,
        iterations=iterations,
        ring_size=args.ring,
        min_size=args.min_size,
        max_size=args.max_size,
        allocator=AllocatorKind.parse(args.allocator),
        preload_cache=args.preload,
    )


def _params(args):
    base = profile(args.profile)
    return load_cost_model(args.cost_model, base) if args.cost_model else base


def _emit(stats, args) -> None:
    if args.csv:
        write_csv(stats, args.csv)
    else:
        sys.stdout.write(format_csv(stats))


def _faultcost_table(rows) -> str:
    lines = ["size,pages,paged_faults,paged_cycles_per_page,nonpaged_cycles_per_page,"
             "paged_notraverse,nonpaged_notraverse,ratio"]
    for r in rows:
        lines.append(
            f"{r.size},{r.pages},{r.paged_faults},{r.paged_cycles_per_page:.6f},{r.nonpaged_cycles_per_page:.6f},"
            f"{r.paged_cycles_per_page_notraverse:.6f},{r.nonpaged_cycles_per_page_notraverse:.6f},{r.ratio:.6f}"
        )
    return "\n".join(lines) + "\n"


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "amdahl":
            print(f"{amdahl_speedup(args.p, args.s):.9f}")
            return 0
        params = _params(args)
        if args.command == "montecarlo":
            _emit(run_montecarlo(_config(args, 20000), params), args)
        elif args.command == "reallocbench":
            _emit(run_reallocbench(_config(args, 4), params), args)
        elif args.command == "faultcost":
            text = _faultcost_table(run_faultcost(_config(args, 1), params, args.sizes))
            if args.csv:
                try:
                    with open(args.csv, "w", newline="") as f:
                        f.write(text)
                except OSError as exc:
                    raise IoError(f"cannot write {args.csv}: {exc}") from exc
            else:
                sys.stdout.write(text)
    except (ConfigError, DomainError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IoError as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_IO
    return 0


if __name__ == "__main__":
    sys.exit(main())
