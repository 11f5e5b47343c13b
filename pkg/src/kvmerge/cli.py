"""Command-line entry point: ``kvmerge {verify,spectrum,simulate,compare}``.

Exit codes: 0 success, 1 verification failure, 2 usage error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import _faults, oracle, report
from .cache import ALGORITHMS, PAIR_STRATEGIES, CompressionConfig
from .errors import ConfigError, DegenerateDirection, TensorFormatError
from .harness import Scenario, compare_over_seeds, run_seeds, summarize
from .spectral import concentration_stats, mode_contributions, spectral_profile
from .tensorfile import read_tensor

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3

_FLAG_FOR_FIELD = {
    "budget": "--budget",
    "chunk_size": "--chunk-size",
    "sink_len": "--sink",
    "algorithm": "--algo",
    "pair_strategy": "--pair-strategy",
    "eps": "--eps",
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _add_sim_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("cache")
    g.add_argument("--budget", type=int, default=2048)
    g.add_argument("--chunk-size", type=int, default=512)
    g.add_argument("--sink", type=int, default=32, help="leading tokens kept verbatim")
    g.add_argument("--pair-strategy", default="lowest_attention_mass", choices=PAIR_STRATEGIES)
    g.add_argument("--eps", type=float, default=1e-10, help="degeneracy threshold for merge weights")
    g = p.add_argument_group("synthetic model and stream")
    g.add_argument("--beta", type=float, default=2.0, help="Q/K spectral decay exponent")
    g.add_argument("--value-beta", type=float, default=0.0, help="V spectral decay exponent")
    g.add_argument("--rho", type=float, default=0.9, help="AR(1) correlation of hidden states")
    g.add_argument("--length", type=_positive_int, default=4096, help="decode steps per seed")
    g.add_argument("--d-model", type=_positive_int, default=64)
    g.add_argument("--head-dim", type=_positive_int, default=16)
    g.add_argument("--heads", type=_positive_int, default=4)
    g = p.add_argument_group("run")
    g.add_argument("--seeds", type=_positive_int, default=1, help="number of seeds")
    g.add_argument("--seed-offset", type=int, default=0)
    g.add_argument("--jobs", type=_positive_int, default=1, help="worker processes")
    g.add_argument("--summary", help="JSON summary path (default: stdout)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kvmerge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="run the oracle suite")
    p.add_argument("--seeds", type=_positive_int, default=3)
    p.add_argument("--sizes", type=_int_list, default=[2, 4, 8], help="sequence lengths n")
    p.add_argument("--dims", type=_int_list, default=[2, 4], help="head dimensions d")
    p.add_argument("--instances", type=_positive_int, default=50, help="random merge instances")
    p.add_argument("--inject-fault", action="append", default=[], choices=sorted(_faults.KNOWN),
                   help=argparse.SUPPRESS)

    p = sub.add_parser(
        "spectrum",
        help="eigen-spectrum of a projection weight",
        description="Head h of a d_model x (H*D) weight occupies columns [h*D, (h+1)*D).",
    )
    p.add_argument("--weights", required=True, help="TensorFile holding a 2-D weight")
    p.add_argument("--heads", type=_positive_int, default=1)
    p.add_argument("--head-dim", type=_positive_int)
    p.add_argument("--states", help="TensorFile of hidden states (T x d_model) for mode contributions")
    p.add_argument("--topk", type=_positive_int, default=8)
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--summary", help="JSON summary path (default: stdout)")

    p = sub.add_parser("simulate", help="decode simulation for one algorithm")
    p.add_argument("--algo", default="kvslimmer", choices=ALGORITHMS)
    p.add_argument("--out", help="per-step CSV path")
    _add_sim_flags(p)

    p = sub.add_parser("compare", help="decode simulation for several algorithms on shared seeds")
    p.add_argument("--algos", default="mean,asymkv,kvslimmer", help="comma-separated algorithms")
    p.add_argument("--out", help="CSV table path")
    _add_sim_flags(p)
    return parser


def _scenario(args, algorithm: str) -> Scenario:
    try:
        cfg = CompressionConfig(args.budget, args.chunk_size, args.sink, algorithm, args.pair_strategy, args.eps)
    except ConfigError as e:
        raise UsageError(f"{_FLAG_FOR_FIELD.get(e.field, e.field)}: {str(e).split(': ', 1)[1]}")
    if not 0.0 <= args.rho < 1.0:
        raise UsageError(f"--rho: must lie in [0, 1), got {args.rho}")
    if args.beta < 0 or args.value_beta < 0:
        raise UsageError("--beta/--value-beta: must be non-negative")
    if args.head_dim > args.d_model:
        raise UsageError(f"--head-dim: cannot exceed --d-model ({args.d_model})")
    return Scenario(cfg, args.length, args.beta, args.rho, args.d_model, args.head_dim, args.heads, args.value_beta)


def _emit_summary(args, obj) -> None:
    if args.summary:
        report.write_json(args.summary, obj)
    else:
        sys.stdout.write(report.json_text(obj))


def cmd_verify(args) -> int:
    with _faults.inject(*args.inject_fault):
        results = oracle.run_suite(args.seeds, tuple(args.sizes), tuple(args.dims), args.instances)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        extra = f" ({'; '.join(r.notes)})" if r.notes else ""
        print(f"{status}  {r.name}: worst={r.worst:.3e} tol={r.tolerance:.0e} cases={r.cases}{extra}")
    failed = sum(not r.passed for r in results)
    print(f"verify: {len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else EXIT_FAIL


def cmd_spectrum(args) -> int:
    W = read_tensor(args.weights).astype(np.float64)
    if W.ndim != 2:
        raise UsageError(f"--weights: expected a 2-D matrix, got {W.ndim}-D")
    head_dim = args.head_dim or W.shape[1] // args.heads
    if head_dim == 0 or head_dim * args.heads != W.shape[1]:
        raise UsageError(f"--heads/--head-dim: {args.heads} x {head_dim} does not tile {W.shape[1]} columns")
    X = None
    if args.states:
        X = read_tensor(args.states).astype(np.float64)
        if X.ndim != 2 or X.shape[1] != W.shape[0] or X.shape[0] < 2:
            raise UsageError(f"--states: expected (T >= 2) x {W.shape[0]} hidden states, got {X.shape}")

    rows, heads = [], []
    for h in range(args.heads):
        prof = spectral_profile(W[:, h * head_dim:(h + 1) * head_dim])
        lam = prof.eigenvalues
        cum = np.cumsum(lam) / np.sum(lam) if np.sum(lam) > 0 else np.zeros_like(lam)
        contrib = None
        if X is not None:
            acc, used = np.zeros_like(lam), 0
            for t in range(X.shape[0] - 1):
                try:
                    acc += mode_contributions(X[t], X[t + 1], prof).contributions
                    used += 1
                except DegenerateDirection:
                    continue
            contrib = acc / used if used else None
        for i in range(lam.size):
            rows.append((h, i, float(lam[i]), float(cum[i]), "" if contrib is None else float(contrib[i])))
        try:
            pr, top = concentration_stats(prof, args.topk)
        except DegenerateDirection:
            pr, top = 0.0, 0.0
        heads.append({"head": h, "participation_ratio": pr, "topk_energy": top, "topk": args.topk})
    report.write_csv(args.out, report.SPECTRUM_COLUMNS, rows)
    _emit_summary(args, {"weights": args.weights, "heads": heads})
    return EXIT_OK


def cmd_simulate(args) -> int:
    scenario = _scenario(args, args.algo)
    seeds = range(args.seed_offset, args.seed_offset + args.seeds)
    results = run_seeds(scenario, seeds, jobs=args.jobs)
    if args.out:
        rows = (row for s, r in zip(seeds, results) for row in report.step_rows(s, r))
        report.write_csv(args.out, report.STEP_COLUMNS, rows)
    errors = np.concatenate([r.per_step_l2_error for r in results])
    merges = sum(r.merge_count for r in results)
    fb = sum(r.fallback_rate * r.merge_count for r in results)
    s = summarize(args.algo, errors, max(r.final_cache_len for r in results), fb / merges if merges else 0.0)
    _emit_summary(args, {k: s[k] for k in report.SIMULATE_SUMMARY_KEYS})
    return EXIT_OK


def cmd_compare(args) -> int:
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    bad = [a for a in algos if a not in ALGORITHMS]
    if not algos or bad:
        raise UsageError(f"--algos: unknown algorithm(s) {bad}; choose from {ALGORITHMS}")
    scenario = _scenario(args, algos[0])
    seeds = range(args.seed_offset, args.seed_offset + args.seeds)
    rows, _ = compare_over_seeds(scenario, seeds, algos, jobs=args.jobs)
    if args.out:
        report.write_csv(args.out, report.COMPARE_COLUMNS, [[r[c] for c in report.COMPARE_COLUMNS] for r in rows])
    ordering = [r["algo"] for r in sorted(rows, key=lambda r: r["mean_error"])]
    _emit_summary(args, {"summaries": rows, "ordering_by_mean_error": ordering})
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "spectrum": cmd_spectrum, "simulate": cmd_simulate, "compare": cmd_compare}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"kvmerge {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, TensorFormatError) as e:
        print(f"kvmerge {args.command}: I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
