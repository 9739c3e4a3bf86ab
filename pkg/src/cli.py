"""Command-line surface: gen, merge, restore, block, analyze, bench"""

from typing import Callable, List, Optional, Sequence
import argparse
import csv
import sys
import time

from bench import BenchmarkEvaluator
from complexity import CSV_COLUMNS, condition_integral, condition_probability, condition_probability_exact, sweep
from errors import MaMeError
from mame import MergedSequence, SimilarityConfig, mame
from mare import mare
from partition import STYLES, make_plan
from settings import DTYPES, Settings, default_epsilon
from similarity import SIMILARITIES
from tokenio import (
    Pattern,
    gen_synthetic,
    read_fusion_state,
    read_tokens,
    write_fusion_state,
    write_tokens,
)
from transformer import BlockConfig, parse_layers, run_stack


EXIT_OK = 0
EXIT_DATA = 1
EXIT_USAGE = 2


def _print(message: str, verbose: bool = True) -> None:
    """Diagnostics go to stderr; stdout carries only requested data"""
    if verbose:
        print(message, file=sys.stderr)


def _summary(command: str, L: int, L_prime: int, preserved, elapsed: float) -> None:
    print(f"✅ {command}: L {L} → L' {L_prime} | preserved {preserved} | {elapsed:.3f}s", file=sys.stderr)


def _arg_type(convert: Callable, check: Callable = lambda v: True, what: str = "value") -> Callable:
    def parse(text: str):
        try:
            value = convert(text)
        except (ValueError, MaMeError) as e:
            raise argparse.ArgumentTypeError(f"invalid {what} {text!r}: {e}")
        if not check(value):
            raise argparse.ArgumentTypeError(f"invalid {what} {text!r}")
        return value
    return parse


def _int_list(text: str) -> List[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def _float_list(text: str) -> List[float]:
    return [float(part) for part in text.split(",") if part.strip()]


def _pattern_text(text: str) -> str:
    Pattern.parse(text)
    return text


positive_int = _arg_type(int, lambda v: v >= 1, "positive integer")
non_negative_int = _arg_type(int, lambda v: v >= 0, "non-negative integer")
fraction = _arg_type(float, lambda v: 0.0 < v < 1.0, "fraction in (0, 1)")
positive_float = _arg_type(float, lambda v: v > 0, "positive number")
pattern_type = _arg_type(Pattern.parse, what="pattern")
layers_type = _arg_type(parse_layers, what="layer list")
int_list = _arg_type(_int_list, lambda v: bool(v) and all(x >= 2 for x in v), "length list")
float_list = _arg_type(_float_list, lambda v: bool(v), "threshold list")


def build_parser(settings: Settings) -> argparse.ArgumentParser:
    """Argument parser; global flags are accepted after the subcommand too"""
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=non_negative_int, default=settings.seed)
    common.add_argument("--dtype", choices=DTYPES, default=None,
                        help="storage precision (default: the input file's, or MAME_DTYPE)")
    common.add_argument("--epsilon", type=positive_float, default=settings.epsilon)
    common.add_argument("--quiet", action="store_true", default=not settings.verbose)

    parser = argparse.ArgumentParser(prog="mame", description="Matrix-based token merging toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write synthetic tokens")
    p.add_argument("--B", type=positive_int, default=1)
    p.add_argument("--L", type=positive_int, required=True)
    p.add_argument("--d", type=positive_int, required=True)
    p.add_argument("--l-spec", type=non_negative_int, default=0)
    p.add_argument("--pattern", type=pattern_type, default=Pattern())
    p.add_argument("--out", required=True)

    p = sub.add_parser("merge", parents=[common], help="merge a token file")
    p.add_argument("--input", required=True)
    p.add_argument("--tau", type=float, default=settings.tau)
    p.add_argument("--sim", choices=SIMILARITIES, default="cosine")
    p.add_argument("--partition", choices=STYLES, default="alternating")
    p.add_argument("--ratio-src", type=fraction, default=0.5)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--causal", action="store_true")
    p.add_argument("--count-mode", choices=("indicator", "soft"), default="indicator")
    p.add_argument("--fusion-formula", choices=("renormalized", "listing"), default="renormalized")
    p.add_argument("--out", required=True)
    p.add_argument("--state", required=True)

    p = sub.add_parser("restore", parents=[common], help="restore a merged token file")
    p.add_argument("--input", required=True)
    p.add_argument("--state", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("block", parents=[common], help="run a toy transformer stack")
    p.add_argument("--mode", choices=("perception", "synthesis"), default="perception")
    p.add_argument("--layers", type=layers_type, default=[3, 6, 9])
    p.add_argument("--depth", type=positive_int, default=12)
    p.add_argument("--heads", type=positive_int, default=4)
    p.add_argument("--mlp-ratio", type=positive_int, default=4)
    p.add_argument("--tau", type=float, default=settings.tau)
    p.add_argument("--sim", choices=SIMILARITIES, default="cosine")
    p.add_argument("--partition", choices=STYLES, default="alternating")
    p.add_argument("--metric", choices=("hidden", "keys", "keys-head-mean"), default="hidden")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("analyze", parents=[common], help="sweep the FLOP model")
    p.add_argument("--samples", type=positive_int, default=1_000_000)
    p.add_argument("--grid", type=positive_int, default=10)
    p.add_argument("--quad-grid", type=_arg_type(int, lambda v: v >= 2, "grid"), default=10_000)
    p.add_argument("--L", type=positive_int, default=197)
    p.add_argument("--d", type=positive_int, default=768)
    p.add_argument("--out", required=True, help="CSV path, or - for stdout")

    p = sub.add_parser("bench", parents=[common], help="time merge against attention")
    p.add_argument("--L-list", type=int_list, default=[256, 1024, 4096])
    p.add_argument("--d", type=positive_int, default=64)
    p.add_argument("--tau-list", type=float_list, default=[0.5, 0.8])
    p.add_argument("--repeat", type=positive_int, default=5)
    p.add_argument("--pattern", default="clustered:16:0.05", type=_arg_type(_pattern_text, what="pattern"))
    p.add_argument("--out", required=True, help="CSV path, or - for stdout")

    return parser


def _open_csv(path: str):
    return sys.stdout if path == "-" else open(path, "w", newline="")


def _dtype(args, tokens=None) -> str:
    if args.dtype is not None:
        return args.dtype
    return tokens.dtype if tokens is not None else args.settings.dtype


def _epsilon(args, dtype: str) -> float:
    return args.epsilon if args.epsilon is not None else default_epsilon(dtype)


def cmd_gen(args) -> int:
    start = time.perf_counter()
    dtype = _dtype(args)
    tokens = gen_synthetic(args.B, args.L, args.d, args.l_spec, args.seed, args.pattern, dtype)
    write_tokens(tokens, args.out, dtype)
    _print(f"💾 wrote {tokens} to {args.out}", not args.quiet)
    _summary("gen", tokens.length, tokens.length, 0, time.perf_counter() - start)
    return EXIT_OK


def cmd_merge(args) -> int:
    start = time.perf_counter()
    tokens = read_tokens(args.input)
    cfg = SimilarityConfig(
        function=args.sim,
        tau=args.tau,
        epsilon=_epsilon(args, _dtype(args, tokens)),
        refine=not args.no_refine,
        causal=args.causal,
        count_mode=args.count_mode,
        fusion_formula=args.fusion_formula,
    )
    plan = make_plan(tokens.length, tokens.l_spec, args.partition, args.ratio_src, args.seed)
    merged = mame(tokens, plan, cfg)
    write_tokens(merged.to_token_matrix(), args.out, _dtype(args, tokens))
    write_fusion_state(merged.state.to_state_file(), args.state)
    _print(f"🔀 merged {tokens} with tau={cfg.tau} ({cfg.function}, {plan.style}, M={plan.M}, N={plan.N})",
           not args.quiet)
    _summary("merge", tokens.length, merged.length, merged.r, time.perf_counter() - start)
    return EXIT_OK


def cmd_restore(args) -> int:
    start = time.perf_counter()
    tokens = read_tokens(args.input)
    state = read_fusion_state(args.state)
    merged = MergedSequence.from_parts(tokens, state)
    restored = mare(merged)
    write_tokens(restored, args.out, _dtype(args, tokens))
    _print(f"♻️  restored {restored} to {args.out}", not args.quiet)
    _summary("restore", merged.length, restored.length, merged.r, time.perf_counter() - start)
    return EXIT_OK


def cmd_block(args) -> int:
    start = time.perf_counter()
    tokens = read_tokens(args.input)
    merge_cfg = SimilarityConfig(
        function=args.sim,
        tau=args.tau,
        epsilon=_epsilon(args, _dtype(args, tokens)),
        causal=args.partition == "causal",
        metric_source=args.metric.replace("-", "_"),
    )
    cfg = BlockConfig(
        d_model=tokens.dim,
        heads=args.heads,
        mlp_ratio=args.mlp_ratio,
        seed=args.seed,
        mode=args.mode,
        merge_cfg=merge_cfg,
        plan_style=args.partition,
    )
    out, lengths = run_stack(tokens, cfg, args.depth, args.layers)
    write_tokens(out, args.out, _dtype(args, tokens))
    _print(f"🧱 {args.mode} stack of {args.depth} blocks, merging at {args.layers}: lengths {lengths}",
           not args.quiet)
    _summary("block", tokens.length, out.length, "-", time.perf_counter() - start)
    return EXIT_OK


def cmd_analyze(args) -> int:
    start = time.perf_counter()
    rows = sweep(args.grid, args.L, args.d)
    stream = _open_csv(args.out)
    try:
        writer = csv.DictWriter(stream, fieldnames=CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    finally:
        if stream is not sys.stdout:
            stream.close()
    integral = condition_integral(args.quad_grid)
    estimate = condition_probability(args.samples, args.seed)
    _print(f"📐 area {integral:.7f}, P exact {condition_probability_exact(args.quad_grid):.5f}, "
           f"P Monte Carlo {estimate:.5f} ({args.samples} samples)", not args.quiet)
    _summary("analyze", args.L, args.L, 0, time.perf_counter() - start)
    return EXIT_OK


def cmd_bench(args) -> int:
    start = time.perf_counter()
    evaluator = BenchmarkEvaluator(_dtype(args), args.seed, args.pattern, args.epsilon, verbose=not args.quiet)
    evaluator.run(args.L_list, args.d, args.tau_list, args.repeat)
    stream = _open_csv(args.out)
    try:
        evaluator.save_report(stream)
    finally:
        if stream is not sys.stdout:
            stream.close()
    stats = evaluator.get_session_stats()
    _print(f"📊 {stats['runs']} runs, merged attention faster in {stats['merged_attention_faster']:.0%} of repeats, "
           f"average speedup {stats['average_speedup']}", not args.quiet)
    last = evaluator.rows[-1]
    _summary("bench", last["L"], last["L_prime"], "-", time.perf_counter() - start)
    return EXIT_OK


COMMANDS = {
    "gen": cmd_gen,
    "merge": cmd_merge,
    "restore": cmd_restore,
    "block": cmd_block,
    "analyze": cmd_analyze,
    "bench": cmd_bench,
}


def dispatch(argv: Optional[Sequence[str]] = None, settings: Optional[Settings] = None) -> int:
    """
    Parse argv and run the subcommand

    Returns:
        0 on success, 2 on usage errors, 1 on data or state errors
    """
    try:
        settings = settings or Settings.from_env()
    except MaMeError as e:
        print(f"❌ {e}", file=sys.stderr)
        return EXIT_USAGE

    parser = build_parser(settings)
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    args.settings = settings

    if getattr(args, "causal", False) and args.partition != "causal":
        print("❌ --causal requires --partition causal", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "gen" and args.l_spec >= args.L:
        print(f"❌ --l-spec {args.l_spec} must be below --L {args.L}", file=sys.stderr)
        return EXIT_USAGE
    if args.command == "block" and any(layer > args.depth for layer in args.layers):
        print(f"❌ --layers {args.layers} exceed --depth {args.depth}", file=sys.stderr)
        return EXIT_USAGE

    try:
        return COMMANDS[args.command](args)
    except (MaMeError, OSError) as e:
        print(f"❌ {args.command}: {e}", file=sys.stderr)
        return EXIT_DATA
