"""Command-line interface.

Subcommands: run (evaluate a program), tile (print the tiled IR and slot
table), autotune (search tile sizes), cachesim (trace + simulate), bench
(run the benchmark corpus). Exit codes: 0 success, 1 usage or parse
error, 2 runtime error, 3 correctness-check failure.
"""

from __future__ import annotations

import argparse
import sys
import time

from .autotuner import AutotuneError, CostProbe, SearchConfig, autotune, format_log
from .bench import (
    BENCHMARKS, CorrectnessError, bench_kmeans, bench_matmul, bench_sum_rows,
    checksum, generate_array,
)
from .cachesim import CacheModel, probe_hardware, simulate_program
from .ir import IRError, desugar_allpairs, parse_program, print_program
from .ndarray import ArrayValue, NdArray, ShapeError, as_view, load_array
from .semantics import EvalConfig, EvalError, eval_program
from .tiling import TilingError, register_tile, tile_program

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_CORRECTNESS = 3


class UsageError(Exception):
    pass


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (UsageError, IRError, ShapeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EvalError, TilingError, AutotuneError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except CorrectnessError as exc:
        print(f"correctness failure: {exc}", file=sys.stderr)
        return EXIT_CORRECTNESS


def build_parser():
    parser = argparse.ArgumentParser(prog="tilepar")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="evaluate a program on inputs")
    _program_args(run)
    run.add_argument("--tiling", choices=["off", "cache", "cache+register"], default="off")
    run.add_argument("--tile-sizes", help="comma-separated sizes for runtime slots")
    run.add_argument("--parallelism", type=int, default=0,
                     help="worker threads for the outermost tiled operator (0: probed cores)")
    run.add_argument("--format", choices=["human", "csv"], default="human")
    run.set_defaults(handler=cmd_run)

    tile = sub.add_parser("tile", help="print the tiled IR and tile-slot table")
    _program_args(tile)
    tile.add_argument("--ranks", help="comma-separated entry argument ranks")
    tile.add_argument("--register", action="store_true", help="apply the register pass too")
    tile.set_defaults(handler=cmd_tile)

    tune = sub.add_parser("autotune", help="search tile sizes for a program")
    _program_args(tune)
    tune.add_argument("--probe", choices=["misses", "walltime"], default="misses")
    tune.add_argument("--batch", type=int, default=0, help="candidates per round (0: cores)")
    tune.add_argument("--budget", type=int, default=16, help="max candidate evaluations")
    tune.add_argument("--cache", help="best-sizes cache file (skips the search on a hit)")
    tune.add_argument("--format", choices=["human", "csv"], default="human")
    tune.set_defaults(handler=cmd_autotune)

    sim = sub.add_parser("cachesim", help="trace a program through a cache model")
    _program_args(sim)
    sim.add_argument("--capacity", type=int, default=0, help="bytes (0: probed L1)")
    sim.add_argument("--line", type=int, default=0, help="line size bytes (0: probed)")
    sim.add_argument("--assoc", type=int, default=8)
    sim.add_argument("--tiling", choices=["off", "cache", "cache+register"], default="off")
    sim.add_argument("--tile-sizes", help="comma-separated sizes for runtime slots")
    sim.add_argument("--format", choices=["human", "csv"], default="human")
    sim.set_defaults(handler=cmd_cachesim)

    bench = sub.add_parser("bench", help="run a corpus benchmark over all variants")
    bench.add_argument("--name", choices=BENCHMARKS, required=True)
    bench.add_argument("--size", type=int, default=64, help="matrix dimension")
    bench.add_argument("--rows", type=int, default=0)
    bench.add_argument("--cols", type=int, default=0)
    bench.add_argument("--layout", choices=["row", "col"], default="col")
    bench.add_argument("--points", type=int, default=500)
    bench.add_argument("--features", type=int, default=16)
    bench.add_argument("--k", type=int, default=8)
    bench.add_argument("--iters", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--misses", action="store_true", help="include simulated miss counts")
    bench.add_argument("--format", choices=["human", "csv"], default="human")
    bench.set_defaults(handler=cmd_bench)
    return parser


def _program_args(sub):
    sub.add_argument("--program", required=True, help="IR source file")
    sub.add_argument("--input", action="append", default=[],
                     help="array file (repeatable, one per entry argument)")
    sub.add_argument("--gen", action="append", default=[],
                     help="generated input spec: shape=RxC,dtype=f64,layout=row,seed=0")
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--internal-dialect", action="store_true",
                     help="accept tiled operators and generated names in the source")


def _hardware():
    """Probed hardware with environment-variable overrides."""
    import os
    info = probe_hardware()
    overrides = {
        "l1_bytes": os.environ.get("TILEPAR_L1_BYTES"),
        "line_bytes": os.environ.get("TILEPAR_LINE_BYTES"),
        "cores": os.environ.get("TILEPAR_CORES"),
        "registers": os.environ.get("TILEPAR_REGISTERS"),
    }
    for key, value in overrides.items():
        if value is None:
            continue
        try:
            n = int(value)
        except ValueError:
            raise UsageError(f"environment override {key} must be an integer, got {value!r}")
        if n >= 1:
            setattr(info, key, n)
            info.provenance = "configured"
    return info


def _load_program(args):
    try:
        with open(args.program) as f:
            text = f.read()
    except OSError as exc:
        raise UsageError(f"cannot read program: {exc}")
    return parse_program(text, allow_internal=getattr(args, "internal_dialect", False))


def _load_inputs(args):
    values = []
    for path in args.input:
        try:
            with open(path) as f:
                values.append(load_array(f.read()))
        except OSError as exc:
            raise UsageError(f"cannot read input: {exc}")
    for spec in args.gen:
        values.append(_generated_input(spec, args.seed))
    return values


def _generated_input(spec, default_seed):
    fields = {"dtype": "f64", "layout": "row", "seed": str(default_seed)}
    for part in spec.split(","):
        if "=" not in part:
            raise UsageError(f"bad --gen field {part!r}")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    if "shape" not in fields:
        raise UsageError("--gen needs shape=DIMxDIM...")
    shape = tuple(int(d) for d in fields["shape"].lower().split("x"))
    return generate_array(shape, fields["dtype"], fields["layout"], int(fields["seed"]))


def _parse_sizes(text, spec):
    if not text:
        return {}
    sizes = [int(t) for t in text.split(",")]
    runtime = spec.runtime_slots()
    if len(sizes) != len(runtime):
        raise UsageError(f"{len(runtime)} runtime slot(s) but {len(sizes)} size(s) given")
    return {slot.id: size for slot, size in zip(runtime, sizes)}


def _arg_ranks(program, inputs):
    return [as_view(v).rank if isinstance(v, ArrayValue) else 0 for v in inputs]


def _prepare_tiled(program, inputs, tiling, hw):
    program = desugar_allpairs(program)
    if tiling == "off":
        return program, None
    result = tile_program(program, arg_ranks=_arg_ranks(program, inputs) if inputs else None)
    if not result.changed:
        print(f"note: program left untiled ({result.reason})", file=sys.stderr)
        return program, None
    tiled, spec = result.program, result.spec
    if tiling == "cache+register":
        tiled, spec = register_tile(tiled, spec, hw)
    return tiled, spec


def _default_sizes(program, spec, hw):
    from .autotuner import estimate_bounds
    space = estimate_bounds(program, spec, hw)
    return dict(zip(space.slot_ids, space.midpoint()))


def _render_value(value):
    if not isinstance(value, ArrayValue):
        return str(value)
    v = as_view(value)
    if v.size <= 64:
        return str(v.to_nested())
    return checksum(value)


# ---------------------------------------------------------------------------
# Handlers
# ---------------------------------------------------------------------------

def cmd_run(args):
    program = _load_program(args)
    inputs = _load_inputs(args)
    if args.tile_sizes and args.tiling == "off":
        raise UsageError("--tile-sizes requires --tiling cache or cache+register")
    hw = _hardware()
    tiled, spec = _prepare_tiled(program, inputs, args.tiling, hw)
    sizes = {}
    if spec is not None:
        overrides = _parse_sizes(args.tile_sizes, spec)
        sizes = spec.sizes(overrides=overrides or _default_sizes(tiled, spec, hw))
    parallelism = args.parallelism or hw.cores
    config = EvalConfig(parallelism=parallelism, tile_sizes=sizes)
    start = time.perf_counter()
    value = eval_program(tiled, inputs, config)
    wall = time.perf_counter() - start
    if args.format == "csv":
        print("result,wall_seconds")
        print(f"\"{_render_value(value)}\",{wall:.6f}")
    else:
        print(_render_value(value))
        print(f"wall: {wall:.6f}s")
    return EXIT_OK


def cmd_tile(args):
    program = _load_program(args)
    program = desugar_allpairs(program)
    ranks = None
    if args.ranks:
        ranks = [int(t) for t in args.ranks.split(",")]
    elif args.input or args.gen:
        ranks = _arg_ranks(program, _load_inputs(args))
    result = tile_program(program, arg_ranks=ranks)
    if not result.changed:
        print(f"unchanged: {result.reason}")
        print(print_program(result.program), end="")
        return EXIT_OK
    tiled, spec = result.program, result.spec
    if args.register:
        tiled, spec = register_tile(tiled, spec, _hardware())
    print(print_program(tiled), end="")
    print()
    print(spec.table())
    return EXIT_OK


def cmd_autotune(args):
    program = _load_program(args)
    inputs = _load_inputs(args)
    if not inputs:
        raise UsageError("autotune needs --input or --gen")
    hw = _hardware()
    tiled, spec = _prepare_tiled(program, inputs, "cache", hw)
    if spec is None:
        raise UsageError("program has nothing to tune")
    key = None
    if args.cache:
        from .autotuner import cache_key, load_cached_sizes
        shapes = [as_view(v).shape for v in inputs if isinstance(v, ArrayValue)]
        key = cache_key(tiled, shapes, hw)
        cached = load_cached_sizes(args.cache, key)
        if cached is not None:
            print(f"cached sizes: {cached}")
            return EXIT_OK
    model = CacheModel(hw.l1_bytes, hw.line_bytes)
    from .autotuner import estimate_bounds
    slot_ids = estimate_bounds(tiled, spec, hw).slot_ids

    if args.probe == "misses":
        def probe_fn(sizes):
            stats, _ = simulate_program(tiled, inputs, model,
                                        tile_sizes=spec.sizes(overrides=dict(zip(slot_ids, sizes))))
            return float(stats.misses)
    else:
        def probe_fn(sizes):
            start = time.perf_counter()
            eval_program(tiled, inputs,
                         EvalConfig(tile_sizes=spec.sizes(overrides=dict(zip(slot_ids, sizes)))))
            return time.perf_counter() - start

    config = SearchConfig(batch_size=args.batch or hw.cores,
                          max_evaluations=args.budget, seed=args.seed,
                          parallelism=hw.cores)
    tuned, state = autotune(tiled, spec, CostProbe(probe_fn), hw, config)
    if args.cache and key is not None:
        from .autotuner import store_cached_sizes
        store_cached_sizes(args.cache, key, tuned.sizes())
    if args.format == "csv":
        print("round,candidate,cost,best,best_cost")
        for r in state.log:
            cost = "" if r.cost is None else f"{r.cost:.6g}"
            print(f"{r.round},{'x'.join(map(str, r.candidate))},{cost},"
                  f"{'x'.join(map(str, r.best))},{r.best_cost:.6g}")
    else:
        print(format_log(state))
        print(f"chosen sizes: { {s.id: s.size for s in tuned.slots} }")
    return EXIT_OK


def cmd_cachesim(args):
    program = _load_program(args)
    inputs = _load_inputs(args)
    if not inputs:
        raise UsageError("cachesim needs --input or --gen")
    hw = _hardware()
    model = CacheModel(args.capacity or hw.l1_bytes, args.line or hw.line_bytes,
                       args.assoc)
    tiled, spec = _prepare_tiled(program, inputs, args.tiling, hw)
    sizes = {}
    if spec is not None:
        overrides = _parse_sizes(args.tile_sizes, spec)
        sizes = spec.sizes(overrides=overrides or _default_sizes(tiled, spec, hw))
    from .cachesim import Simulator
    sim = Simulator(model)
    stats, value = simulate_program(tiled, inputs, model, tile_sizes=sizes,
                                    simulator=sim)
    if args.format == "csv":
        print("phase,accesses,hits,misses,evictions,miss_ratio")
        for label, ph in sim.phase_stats:
            print(f"\"{label}\",{ph.accesses},{ph.hits},{ph.misses},{ph.evictions},"
                  f"{ph.miss_ratio:.6f}")
        print(f"total,{stats.accesses},{stats.hits},{stats.misses},{stats.evictions},"
              f"{stats.miss_ratio:.6f}")
    else:
        print(f"model: capacity={model.capacity} line={model.line_size} "
              f"ways={model.associativity} sets={model.num_sets}")
        print(f"accesses:  {stats.accesses}")
        print(f"hits:      {stats.hits}")
        print(f"misses:    {stats.misses}")
        print(f"evictions: {stats.evictions}")
        print(f"miss rate: {stats.miss_ratio:.4f}")
        print(f"result:    {checksum(value)}")
    return EXIT_OK


def cmd_bench(args):
    hw = _hardware()
    if args.name == "matmul":
        results = bench_matmul(hw, n=args.size, seed=args.seed, misses=args.misses)
    elif args.name == "sum_rows":
        results = bench_sum_rows(hw, rows=args.rows or args.size,
                                 cols=args.cols or args.size,
                                 layout=args.layout, seed=args.seed,
                                 misses=args.misses)
    else:
        results = bench_kmeans(hw, points=args.points, features=args.features,
                               k=args.k, iters=args.iters, seed=args.seed)
    if args.format == "csv":
        print("benchmark,variant,wall_seconds,misses,checksum")
        for r in results:
            misses = "" if r.misses is None else str(r.misses)
            print(f"{r.name},{r.variant},{r.wall_time:.6f},{misses},{r.checksum}")
    else:
        print(f"{'variant':<18} {'wall':>10} {'misses':>10}  checksum")
        for r in results:
            misses = "-" if r.misses is None else str(r.misses)
            print(f"{r.variant:<18} {r.wall_time:>9.4f}s {misses:>10}  {r.checksum}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
