"""Online tile-size search: Gaussian sampling around the best-known point.

The search space is seeded by a pessimistic/optimistic pair of analytic
bounds per slot (conservative stand-ins for published cache-model
estimators, pluggable via `estimate_bounds`'s `estimator` hook). The
starting point is the midpoint of the bounds; each round draws a batch of
candidates, one Gaussian sample per slot with standard deviation half the
bound gap, clamped into bounds. Any candidate beating the best point
becomes the new best. The search stops when the evaluation budget is
spent or the best point survives a configured number of rounds.
"""

from __future__ import annotations

import math
import random
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

from . import ir
from .tiling import TileSpec

ELEM_BYTES = 8


class AutotuneError(Exception):
    pass


@dataclass
class SearchSpace:
    slot_ids: tuple[int, ...]
    bounds: tuple[tuple[int, int], ...]  # per slot: (lo, hi), 1 <= lo <= hi

    def __post_init__(self):
        for lo, hi in self.bounds:
            if not 1 <= lo <= hi:
                raise AutotuneError(f"invalid bounds ({lo}, {hi})")

    def midpoint(self):
        return tuple((lo + hi) // 2 for lo, hi in self.bounds)

    def sigmas(self):
        return tuple(max((hi - lo) / 2.0, 0.0) for lo, hi in self.bounds)

    def clamp(self, sizes):
        return tuple(min(max(s, lo), hi)
                     for s, (lo, hi) in zip(sizes, self.bounds))


@dataclass
class LogRecord:
    round: int
    candidate: tuple[int, ...]
    cost: float | None  # None: probe failed / over time cap
    best: tuple[int, ...]
    best_cost: float

    def line(self):
        cost = "failed" if self.cost is None else f"{self.cost:.6g}"
        sizes = "x".join(str(s) for s in self.candidate)
        best = "x".join(str(s) for s in self.best)
        return f"round={self.round} candidate={sizes} cost={cost} best={best} best_cost={self.best_cost:.6g}"


@dataclass
class SearchState:
    space: SearchSpace
    best: tuple[int, ...]
    best_cost: float
    sigmas: tuple[float, ...]
    evaluations: int = 0
    rounds: int = 0
    no_improve_rounds: int = 0
    terminated: bool = False
    log: list = field(default_factory=list)


@dataclass
class CostProbe:
    """Evaluates one tile-size vector to a cost (seconds or misses).

    A candidate whose evaluation raises, or whose wall time exceeds
    `time_cap` seconds, is discarded (logged with no cost).
    """

    fn: object
    time_cap: float | None = None

    def evaluate(self, sizes):
        start = time.perf_counter()
        cost = self.fn(sizes)
        if self.time_cap is not None and time.perf_counter() - start > self.time_cap:
            return None
        return cost


@dataclass
class SearchConfig:
    batch_size: int = 4
    max_evaluations: int = 40
    no_improve_limit: int = 3
    seed: int = 0
    parallelism: int = 1


# ---------------------------------------------------------------------------
# Analytic bounds
# ---------------------------------------------------------------------------

def default_estimator(n_slots, n_arrays, l1_bytes):
    """Pessimistic/optimistic square tile sizes for one operator nest.

    Optimistic: the nest's working set exactly fills L1. Pessimistic: every
    distinct array is assumed to conflict with every other, so the usable
    capacity is a quarter of L1 divided again by the array count.
    """
    hi = max(1, int((l1_bytes / (ELEM_BYTES * n_arrays)) ** (1.0 / n_slots)))
    lo = max(1, int((l1_bytes / 4 / (ELEM_BYTES * n_arrays * n_arrays)) ** (1.0 / n_slots)))
    return min(lo, hi), hi


def estimate_bounds(program, spec, hw, extents=None, estimator=default_estimator):
    """Per-slot [lo, hi] tile-size bounds for the runtime-tunable slots.

    Slots of one operator nest (one entry-level tiled operator tree) share
    square-shaped bounds; `extents` optionally caps each slot at the
    extent it slices.
    """
    slots = spec.runtime_slots()
    if not slots:
        raise AutotuneError("no runtime-tunable slots to search")
    groups = {}
    for slot in slots:
        groups.setdefault(_nest_key(slot.path), []).append(slot)
    arrays_by_nest = _count_nest_arrays(program, spec)
    bounds = {}
    l1 = getattr(hw, "l1_bytes", None) or 32 * 1024
    for nest, group in groups.items():
        n_arrays = max(arrays_by_nest.get(nest, 1) + 1, 2)  # inputs + output
        lo, hi = estimator(len(group), n_arrays, l1)
        for slot in group:
            s_lo, s_hi = lo, hi
            if extents and slot.id in extents:
                s_hi = min(s_hi, max(1, extents[slot.id]))
                s_lo = min(s_lo, s_hi)
            bounds[slot.id] = (max(1, s_lo), max(1, s_hi))
    ordered = tuple(sorted(bounds))
    return SearchSpace(ordered, tuple(bounds[i] for i in ordered))


def _nest_key(path):
    """Slots of one entry-level operator tree share the first two path
    segments (entry name / outermost tiled operator)."""
    parts = path.split("/") + [""]
    return parts[0] + "/" + parts[1]


def _count_nest_arrays(program, spec):
    """Distinct array operands appearing in each nest's tiled operators."""
    slot_paths = {s.id: s.path for s in spec.slots}
    names = {}
    for fn in program.functions.values():
        for e in ir.walk_exprs(fn.body):
            if isinstance(e, ir.TILED_OPS):
                bucket = names.setdefault(_nest_key(slot_paths.get(e.slot, "")), set())
                for a in e.args:
                    if isinstance(a, ir.Var):
                        bucket.add(a.name)
    return {nest: len(vs) for nest, vs in names.items()}


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def start_search(space, probe, config):
    """Evaluate the midpoint of the bounds as the initial best point."""
    initial = space.midpoint()
    cost = _evaluate_all(probe, [initial], config)[0]
    state = SearchState(space, initial, cost if cost is not None else math.inf,
                        space.sigmas(), evaluations=1)
    state.log.append(LogRecord(0, initial, cost, state.best, state.best_cost))
    return state


def draw_candidate(state, rng):
    sizes = tuple(int(round(rng.gauss(b, s))) for b, s in zip(state.best, state.sigmas))
    sizes = state.space.clamp(sizes)
    if sizes == state.best:  # redraw once, then accept the duplicate
        sizes = state.space.clamp(tuple(int(round(rng.gauss(b, s)))
                                        for b, s in zip(state.best, state.sigmas)))
    return sizes


def _evaluate_all(probe, candidates, config):
    def one(sizes):
        try:
            return probe.evaluate(sizes)
        except Exception:
            return None

    if config.parallelism > 1 and len(candidates) > 1:
        with ThreadPoolExecutor(max_workers=min(config.parallelism, len(candidates))) as pool:
            return list(pool.map(one, candidates))
    return [one(c) for c in candidates]


def search_step(state, probe, config, rng):
    """One round: draw a batch, evaluate (possibly concurrently), accept
    the best candidate if it improves. The outcome depends only on the
    candidate set and costs, never on evaluation completion order; cost
    ties break toward the lexicographically smallest candidate."""
    if state.terminated:
        raise AutotuneError("search already terminated")
    candidates = [draw_candidate(state, rng) for _ in range(config.batch_size)]
    costs = _evaluate_all(probe, candidates, config)
    state.rounds += 1
    state.evaluations += len(candidates)
    scored = sorted((cost, sizes) for sizes, cost in zip(candidates, costs)
                    if cost is not None)
    improved = False
    if scored and scored[0][0] < state.best_cost:
        state.best_cost, state.best = scored[0]
        improved = True
    for sizes, cost in zip(candidates, costs):
        state.log.append(LogRecord(state.rounds, sizes, cost, state.best, state.best_cost))
    if improved:
        state.no_improve_rounds = 0
    else:
        state.no_improve_rounds += 1
    return state


def should_terminate(state, config):
    return (state.evaluations >= config.max_evaluations
            or state.no_improve_rounds >= config.no_improve_limit)


def run_search(space, probe, config):
    """Drive rounds until the budget or the no-improvement limit is hit."""
    rng = random.Random(config.seed)
    state = start_search(space, probe, config)
    while not should_terminate(state, config):
        search_step(state, probe, config, rng)
    state.terminated = True
    if math.isinf(state.best_cost):
        # No candidate ever produced a cost: fall back to the midpoint.
        state.best = space.midpoint()
    return state


def autotune(program, spec, probe, hw, config=None, extents=None):
    """Full tuning pass: estimate bounds, search, freeze the best sizes.

    Returns (TileSpec with concrete sizes for the searched slots, final
    SearchState whose log holds one record per candidate)."""
    config = config or SearchConfig()
    space = estimate_bounds(program, spec, hw, extents=extents)
    state = run_search(space, probe, config)
    chosen = dict(zip(space.slot_ids, state.best))
    slots = [replace(s, size=chosen[s.id]) if s.id in chosen else s
             for s in spec.slots]
    return TileSpec(slots), state


def format_log(state):
    return "\n".join(r.line() for r in state.log)


# ---------------------------------------------------------------------------
# Best-sizes cache (one JSON file, keyed by program, input shapes, hardware)
# ---------------------------------------------------------------------------

def cache_key(program, input_shapes, hw):
    import hashlib
    from .ir import print_program
    blob = (print_program(program)
            + repr(sorted(tuple(s) for s in input_shapes))
            + f"|{hw.l1_bytes}/{hw.line_bytes}/{hw.cores}/{hw.registers}")
    return hashlib.sha256(blob.encode()).hexdigest()


def load_cached_sizes(path, key):
    import json
    import os
    if not os.path.exists(path):
        return None
    try:
        with open(path) as f:
            table = json.load(f)
    except (OSError, json.JSONDecodeError):
        return None
    entry = table.get(key)
    if not isinstance(entry, dict):
        return None
    return {int(slot): int(size) for slot, size in entry.items()}


def store_cached_sizes(path, key, sizes):
    import json
    import os
    table = {}
    if os.path.exists(path):
        try:
            with open(path) as f:
                table = json.load(f)
        except (OSError, json.JSONDecodeError):
            table = {}
    table[key] = {str(slot): size for slot, size in sizes.items()}
    with open(path, "w") as f:
        json.dump(table, f, indent=2, sort_keys=True)
