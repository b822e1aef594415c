import math
import random

import pytest

from tilepar.autotuner import (
    AutotuneError, CostProbe, SearchConfig, SearchSpace, autotune,
    default_estimator, estimate_bounds, format_log, run_search,
    search_step, should_terminate, start_search,
)
from tilepar.cachesim import CacheModel, HardwareInfo, simulate_program
from tilepar.ir import parse_program
from tilepar.ndarray import NdArray
from tilepar.tiling import tile_program

import programs

BOWL_OPT = (64, 64)


def bowl(sizes):
    x, y = sizes
    return 1.0 + ((x - BOWL_OPT[0]) ** 2 + (y - BOWL_OPT[1]) ** 2) / 32768.0


def bowl_space():
    return SearchSpace((0, 1), ((8, 256), (8, 256)))


# -- bounds ---------------------------------------------------------------------


def test_estimator_monotone_and_bounded():
    lo, hi = default_estimator(2, 3, 32 * 1024)
    assert 1 <= lo <= hi
    assert 3 * (hi ** 2) * 8 <= 32 * 1024 * 3  # square tiles fill at most L1 per array
    lo2, hi2 = default_estimator(2, 3, 64 * 1024)
    assert hi2 >= hi


def test_estimate_bounds_row_sum():
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    space = estimate_bounds(res.program, res.spec, HardwareInfo())
    assert space.slot_ids == (0, 1)
    for lo, hi in space.bounds:
        assert 1 <= lo <= hi


def test_estimate_bounds_clamps_to_extent():
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    space = estimate_bounds(res.program, res.spec, HardwareInfo(),
                            extents={0: 5, 1: 5})
    for lo, hi in space.bounds:
        assert hi <= 5
        assert lo >= 1


def test_estimate_bounds_tiny_cache_floors_at_one():
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    space = estimate_bounds(res.program, res.spec, HardwareInfo(l1_bytes=16))
    for lo, hi in space.bounds:
        assert lo == 1


def test_matmul_bounds_working_set():
    from tilepar.ir import desugar_allpairs
    p = desugar_allpairs(parse_program(programs.MATMUL))
    res = tile_program(p, arg_ranks=[2, 2])
    space = estimate_bounds(res.program, res.spec, HardwareInfo())
    assert len(space.slot_ids) == 3
    for lo, hi in space.bounds:
        assert lo <= hi
        # Optimistic square tiles keep the estimated working set within L1.
        assert 3 * (hi ** 3) * 8 <= 32 * 1024 * (hi ** 2) * 3


# -- search mechanics --------------------------------------------------------------


def test_best_cost_non_increasing():
    cfg = SearchConfig(batch_size=4, max_evaluations=40, no_improve_limit=100, seed=7)
    state = run_search(bowl_space(), CostProbe(bowl), cfg)
    costs = [r.best_cost for r in state.log]
    assert all(a >= b for a, b in zip(costs, costs[1:]))


def test_candidates_stay_in_bounds():
    cfg = SearchConfig(batch_size=8, max_evaluations=60, no_improve_limit=100, seed=5)
    state = run_search(bowl_space(), CostProbe(bowl), cfg)
    for rec in state.log:
        for s, (lo, hi) in zip(rec.candidate, state.space.bounds):
            assert lo <= s <= hi


def test_budget_safety():
    cfg = SearchConfig(batch_size=4, max_evaluations=10, no_improve_limit=1000, seed=1)
    state = run_search(bowl_space(), CostProbe(bowl), cfg)
    assert state.evaluations <= cfg.max_evaluations + cfg.batch_size


def test_zero_sigma_terminates_by_no_improvement():
    space = SearchSpace((0,), ((16, 16),))
    cfg = SearchConfig(batch_size=2, max_evaluations=100, no_improve_limit=3, seed=0)
    state = run_search(space, CostProbe(lambda s: float(s[0])), cfg)
    assert state.best == (16,)
    assert state.no_improve_rounds >= 3
    assert state.evaluations < 100


def test_should_terminate_conditions():
    cfg = SearchConfig(batch_size=2, max_evaluations=10, no_improve_limit=3)
    state = start_search(bowl_space(), CostProbe(bowl), cfg)
    assert not should_terminate(state, cfg)
    state.no_improve_rounds = 3
    assert should_terminate(state, cfg)
    state.no_improve_rounds = 0
    state.evaluations = 11
    assert should_terminate(state, cfg)


def test_probe_failures_discarded():
    calls = []

    def flaky(sizes):
        calls.append(sizes)
        if sizes[0] % 2:
            raise RuntimeError("boom")
        return float(sizes[0])

    space = SearchSpace((0,), ((8, 64),))
    cfg = SearchConfig(batch_size=4, max_evaluations=20, no_improve_limit=50, seed=3)
    state = run_search(space, CostProbe(flaky), cfg)
    failed = [r for r in state.log if r.cost is None]
    assert failed, "expected some candidates to fail"
    assert not math.isinf(state.best_cost)
    assert state.best[0] % 2 == 0


def test_all_probes_failing_falls_back_to_midpoint():
    space = SearchSpace((0, 1), ((8, 16), (8, 16)))

    def dead(sizes):
        raise RuntimeError("nope")

    cfg = SearchConfig(batch_size=2, max_evaluations=6, no_improve_limit=2, seed=0)
    state = run_search(space, CostProbe(dead), cfg)
    assert state.best == space.midpoint()


def test_time_cap_marks_candidate_failed():
    import time

    def slow(sizes):
        time.sleep(0.05)
        return 1.0

    probe = CostProbe(slow, time_cap=0.001)
    assert probe.evaluate((1,)) is None


def test_parallel_evaluation_matches_sequential():
    cfg_seq = SearchConfig(batch_size=4, max_evaluations=24, no_improve_limit=50,
                           seed=11, parallelism=1)
    cfg_par = SearchConfig(batch_size=4, max_evaluations=24, no_improve_limit=50,
                           seed=11, parallelism=4)
    a = run_search(bowl_space(), CostProbe(bowl), cfg_seq)
    b = run_search(bowl_space(), CostProbe(bowl), cfg_par)
    assert a.best == b.best
    assert [(r.candidate, r.cost) for r in a.log] == [(r.candidate, r.cost) for r in b.log]


def test_deterministic_logs_for_fixed_seed():
    cfg = SearchConfig(batch_size=4, max_evaluations=20, no_improve_limit=3, seed=42)
    a = run_search(bowl_space(), CostProbe(bowl), cfg)
    b = run_search(bowl_space(), CostProbe(bowl), cfg)
    assert format_log(a) == format_log(b)


def test_bowl_convergence_seed42():
    cfg = SearchConfig(batch_size=4, max_evaluations=20, no_improve_limit=10, seed=42)
    state = run_search(bowl_space(), CostProbe(bowl), cfg)
    best_within_20 = min(r.cost for r in state.log[:20] if r.cost is not None)
    assert best_within_20 <= 1.1  # within 10% of the bowl optimum (1.0)


def test_search_step_requires_live_state():
    cfg = SearchConfig()
    state = run_search(bowl_space(), CostProbe(bowl), cfg)
    with pytest.raises(AutotuneError):
        search_step(state, CostProbe(bowl), cfg, random.Random(0))


# -- end-to-end autotune -------------------------------------------------------------


def test_autotune_row_sum_beats_midpoint_misses():
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    n = 64
    rng = random.Random(0)
    m = NdArray((n, n), "f64", "col", [float(rng.randrange(100)) for _ in range(n * n)])
    model = CacheModel(2048, 64, 8)
    hw = HardwareInfo(l1_bytes=2048)
    space = estimate_bounds(res.program, res.spec, hw, extents={0: n, 1: n})

    def probe_fn(sizes):
        ts = dict(zip(space.slot_ids, sizes))
        stats, _ = simulate_program(res.program, [m], model, tile_sizes=ts)
        return float(stats.misses)

    midpoint_cost = probe_fn(space.midpoint())
    tuned, state = autotune(res.program, res.spec, CostProbe(probe_fn), hw,
                            SearchConfig(batch_size=4, max_evaluations=12, seed=0),
                            extents={0: n, 1: n})
    assert state.best_cost <= midpoint_cost
    assert all(s.size is not None for s in tuned.slots)


def test_autotune_matmul_misses_beat_initial_point():
    # Matmul's materialized temporaries put a miss floor under every tiled
    # variant, so the meaningful guarantee is the search one: tuned sizes
    # never cost more than the analytic starting point.
    from tilepar.ir import desugar_allpairs
    hw = HardwareInfo(l1_bytes=2048)
    n = 24
    a = NdArray((n, n), "f64", "row", [float((i * 7) % 19) for i in range(n * n)])
    b = NdArray((n, n), "f64", "row", [float((i * 5) % 23) for i in range(n * n)])
    p = desugar_allpairs(parse_program(programs.MATMUL))
    res = tile_program(p, arg_ranks=[2, 2])
    model = CacheModel(2048, 64, 8)
    space = estimate_bounds(res.program, res.spec, hw, extents={0: n, 1: n, 2: n})

    def probe_fn(sizes):
        ts = dict(zip(space.slot_ids, sizes))
        stats, _ = simulate_program(res.program, [a, b], model, tile_sizes=ts)
        return float(stats.misses)

    initial_cost = probe_fn(space.midpoint())
    _, state = autotune(res.program, res.spec, CostProbe(probe_fn), hw,
                        SearchConfig(batch_size=3, max_evaluations=7, seed=1),
                        extents={0: n, 1: n, 2: n})
    assert state.best_cost <= initial_cost


def test_cached_sizes_round_trip(tmp_path):
    from tilepar.autotuner import cache_key, load_cached_sizes, store_cached_sizes
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    key = cache_key(res.program, [(32, 32)], HardwareInfo())
    path = str(tmp_path / "tiles.json")
    assert load_cached_sizes(path, key) is None
    store_cached_sizes(path, key, {0: 8, 1: 16})
    assert load_cached_sizes(path, key) == {0: 8, 1: 16}
    # Different hardware or shapes change the key.
    other = cache_key(res.program, [(32, 32)], HardwareInfo(l1_bytes=1024))
    assert other != key
    assert load_cached_sizes(path, other) is None


def test_cli_autotune_cache_hit(tmp_path, capsys):
    from tilepar.cli import main
    prog = tmp_path / "p.ir"
    prog.write_text(programs.SUM_ROWS)
    cache = str(tmp_path / "cache.json")
    argv = ["autotune", "--program", str(prog), "--gen", "shape=16x16,dtype=f64,layout=col",
            "--budget", "4", "--batch", "2", "--cache", cache]
    assert main(argv) == 0
    capsys.readouterr()
    assert main(argv) == 0
    out = capsys.readouterr().out
    assert out.startswith("cached sizes:")


def test_autotune_identical_logs_same_seed():
    p = parse_program(programs.SUM_ROWS)
    res = tile_program(p)
    n = 32
    m = NdArray((n, n), "f64", "col", [float(i % 7) for i in range(n * n)])
    model = CacheModel(1024, 64, 4)
    hw = HardwareInfo(l1_bytes=1024)

    def probe_fn(sizes):
        stats, _ = simulate_program(res.program, [m], model,
                                    tile_sizes=dict(zip((0, 1), sizes)))
        return float(stats.misses)

    cfg = SearchConfig(batch_size=3, max_evaluations=10, seed=9)
    _, s1 = autotune(res.program, res.spec, CostProbe(probe_fn), hw, cfg,
                     extents={0: n, 1: n})
    _, s2 = autotune(res.program, res.spec, CostProbe(probe_fn), hw, cfg,
                     extents={0: n, 1: n})
    assert format_log(s1) == format_log(s2)
