"""Trace-driven set-associative LRU cache simulation and hardware probing.

The simulator replays (address, R|W) element traffic produced by the
interpreter's trace sink against a single-level cache model:
write-allocate, write-back, LRU replacement within each set. It exists to
make the locality effect of tiling measurable: the same program traced
untiled and tiled can be compared in misses instead of wall time.
"""

from __future__ import annotations

import json
import os
from collections import OrderedDict
from dataclasses import dataclass

from .semantics import EvalConfig, TraceSink, eval_program

DEFAULT_L1_BYTES = 32 * 1024
DEFAULT_LINE_BYTES = 64
DEFAULT_ASSOCIATIVITY = 8
DEFAULT_CORES = 4
DEFAULT_REGISTERS = 16

SYSFS_CACHE_DIR = "/sys/devices/system/cpu/cpu0/cache"


class CacheConfigError(Exception):
    pass


@dataclass(frozen=True)
class CacheModel:
    capacity: int
    line_size: int = DEFAULT_LINE_BYTES
    associativity: int = DEFAULT_ASSOCIATIVITY
    policy: str = "LRU"

    def __post_init__(self):
        if min(self.capacity, self.line_size, self.associativity) < 1:
            raise CacheConfigError("cache parameters must be >= 1")
        if self.policy != "LRU":
            raise CacheConfigError(f"unsupported replacement policy {self.policy!r}")
        if self.capacity % (self.line_size * self.associativity):
            raise CacheConfigError(
                f"capacity {self.capacity} not divisible by line*ways "
                f"({self.line_size}*{self.associativity})")

    @property
    def num_sets(self):
        return self.capacity // (self.line_size * self.associativity)


@dataclass
class TraceStats:
    accesses: int = 0
    hits: int = 0
    misses: int = 0
    evictions: int = 0

    @property
    def miss_ratio(self):
        return self.misses / self.accesses if self.accesses else 0.0

    def check(self):
        assert self.hits + self.misses == self.accesses
        return self


@dataclass
class HardwareInfo:
    l1_bytes: int = DEFAULT_L1_BYTES
    line_bytes: int = DEFAULT_LINE_BYTES
    cores: int = DEFAULT_CORES
    registers: int = DEFAULT_REGISTERS
    provenance: str = "default"  # probed | configured | default

    def l1_model(self, associativity=DEFAULT_ASSOCIATIVITY):
        return CacheModel(self.l1_bytes, self.line_bytes, associativity)


class Simulator:
    """Incremental simulator; feed accesses, read stats at any point."""

    def __init__(self, model):
        self.model = model
        self.stats = TraceStats()
        self.phase_stats = []  # (label, TraceStats) in first-seen order
        self._phase = None
        self._line_bits = model.line_size.bit_length() - 1
        if model.line_size != 1 << self._line_bits:
            self._line_bits = None  # non-power-of-two line size: use division
        self._num_sets = model.num_sets
        self._ways = model.associativity
        self._sets = [OrderedDict() for _ in range(self._num_sets)]

    def begin_phase(self, label):
        stats = TraceStats()
        self.phase_stats.append((label, stats))
        self._phase = stats

    def access(self, addr, kind="R"):
        if addr < 0:
            raise CacheConfigError(f"negative address {addr}")
        if self._line_bits is not None:
            line = addr >> self._line_bits
        else:
            line = addr // self.model.line_size
        s = self._sets[line % self._num_sets]
        stats = self.stats
        phase = self._phase
        stats.accesses += 1
        if phase is not None:
            phase.accesses += 1
        if line in s:
            stats.hits += 1
            if phase is not None:
                phase.hits += 1
            s.move_to_end(line)
        else:
            stats.misses += 1
            if phase is not None:
                phase.misses += 1
            if len(s) >= self._ways:
                s.popitem(last=False)
                stats.evictions += 1
                if phase is not None:
                    phase.evictions += 1
            s[line] = True

    def feed(self, trace):
        for item in trace:
            if isinstance(item, tuple):
                self.access(item[0], item[1])
            else:
                self.access(item)
        return self.stats


def simulate(trace, model):
    """Replay a trace (addresses or (address, kind) pairs) and return stats."""
    sim = Simulator(model)
    sim.feed(trace)
    return sim.stats.check()


def trace_program(program, inputs, tile_sizes=None):
    """Run the interpreter with a trace sink attached and return the full
    (address, R|W) element-visit stream, stragglers included."""
    sink = TraceSink()
    config = EvalConfig(tile_sizes=dict(tile_sizes or {}), trace=sink)
    eval_program(program, inputs, config)
    return sink.events


def simulate_program(program, inputs, model, tile_sizes=None, simulator=None):
    """Trace and simulate in one pass, streaming accesses into the model
    without materializing the trace. Returns (stats, program result); pass
    a Simulator to keep it (for per-phase miss counts)."""
    sim = simulator or Simulator(model)
    sink = TraceSink(consumer=sim.access, phase_consumer=sim.begin_phase)
    config = EvalConfig(tile_sizes=dict(tile_sizes or {}), trace=sink)
    result = eval_program(program, inputs, config)
    return sim.stats.check(), result


# ---------------------------------------------------------------------------
# Hardware discovery
# ---------------------------------------------------------------------------

def _parse_size(text):
    text = text.strip()
    if text.endswith("K"):
        return int(text[:-1]) * 1024
    if text.endswith("M"):
        return int(text[:-1]) * 1024 * 1024
    return int(text)


def _probe_sysfs():
    """L1 data cache parameters from /sys; None when unavailable."""
    try:
        entries = sorted(os.listdir(SYSFS_CACHE_DIR))
    except OSError:
        return None
    for entry in entries:
        base = os.path.join(SYSFS_CACHE_DIR, entry)
        try:
            with open(os.path.join(base, "level")) as f:
                level = f.read().strip()
            with open(os.path.join(base, "type")) as f:
                ctype = f.read().strip()
            if level != "1" or ctype not in ("Data", "Unified"):
                continue
            with open(os.path.join(base, "size")) as f:
                size = _parse_size(f.read())
            with open(os.path.join(base, "coherency_line_size")) as f:
                line = int(f.read().strip())
            return {"l1_bytes": size, "line_bytes": line}
        except (OSError, ValueError):
            continue
    return None


def _load_config_file(path):
    with open(path) as f:
        data = json.load(f)
    known = {"l1_bytes", "line_bytes", "cores", "registers"}
    return {k: int(v) for k, v in data.items() if k in known}


def probe_hardware(config_path=None, env=None):
    """Discover cache geometry and core count, never failing.

    An explicit configuration (path argument or TILEPAR_HW_CONFIG env var)
    takes precedence over OS discovery; without either, /sys is consulted;
    whatever is missing or invalid falls back per-field to the defaults
    (32KB L1, 64-byte lines, 4 cores, 16 registers). The provenance field
    records which source won.
    """
    env = os.environ if env is None else env
    values = {}
    provenance = "default"
    path = config_path or env.get("TILEPAR_HW_CONFIG")
    if path:
        try:
            values = _load_config_file(path)
            provenance = "configured"
        except (OSError, ValueError, json.JSONDecodeError):
            values = {}
    if not values:
        probed = _probe_sysfs()
        if probed:
            values = dict(probed)
            cores = os.cpu_count()
            if cores:
                values["cores"] = cores
            provenance = "probed"
    info = HardwareInfo(provenance=provenance)
    for field_name, default in (("l1_bytes", DEFAULT_L1_BYTES),
                                ("line_bytes", DEFAULT_LINE_BYTES),
                                ("cores", DEFAULT_CORES),
                                ("registers", DEFAULT_REGISTERS)):
        v = values.get(field_name, default)
        if not isinstance(v, int) or v < 1:
            v = default
        setattr(info, field_name, v)
    return info
