"""Automatic tiling: rewrites Map/Reduce/Scan nests into tiled-operator nests.

The transformation walks the entry function keeping three pieces of state:

  * ``visited``  -- the ordered sequence of operators seen on the way down,
    each recorded with its original (local) axes and reduce/scan payload;
  * ``remaining``-- per variable, the original axes not yet sliced away,
    used to remap each operator's local axis to the global axis of the
    full-rank value the tiled operator will actually receive;
  * ``depths``   -- per variable, the nesting depths (with local axes) at
    which its lineage was an operator argument; this drives both nest
    reconstruction and the Map-wrapping of scalar statements.

Every operator becomes its tiled counterpart. A Map whose nested function
contains further operators recurses; otherwise (and always for Reduce and
Scan, which terminate the walk) the nested function's body is rebuilt as
the original operator nest, stripped of non-operator statements, via
``build_operator_nest``. Combine functions are lifted by wrapping them in
one Map per rank added by enclosing tiling. Scalar statements inside
functions being tiled are wrapped in one Map per recorded depth so that
the extra tile ranks are peeled off before the original expression runs.

Control flow anywhere in the entry or in an operator-reachable function
aborts the whole transformation and returns the input unchanged.

Running the transformation once produces cache tiles (sizes chosen at run
time); running it again over the reconstructed nests produces register
tiles with small fixed sizes and fixed-extent function specializations.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import ir
from .ir import (
    Assign, BinOp, Const, Function, Map, Program, Reduce, Return, Scan,
    TiledMap, TiledReduce, TiledScan, Var, contains_control_flow,
    contains_parallel_op, free_vars, validate_program,
)

UNTILED_OPS = (Map, Reduce, Scan)


class TilingError(Exception):
    pass


class UnsupportedNesting(TilingError):
    """The operator nest cannot be reconstructed faithfully (for example a
    nesting level at which no variable was sliced); the program is left
    untiled rather than transformed incorrectly."""


@dataclass(frozen=True)
class OpLevel:
    """One visited operator: kind plus its original payload."""

    kind: str  # 'map' | 'reduce' | 'scan'
    axes: tuple[int, ...]  # local axes, by argument position
    combine: str | None = None
    emit: str | None = None
    init: object | None = None


@dataclass
class TilingState:
    """Transformation bookkeeping (see module docstring)."""

    visited: tuple[OpLevel, ...] = ()
    remaining: dict = field(default_factory=dict)  # name -> tuple of original axes
    depths: dict = field(default_factory=dict)     # name -> tuple of (depth, local axis)
    ranks: dict = field(default_factory=dict)      # name -> untiled rank

    def clone(self):
        return TilingState(self.visited, dict(self.remaining), dict(self.depths), dict(self.ranks))


@dataclass
class TileSlot:
    id: int
    kind: str  # 'cache' | 'register'
    size: int | None  # None while runtime-tunable
    path: str


@dataclass
class TileSpec:
    slots: list = field(default_factory=list)

    def new_slot(self, kind, path, size=None):
        slot = TileSlot(len(self.slots), kind, size, path)
        self.slots.append(slot)
        return slot

    def sizes(self, overrides=None):
        """Concrete slot->size mapping; runtime slots take `overrides`."""
        sizes = {}
        for slot in self.slots:
            if slot.size is not None:
                sizes[slot.id] = slot.size
            elif overrides and slot.id in overrides:
                sizes[slot.id] = overrides[slot.id]
        return sizes

    def runtime_slots(self):
        return [s for s in self.slots if s.size is None]

    def table(self):
        lines = ["slot  kind      size     operator"]
        for s in self.slots:
            size = "tunable" if s.size is None else str(s.size)
            lines.append(f"{s.id:<5} {s.kind:<9} {size:<8} {s.path}")
        return "\n".join(lines)


@dataclass
class TilingResult:
    changed: bool
    program: Program
    spec: TileSpec | None = None
    reason: str | None = None


@dataclass
class RegisterHeuristic:
    """Fixed register-tile sizing: the largest power of two k with
    (operand count) * k <= budget_fraction * registers, clamped to
    [min_size, max_size]."""

    budget_fraction: float = 0.75
    min_size: int = 1
    max_size: int = 8

    def size_for(self, n_operands, registers):
        budget = self.budget_fraction * registers
        k = self.min_size
        candidate = 1
        while candidate * 2 <= self.max_size and n_operands * candidate * 2 <= budget:
            candidate *= 2
        if n_operands * candidate <= budget:
            k = max(self.min_size, candidate)
        return max(self.min_size, min(self.max_size, k))


# ---------------------------------------------------------------------------
# Rank bookkeeping
# ---------------------------------------------------------------------------

def required_ranks(program, entry="main"):
    """Minimal ranks of the entry parameters, inferred from slicing usage.

    A parameter sliced along axis a needs rank >= a+1, plus one more rank
    for every requirement its slice inherits in the nested function. The
    tiled program's axis bookkeeping only consults the axes a variable
    actually gets sliced along, so minimal ranks are sufficient.
    """
    req = {}  # (fname, varname) -> rank

    def get(fname, var):
        return req.get((fname, var), 0)

    changed = True
    passes = 0
    while changed:
        changed = False
        passes += 1
        if passes > 100:
            raise TilingError("rank inference failed to converge")
        for fname, fn in program.functions.items():
            for e in ir.walk_exprs(fn.body):
                if not isinstance(e, UNTILED_OPS):
                    continue
                nested = program.functions.get(e.fn)
                for pos, (arg, axis) in enumerate(zip(e.args, e.axes)):
                    if not isinstance(arg, Var):
                        continue
                    need = axis + 1
                    if nested is not None and pos < len(nested.params):
                        need = max(need, get(e.fn, nested.params[pos]) + 1)
                    if need > get(fname, arg.name):
                        req[(fname, arg.name)] = need
                        changed = True
                if nested is not None:
                    for c in nested.closure_params:
                        if get(e.fn, c) > get(fname, c):
                            req[(fname, c)] = get(e.fn, c)
                            changed = True
    main = program.fn(entry)
    return {p: get(entry, p) for p in main.params + main.closure_params}


class _RankOracle:
    """Untiled result ranks of expressions, via function summaries."""

    def __init__(self, program):
        self.program = program
        self.memo = {}

    def expr_rank(self, e, env):
        if isinstance(e, Const):
            return 0
        if isinstance(e, Var):
            return env.get(e.name, 0)
        if isinstance(e, BinOp):
            return max(self.expr_rank(e.left, env), self.expr_rank(e.right, env))
        if isinstance(e, ir.ArrayLit):
            return 1 + (self.expr_rank(e.items[0], env) if e.items else 0)
        if isinstance(e, ir.Index):
            return max(self.expr_rank(e.array, env) - 1, 0)
        if isinstance(e, (Map, Scan)):
            return 1 + self._nested_rank(e, env)
        if isinstance(e, Reduce):
            return self._nested_rank(e, env)
        raise TilingError(f"cannot infer rank of {type(e).__name__}")

    def _nested_rank(self, e, env):
        fn = self.program.fn(e.fn)
        arg_ranks = tuple(max(self.expr_rank(a, env) - 1, 0) for a in e.args)
        closure_ranks = tuple(sorted((c, env.get(c, 0)) for c in fn.closure_params))
        key = (e.fn, arg_ranks, closure_ranks)
        if key in self.memo:
            return self.memo[key]
        self.memo[key] = 0  # cycle guard
        inner = dict(zip(fn.params, arg_ranks))
        inner.update(dict(closure_ranks))
        result = self.return_rank(fn, inner)
        self.memo[key] = result
        return result

    def return_rank(self, fn, env):
        env = dict(env)
        for s in fn.body:
            if isinstance(s, Assign):
                env[s.target] = self.expr_rank(s.value, env)
            elif isinstance(s, Return):
                return self.expr_rank(s.value, env)
        raise TilingError(f"{fn.name} has no unconditional return")


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

def normalize_for_tiling(program):
    """A-normalize operators: every operator is the entire right-hand side
    of an assignment or return, and operator arguments are variables or
    constants. Compound non-operator return expressions are bound to a
    temporary first so the statement rules cover them.

    Only functions that contain operators are touched; operator-free
    functions are innermost computations the transformation never splits.
    """
    out = Program(dict(program.functions))
    counter = [0]
    for name, fn in list(out.functions.items()):
        if not any(isinstance(e, UNTILED_OPS) for e in ir.walk_exprs(fn.body)):
            continue
        if any(isinstance(e, ir.TILED_OPS) for e in ir.walk_exprs(fn.body)):
            continue  # already tiled and normalized by the first pass
        body = _norm_block(out, fn.body, counter)
        if body != fn.body:
            out.functions[name] = replace(fn, body=body)
    return out


def _norm_block(program, block, counter):
    stmts = []
    for s in block:
        prelude = []
        if isinstance(s, Assign):
            value = _norm_expr(program, s.value, prelude, counter, top=True)
            stmts.extend(prelude)
            stmts.append(Assign(s.target, value))
        elif isinstance(s, Return):
            value = _norm_expr(program, s.value, prelude, counter, top=True)
            if not isinstance(value, (Var, Const) + ir.PARALLEL_OPS):
                tmp = _fresh_tmp(counter)
                prelude.append(Assign(tmp, value))
                value = Var(tmp)
            stmts.extend(prelude)
            stmts.append(Return(value))
        elif isinstance(s, ir.If):
            cond = _norm_expr(program, s.cond, prelude, counter, top=False)
            stmts.extend(prelude)
            stmts.append(ir.If(cond, _norm_block(program, s.then, counter),
                               _norm_block(program, s.orelse, counter)))
        elif isinstance(s, ir.For):
            seq = _norm_expr(program, s.seq, prelude, counter, top=False)
            stmts.extend(prelude)
            stmts.append(ir.For(s.var, seq, _norm_block(program, s.body, counter)))
        else:
            raise TilingError(f"unknown statement {type(s).__name__}")
    return tuple(stmts)


def _fresh_tmp(counter):
    counter[0] += 1
    return f"t$n{counter[0]}"


def _norm_expr(program, e, prelude, counter, top):
    if isinstance(e, (Var, Const)):
        return e
    if isinstance(e, BinOp):
        return BinOp(e.op,
                     _norm_expr(program, e.left, prelude, counter, top=False),
                     _norm_expr(program, e.right, prelude, counter, top=False))
    if isinstance(e, ir.ArrayLit):
        return ir.ArrayLit(tuple(_norm_expr(program, x, prelude, counter, top=False)
                                 for x in e.items))
    if isinstance(e, ir.Index):
        return ir.Index(_norm_expr(program, e.array, prelude, counter, top=False),
                        _norm_expr(program, e.index, prelude, counter, top=False))
    if isinstance(e, UNTILED_OPS):
        args = []
        for a in e.args:
            a = _norm_expr(program, a, prelude, counter, top=False)
            if not isinstance(a, (Var, Const)):
                tmp = _fresh_tmp(counter)
                prelude.append(Assign(tmp, a))
                a = Var(tmp)
            args.append(a)
        if isinstance(e, Map):
            e = Map(e.fn, tuple(args), e.axes)
        elif isinstance(e, Reduce):
            init = _norm_expr(program, e.init, prelude, counter, top=False)
            e = Reduce(e.fn, e.combine, init, tuple(args), e.axes)
        else:
            init = _norm_expr(program, e.init, prelude, counter, top=False)
            e = Scan(e.fn, e.combine, e.emit, init, tuple(args), e.axes)
        if not top:
            tmp = _fresh_tmp(counter)
            prelude.append(Assign(tmp, e))
            return Var(tmp)
        return e
    if isinstance(e, ir.AllPairs):
        raise TilingError("AllPairs must be desugared before tiling")
    raise TilingError(f"cannot normalize {type(e).__name__}")


# ---------------------------------------------------------------------------
# The transformation
# ---------------------------------------------------------------------------

class _Tiler:
    def __init__(self, program, spec, slot_kind, slot_size_fn=None):
        self.source = program
        self.out = dict(program.functions)
        self.spec = spec
        self.slot_kind = slot_kind
        # slot_size_fn(n_operands) -> fixed size, or None for runtime slots
        self.slot_size_fn = slot_size_fn
        self.ranks = _RankOracle(program)
        self._combine_cache = {}

    # -- infrastructure ------------------------------------------------------

    def fresh(self, base):
        if base not in self.out:
            return base
        i = 2
        while f"{base}_{i}" in self.out:
            i += 1
        return f"{base}_{i}"

    def define(self, name, params, body):
        """Create a function, deriving closure parameters from free names."""
        probe = Program(self.out)
        fv = free_vars(body, probe)
        closures = tuple(sorted(fv - set(params)))
        fn = Function(name, tuple(params), closures, tuple(body))
        self.out[name] = fn
        return fn

    def new_slot(self, path, nargs):
        size = self.slot_size_fn(nargs + 1) if self.slot_size_fn else None
        return self.spec.new_slot(self.slot_kind, path, size)

    # -- blocks and statements -------------------------------------------------

    def tile_function_body(self, fn, arg_ranks, path, closure_ranks=None):
        state = TilingState()
        for p, r in zip(fn.params, arg_ranks):
            state.remaining[p] = tuple(range(r))
            state.ranks[p] = r
        for c in fn.closure_params:
            r = (closure_ranks or {}).get(c, 0)
            state.remaining[c] = tuple(range(r))
            state.ranks[c] = r
        return self.tile_block(fn.body, state, path)

    def tile_block(self, block, state, path):
        stmts = []
        for s in block:
            s2 = self.tile_statement(s, state, path)
            stmts.append(s2)
        return tuple(stmts)

    def tile_statement(self, s, state, path):
        if isinstance(s, Return):
            return Return(self.tile_expr(s.value, state, path))
        if isinstance(s, Assign):
            return self.tile_assign(s, state, path)
        raise TilingError(f"control flow reached the transformer: {type(s).__name__}")

    def tile_assign(self, s, state, path):
        e = s.value
        merged = {}
        for y in sorted(free_vars(e, Program(self.out))):
            for d, axis in state.depths.get(y, ()):
                merged.setdefault(d, axis)
        new_depths = tuple(sorted(merged.items()))
        rank = self.ranks.expr_rank(e, state.ranks)
        if contains_parallel_op(e):
            value = self.tile_expr(e, state, path)
        elif new_depths:
            # Wrap the scalar statement in one Map per recorded depth to
            # peel the tile ranks added by enclosing operators (axis 0 at
            # every level, matching slicing at the leading remaining axis).
            levels = [(d, OpLevel("map", axes=(0,))) for d, _ in new_depths]
            fv_order = tuple(sorted(free_vars(e)))
            wrap_eps = {v: state.depths.get(v, ()) for v in fv_order}
            value = self.build_operator_nest(levels, wrap_eps, fv_order,
                                             (Return(e),), f"{path}.{s.target}",
                                             force_axis0=True)
        else:
            value = e
        state.depths[s.target] = tuple((d, 0) for d, _ in new_depths)
        state.ranks[s.target] = rank
        offset = len(new_depths)
        state.remaining[s.target] = tuple(range(offset, offset + rank))
        return Assign(s.target, value)

    # -- operator expressions ------------------------------------------------------

    def tile_expr(self, e, state, path):
        if isinstance(e, Map):
            return self.tile_map(e, state, path)
        if isinstance(e, (Reduce, Scan)):
            return self.tile_reduce_scan(e, state, path)
        if isinstance(e, ir.TILED_OPS):
            raise TilingError("input already contains tiled operators")
        if isinstance(e, ir.AllPairs):
            raise TilingError("AllPairs must be desugared before tiling")
        return e

    def _operand_info(self, e, state, what):
        """Global axes and per-arg state for an operator's Var arguments."""
        names = []
        for a in e.args:
            if not isinstance(a, Var):
                raise TilingError(f"{what} arguments must be variables after normalization")
            names.append(a.name)
        global_axes = []
        for name, axis in zip(names, e.axes):
            remaining = state.remaining.get(name)
            if remaining is None:
                raise TilingError(f"no axis record for {name!r}")
            if axis >= len(remaining):
                raise TilingError(
                    f"{what} slices axis {axis} of {name!r} but only {len(remaining)} remain")
            global_axes.append(remaining[axis])
        return names, tuple(global_axes)

    def tile_map(self, e, state, path):
        names, global_axes = self._operand_info(e, state, "Map")
        fn = self.out[e.fn]
        depth = len(state.visited)
        inner = state.clone()
        inner.visited = state.visited + (OpLevel("map", e.axes),)
        for pos, (name, param) in enumerate(zip(names, fn.params)):
            inner.depths[param] = state.depths.get(name, ()) + ((depth, e.axes[pos]),)
            rem = list(state.remaining[name])
            rem.pop(e.axes[pos])
            inner.remaining[param] = tuple(rem)
            inner.ranks[param] = len(rem)
        node_path = f"{path}/{e.fn}@d{depth}"
        slot = self.new_slot(node_path, len(names))
        if contains_parallel_op(fn.body):
            body = self.tile_block(fn.body, inner, node_path)
        else:
            nest = self.build_operator_nest(
                list(enumerate(inner.visited)), inner.depths,
                self._nest_universe(fn, inner), fn.body, node_path)
            body = (Return(nest),)
        clone = self.define(self.fresh(f"{fn.name}$t{depth}"), fn.params, body)
        return TiledMap(clone.name, None, slot.id, depth, e.args, global_axes)

    def _nest_universe(self, fn, state):
        """Variables the rebuilt nest may slice: the nested function's own
        parameters plus any free variable of its body whose lineage was
        sliced by an enclosing operator (tiles arriving through closures)."""
        universe = list(fn.params)
        for v in sorted(free_vars(fn.body, Program(self.out))):
            if v not in universe and state.depths.get(v):
                universe.append(v)
        return tuple(universe)

    def tile_reduce_scan(self, e, state, path):
        what = "Reduce" if isinstance(e, Reduce) else "Scan"
        names, global_axes = self._operand_info(e, state, what)
        fn = self.out[e.fn]
        depth = len(state.visited)
        inner = state.clone()
        level = OpLevel(what.lower(), e.axes, e.combine,
                        getattr(e, "emit", None), e.init)
        inner.visited = state.visited + (level,)
        for pos, (name, param) in enumerate(zip(names, fn.params)):
            inner.depths[param] = state.depths.get(name, ()) + ((depth, e.axes[pos]),)
            rem = list(state.remaining[name])
            rem.pop(e.axes[pos])
            inner.remaining[param] = tuple(rem)
            inner.ranks[param] = len(rem)
        node_path = f"{path}/{e.fn}@d{depth}"
        slot = self.new_slot(node_path, len(names))
        # A reduction always terminates the walk: partial results of one
        # reduction cannot feed another, so the nested function is rebuilt
        # from the visited nest even if it contains further operators.
        nest = self.build_operator_nest(
            list(enumerate(inner.visited)), inner.depths,
            self._nest_universe(fn, inner), fn.body, node_path)
        clone = self.define(self.fresh(f"{fn.name}$t{depth}"), fn.params, (Return(nest),))
        lifted = self.lift_combine(e.combine, max((len(state.depths.get(n, ())) for n in names),
                                                  default=0))
        if isinstance(e, Reduce):
            return TiledReduce(clone.name, None, slot.id, depth, lifted, e.init,
                               e.args, global_axes)
        return TiledScan(clone.name, None, slot.id, depth, lifted, e.emit, e.init,
                         e.args, global_axes)

    def lift_combine(self, combine, added_ranks):
        """Wrap the combine in one Map per rank added by enclosing tiling,
        so it is applied to matching elements of partial-result tiles."""
        if added_ranks == 0:
            return combine
        key = (combine, added_ranks)
        if key in self._combine_cache:
            return self._combine_cache[key]
        fn = self.out[combine]
        levels = [(j, OpLevel("map", axes=(0, 0))) for j in range(added_ranks)]
        eps = {p: tuple((j, 0) for j in range(added_ranks)) for p in fn.params}
        nest = self.build_operator_nest(levels, eps, fn.params, fn.body,
                                        f"combine:{combine}", force_axis0=True)
        clone = self.define(self.fresh(f"{combine}$t{added_ranks}"), fn.params,
                            (Return(nest),))
        self._combine_cache[key] = clone.name
        return clone.name

    # -- nest reconstruction --------------------------------------------------------

    def build_operator_nest(self, levels, eps, var_order, block, path, force_axis0=False):
        """Rebuild the untiled operator nest over the given variables.

        `levels` is a list of (depth key, OpLevel). Level j slices exactly
        the variables whose depth record contains that key, at the local
        axis recorded there (or axis 0 when forced); all other free
        variables pass through as closure parameters of the generated
        nested functions. The innermost body is `block`, untouched.
        """
        if not levels:
            if len(block) == 1 and isinstance(block[0], Return):
                return block[0].value
            raise TilingError("cannot inline a multi-statement block without operators")

        (depth_key, level), rest = levels[0], levels[1:]
        sliced = []
        axes = []
        for v in var_order:
            for d, axis in eps.get(v, ()):
                if d == depth_key:
                    sliced.append(v)
                    axes.append(0 if force_axis0 else axis)
                    break
        if not sliced:
            raise UnsupportedNesting(
                f"no variables recorded for nesting depth {depth_key} ({path})")
        if rest:
            inner_expr = self.build_operator_nest(rest, eps, var_order, block, path,
                                                  force_axis0)
            inner_body = (Return(inner_expr),)
        else:
            inner_body = block
        inner_fn = self.define(self.fresh(f"{_path_base(path)}$u{depth_key}"),
                               sliced, inner_body)
        args = tuple(Var(v) for v in sliced)
        axes = tuple(axes)
        if level.kind == "map":
            return Map(inner_fn.name, args, axes)
        if level.kind == "reduce":
            return Reduce(inner_fn.name, level.combine, level.init, args, axes)
        return Scan(inner_fn.name, level.combine, level.emit, level.init, args, axes)


def _path_base(path):
    tail = path.rsplit("/", 1)[-1]
    return tail.split("@", 1)[0].split(":", 1)[-1].split(".", 1)[0]


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------

def tile_program(program, arg_ranks=None, entry="main"):
    """Tile the entry function for cache: every operator becomes a tiled
    operator with a runtime-tunable size slot.

    Returns TilingResult; `changed` is False (with a reason, and the input
    program returned untouched) when there is nothing to tile or when
    control flow anywhere operator-reachable forces the bail-out.
    """
    validate_program(program)
    main = program.fn(entry)
    for fn in program.functions.values():
        for e in ir.walk_exprs(fn.body):
            if isinstance(e, ir.AllPairs):
                raise TilingError("AllPairs must be desugared before tiling")
            if isinstance(e, ir.TILED_OPS):
                raise TilingError("input already contains tiled operators")
    if not contains_parallel_op(main.body, program):
        return TilingResult(False, program, None, "no data-parallel operators")
    if contains_control_flow(program, main):
        return TilingResult(False, program, None,
                            "control flow in a function being tiled")

    normalized = normalize_for_tiling(program)
    if arg_ranks is None:
        inferred = required_ranks(normalized, entry)
        arg_ranks = [inferred[p] for p in main.params]
    elif len(arg_ranks) != len(main.params):
        raise TilingError(f"{entry} has {len(main.params)} parameter(s), "
                          f"got {len(arg_ranks)} ranks")

    spec = TileSpec()
    tiler = _Tiler(normalized, spec, "cache")
    try:
        body = tiler.tile_function_body(normalized.fn(entry), arg_ranks, entry)
    except UnsupportedNesting as exc:
        return TilingResult(False, program, None, str(exc))
    tiler.out[entry] = replace(normalized.fn(entry), body=body)
    tiled = Program(tiler.out)
    validate_program(tiled, allow_tiled=True)
    return TilingResult(True, tiled, spec)


def specialize_fixed(program, fname, k, axes=None):
    """Clone `fname` with a fixed sliced-extent annotation.

    The evaluator dispatches full tiles of extent k to the clone, which
    skips per-iteration bounds checks; applying it to any other extent
    along the specialised axes is an error. `axes` gives the per-parameter
    axes the extent pins (the tiled operator's global axes); without it
    any slicing of the clone's parameters is assumed fixed."""
    if k < 1:
        raise TilingError(f"fixed extent must be >= 1, got {k}")
    fn = program.fn(fname)
    name = program.fresh_name(f"{fname}$k{k}")
    clone = replace(fn, name=name, fixed_extent=k,
                    fixed_axes=tuple(axes) if axes is not None else None)
    return clone


def register_tile(program, spec, hw, heuristic=None, entry="main"):
    """Second tiling pass: fixed-size register tiles inside the nests the
    cache pass rebuilt, plus fixed-extent specializations.

    Functions containing control flow are skipped (left untiled), as are
    functions already holding tiled operators. With no registers reported
    the pass is disabled and the program returned unchanged."""
    registers = getattr(hw, "registers", hw if isinstance(hw, int) else 0)
    heuristic = heuristic or RegisterHeuristic()
    if registers <= 0:
        return program, spec

    new_spec = TileSpec(list(spec.slots))
    out = dict(program.functions)

    def eligible(fn):
        body = fn.body
        has_plain = any(isinstance(e, UNTILED_OPS) for e in ir.walk_exprs(body))
        has_tiled = any(isinstance(e, ir.TILED_OPS) for e in ir.walk_exprs(body))
        return has_plain and not has_tiled

    for name in _reachable(Program(out), entry):
        fn = out[name]
        if not eligible(fn):
            continue
        probe = Program(out)
        if name not in _reachable(probe, entry):
            continue  # superseded by an earlier rewrite in this pass
        if contains_control_flow(probe, fn):
            continue
        normalized = normalize_for_tiling(probe)
        ranks = required_ranks(normalized, name)
        tiler = _Tiler(normalized, new_spec, "register",
                       slot_size_fn=lambda nops: heuristic.size_for(nops, registers))
        try:
            body = tiler.tile_function_body(
                normalized.fn(name), [ranks[p] for p in fn.params], name,
                closure_ranks={c: ranks[c] for c in fn.closure_params})
        except UnsupportedNesting:
            continue
        tiler.out[name] = replace(normalized.fn(name), body=body)
        out = tiler.out

    _attach_fixed_clones(out, new_spec)
    tiled = Program(out)
    validate_program(tiled, allow_tiled=True)
    return tiled, new_spec


def _reachable(program, entry):
    """Function names reachable from the entry through operator references,
    in deterministic discovery order."""
    order = []
    seen = set()
    pending = [entry]
    while pending:
        name = pending.pop(0)
        if name in seen or name not in program.functions:
            continue
        seen.add(name)
        order.append(name)
        for e in ir.walk_exprs(program.functions[name].body):
            pending.extend(ir.referenced_functions(e))
    return order


def _attach_fixed_clones(table, spec):
    """Give every fixed-size tiled operator a fixed-extent function clone.

    All bodies are rewritten to reference their clone names first, and the
    clones are materialized afterwards from the rewritten functions, so a
    clone of a function that itself holds fixed-size operators carries the
    inner references too."""
    sizes = {s.id: s.size for s in spec.slots if s.size is not None}
    planned = {}  # (fname, k, axes) -> clone name
    reserved = set(table)

    def clone_name(fname, k, axes):
        key = (fname, k, axes)
        if key not in planned:
            base = f"{fname}$k{k}"
            name = base
            i = 2
            while name in reserved:
                name = f"{base}_{i}"
                i += 1
            reserved.add(name)
            planned[key] = name
        return planned[key]

    def rewrite(e):
        if isinstance(e, ir.TILED_OPS) and e.fixed is None and e.slot in sizes:
            return replace(e, fixed=clone_name(e.fn, sizes[e.slot], e.axes))
        return e

    for name in list(table):
        fn = table[name]
        new_body = _rewrite_block(fn.body, rewrite)
        if new_body != fn.body:
            table[name] = replace(fn, body=new_body)
    for (fname, k, axes), name in planned.items():
        table[name] = replace(table[fname], name=name, fixed_extent=k, fixed_axes=axes)


def _rewrite_block(block, rewrite):
    return tuple(_rewrite_stmt(s, rewrite) for s in block)


def _rewrite_stmt(s, rewrite):
    if isinstance(s, Assign):
        return Assign(s.target, _rewrite_expr(s.value, rewrite))
    if isinstance(s, Return):
        return Return(_rewrite_expr(s.value, rewrite))
    if isinstance(s, ir.If):
        return ir.If(_rewrite_expr(s.cond, rewrite),
                     _rewrite_block(s.then, rewrite), _rewrite_block(s.orelse, rewrite))
    if isinstance(s, ir.For):
        return ir.For(s.var, _rewrite_expr(s.seq, rewrite), _rewrite_block(s.body, rewrite))
    raise TilingError(f"unknown statement {type(s).__name__}")


def _rewrite_expr(e, rewrite):
    if isinstance(e, BinOp):
        e = BinOp(e.op, _rewrite_expr(e.left, rewrite), _rewrite_expr(e.right, rewrite))
    elif isinstance(e, ir.ArrayLit):
        e = ir.ArrayLit(tuple(_rewrite_expr(x, rewrite) for x in e.items))
    elif isinstance(e, ir.Index):
        e = ir.Index(_rewrite_expr(e.array, rewrite), _rewrite_expr(e.index, rewrite))
    elif isinstance(e, Map):
        e = Map(e.fn, tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    elif isinstance(e, Reduce):
        e = Reduce(e.fn, e.combine, _rewrite_expr(e.init, rewrite),
                   tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    elif isinstance(e, Scan):
        e = Scan(e.fn, e.combine, e.emit, _rewrite_expr(e.init, rewrite),
                 tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    elif isinstance(e, TiledMap):
        e = TiledMap(e.fn, e.fixed, e.slot, e.depth,
                     tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    elif isinstance(e, TiledReduce):
        e = TiledReduce(e.fn, e.fixed, e.slot, e.depth, e.combine,
                        _rewrite_expr(e.init, rewrite),
                        tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    elif isinstance(e, TiledScan):
        e = TiledScan(e.fn, e.fixed, e.slot, e.depth, e.combine, e.emit,
                      _rewrite_expr(e.init, rewrite),
                      tuple(_rewrite_expr(a, rewrite) for a in e.args), e.axes)
    return rewrite(e)
