"""Tree-structured IR for data-parallel array programs.

Programs are flat tables of named functions. Expressions include scalar
arithmetic, array literals, indexing, and the parallel operators Map,
Reduce, Scan and AllPairs, each of which references a named nested
function and carries one slicing axis per argument. Tiled variants of the
operators (TiledMap/TiledReduce/TiledScan) are internal-only nodes: the
parser rejects them unless the internal dialect is enabled.

The textual format is one `fn` block per function:

    fn NAME(PARAMS) [uses CLOSUREPARAMS] { STMT* }

Closure parameters are bound by name at the operator application site:
an operator expression `map(f, xs; axes=[0])` slices `xs` into f's
positional parameter and resolves each of f's closure parameters in the
scope enclosing the operator expression.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field, replace

BINARY_OPS = ("+", "-", "*", "/", "min", "max")

KEYWORDS = {
    "fn", "uses", "return", "if", "else", "for", "in",
    "map", "reduce", "scan", "allpairs",
    "tiledmap", "tiledreduce", "tiledscan",
    "combine", "init", "emit", "axes", "fixed", "slot", "depth",
    "assumes", "extent",
    "min", "max", "inf",
}


class IRError(Exception):
    """Base for all IR-level failures."""


class IRSyntaxError(IRError):
    def __init__(self, message, line, col):
        super().__init__(f"{line}:{col}: {message}")
        self.line = line
        self.col = col


class ValidationError(IRError):
    """Raised when a structurally complete program violates an invariant.

    `invariant` is a stable identifier naming the violated rule.
    """

    def __init__(self, invariant, message):
        super().__init__(f"[{invariant}] {message}")
        self.invariant = invariant


# ---------------------------------------------------------------------------
# Nodes
# ---------------------------------------------------------------------------

class Expr:
    __slots__ = ()


class Stmt:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Expr):
    value: int | float

    @property
    def dtype(self):
        return "i64" if isinstance(self.value, int) else "f64"


@dataclass(frozen=True)
class Var(Expr):
    name: str


@dataclass(frozen=True)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr


@dataclass(frozen=True)
class ArrayLit(Expr):
    items: tuple[Expr, ...]


@dataclass(frozen=True)
class Index(Expr):
    array: Expr
    index: Expr


@dataclass(frozen=True)
class Lambda(Expr):
    """Inline function, only valid transiently while building programs.

    `lift_lambdas` replaces every Lambda used as an operator function with
    a fresh named function; validation rejects any that remain.
    """

    params: tuple[str, ...]
    body: tuple[Stmt, ...]


@dataclass(frozen=True)
class Map(Expr):
    fn: str | Lambda
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


@dataclass(frozen=True)
class Reduce(Expr):
    fn: str | Lambda
    combine: str | Lambda
    init: Expr
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


@dataclass(frozen=True)
class Scan(Expr):
    fn: str | Lambda
    combine: str | Lambda
    emit: str | Lambda | None
    init: Expr
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


@dataclass(frozen=True)
class AllPairs(Expr):
    fn: str | Lambda
    arg1: Expr
    arg2: Expr
    axes: tuple[int, int]


@dataclass(frozen=True)
class TiledMap(Expr):
    fn: str
    fixed: str | None
    slot: int
    depth: int
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


@dataclass(frozen=True)
class TiledReduce(Expr):
    fn: str
    fixed: str | None
    slot: int
    depth: int
    combine: str
    init: Expr
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


@dataclass(frozen=True)
class TiledScan(Expr):
    fn: str
    fixed: str | None
    slot: int
    depth: int
    combine: str
    emit: str | None
    init: Expr
    args: tuple[Expr, ...]
    axes: tuple[int, ...]


PARALLEL_OPS = (Map, Reduce, Scan, AllPairs, TiledMap, TiledReduce, TiledScan)
TILED_OPS = (TiledMap, TiledReduce, TiledScan)


@dataclass(frozen=True)
class Assign(Stmt):
    target: str
    value: Expr


@dataclass(frozen=True)
class Return(Stmt):
    value: Expr


@dataclass(frozen=True)
class If(Stmt):
    cond: Expr
    then: tuple[Stmt, ...]
    orelse: tuple[Stmt, ...]


@dataclass(frozen=True)
class For(Stmt):
    var: str
    seq: Expr
    body: tuple[Stmt, ...]


@dataclass(frozen=True)
class Function:
    name: str
    params: tuple[str, ...]
    closure_params: tuple[str, ...]
    body: tuple[Stmt, ...]
    # Set by fixed-size specialization: the sliced extent this clone may
    # assume, and (optionally) the per-parameter axes the extent applies to.
    fixed_extent: int | None = None
    fixed_axes: tuple[int, ...] | None = None


@dataclass
class Program:
    functions: dict[str, Function] = field(default_factory=dict)

    def __eq__(self, other):
        return isinstance(other, Program) and self.functions == other.functions

    def fn(self, name):
        try:
            return self.functions[name]
        except KeyError:
            raise ValidationError("missing-function", f"no function named {name!r}") from None

    def with_function(self, fn):
        table = dict(self.functions)
        table[fn.name] = fn
        return Program(table)

    def fresh_name(self, base):
        if base not in self.functions:
            return base
        i = 2
        while f"{base}_{i}" in self.functions:
            i += 1
        return f"{base}_{i}"


# ---------------------------------------------------------------------------
# Traversal helpers
# ---------------------------------------------------------------------------

def sub_exprs(e):
    """Direct child expressions of `e` (inline lambdas included)."""
    if isinstance(e, BinOp):
        return (e.left, e.right)
    if isinstance(e, ArrayLit):
        return e.items
    if isinstance(e, Index):
        return (e.array, e.index)
    if isinstance(e, Map):
        return e.args + _lambda_refs(e)
    if isinstance(e, (Reduce, Scan, TiledReduce, TiledScan)):
        return (e.init, *e.args, *_lambda_refs(e))
    if isinstance(e, AllPairs):
        return (e.arg1, e.arg2) + _lambda_refs(e)
    if isinstance(e, TiledMap):
        return e.args + _lambda_refs(e)
    return ()


def _lambda_refs(e):
    refs = [e.fn]
    if isinstance(e, (Reduce, Scan, TiledReduce, TiledScan)):
        refs.append(e.combine)
    if isinstance(e, (Scan, TiledScan)):
        refs.append(e.emit)
    return tuple(r for r in refs if isinstance(r, Lambda))


def walk_exprs(node):
    """Yield every expression under `node` (an Expr, Stmt, or block)."""
    stack = []
    if isinstance(node, Expr):
        stack.append(node)
    elif isinstance(node, Stmt):
        stack.extend(_stmt_exprs(node))
    else:
        for s in node:
            stack.extend(_stmt_exprs(s))
    while stack:
        e = stack.pop()
        yield e
        stack.extend(sub_exprs(e))
        if isinstance(e, Lambda):
            for s in e.body:
                stack.extend(_stmt_exprs(s))


def _stmt_exprs(s):
    if isinstance(s, Assign):
        return [s.value]
    if isinstance(s, Return):
        return [s.value]
    if isinstance(s, If):
        out = [s.cond]
        for b in (s.then, s.orelse):
            for t in b:
                out.extend(_stmt_exprs(t))
        return out
    if isinstance(s, For):
        out = [s.seq]
        for t in s.body:
            out.extend(_stmt_exprs(t))
        return out
    raise TypeError(f"not a statement: {s!r}")


def referenced_functions(e):
    """Function names referenced by an operator expression."""
    names = []
    if isinstance(e, (Map, AllPairs)):
        names.append(e.fn)
    elif isinstance(e, (Reduce, TiledReduce)):
        names.extend([e.fn, e.combine])
    elif isinstance(e, (Scan, TiledScan)):
        names.extend([e.fn, e.combine])
        if e.emit is not None:
            names.append(e.emit)
    elif isinstance(e, TiledMap):
        names.append(e.fn)
    if isinstance(e, TILED_OPS) and e.fixed is not None:
        names.append(e.fixed)
    return [n for n in names if isinstance(n, str)]


def contains_parallel_op(node, program=None):
    """True if any parallel operator occurs under `node`.

    With `program`, the search also follows operator function references
    (cycle-safe), so it sees operators in nested functions.
    """
    seen = set()
    if any(isinstance(e, PARALLEL_OPS) for e in walk_exprs(node)):
        return True
    if program is None:
        return False
    # Follow references breadth-first.
    pending = [f for e in walk_exprs(node) for f in referenced_functions(e)]
    while pending:
        name = pending.pop()
        if name in seen or name not in program.functions:
            continue
        seen.add(name)
        body = program.functions[name].body
        for e in walk_exprs(body):
            if isinstance(e, PARALLEL_OPS):
                return True
            pending.extend(referenced_functions(e))
    return False


def contains_control_flow(program, fn):
    """True if `fn` or any function reachable from its operators has If/For."""
    if isinstance(fn, str):
        fn = program.fn(fn)
    seen = set()
    pending = [fn]
    while pending:
        f = pending.pop()
        if f.name in seen:
            continue
        seen.add(f.name)
        if _block_has_control_flow(f.body):
            return True
        for e in walk_exprs(f.body):
            for name in referenced_functions(e):
                if name in program.functions:
                    pending.append(program.functions[name])
    return False


def _block_has_control_flow(block):
    for s in block:
        if isinstance(s, (If, For)):
            return True
    # If/For nest only inside If/For, so the flat scan above suffices for
    # the outer block; nested blocks are reached through their parents.
    for s in block:
        if isinstance(s, If) and (_block_has_control_flow(s.then) or _block_has_control_flow(s.orelse)):
            return True
        if isinstance(s, For) and _block_has_control_flow(s.body):
            return True
    return False


# ---------------------------------------------------------------------------
# Free variables
# ---------------------------------------------------------------------------

def free_vars(node, program=None):
    """Free variable names of an expression, statement, or block.

    Operator function names are not variables, but when `program` is given
    the closure parameters of referenced functions count as free names at
    the operator site (they are resolved there by name).
    """
    if isinstance(node, Expr):
        return _expr_free(node, program)
    if isinstance(node, Stmt):
        free, _ = _block_free((node,), program)
        return free
    free, _ = _block_free(tuple(node), program)
    return free


def _expr_free(e, program):
    if isinstance(e, Var):
        return {e.name}
    if isinstance(e, Lambda):
        inner, _ = _block_free(e.body, program)
        return inner - set(e.params)
    free = set()
    for c in sub_exprs(e):
        free |= _expr_free(c, program)
    if program is not None:
        for name in referenced_functions(e):
            if name in program.functions:
                free |= set(program.functions[name].closure_params)
    return free


def _block_free(block, program):
    """Return (free names, names surely bound after the block)."""
    free = set()
    bound = set()
    for s in block:
        if isinstance(s, Assign):
            free |= _expr_free(s.value, program) - bound
            bound.add(s.target)
        elif isinstance(s, Return):
            free |= _expr_free(s.value, program) - bound
        elif isinstance(s, If):
            free |= _expr_free(s.cond, program) - bound
            f1, b1 = _block_free(s.then, program)
            f2, b2 = _block_free(s.orelse, program)
            free |= (f1 | f2) - bound
            bound |= b1 & b2
        elif isinstance(s, For):
            free |= _expr_free(s.seq, program) - bound
            fb, _ = _block_free(s.body, program)
            free |= fb - bound - {s.var}
            # Loop-body assignments are not surely bound afterwards
            # (the loop may run zero times).
    return free, bound


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_program(program, allow_tiled=False):
    """Check all structural invariants; raises ValidationError on the first
    violation, naming the invariant."""
    for name, fn in program.functions.items():
        if name != fn.name:
            raise ValidationError("function-table", f"table key {name!r} != function name {fn.name!r}")
        _validate_function(program, fn, allow_tiled)
    return program


def _validate_function(program, fn, allow_tiled):
    seen = set()
    for p in fn.params + fn.closure_params:
        if p in seen:
            raise ValidationError("duplicate-param", f"{fn.name}: parameter {p!r} repeated")
        seen.add(p)
    if not fn.body:
        raise ValidationError("empty-body", f"{fn.name}: function body is empty")
    _validate_block(program, fn, fn.body, set(fn.params) | set(fn.closure_params), allow_tiled)
    if not _definitely_returns(fn.body):
        raise ValidationError("missing-return", f"{fn.name}: body may finish without a return")
    free, _ = _block_free(fn.body, program)
    extra = free - set(fn.params) - set(fn.closure_params)
    if extra:
        raise ValidationError(
            "unbound-variable",
            f"{fn.name}: free variable(s) {sorted(extra)} are neither parameters nor closure parameters")


def _definitely_returns(block):
    last = block[-1]
    if isinstance(last, Return):
        return True
    if isinstance(last, If):
        return _definitely_returns(last.then) and _definitely_returns(last.orelse)
    return False


def _validate_block(program, fn, block, bound, allow_tiled):
    for i, s in enumerate(block):
        if isinstance(s, Return) and i != len(block) - 1:
            raise ValidationError("return-not-last", f"{fn.name}: return before end of block")
        if isinstance(s, Assign):
            _validate_expr(program, fn, s.value, bound, allow_tiled)
            bound = bound | {s.target}
        elif isinstance(s, Return):
            _validate_expr(program, fn, s.value, bound, allow_tiled)
        elif isinstance(s, If):
            _validate_expr(program, fn, s.cond, bound, allow_tiled)
            _validate_block(program, fn, s.then, set(bound), allow_tiled)
            _validate_block(program, fn, s.orelse, set(bound), allow_tiled)
        elif isinstance(s, For):
            _validate_expr(program, fn, s.seq, bound, allow_tiled)
            _validate_block(program, fn, s.body, bound | {s.var}, allow_tiled)
        else:
            raise ValidationError("unknown-statement", f"{fn.name}: {type(s).__name__}")


def _validate_expr(program, fn, expr, bound, allow_tiled):
    for e in walk_exprs(expr):
        if isinstance(e, Lambda):
            raise ValidationError("unlifted-lambda", f"{fn.name}: Lambda must be lifted to a named function")
        if isinstance(e, TILED_OPS) and not allow_tiled:
            raise ValidationError("tiled-in-user-program",
                                  f"{fn.name}: {type(e).__name__} is internal-only syntax")
        if isinstance(e, BinOp) and e.op not in BINARY_OPS:
            raise ValidationError("unknown-operator", f"{fn.name}: operator {e.op!r}")
        if isinstance(e, ArrayLit) and not e.items:
            raise ValidationError("empty-array-literal", f"{fn.name}: [] has no element type")
        if isinstance(e, PARALLEL_OPS):
            _validate_op(program, fn, e, bound)


def _validate_op(program, fn, e, bound):
    kind = type(e).__name__
    args = (e.arg1, e.arg2) if isinstance(e, AllPairs) else e.args
    if len(e.axes) != len(args):
        raise ValidationError("axes-arity",
                              f"{fn.name}: {kind} has {len(args)} argument(s) but {len(e.axes)} axis entries")
    if any(a < 0 for a in e.axes):
        raise ValidationError("negative-axis", f"{fn.name}: {kind} axis entries must be >= 0")
    if not args:
        raise ValidationError("no-operands", f"{fn.name}: {kind} needs at least one argument")
    for role, ref, arity in _op_refs(e, len(args)):
        if not isinstance(ref, str):
            continue  # Lambda: caught by unlifted-lambda
        if ref not in program.functions:
            raise ValidationError("missing-function", f"{fn.name}: {kind} references unknown {role} {ref!r}")
        target = program.functions[ref]
        if arity is not None and len(target.params) != arity:
            raise ValidationError(
                "operator-arity",
                f"{fn.name}: {kind} {role} {ref!r} takes {len(target.params)} parameter(s), expected {arity}")
        missing = [c for c in target.closure_params if c not in bound]
        if missing:
            raise ValidationError(
                "unbound-closure",
                f"{fn.name}: closure parameter(s) {missing} of {ref!r} are not in scope at the {kind} site")
    if isinstance(e, TILED_OPS):
        if e.slot < 0:
            raise ValidationError("bad-slot", f"{fn.name}: {kind} slot must be >= 0")
        if e.depth < 0:
            raise ValidationError("bad-depth", f"{fn.name}: {kind} depth must be >= 0")


def _op_refs(e, nargs):
    """(role, name, required positional arity) triples for an operator."""
    refs = [("function", e.fn, nargs)]
    if isinstance(e, (Reduce, TiledReduce, Scan, TiledScan)):
        refs.append(("combine", e.combine, 2))
    if isinstance(e, (Scan, TiledScan)) and e.emit is not None:
        refs.append(("emit", e.emit, 1))
    if isinstance(e, TILED_OPS) and e.fixed is not None:
        refs.append(("fixed function", e.fixed, nargs))
    return refs


# ---------------------------------------------------------------------------
# Lambda lifting
# ---------------------------------------------------------------------------

def lift_lambdas(program):
    """Replace Lambda operator functions with fresh named functions."""
    out = Program(dict(program.functions))
    changed = True
    while changed:
        changed = False
        for name, fn in list(out.functions.items()):
            new_body = _lift_block(out, fn.body)
            if new_body != fn.body:
                out.functions[name] = replace(fn, body=new_body)
                changed = True
    return out


def _lift_block(program, block):
    return tuple(_lift_stmt(program, s) for s in block)


def _lift_stmt(program, s):
    if isinstance(s, Assign):
        return Assign(s.target, _lift_expr(program, s.value))
    if isinstance(s, Return):
        return Return(_lift_expr(program, s.value))
    if isinstance(s, If):
        return If(_lift_expr(program, s.cond), _lift_block(program, s.then), _lift_block(program, s.orelse))
    if isinstance(s, For):
        return For(s.var, _lift_expr(program, s.seq), _lift_block(program, s.body))
    raise TypeError(s)


def _lift_expr(program, e):
    def lift_ref(ref, site_names):
        if not isinstance(ref, Lambda):
            return ref
        body = _lift_block(program, ref.body)
        fv, _ = _block_free(body, program)
        closures = tuple(sorted(fv - set(ref.params)))
        name = program.fresh_name("lam$0")
        program.functions[name] = Function(name, ref.params, closures, body)
        return name

    if isinstance(e, BinOp):
        return BinOp(e.op, _lift_expr(program, e.left), _lift_expr(program, e.right))
    if isinstance(e, ArrayLit):
        return ArrayLit(tuple(_lift_expr(program, x) for x in e.items))
    if isinstance(e, Index):
        return Index(_lift_expr(program, e.array), _lift_expr(program, e.index))
    if isinstance(e, Map):
        return Map(lift_ref(e.fn, None), tuple(_lift_expr(program, a) for a in e.args), e.axes)
    if isinstance(e, Reduce):
        return Reduce(lift_ref(e.fn, None), lift_ref(e.combine, None), _lift_expr(program, e.init),
                      tuple(_lift_expr(program, a) for a in e.args), e.axes)
    if isinstance(e, Scan):
        emit = lift_ref(e.emit, None) if e.emit is not None else None
        return Scan(lift_ref(e.fn, None), lift_ref(e.combine, None), emit, _lift_expr(program, e.init),
                    tuple(_lift_expr(program, a) for a in e.args), e.axes)
    if isinstance(e, AllPairs):
        return AllPairs(lift_ref(e.fn, None), _lift_expr(program, e.arg1), _lift_expr(program, e.arg2), e.axes)
    return e


# ---------------------------------------------------------------------------
# AllPairs desugaring
# ---------------------------------------------------------------------------

def desugar_allpairs(program):
    """Rewrite every AllPairs into two nested Maps.

    AllPairs(f, A, B) becomes an outer Map over A whose nested function
    maps a clone of f (first parameter moved to the closure) over B. The
    second argument is hoisted to a temporary when it is not already a
    variable. Semantics are unchanged.
    """
    out = Program(dict(program.functions))
    counter = [0]
    for name, fn in list(out.functions.items()):
        new_body = _desugar_block(out, fn.body, counter)
        if new_body != fn.body:
            out.functions[name] = replace(fn, body=new_body)
    return out


def _desugar_block(program, block, counter):
    result = []
    for s in block:
        prelude = []
        if isinstance(s, Assign):
            s = Assign(s.target, _desugar_expr(program, s.value, prelude, counter))
        elif isinstance(s, Return):
            s = Return(_desugar_expr(program, s.value, prelude, counter))
        elif isinstance(s, If):
            cond = _desugar_expr(program, s.cond, prelude, counter)
            s = If(cond, _desugar_block(program, s.then, counter),
                   _desugar_block(program, s.orelse, counter))
        elif isinstance(s, For):
            seq = _desugar_expr(program, s.seq, prelude, counter)
            s = For(s.var, seq, _desugar_block(program, s.body, counter))
        result.extend(prelude)
        result.append(s)
    return tuple(result)


def _desugar_expr(program, e, prelude, counter):
    if isinstance(e, BinOp):
        return BinOp(e.op, _desugar_expr(program, e.left, prelude, counter),
                     _desugar_expr(program, e.right, prelude, counter))
    if isinstance(e, ArrayLit):
        return ArrayLit(tuple(_desugar_expr(program, x, prelude, counter) for x in e.items))
    if isinstance(e, Index):
        return Index(_desugar_expr(program, e.array, prelude, counter),
                     _desugar_expr(program, e.index, prelude, counter))
    if isinstance(e, Map):
        return Map(e.fn, tuple(_desugar_expr(program, a, prelude, counter) for a in e.args), e.axes)
    if isinstance(e, Reduce):
        return Reduce(e.fn, e.combine, _desugar_expr(program, e.init, prelude, counter),
                      tuple(_desugar_expr(program, a, prelude, counter) for a in e.args), e.axes)
    if isinstance(e, Scan):
        return Scan(e.fn, e.combine, e.emit, _desugar_expr(program, e.init, prelude, counter),
                    tuple(_desugar_expr(program, a, prelude, counter) for a in e.args), e.axes)
    if isinstance(e, AllPairs):
        arg1 = _desugar_expr(program, e.arg1, prelude, counter)
        arg2 = _desugar_expr(program, e.arg2, prelude, counter)
        f = program.fn(e.fn)
        first, second = f.params[0], f.params[1]
        if not isinstance(arg2, Var) or arg2.name == first:
            counter[0] += 1
            tmp = f"tmp$ap{counter[0]}"
            prelude.append(Assign(tmp, arg2))
            arg2 = Var(tmp)
        inner_name = program.fresh_name(f"{e.fn}$api")
        program.functions[inner_name] = Function(
            inner_name, (second,), (first,) + f.closure_params, f.body)
        outer_name = program.fresh_name(f"{e.fn}$apo")
        outer_body = (Return(Map(inner_name, (arg2,), (e.axes[1],))),)
        program.functions[outer_name] = Function(
            outer_name, (first,), (arg2.name,) + f.closure_params, outer_body)
        return Map(outer_name, (arg1,), (e.axes[0],))
    return e


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"""
    (?P<ws>[ \t\r\n]+)
  | (?P<comment>\#[^\n]*)
  | (?P<float>(\d+\.\d*|\.\d+)([eE][+-]?\d+)?|\d+[eE][+-]?\d+)
  | (?P<int>\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_$]*)
  | (?P<punct>[()\[\]{},;=+\-*/])
""", re.VERBOSE)


@dataclass(frozen=True)
class _Token:
    kind: str
    text: str
    line: int
    col: int


def _tokenize(text):
    tokens = []
    pos = 0
    line = 1
    line_start = 0
    n = len(text)
    while pos < n:
        m = _TOKEN_RE.match(text, pos)
        if m is None:
            raise IRSyntaxError(f"unexpected character {text[pos]!r}", line, pos - line_start + 1)
        kind = m.lastgroup
        value = m.group()
        col = pos - line_start + 1
        if kind == "ws":
            nl = value.count("\n")
            if nl:
                line += nl
                line_start = pos + value.rindex("\n") + 1
        elif kind != "comment":
            tokens.append(_Token(kind, value, line, col))
        pos = m.end()
    tokens.append(_Token("eof", "", line, n - line_start + 1))
    return tokens


class _Parser:
    def __init__(self, text, allow_internal):
        self.tokens = _tokenize(text)
        self.pos = 0
        self.allow_internal = allow_internal

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        tok = self.tokens[self.pos]
        self.pos += 1
        return tok

    def error(self, message, tok=None):
        tok = tok or self.peek()
        raise IRSyntaxError(message, tok.line, tok.col)

    def expect(self, text):
        tok = self.next()
        if tok.text != text:
            self.error(f"expected {text!r}, found {tok.text!r}", tok)
        return tok

    def at(self, text):
        return self.peek().text == text

    def ident(self, what="identifier"):
        tok = self.next()
        if tok.kind != "ident":
            self.error(f"expected {what}, found {tok.text!r}", tok)
        if tok.text in KEYWORDS and tok.text not in ("min", "max", "inf"):
            self.error(f"keyword {tok.text!r} cannot be used as {what}", tok)
        if tok.text in ("min", "max", "inf"):
            self.error(f"reserved word {tok.text!r} cannot be used as {what}", tok)
        if "$" in tok.text and not self.allow_internal:
            self.error(f"{tok.text!r}: '$' names are reserved for generated code", tok)
        return tok.text

    # -- program structure --------------------------------------------------

    def program(self):
        functions = {}
        while not self.peek().kind == "eof":
            tok = self.peek()
            if tok.text != "fn":
                self.error(f"expected 'fn', found {tok.text!r}", tok)
            fn = self.function()
            if fn.name in functions:
                self.error(f"duplicate function name {fn.name!r}", tok)
            functions[fn.name] = fn
        return Program(functions)

    def function(self):
        self.expect("fn")
        name = self.ident("function name")
        self.expect("(")
        params = self.name_list(")")
        self.expect(")")
        closure = ()
        if self.at("uses"):
            self.next()
            closure = self.name_list_until(("{", "assumes"))
        fixed_extent = None
        fixed_axes = None
        if self.at("assumes"):
            # Fixed-size specialization annotation; generated code only.
            if not self.allow_internal:
                self.error("'assumes' clauses appear only in generated code")
            self.next()
            self.expect("extent"); self.expect("=")
            fixed_extent = self.int_lit()
            if self.at(","):
                self.next()
                self.expect("axes"); self.expect("=")
                self.expect("[")
                axes = []
                while not self.at("]"):
                    if axes:
                        self.expect(",")
                    axes.append(self.int_lit())
                self.expect("]")
                fixed_axes = tuple(axes)
        self.expect("{")
        body = self.block()
        self.expect("}")
        if not body:
            self.error(f"function {name!r} has an empty body")
        return Function(name, params, closure, body, fixed_extent, fixed_axes)

    def name_list(self, stop):
        return self.name_list_until((stop,))

    def name_list_until(self, stops):
        names = []
        while self.peek().text not in stops:
            if names:
                self.expect(",")
            names.append(self.ident())
        return tuple(names)

    def block(self):
        stmts = []
        while not self.at("}"):
            stmts.append(self.statement())
        return tuple(stmts)

    def statement(self):
        tok = self.peek()
        if tok.text == "return":
            self.next()
            value = self.expr()
            self.expect(";")
            return Return(value)
        if tok.text == "if":
            self.next()
            cond = self.expr()
            self.expect("{")
            then = self.block()
            self.expect("}")
            self.expect("else")
            self.expect("{")
            orelse = self.block()
            self.expect("}")
            return If(cond, then, orelse)
        if tok.text == "for":
            self.next()
            var = self.ident("loop variable")
            self.expect("in")
            seq = self.expr()
            self.expect("{")
            body = self.block()
            self.expect("}")
            return For(var, seq, body)
        target = self.ident("assignment target")
        self.expect("=")
        value = self.expr()
        self.expect(";")
        return Assign(target, value)

    # -- expressions ---------------------------------------------------------

    def expr(self):
        return self.minmax()

    def minmax(self):
        left = self.additive()
        while self.peek().text in ("min", "max"):
            op = self.next().text
            left = BinOp(op, left, self.additive())
        return left

    def additive(self):
        left = self.multiplicative()
        while self.peek().text in ("+", "-"):
            op = self.next().text
            left = BinOp(op, left, self.multiplicative())
        return left

    def multiplicative(self):
        left = self.unary()
        while self.peek().text in ("*", "/"):
            op = self.next().text
            left = BinOp(op, left, self.unary())
        return left

    def unary(self):
        if self.at("-"):
            tok = self.next()
            operand = self.unary()
            if isinstance(operand, Const):
                return Const(-operand.value)
            return BinOp("-", Const(0), operand)
        return self.postfix()

    def postfix(self):
        e = self.atom()
        while self.at("["):
            self.next()
            idx = self.expr()
            self.expect("]")
            e = Index(e, idx)
        return e

    def atom(self):
        tok = self.peek()
        if tok.kind == "int":
            self.next()
            return Const(int(tok.text))
        if tok.kind == "float":
            self.next()
            return Const(float(tok.text))
        if tok.text == "inf":
            self.next()
            return Const(float("inf"))
        if tok.text == "(":
            self.next()
            e = self.expr()
            self.expect(")")
            return e
        if tok.text == "[":
            self.next()
            items = [self.expr()]
            while self.at(","):
                self.next()
                items.append(self.expr())
            self.expect("]")
            return ArrayLit(tuple(items))
        if tok.text in ("map", "reduce", "scan", "allpairs"):
            return self.operator_call(tok.text)
        if tok.text in ("tiledmap", "tiledreduce", "tiledscan"):
            if not self.allow_internal:
                self.error(f"{tok.text!r} is internal-only syntax and not accepted in input programs", tok)
            return self.operator_call(tok.text)
        if tok.kind == "ident":
            return Var(self.ident())
        self.error(f"expected expression, found {tok.text!r}", tok)

    def operator_call(self, kind):
        self.next()
        self.expect("(")
        fn = self.ident("function name")
        fixed = None
        slot = depth = None
        combine = emit = None
        init = None
        if kind in ("tiledmap", "tiledreduce", "tiledscan"):
            self.expect(",")
            if self.at("fixed"):
                self.next(); self.expect("=")
                fixed = self.ident("function name")
                self.expect(",")
            self.expect("slot"); self.expect("=")
            slot = self.int_lit()
            self.expect(",")
            self.expect("depth"); self.expect("=")
            depth = self.int_lit()
        if kind in ("reduce", "scan", "tiledreduce", "tiledscan"):
            self.expect(",")
            self.expect("combine"); self.expect("=")
            combine = self.ident("function name")
            self.expect(",")
            if kind in ("scan", "tiledscan") and self.at("emit"):
                self.next(); self.expect("=")
                emit = self.ident("function name")
                self.expect(",")
            self.expect("init"); self.expect("=")
            init = self.expr()
        args = []
        while self.at(","):
            self.next()
            args.append(self.expr())
        self.expect(";")
        self.expect("axes"); self.expect("=")
        self.expect("[")
        axes = []
        while not self.at("]"):
            if axes:
                self.expect(",")
            axes.append(self.int_lit())
        self.expect("]")
        self.expect(")")
        args = tuple(args)
        axes = tuple(axes)
        if kind == "map":
            return Map(fn, args, axes)
        if kind == "reduce":
            return Reduce(fn, combine, init, args, axes)
        if kind == "scan":
            return Scan(fn, combine, emit, init, args, axes)
        if kind == "allpairs":
            if len(args) != 2 or len(axes) != 2:
                self.error("allpairs takes exactly two arguments and two axes")
            return AllPairs(fn, args[0], args[1], (axes[0], axes[1]))
        if kind == "tiledmap":
            return TiledMap(fn, fixed, slot, depth, args, axes)
        if kind == "tiledreduce":
            return TiledReduce(fn, fixed, slot, depth, combine, init, args, axes)
        return TiledScan(fn, fixed, slot, depth, combine, emit, init, args, axes)

    def int_lit(self):
        tok = self.next()
        if tok.kind != "int":
            self.error(f"expected integer, found {tok.text!r}", tok)
        return int(tok.text)


def parse_program(text, allow_internal=False):
    """Parse IR source into a validated Program.

    `allow_internal` enables the debug dialect: tiled operator nodes and
    '$' in identifiers. Input programs from users must not use either.
    """
    parser = _Parser(text, allow_internal)
    program = parser.program()
    return validate_program(program, allow_tiled=allow_internal)


# ---------------------------------------------------------------------------
# Printer
# ---------------------------------------------------------------------------

_PREC_MINMAX = 1
_PREC_ADD = 2
_PREC_MUL = 3
_PREC_UNARY = 4
_PREC_POSTFIX = 5

_OP_PREC = {"min": _PREC_MINMAX, "max": _PREC_MINMAX,
            "+": _PREC_ADD, "-": _PREC_ADD,
            "*": _PREC_MUL, "/": _PREC_MUL}


def print_program(program):
    """Render a Program in its textual form.

    parse_program(print_program(p)) is structurally identical to p; for
    programs containing tiled operators or generated '$' names the text is
    in the debug dialect and needs allow_internal=True to re-parse.
    """
    chunks = []
    for fn in program.functions.values():
        chunks.append(_print_function(fn))
    return "\n".join(chunks)


def _print_function(fn):
    head = f"fn {fn.name}({', '.join(fn.params)})"
    if fn.closure_params:
        head += f" uses {', '.join(fn.closure_params)}"
    if fn.fixed_extent is not None:
        head += f" assumes extent={fn.fixed_extent}"
        if fn.fixed_axes is not None:
            head += f", axes={_print_axes(fn.fixed_axes)}"
    lines = [head + " {"]
    lines.extend(_print_block(fn.body, "  "))
    lines.append("}")
    return "\n".join(lines) + "\n"


def _print_block(block, indent):
    lines = []
    for s in block:
        if isinstance(s, Assign):
            lines.append(f"{indent}{s.target} = {print_expr(s.value)};")
        elif isinstance(s, Return):
            lines.append(f"{indent}return {print_expr(s.value)};")
        elif isinstance(s, If):
            lines.append(f"{indent}if {print_expr(s.cond)} {{")
            lines.extend(_print_block(s.then, indent + "  "))
            lines.append(f"{indent}}} else {{")
            lines.extend(_print_block(s.orelse, indent + "  "))
            lines.append(f"{indent}}}")
        elif isinstance(s, For):
            lines.append(f"{indent}for {s.var} in {print_expr(s.seq)} {{")
            lines.extend(_print_block(s.body, indent + "  "))
            lines.append(f"{indent}}}")
        else:
            raise TypeError(s)
    return lines


def print_expr(e, prec=0):
    if isinstance(e, Const):
        return _print_const(e.value)
    if isinstance(e, Var):
        return e.name
    if isinstance(e, BinOp):
        p = _OP_PREC[e.op]
        text = f"{print_expr(e.left, p)} {e.op} {print_expr(e.right, p + 1)}"
        return f"({text})" if p < prec else text
    if isinstance(e, ArrayLit):
        return "[" + ", ".join(print_expr(x) for x in e.items) + "]"
    if isinstance(e, Index):
        return f"{print_expr(e.array, _PREC_POSTFIX)}[{print_expr(e.index)}]"
    if isinstance(e, Map):
        return f"map({e.fn}{_print_args(e.args)}; axes={_print_axes(e.axes)})"
    if isinstance(e, Reduce):
        return (f"reduce({e.fn}, combine={e.combine}, init={print_expr(e.init)}"
                f"{_print_args(e.args)}; axes={_print_axes(e.axes)})")
    if isinstance(e, Scan):
        emit = f"emit={e.emit}, " if e.emit is not None else ""
        return (f"scan({e.fn}, combine={e.combine}, {emit}init={print_expr(e.init)}"
                f"{_print_args(e.args)}; axes={_print_axes(e.axes)})")
    if isinstance(e, AllPairs):
        return (f"allpairs({e.fn}, {print_expr(e.arg1)}, {print_expr(e.arg2)}; "
                f"axes={_print_axes(e.axes)})")
    if isinstance(e, TiledMap):
        return (f"tiledmap({e.fn}{_print_fixed(e)}, slot={e.slot}, depth={e.depth}"
                f"{_print_args(e.args)}; axes={_print_axes(e.axes)})")
    if isinstance(e, TiledReduce):
        return (f"tiledreduce({e.fn}{_print_fixed(e)}, slot={e.slot}, depth={e.depth}, "
                f"combine={e.combine}, init={print_expr(e.init)}"
                f"{_print_args(e.args)}; axes={_print_axes(e.axes)})")
    if isinstance(e, TiledScan):
        emit = f"emit={e.emit}, " if e.emit is not None else ""
        return (f"tiledscan({e.fn}{_print_fixed(e)}, slot={e.slot}, depth={e.depth}, "
                f"combine={e.combine}, {emit}init={print_expr(e.init)}"
                f"{_print_args(e.args)}; axes={_print_axes(e.axes)})")
    if isinstance(e, Lambda):
        raise ValidationError("unlifted-lambda", "cannot print a Lambda; lift it first")
    raise TypeError(e)


def _print_fixed(e):
    return f", fixed={e.fixed}" if e.fixed is not None else ""


def _print_args(args):
    return "".join(f", {print_expr(a)}" for a in args)


def _print_axes(axes):
    return "[" + ", ".join(str(a) for a in axes) + "]"


def _print_const(v):
    if isinstance(v, int):
        return str(v)
    if v != v:  # NaN has no literal; should not appear in programs
        raise ValidationError("nan-literal", "NaN constants are not printable")
    if v == float("inf"):
        return "inf"
    if v == float("-inf"):
        return "-inf"
    return repr(v)
