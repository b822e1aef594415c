"""Dense n-dimensional arrays, zero-copy views, and tile decomposition.

Arrays hold int64 or float64 elements in row- or column-major order over a
flat buffer. Views (slices and tiles) share the buffer; a tile keeps the
rank of its base, a slice drops the sliced axis. Every element is 8 bytes
for address-trace purposes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

ELEM_SIZE = 8

DTYPES = ("i64", "f64")
LAYOUTS = ("row", "col")


class ShapeError(Exception):
    pass


def make_strides(shape, layout):
    """Element strides for a dense array of `shape` in the given layout."""
    n = len(shape)
    strides = [0] * n
    acc = 1
    order = range(n - 1, -1, -1) if layout == "row" else range(n)
    for i in order:
        strides[i] = acc
        acc *= shape[i]
    return tuple(strides)


def _product(xs):
    p = 1
    for x in xs:
        p *= x
    return p


class NdArray:
    """Owning dense array.

    `addr` is the byte address of element 0 in the simulated address
    space; the evaluator's allocator assigns it, otherwise it is 0.
    """

    __slots__ = ("shape", "dtype", "layout", "data", "strides", "addr", "__weakref__")

    def __init__(self, shape, dtype, layout="row", data=None, addr=0):
        shape = tuple(int(s) for s in shape)
        if any(s < 0 for s in shape):
            raise ShapeError(f"negative extent in shape {shape}")
        if dtype not in DTYPES:
            raise ShapeError(f"unknown dtype {dtype!r}")
        if layout not in LAYOUTS:
            raise ShapeError(f"unknown layout {layout!r}")
        size = _product(shape)
        if data is None:
            fill = 0 if dtype == "i64" else 0.0
            data = [fill] * size
        elif len(data) != size:
            raise ShapeError(f"shape {shape} needs {size} elements, got {len(data)}")
        self.shape = shape
        self.dtype = dtype
        self.layout = layout
        self.data = list(data)
        self.strides = make_strides(shape, layout)
        self.addr = addr

    @property
    def rank(self):
        return len(self.shape)

    @property
    def size(self):
        return len(self.data)

    def flat_index(self, idx):
        return sum(i * s for i, s in zip(idx, self.strides))

    def get(self, idx):
        return self.data[self.flat_index(idx)]

    def set(self, idx, value):
        self.data[self.flat_index(idx)] = value

    def addr_of(self, idx):
        return self.addr + self.flat_index(idx) * ELEM_SIZE

    def to_nested(self):
        if not self.shape:
            return self.data[0]
        if self.rank == 1:
            return [self.get((i,)) for i in range(self.shape[0])]
        return [slice_axis(self, 0, i).to_nested() for i in range(self.shape[0])]

    @classmethod
    def from_nested(cls, nested, dtype=None, layout="row"):
        shape = []
        probe = nested
        while isinstance(probe, (list, tuple)):
            shape.append(len(probe))
            probe = probe[0] if probe else None
        flat = _flatten(nested, len(shape))
        if dtype is None:
            dtype = "f64" if any(isinstance(v, float) for v in flat) else "i64"
        arr = cls(shape, dtype, layout)
        if layout == "row":
            arr.data = list(flat)
        else:
            for idx, v in zip(itertools.product(*map(range, shape)), flat):
                arr.set(idx, v)
        return arr

    @classmethod
    def scalar(cls, value):
        dtype = "f64" if isinstance(value, float) else "i64"
        return cls((), dtype, "row", [value])

    def __repr__(self):
        return f"NdArray(shape={self.shape}, dtype={self.dtype}, layout={self.layout})"


def _flatten(nested, depth):
    if depth == 0:
        return [nested]
    out = []
    for item in nested:
        out.extend(_flatten(item, depth - 1))
    return out


class View:
    """Zero-copy window into an NdArray.

    Slicing removes an axis; tiling restricts extents but keeps rank.
    `offset` is a flat element offset; `strides` are per remaining axis.
    """

    __slots__ = ("root", "offset", "shape", "strides", "is_straggler")

    def __init__(self, root, offset, shape, strides, is_straggler=False):
        self.root = root
        self.offset = offset
        self.shape = tuple(shape)
        self.strides = tuple(strides)
        self.is_straggler = is_straggler

    @property
    def rank(self):
        return len(self.shape)

    @property
    def dtype(self):
        return self.root.dtype

    @property
    def layout(self):
        return self.root.layout

    @property
    def size(self):
        return _product(self.shape)

    def flat_index(self, idx):
        return self.offset + sum(i * s for i, s in zip(idx, self.strides))

    def get(self, idx):
        return self.root.data[self.flat_index(idx)]

    def addr_of(self, idx):
        return self.root.addr + self.flat_index(idx) * ELEM_SIZE

    def to_nested(self):
        if not self.shape:
            return self.root.data[self.offset]
        if self.rank == 1:
            return [self.get((i,)) for i in range(self.shape[0])]
        return [slice_axis(self, 0, i).to_nested() for i in range(self.shape[0])]

    def __repr__(self):
        tag = ", straggler" if self.is_straggler else ""
        return f"View(shape={self.shape}{tag})"


def as_view(x):
    if isinstance(x, View):
        return x
    return View(x, 0, x.shape, x.strides)


def root_of(x):
    return x.root if isinstance(x, View) else x


ArrayValue = (NdArray, View)


def tile_view(x, axis, start, extent, is_straggler=False):
    """Same-rank window covering [start, start+extent) along `axis`."""
    v = as_view(x)
    if not 0 <= axis < v.rank:
        raise ShapeError(f"axis {axis} out of range for rank {v.rank}")
    if start < 0 or start + extent > v.shape[axis]:
        raise ShapeError(f"tile [{start}, {start + extent}) exceeds extent {v.shape[axis]}")
    shape = list(v.shape)
    shape[axis] = extent
    return View(v.root, v.offset + start * v.strides[axis], shape, v.strides, is_straggler)


def decompose(x, axis, k):
    """Split `x` along `axis` into full tiles of extent k plus a straggler.

    Returns floor(L/k) same-rank tiles of extent k in order, followed by
    one straggler tile of extent L mod k iff k does not divide L.
    Concatenating the tiles along `axis` reproduces `x`.
    """
    if k <= 0:
        raise ShapeError(f"tile extent must be positive, got {k}")
    v = as_view(x)
    if not 0 <= axis < v.rank:
        raise ShapeError(f"axis {axis} out of range for rank {v.rank}")
    length = v.shape[axis]
    tiles = []
    full = length // k
    for t in range(full):
        tiles.append(tile_view(v, axis, t * k, k))
    rem = length - full * k
    if rem:
        tiles.append(tile_view(v, axis, full * k, rem, is_straggler=True))
    return tiles


def slice_axis(x, axis, i):
    """Rank-reducing slice: drop `axis`, fixing it at index i."""
    v = as_view(x)
    if not 0 <= axis < v.rank:
        raise ShapeError(f"axis {axis} out of range for rank {v.rank}")
    if not 0 <= i < v.shape[axis]:
        raise ShapeError(f"index {i} out of bounds for extent {v.shape[axis]}")
    shape = v.shape[:axis] + v.shape[axis + 1:]
    strides = v.strides[:axis] + v.strides[axis + 1:]
    return View(v.root, v.offset + i * v.strides[axis], shape, strides)


def materialize(x, layout=None):
    """Copy a view into a fresh dense NdArray."""
    v = as_view(x)
    out = NdArray(v.shape, v.dtype, layout or v.layout)
    for idx in indices(v.shape):
        out.set(idx, v.get(idx))
    return out


def concat(parts, axis):
    """Concatenate arrays/views along `axis` into a dense NdArray."""
    if not parts:
        raise ShapeError("cannot concatenate zero parts")
    first = as_view(parts[0])
    rank = first.rank
    if not 0 <= axis < rank:
        raise ShapeError(f"axis {axis} out of range for rank {rank}")
    total = 0
    for p in parts:
        pv = as_view(p)
        if pv.rank != rank:
            raise ShapeError("rank mismatch in concat")
        for a in range(rank):
            if a != axis and pv.shape[a] != first.shape[a]:
                raise ShapeError(f"extent mismatch on axis {a} in concat")
        total += pv.shape[axis]
    shape = list(first.shape)
    shape[axis] = total
    dtype = first.dtype
    for p in parts:
        if as_view(p).dtype == "f64":
            dtype = "f64"
    out = NdArray(shape, dtype, first.layout)
    base = 0
    for p in parts:
        pv = as_view(p)
        for idx in indices(pv.shape):
            out_idx = idx[:axis] + (idx[axis] + base,) + idx[axis + 1:]
            out.set(out_idx, pv.get(idx))
        base += pv.shape[axis]
    return out


def indices(shape):
    return itertools.product(*(range(s) for s in shape))


# ---------------------------------------------------------------------------
# Scalar and elementwise arithmetic
# ---------------------------------------------------------------------------

def apply_op(op, a, b):
    """Binary scalar arithmetic with int/float promotion.

    `/` always produces float64; the other operators keep int64 when both
    operands are int64.
    """
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        return a / b
    if op == "min":
        return a if a <= b else b
    if op == "max":
        return a if a >= b else b
    raise ValueError(f"unknown operator {op!r}")


def elementwise(op, a, b, reader=None, writer=None):
    """Apply a binary operator over arrays/scalars with scalar broadcast.

    Shapes must match exactly unless one operand is a scalar. `reader` and
    `writer`, when given, are callbacks (value_source, idx) used to trace
    element traffic.
    """
    a_arr = isinstance(a, ArrayValue)
    b_arr = isinstance(b, ArrayValue)
    if not a_arr and not b_arr:
        return apply_op(op, a, b)
    if a_arr and b_arr and as_view(a).shape != as_view(b).shape:
        raise ShapeError(f"elementwise shape mismatch: {as_view(a).shape} vs {as_view(b).shape}")
    shape = as_view(a).shape if a_arr else as_view(b).shape
    dtype = "i64"
    if op == "/":
        dtype = "f64"
    if a_arr and as_view(a).dtype == "f64" or not a_arr and isinstance(a, float):
        dtype = "f64"
    if b_arr and as_view(b).dtype == "f64" or not b_arr and isinstance(b, float):
        dtype = "f64"
    out = NdArray(shape, dtype, as_view(a).layout if a_arr else as_view(b).layout)
    av = as_view(a) if a_arr else None
    bv = as_view(b) if b_arr else None
    for idx in indices(shape):
        if av is not None:
            x = av.get(idx)
            if reader:
                reader(av, idx)
        else:
            x = a
        if bv is not None:
            y = bv.get(idx)
            if reader:
                reader(bv, idx)
        else:
            y = b
        out.set(idx, apply_op(op, x, y))
        if writer:
            writer(out, idx)
    return out


# ---------------------------------------------------------------------------
# Address traces and allocation
# ---------------------------------------------------------------------------

class Allocator:
    """Simulated address space with line-aligned bases and block reuse.

    A block returns to a size-keyed free list when its owning array is
    garbage collected; reference counting frees interpreter temporaries at
    their exact death points, so reuse never aliases two live arrays and
    the resulting traces model a real allocator's temporary recycling.
    Allocation order (and hence every address) is deterministic for a
    deterministic evaluation.
    """

    def __init__(self, align=64):
        self.align = align
        self.next = 0
        self.free_blocks = {}

    def allocate(self, arr):
        import weakref
        nbytes = max(1, arr.size) * ELEM_SIZE
        nbytes = (nbytes + self.align - 1) // self.align * self.align
        blocks = self.free_blocks.get(nbytes)
        if blocks:
            addr = blocks.pop()
        else:
            addr = self.next
            self.next += nbytes
        arr.addr = addr
        weakref.finalize(arr, self._release, nbytes, addr)
        return arr

    def _release(self, nbytes, addr):
        self.free_blocks.setdefault(nbytes, []).append(addr)


def trace_addresses(x, axis_order=None):
    """Byte addresses of every element visit in the given loop order.

    `axis_order` lists axes outermost-first; default is 0..rank-1 (for a
    2-D array: row by row).
    """
    v = as_view(x)
    if axis_order is None:
        axis_order = tuple(range(v.rank))
    if sorted(axis_order) != list(range(v.rank)):
        raise ShapeError(f"axis order {axis_order} is not a permutation of 0..{v.rank - 1}")
    addresses = []
    for combo in itertools.product(*(range(v.shape[a]) for a in axis_order)):
        idx = [0] * v.rank
        for a, i in zip(axis_order, combo):
            idx[a] = i
        addresses.append(v.addr_of(tuple(idx)))
    return addresses


# ---------------------------------------------------------------------------
# Array file format
# ---------------------------------------------------------------------------

def load_array(text):
    """Parse the CLI array format: shape/dtype/layout headers, then
    whitespace-separated elements in layout order."""
    header = {}
    lines = text.strip().splitlines()
    body_start = 0
    for i, line in enumerate(lines):
        line = line.strip()
        if ":" in line and line.split(":", 1)[0] in ("shape", "dtype", "layout"):
            key, val = line.split(":", 1)
            header[key.strip()] = val.strip()
            body_start = i + 1
        else:
            break
    for key in ("shape", "dtype", "layout"):
        if key not in header:
            raise ShapeError(f"array file missing {key!r} header")
    shape = tuple(int(t) for t in header["shape"].split())
    dtype = header["dtype"]
    layout = {"row": "row", "col": "col"}.get(header["layout"])
    if layout is None:
        raise ShapeError(f"layout must be 'row' or 'col', got {header['layout']!r}")
    tokens = " ".join(lines[body_start:]).split()
    conv = int if dtype == "i64" else float
    data = [conv(t) for t in tokens]
    return NdArray(shape, dtype, layout, data)


def dump_array(arr):
    v = materialize(arr) if isinstance(arr, View) else arr
    lines = [
        "shape: " + " ".join(str(s) for s in v.shape),
        f"dtype: {v.dtype}",
        f"layout: {v.layout}",
        " ".join(repr(x) if isinstance(x, float) else str(x) for x in v.data),
    ]
    return "\n".join(lines) + "\n"
