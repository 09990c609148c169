"""Dense value grids and the reverse-mode differentiation tape.

A :class:`Grid` is a dense real array.  Grids are immutable values: every
operation returns a fresh Grid and never writes through its inputs.  When an
operation consumes a Grid bound to a :class:`Tape`, the primitive call is
recorded so :func:`reverse_accumulate` can later run the chain rule backwards
over the whole computation.
"""

from __future__ import annotations

from typing import Callable, Mapping

import numpy as np

__all__ = [
    "Grid",
    "Tape",
    "GradientMap",
    "GridError",
    "ShapeError",
    "NonFiniteError",
    "DisconnectedOutputError",
    "reverse_accumulate",
    "finite_difference_check",
    "set_finite_checks",
    "finite_checks_enabled",
]


class GridError(Exception):
    """Base class for grid/tape errors."""


class ShapeError(GridError):
    """Operand shapes are invalid for a primitive."""


class NonFiniteError(GridError):
    """An operation produced NaN or Inf."""


class DisconnectedOutputError(GridError):
    """A requested parameter is not a leaf of the tape."""


_FLOAT_DTYPES = (np.float32, np.float64)

# Per-op finiteness validation.  On by default; the training loop switches it
# off for throughput and instead checks the scalar loss every step.
_finite_checks = True


def set_finite_checks(enabled: bool) -> bool:
    """Toggle per-operation NaN/Inf validation; returns the previous value."""
    global _finite_checks
    previous = _finite_checks
    _finite_checks = bool(enabled)
    return previous


def finite_checks_enabled() -> bool:
    return _finite_checks


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        arr = arr.astype(dtype, copy=False)
    elif arr.dtype not in _FLOAT_DTYPES:
        arr = arr.astype(np.float64)
    return arr


def _contig(arr: np.ndarray) -> np.ndarray:
    """Materialize a contiguous copy without promoting 0-d arrays to 1-d."""
    return arr if arr.flags["C_CONTIGUOUS"] else np.ascontiguousarray(arr).reshape(arr.shape)


class Grid:
    """Dense N-dimensional real array, optionally tracked on a tape."""

    __slots__ = ("data", "tape", "nid")

    def __init__(self, data, tape: "Tape | None" = None, nid: int | None = None):
        arr = data if isinstance(data, np.ndarray) and data.dtype in _FLOAT_DTYPES else _as_array(data)
        if _finite_checks and not np.all(np.isfinite(arr)):
            raise NonFiniteError("grid constructed from non-finite data")
        self.data = arr
        self.tape = tape
        self.nid = nid

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Grid":
        """A constant view of this value: gradients will not flow past it."""
        return Grid(self.data)

    def __repr__(self):
        return f"Grid(shape={self.data.shape}, dtype={self.data.dtype}, tracked={self.nid is not None})"

    # Arithmetic operators are attached by minimoco.ops at import time.


def as_grid(value, like: Grid | None = None) -> Grid:
    """Coerce a raw number or array to a constant Grid."""
    if isinstance(value, Grid):
        return value
    if like is not None and np.isscalar(value):
        return Grid(np.asarray(value, dtype=like.dtype))
    return Grid(value)


class Node:
    """One recorded primitive application."""

    __slots__ = ("op", "parents", "consts", "attrs", "saved", "data", "name")

    def __init__(self, op, parents, consts, attrs, saved, data, name=None):
        self.op = op
        # parents[i] is the producing node id for input i, or None when the
        # input was a constant; consts[i] then holds its array.
        self.parents = parents
        self.consts = consts
        self.attrs = attrs
        self.saved = saved
        self.data = data
        self.name = name


class Tape:
    """Ordered record of primitive ops, in topological order by construction."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaf_ids: dict[str, int] = {}
        self.outputs: list[int] = []

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, data, name: str | None = None) -> Grid:
        """Register a trainable leaf (parameter) on the tape."""
        arr = _as_array(data)
        node = Node("leaf", (), (), None, None, arr, name=name)
        self.nodes.append(node)
        nid = len(self.nodes) - 1
        if name is not None:
            if name in self.leaf_ids:
                raise GridError(f"duplicate leaf name {name!r}")
            self.leaf_ids[name] = nid
        return Grid(arr, tape=self, nid=nid)

    def add(self, op, parents, consts, attrs, saved, data) -> int:
        self.nodes.append(Node(op, parents, consts, attrs, saved, data))
        return len(self.nodes) - 1

    def mark_output(self, grid: Grid) -> None:
        if grid.tape is not self or grid.nid is None:
            raise GridError("output grid is not tracked on this tape")
        self.outputs.append(grid.nid)

    def output_node(self) -> Node:
        if not self.outputs:
            raise GridError("tape has no marked output")
        return self.nodes[self.outputs[-1]]

    def replay(self) -> bool:
        """Re-execute the recorded forward pass and compare bit-for-bit.

        Returns True when every recomputed node equals the recorded value
        exactly; raises GridError on the first mismatch.
        """
        from . import ops  # local import; ops depends on this module

        recomputed: list[np.ndarray] = []
        for i, node in enumerate(self.nodes):
            if node.op == "leaf":
                recomputed.append(node.data)
                continue
            inputs = tuple(
                recomputed[p] if p is not None else node.consts[j]
                for j, p in enumerate(node.parents)
            )
            out, _ = ops.PRIMITIVES[node.op].forward(inputs, node.attrs)
            if out.shape != node.data.shape or not np.array_equal(out, node.data):
                raise GridError(f"replay mismatch at node {i} ({node.op})")
            recomputed.append(out)
        return True


class GradientMap(dict):
    """Mapping from parameter name to its gradient Grid."""

    def array(self, name: str) -> np.ndarray:
        return self[name].data


def reverse_accumulate(tape: Tape, seed=1.0, params=None) -> GradientMap:
    """Run the chain rule backwards from the tape's marked output.

    ``seed`` is the cotangent of the output (shape must match).  Returns one
    gradient entry for every named leaf; leaves the output does not depend on
    receive zero grids.  ``params`` optionally restricts/validates the set of
    requested parameter names.
    """
    from . import ops

    if not tape.nodes:
        raise GridError("tape is empty")
    out_node_id = tape.outputs[-1] if tape.outputs else len(tape.nodes) - 1
    out_node = tape.nodes[out_node_id]

    seed_arr = seed.data if isinstance(seed, Grid) else np.asarray(seed, dtype=out_node.data.dtype)
    if seed_arr.shape != out_node.data.shape:
        seed_arr = np.broadcast_to(seed_arr, out_node.data.shape) if seed_arr.ndim == 0 else seed_arr
    if seed_arr.shape != out_node.data.shape:
        raise ShapeError(
            f"seed shape {seed_arr.shape} does not match output shape {out_node.data.shape}"
        )

    if params is not None:
        missing = [p for p in params if p not in tape.leaf_ids]
        if missing:
            raise DisconnectedOutputError(f"parameters not on tape: {missing}")

    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[out_node_id] = _contig(seed_arr.astype(out_node.data.dtype, copy=False))

    for nid in range(out_node_id, -1, -1):
        g = grads[nid]
        if g is None:
            continue
        node = tape.nodes[nid]
        if node.op == "leaf":
            continue
        needed = tuple(p is not None for p in node.parents)
        input_grads = ops.PRIMITIVES[node.op].backward(g, node.saved, node.attrs, needed)
        for j, parent in enumerate(node.parents):
            if parent is None:
                continue
            ig = input_grads[j]
            if ig is None:
                continue
            if grads[parent] is None:
                grads[parent] = ig
            else:
                grads[parent] = grads[parent] + ig
        # Free backward state as soon as the node is consumed.
        grads[nid] = None

    names = params if params is not None else list(tape.leaf_ids)
    out = GradientMap()
    for name in names:
        nid = tape.leaf_ids[name]
        g = grads[nid]
        if g is None:
            g = np.zeros_like(tape.nodes[nid].data)
        out[name] = Grid(_contig(g))
    return out


def finite_difference_check(
    fn: Callable[[Mapping[str, Grid]], Grid],
    point: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Compare the taped gradient of a scalar function with central differences.

    ``fn`` receives a mapping of name -> Grid and must return a scalar Grid;
    it is evaluated once on tape leaves for the analytic gradient and then
    repeatedly on constants for the numeric one.  Returns the maximum over all
    coordinates of ``|analytic - numeric| / max(1, |analytic|, |numeric|)``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    arrays = {k: np.asarray(v, dtype=np.float64) for k, v in point.items()}

    tape = Tape()
    leaves = {k: tape.leaf(v, name=k) for k, v in arrays.items()}
    out = fn(leaves)
    if out.data.shape != ():
        raise ShapeError(f"fn must return a scalar, got shape {out.data.shape}")
    tape.mark_output(out)
    analytic = reverse_accumulate(tape, 1.0)

    def eval_at(values: Mapping[str, np.ndarray]) -> float:
        result = fn({k: Grid(v) for k, v in values.items()})
        return float(result.data)

    worst = 0.0
    for name, base in arrays.items():
        grad = analytic[name].data
        flat = base.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = eval_at(arrays)
            flat[i] = orig - eps
            lo = eval_at(arrays)
            flat[i] = orig
            if not (np.isfinite(hi) and np.isfinite(lo)):
                raise NonFiniteError(
                    f"non-finite perturbation output at {name}[{i}]"
                )
            numeric = (hi - lo) / (2.0 * eps)
            ana = float(grad.reshape(-1)[i])
            err = abs(ana - numeric) / max(1.0, abs(ana), abs(numeric))
            if err > worst:
                worst = err
    return worst
