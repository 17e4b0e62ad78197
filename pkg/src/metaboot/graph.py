"""Expression graphs for reverse-mode differentiation.

An ExprGraph is an append-only DAG of numeric operations over dense float64
tensors. Nodes are identified by their position in the node list, so parent
ids always precede a node's id and the list is already a topological order.

Tensors of rank 0, 1 and 2 are supported. Broadcasting is deliberately
narrow: scalar*tensor products and row-wise bias addition ((m,n) + (1,n)).
Everything else is a shape error at construction time, which keeps the
gradient rules small and auditable.

A graph is owned by one logical thread at a time; there is no locking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .engine.opcodes import KIND_OF_OP, Op
from .errors import GraphError, ShapeError
from .tensor import Tensor

Shape = tuple[int, ...]


def buffer_shape(shape: Shape) -> tuple[int, int]:
    """Map a logical shape (rank <= 2) to the 2-D buffer shape used by the evaluators."""
    if len(shape) == 0:
        return (1, 1)
    if len(shape) == 1:
        return (1, shape[0])
    return shape  # type: ignore[return-value]


@dataclass(frozen=True, slots=True)
class Node:
    nid: int
    op: Op
    parents: tuple[int, ...]
    shape: Shape
    scalar: float = 0.0          # SCALE factor / POW_CONST exponent
    aux: np.ndarray | None = None    # int64 row indices where applicable
    const: np.ndarray | None = None  # CONST payload
    name: str | None = None          # LEAF name

    @property
    def kind(self) -> str:
        return KIND_OF_OP[self.op]


class ExprGraph:
    """Append-only operation DAG with named leaves."""

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[str, int] = {}

    # -- node insertion ------------------------------------------------

    def _push(self, op: Op, parents: tuple[int, ...], shape: Shape, **kw) -> int:
        nid = len(self.nodes)
        for p in parents:
            if not (0 <= p < nid):
                raise GraphError(f"node {nid}: parent {p} does not precede it")
        self.nodes.append(Node(nid, op, parents, shape, **kw))
        return nid

    def _shape(self, nid: int) -> Shape:
        try:
            return self.nodes[nid].shape
        except (IndexError, TypeError):
            raise GraphError(f"unknown node id {nid!r}") from None

    @staticmethod
    def _require_2d(op: str, shape: Shape) -> Shape:
        if len(shape) != 2:
            raise ShapeError(op, None, "a rank-2 tensor", str(shape))
        return shape

    # -- terminals -----------------------------------------------------

    def leaf(self, name: str, shape) -> int:
        if name in self.leaves:
            raise GraphError(f"duplicate leaf name {name!r}")
        shape = tuple(int(s) for s in shape)
        if len(shape) > 2 or any(s <= 0 for s in shape):
            raise ShapeError("leaf", None, "rank <= 2 with positive dims", str(shape))
        nid = self._push(Op.LEAF, (), shape, name=name)
        self.leaves[name] = nid
        return nid

    def const(self, values) -> int:
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim > 2:
            raise ShapeError("const", None, "rank <= 2", str(arr.shape))
        if not np.all(np.isfinite(arr)):
            raise GraphError("const contains non-finite values")
        shape = tuple(arr.shape)
        return self._push(Op.CONST, (), shape,
                          const=np.ascontiguousarray(arr.reshape(buffer_shape(shape))))

    # -- arithmetic ----------------------------------------------------

    def add(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa == sb:
            return self._push(Op.ADD, (a, b), sa)
        if len(sa) == 2 and sb == (1, sa[1]):
            return self._push(Op.ADD_BIAS, (a, b), sa)
        raise ShapeError("add", None, "equal shapes or (m,n)+(1,n)", f"{sa} + {sb}")

    def sub(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa != sb:
            raise ShapeError("sub", None, "equal shapes", f"{sa} - {sb}")
        return self._push(Op.SUB, (a, b), sa)

    def mul(self, a: int, b: int) -> int:
        sa, sb = self._shape(a), self._shape(b)
        if sa == sb:
            return self._push(Op.MUL, (a, b), sa)
        if sa == ():
            return self._push(Op.MUL_SCALAR, (a, b), sb)
        if sb == ():
            return self._push(Op.MUL_SCALAR, (b, a), sa)
        raise ShapeError("mul", None, "equal shapes or scalar*tensor", f"{sa} * {sb}")

    def matmul(self, a: int, b: int) -> int:
        sa = self._require_2d("matmul", self._shape(a))
        sb = self._require_2d("matmul", self._shape(b))
        if sa[1] != sb[0]:
            raise ShapeError("matmul", None, "(m,k) @ (k,n)", f"{sa} @ {sb}")
        return self._push(Op.MATMUL, (a, b), (sa[0], sb[1]))

    def scale(self, a: int, factor: float) -> int:
        return self._push(Op.SCALE, (a,), self._shape(a), scalar=float(factor))

    def pow_const(self, a: int, exponent: float) -> int:
        return self._push(Op.POW_CONST, (a,), self._shape(a), scalar=float(exponent))

    # -- elementwise maps ----------------------------------------------

    def relu(self, a: int) -> int:
        return self._push(Op.RELU, (a,), self._shape(a))

    def tanh(self, a: int) -> int:
        return self._push(Op.TANH, (a,), self._shape(a))

    def exp(self, a: int) -> int:
        return self._push(Op.EXP, (a,), self._shape(a))

    def log(self, a: int) -> int:
        return self._push(Op.LOG, (a,), self._shape(a))

    def gt_zero_mask(self, a: int) -> int:
        return self._push(Op.GT_ZERO_MASK, (a,), self._shape(a))

    # -- reductions and row maps ----------------------------------------

    def sum(self, a: int) -> int:
        return self._push(Op.SUM, (a,), ())

    def mean(self, a: int) -> int:
        return self._push(Op.MEAN, (a,), ())

    def softmax(self, a: int) -> int:
        sa = self._shape(a)
        if len(sa) == 0:
            raise ShapeError("softmax", None, "rank 1 or 2", str(sa))
        return self._push(Op.SOFTMAX, (a,), sa)

    def log_softmax(self, a: int) -> int:
        sa = self._shape(a)
        if len(sa) == 0:
            raise ShapeError("log-softmax", None, "rank 1 or 2", str(sa))
        return self._push(Op.LOG_SOFTMAX, (a,), sa)

    def l2normalize(self, a: int) -> int:
        sa = self._shape(a)
        if len(sa) == 0:
            raise ShapeError("l2-normalize", None, "rank 1 or 2", str(sa))
        return self._push(Op.L2NORM_ROWS, (a,), sa)

    def rowsum(self, a: int) -> int:
        sa = self._require_2d("rowsum", self._shape(a))
        return self._push(Op.ROWSUM, (a,), (sa[0], 1))

    def colmul(self, a: int, col: int) -> int:
        sa = self._require_2d("colmul", self._shape(a))
        sc = self._shape(col)
        if sc != (sa[0], 1):
            raise ShapeError("colmul", None, f"column ({sa[0]},1)", str(sc))
        return self._push(Op.COLMUL, (a, col), sa)

    # -- structural ops --------------------------------------------------

    def transpose(self, a: int) -> int:
        sa = self._require_2d("transpose", self._shape(a))
        return self._push(Op.TRANSPOSE, (a,), (sa[1], sa[0]))

    def concat(self, *parts: int) -> int:
        if len(parts) < 2:
            raise GraphError("concat needs at least two parts")
        shapes = [self._require_2d("concat", self._shape(p)) for p in parts]
        cols = shapes[0][1]
        if any(s[1] != cols for s in shapes):
            raise ShapeError("concat", None, "equal column counts",
                             str([s for s in shapes]))
        rows = sum(s[0] for s in shapes)
        return self._push(Op.CONCAT_ROWS, tuple(parts), (rows, cols))

    def index_select(self, a: int, indices) -> int:
        sa = self._require_2d("index-select", self._shape(a))
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size == 0 or idx.min() < 0 or idx.max() >= sa[0]:
            raise ShapeError("index-select", None, f"indices in [0,{sa[0]})", str(idx))
        return self._push(Op.INDEX_SELECT, (a,), (idx.size, sa[1]), aux=idx)

    def index_scatter(self, a: int, indices, rows: int) -> int:
        sa = self._require_2d("index-scatter", self._shape(a))
        idx = np.asarray(indices, dtype=np.int64).reshape(-1)
        if idx.size != sa[0]:
            raise ShapeError("index-scatter", None, f"{sa[0]} indices", str(idx.size))
        if idx.size and (idx.min() < 0 or idx.max() >= rows):
            raise ShapeError("index-scatter", None, f"indices in [0,{rows})", str(idx))
        return self._push(Op.INDEX_SCATTER, (a,), (int(rows), sa[1]), aux=idx)

    def reshape(self, a: int, shape) -> int:
        sa = self._shape(a)
        shape = tuple(int(s) for s in shape)
        if len(shape) > 2:
            raise ShapeError("reshape", None, "rank <= 2", str(shape))
        if int(np.prod(shape or (1,))) != int(np.prod(sa or (1,))):
            raise ShapeError("reshape", None, f"size {int(np.prod(sa or (1,)))}", str(shape))
        return self._push(Op.RESHAPE, (a,), shape)
