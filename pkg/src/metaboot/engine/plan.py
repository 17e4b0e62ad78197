"""Evaluation plans: a graph flattened into per-node instructions and buffers.

A Plan owns one preallocated 2-D float64 buffer per node. Evaluation fills
buffers in id order, so re-evaluating the same graph with fresh leaf values
reuses all storage. The numeric work is done by a backend: the compiled
kernel core when available, otherwise the numpy fallback in this module.
Either backend is deterministic run-to-run; they agree with each other to
floating-point roundoff, not bitwise.
"""

from __future__ import annotations

import numpy as np

from ..errors import GraphError, ShapeError
from ..graph import ExprGraph, buffer_shape
from .opcodes import L2NORM_EPS, Op


class Plan:
    def __init__(self, graph: ExprGraph, backend=None):
        from . import active_backend

        self.graph = graph
        self.n_synced = 0
        self.ops: list[int] = []
        self.pa: list[int] = []
        self.pb: list[int] = []
        self.scalars: list[float] = []
        self.aux: list[np.ndarray | None] = []
        self.buffers: list[np.ndarray] = []
        self.evaluated_upto = 0  # buffers [0, k) hold values from the last run
        self._backend = backend if backend is not None else active_backend()
        self._compiled = None

    @property
    def backend_name(self) -> str:
        return self._backend.NAME

    def sync(self) -> None:
        """Append instructions and buffers for nodes added since the last sync."""
        nodes = self.graph.nodes
        if self.n_synced == len(nodes):
            return
        for node in nodes[self.n_synced:]:
            self.ops.append(int(node.op))
            self.pa.append(node.parents[0] if node.parents else -1)
            self.pb.append(node.parents[1] if len(node.parents) > 1 else -1)
            self.scalars.append(node.scalar)
            if node.op == Op.CONCAT_ROWS:
                self.aux.append(np.asarray(node.parents, dtype=np.int64))
            else:
                self.aux.append(node.aux)
            buf = np.empty(buffer_shape(node.shape), dtype=np.float64, order="C")
            if node.op == Op.CONST:
                np.copyto(buf, node.const)
            self.buffers.append(buf)
        self.n_synced = len(nodes)
        self._compiled = None

    def set_leaf(self, name: str, value: np.ndarray) -> None:
        nid = self.graph.leaves.get(name)
        if nid is None:
            raise GraphError(f"unknown leaf {name!r}")
        node = self.graph.nodes[nid]
        arr = np.asarray(value, dtype=np.float64)
        if tuple(arr.shape) != node.shape:
            raise ShapeError("leaf", nid, str(node.shape), str(tuple(arr.shape)))
        np.copyto(self.buffers[nid], arr.reshape(self.buffers[nid].shape))

    def run(self, start: int = 0, end: int | None = None) -> None:
        self.sync()
        end = self.n_synced if end is None else end
        if self._backend.COMPILED:
            if self._compiled is None:
                self._compiled = self._backend.compile_plan(self)
            self._compiled.run(start, end)
        else:
            run_numpy(self, start, end)
        self.evaluated_upto = max(self.evaluated_upto, end)

    def value(self, nid: int) -> np.ndarray:
        """Copy of a node's value reshaped to its logical shape."""
        shape = self.graph.nodes[nid].shape
        return self.buffers[nid].reshape(shape).copy()


def run_numpy(plan: Plan, start: int, end: int) -> None:
    """Reference evaluator. Kernel algorithms mirror the compiled core."""
    ops, pa, pb = plan.ops, plan.pa, plan.pb
    scalars, aux, buf = plan.scalars, plan.aux, plan.buffers
    for i in range(start, end):
        op = ops[i]
        if op <= Op.CONST:  # LEAF / CONST: buffers already hold the values
            continue
        o = buf[i]
        a = buf[pa[i]]
        if op == Op.ADD or op == Op.ADD_BIAS:
            np.add(a, buf[pb[i]], out=o)
        elif op == Op.SUB:
            np.subtract(a, buf[pb[i]], out=o)
        elif op == Op.MUL:
            np.multiply(a, buf[pb[i]], out=o)
        elif op == Op.MUL_SCALAR:
            np.multiply(buf[pb[i]], a[0, 0], out=o)
        elif op == Op.MATMUL:
            np.matmul(a, buf[pb[i]], out=o)
        elif op == Op.RELU:
            np.maximum(a, 0.0, out=o)
        elif op == Op.TANH:
            np.tanh(a, out=o)
        elif op == Op.EXP:
            np.exp(a, out=o)
        elif op == Op.LOG:
            np.log(a, out=o)
        elif op == Op.SUM:
            o[0, 0] = np.sum(a)
        elif op == Op.MEAN:
            o[0, 0] = np.sum(a) / a.size
        elif op == Op.SOFTMAX:
            np.subtract(a, a.max(axis=1, keepdims=True), out=o)
            np.exp(o, out=o)
            o /= o.sum(axis=1, keepdims=True)
        elif op == Op.LOG_SOFTMAX:
            m = a.max(axis=1, keepdims=True)
            lse = m + np.log(np.exp(a - m).sum(axis=1, keepdims=True))
            np.subtract(a, lse, out=o)
        elif op == Op.L2NORM_ROWS:
            s = (a * a).sum(axis=1, keepdims=True) + L2NORM_EPS
            np.divide(a, np.sqrt(s), out=o)
        elif op == Op.SCALE:
            np.multiply(a, scalars[i], out=o)
        elif op == Op.CONCAT_ROWS:
            r = 0
            for p in aux[i]:
                part = buf[p]
                o[r:r + part.shape[0]] = part
                r += part.shape[0]
        elif op == Op.INDEX_SELECT:
            np.take(a, aux[i], axis=0, out=o)
        elif op == Op.TRANSPOSE:
            np.copyto(o, a.T)
        elif op == Op.ROWSUM:
            np.sum(a, axis=1, keepdims=True, out=o)
        elif op == Op.COLMUL:
            np.multiply(a, buf[pb[i]], out=o)
        elif op == Op.POW_CONST:
            np.power(a, scalars[i], out=o)
        elif op == Op.GT_ZERO_MASK:
            o[...] = a > 0.0
        elif op == Op.INDEX_SCATTER:
            o.fill(0.0)
            np.add.at(o, aux[i], a)
        elif op == Op.RESHAPE:
            np.copyto(o, a.reshape(o.shape))
        else:  # pragma: no cover
            raise GraphError(f"unhandled opcode {op}")
