"""Reverse-mode differentiation over expression graphs.

``backward`` constructs the adjoint computation *as new graph nodes*, built
from the same operation set it differentiates. Gradients are therefore
themselves differentiable, and nesting ``backward`` yields exact
higher-order derivatives (the meta-gradients of the outer training loop
need one such nesting). With ``create_graph=False`` the adjoint nodes are
evaluated immediately and returned as plain tensors.

``finite_difference_check`` is the independent oracle used throughout the
test suite: central differences on every coordinate of every requested
leaf.
"""

from __future__ import annotations

from collections.abc import Mapping

import numpy as np

from .engine.opcodes import L2NORM_EPS, Op
from .engine.plan import Plan
from .errors import GraphError, NumericError
from .graph import ExprGraph, Node
from .tensor import Tensor

_PLAN_ATTR = "_metaboot_plan"


def _plan(graph: ExprGraph) -> Plan:
    plan = getattr(graph, _PLAN_ATTR, None)
    if plan is None:
        plan = Plan(graph)
        setattr(graph, _PLAN_ATTR, plan)
    return plan


class GraphValues(Mapping):
    """Read-only node-id -> Tensor view of an evaluated plan."""

    def __init__(self, plan: Plan, upto: int):
        self._plan = plan
        self._upto = upto

    def __getitem__(self, nid: int) -> Tensor:
        if not (0 <= nid < self._upto):
            raise KeyError(nid)
        return Tensor(self._plan.value(nid))

    def array(self, nid: int) -> np.ndarray:
        """Value as a plain ndarray copy (no finiteness check)."""
        if not (0 <= nid < self._upto):
            raise KeyError(nid)
        return self._plan.value(nid)

    def __iter__(self):
        return iter(range(self._upto))

    def __len__(self):
        return self._upto


def evaluate(graph: ExprGraph, leaf_values: Mapping[str, object],
             check_finite: bool = True) -> GraphValues:
    """Forward values for all nodes, computed in topological order.

    Deterministic: identical leaf values give bitwise-identical results.
    """
    plan = _plan(graph)
    plan.sync()
    missing = set(graph.leaves) - set(leaf_values)
    if missing:
        raise GraphError(f"missing leaf values: {sorted(missing)}")
    for name, value in leaf_values.items():
        if isinstance(value, Tensor):
            value = value.data
        plan.set_leaf(name, np.asarray(value, dtype=np.float64))
    plan.run(0, plan.n_synced)
    if check_finite:
        for node in graph.nodes:
            if node.op in (Op.LEAF, Op.CONST):
                continue
            if not np.all(np.isfinite(plan.buffers[node.nid])):
                raise NumericError(
                    f"non-finite value at node {node.nid} ({node.kind})")
    return GraphValues(plan, plan.n_synced)


# -- adjoint construction ----------------------------------------------

def _ones_like(g: ExprGraph, shape) -> int:
    from .graph import buffer_shape
    return g.const(np.ones(buffer_shape(shape)).reshape(shape))


def _as_2d(g: ExprGraph, nid: int) -> tuple[int, bool]:
    shape = g.nodes[nid].shape
    if len(shape) == 2:
        return nid, False
    rows = 1 if shape == () else 1
    cols = 1 if shape == () else shape[0]
    return g.reshape(nid, (rows, cols)), True


def _vjp(g: ExprGraph, node: Node, grad: int) -> list[tuple[int, int]]:
    """Adjoint contributions (parent_id, contribution_id) for one node."""
    op = node.op
    y = node.nid
    if op == Op.ADD:
        return [(node.parents[0], grad), (node.parents[1], grad)]
    if op == Op.ADD_BIAS:
        col = g.rowsum(g.transpose(grad))
        return [(node.parents[0], grad), (node.parents[1], g.transpose(col))]
    if op == Op.SUB:
        return [(node.parents[0], grad), (node.parents[1], g.scale(grad, -1.0))]
    if op == Op.MUL:
        a, b = node.parents
        return [(a, g.mul(grad, b)), (b, g.mul(grad, a))]
    if op == Op.MUL_SCALAR:
        s, t = node.parents
        return [(s, g.sum(g.mul(grad, t))), (t, g.mul(s, grad))]
    if op == Op.MATMUL:
        a, b = node.parents
        return [(a, g.matmul(grad, g.transpose(b))),
                (b, g.matmul(g.transpose(a), grad))]
    if op == Op.RELU:
        (x,) = node.parents
        return [(x, g.mul(grad, g.gt_zero_mask(x)))]
    if op == Op.TANH:
        (x,) = node.parents
        one = _ones_like(g, node.shape)
        return [(x, g.mul(grad, g.sub(one, g.mul(y, y))))]
    if op == Op.EXP:
        (x,) = node.parents
        return [(x, g.mul(grad, y))]
    if op == Op.LOG:
        (x,) = node.parents
        return [(x, g.mul(grad, g.pow_const(x, -1.0)))]
    if op == Op.SUM:
        (x,) = node.parents
        return [(x, g.mul(grad, _ones_like(g, g.nodes[x].shape)))]
    if op == Op.MEAN:
        (x,) = node.parents
        size = int(np.prod(g.nodes[x].shape or (1,)))
        return [(x, g.mul(g.scale(grad, 1.0 / size), _ones_like(g, g.nodes[x].shape)))]
    if op == Op.SOFTMAX:
        (x,) = node.parents
        g2, wrap = _as_2d(g, grad)
        y2, _ = _as_2d(g, y) if wrap else (y, False)
        gy = g.mul(g2, y2)
        dx = g.sub(gy, g.colmul(y2, g.rowsum(gy)))
        return [(x, g.reshape(dx, g.nodes[x].shape) if wrap else dx)]
    if op == Op.LOG_SOFTMAX:
        (x,) = node.parents
        g2, wrap = _as_2d(g, grad)
        y2, _ = _as_2d(g, y) if wrap else (y, False)
        dx = g.sub(g2, g.colmul(g.exp(y2), g.rowsum(g2)))
        return [(x, g.reshape(dx, g.nodes[x].shape) if wrap else dx)]
    if op == Op.L2NORM_ROWS:
        (x,) = node.parents
        g2, wrap = _as_2d(g, grad)
        y2, _ = _as_2d(g, y) if wrap else (y, False)
        x2, _ = _as_2d(g, x) if wrap else (x, False)
        rows = g.nodes[x2].shape[0]
        num = g.sub(g2, g.colmul(y2, g.rowsum(g.mul(g2, y2))))
        sq = g.add(g.rowsum(g.mul(x2, x2)), g.const(np.full((rows, 1), L2NORM_EPS)))
        dx = g.colmul(num, g.pow_const(sq, -0.5))
        return [(x, g.reshape(dx, g.nodes[x].shape) if wrap else dx)]
    if op == Op.SCALE:
        (x,) = node.parents
        return [(x, g.scale(grad, node.scalar))]
    if op == Op.CONCAT_ROWS:
        out = []
        offset = 0
        for p in node.parents:
            rows = g.nodes[p].shape[0]
            out.append((p, g.index_select(grad, np.arange(offset, offset + rows))))
            offset += rows
        return out
    if op == Op.INDEX_SELECT:
        (x,) = node.parents
        return [(x, g.index_scatter(grad, node.aux, g.nodes[x].shape[0]))]
    if op == Op.TRANSPOSE:
        (x,) = node.parents
        return [(x, g.transpose(grad))]
    if op == Op.ROWSUM:
        (x,) = node.parents
        return [(x, g.colmul(_ones_like(g, g.nodes[x].shape), grad))]
    if op == Op.COLMUL:
        a, c = node.parents
        return [(a, g.colmul(grad, c)), (c, g.rowsum(g.mul(grad, a)))]
    if op == Op.POW_CONST:
        (x,) = node.parents
        c = node.scalar
        return [(x, g.mul(grad, g.scale(g.pow_const(x, c - 1.0), c)))]
    if op == Op.GT_ZERO_MASK:
        return []  # derivative zero almost everywhere
    if op == Op.INDEX_SCATTER:
        (x,) = node.parents
        return [(x, g.index_select(grad, node.aux))]
    if op == Op.RESHAPE:
        (x,) = node.parents
        return [(x, g.reshape(grad, g.nodes[x].shape))]
    raise GraphError(f"no differentiation rule for {node.kind}")  # pragma: no cover


def adjoint_nodes(graph: ExprGraph, output: int,
                  wrt_ids: list[int]) -> dict[int, int]:
    """Append adjoint nodes for d(output)/d(node) and return their ids.

    The output node must be scalar-valued. The requested nodes are treated
    as independent variables: the sweep does not descend through them (an
    unrolled SGD step differentiates its loss w.r.t. the current weights,
    not the weights of earlier steps). Nodes the output does not depend on
    get an explicit zero node. Accumulation order is fixed (descending node
    id), so repeated runs build identical graphs.
    """
    nodes = graph.nodes
    if not (0 <= output < len(nodes)):
        raise GraphError(f"unknown output node {output!r}")
    if int(np.prod(nodes[output].shape or (1,))) != 1:
        raise GraphError(
            f"backward needs a scalar output, node {output} has shape "
            f"{nodes[output].shape}")
    targets = set(wrt_ids)
    adjoint: dict[int, int] = {output: _ones_like(graph, nodes[output].shape)}
    for nid in range(output, -1, -1):
        grad = adjoint.get(nid)
        if grad is None or nid in targets:
            continue
        node = nodes[nid]
        if not node.parents:
            continue
        for parent, contrib in _vjp(graph, node, grad):
            if graph.nodes[contrib].shape != nodes[parent].shape:
                contrib = graph.reshape(contrib, nodes[parent].shape)
            prev = adjoint.get(parent)
            adjoint[parent] = contrib if prev is None else graph.add(prev, contrib)

    out = {}
    for nid in wrt_ids:
        got = adjoint.get(nid)
        out[nid] = got if got is not None else graph.const(np.zeros(nodes[nid].shape))
    return out


def grad_nodes(graph: ExprGraph, output: int, wrt: list[str]) -> dict[str, int]:
    """Adjoint node ids of a scalar output w.r.t. named leaves."""
    leaf_ids = []
    for name in wrt:
        if name not in graph.leaves:
            raise GraphError(f"unknown leaf {name!r}")
        leaf_ids.append(graph.leaves[name])
    adj = adjoint_nodes(graph, output, leaf_ids)
    return {name: adj[graph.leaves[name]] for name in wrt}


def backward(graph: ExprGraph, output: int, wrt: list[str],
             create_graph: bool = False,
             leaf_values: Mapping[str, object] | None = None):
    """Adjoints of a scalar output with respect to named leaves.

    With ``create_graph`` set, returns a name -> node-id map of
    differentiable adjoint nodes. Otherwise evaluates them (reusing forward
    values from the most recent ``evaluate`` unless ``leaf_values`` is
    given) and returns a name -> Tensor map.
    """
    grads = grad_nodes(graph, output, wrt)
    if create_graph:
        return grads
    plan = _plan(graph)
    if leaf_values is not None:
        evaluate(graph, leaf_values, check_finite=False)
    elif plan.evaluated_upto == 0:
        raise GraphError("backward without leaf_values requires a prior evaluate()")
    plan.sync()
    plan.run(0, plan.n_synced)
    return {name: Tensor(plan.value(nid)) for name, nid in grads.items()}


def finite_difference_check(graph: ExprGraph, output: int, wrt: list[str],
                            leaf_values: Mapping[str, object],
                            step: float = 1e-5) -> float:
    """Worst relative error of analytic gradients vs central differences.

    The denominator is max(|analytic|, |numeric|, 1e-12) per coordinate.
    """
    if step <= 0:
        raise GraphError("finite-difference step must be positive")
    values = {k: np.array(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
              for k, v in leaf_values.items()}
    analytic = backward(graph, output, wrt, create_graph=False, leaf_values=values)

    worst = 0.0
    for name in wrt:
        base = values[name]
        grad = analytic[name].data
        flat = base.reshape(-1)
        numeric = np.empty_like(flat)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            hi = evaluate(graph, values, check_finite=False).array(output).item()
            flat[j] = orig - step
            lo = evaluate(graph, values, check_finite=False).array(output).item()
            flat[j] = orig
            numeric[j] = (hi - lo) / (2.0 * step)
        a = grad.reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), 1e-12)
        worst = max(worst, float(np.max(np.abs(a - numeric) / denom)))
    return worst
