"""Compiled core vs numpy fallback: same plans, matching numerics."""

import numpy as np
import pytest

from metaboot import engine
from metaboot.engine.plan import Plan
from metaboot.graph import ExprGraph
from metaboot.rng import generator

needs_compiled = pytest.mark.skipif(
    engine.COMPILED_BACKEND is None, reason="compiled core not built")


def _mixed_graph(seed: int):
    rng = generator(seed)
    g = ExprGraph()
    x = g.leaf("x", (6, 5))
    w = g.const(rng.normal(size=(5, 4)))
    h = g.tanh(g.add(g.matmul(x, w), g.const(rng.normal(size=(1, 4)))))
    p = g.l2normalize(h)
    sims = g.matmul(p, g.transpose(p))
    e = g.exp(g.scale(sims, 2.0))
    lg = g.log(g.rowsum(e))
    sm = g.log_softmax(g.index_select(h, [0, 2, 4, 4]))
    cat = g.concat(lg, g.rowsum(sm))
    sc = g.index_scatter(cat, rng.integers(0, 12, size=10), 12)
    out = g.add(g.mean(g.pow_const(g.exp(lg), 0.5)),
                g.sum(g.colmul(sc, g.const(rng.normal(size=(12, 1))))))
    vals = {"x": rng.normal(size=(6, 5))}
    return g, out, vals


def _run_with(backend, seed):
    g, out, vals = _mixed_graph(seed)
    plan = Plan(g, backend=backend)
    plan.sync()
    for k, v in vals.items():
        plan.set_leaf(k, v)
    plan.run()
    return plan.value(out)


@needs_compiled
@pytest.mark.parametrize("seed", range(10))
def test_backends_agree(seed):
    a = _run_with(engine.NUMPY_BACKEND, seed)
    b = _run_with(engine.COMPILED_BACKEND, seed)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-12)


@needs_compiled
def test_compiled_rerun_bitwise():
    g, out, vals = _mixed_graph(3)
    plan = Plan(g, backend=engine.COMPILED_BACKEND)
    plan.sync()
    for k, v in vals.items():
        plan.set_leaf(k, v)
    plan.run()
    first = plan.value(out)
    plan.run()
    assert np.array_equal(first, plan.value(out))


@needs_compiled
def test_opcode_tables_match():
    from metaboot.engine import _ckernels
    from metaboot.engine.opcodes import OP_NAMES

    assert tuple(_ckernels.OP_NAMES) == OP_NAMES
