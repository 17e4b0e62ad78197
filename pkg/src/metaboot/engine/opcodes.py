"""Opcode table shared by the evaluator backends.

The compiled backend hard-codes these integers; ``engine.__init__`` checks
its exported table against this one at import and falls back to the numpy
evaluator on mismatch.
"""

from __future__ import annotations

from enum import IntEnum


class Op(IntEnum):
    LEAF = 0
    CONST = 1
    ADD = 2            # same-shape elementwise
    ADD_BIAS = 3       # (m,n) + (1,n), row-broadcast
    SUB = 4
    MUL = 5
    MUL_SCALAR = 6     # parents (scalar, tensor)
    MATMUL = 7
    RELU = 8
    TANH = 9
    EXP = 10
    LOG = 11
    SUM = 12           # -> scalar
    MEAN = 13          # -> scalar
    SOFTMAX = 14       # per row
    LOG_SOFTMAX = 15   # per row
    L2NORM_ROWS = 16   # per row, eps-guarded
    SCALE = 17         # constant * tensor
    CONCAT_ROWS = 18
    INDEX_SELECT = 19  # select rows
    TRANSPOSE = 20
    ROWSUM = 21        # (m,n) -> (m,1)
    COLMUL = 22        # (m,n) * (m,1), column-broadcast
    POW_CONST = 23     # x ** c elementwise
    GT_ZERO_MASK = 24  # 1.0 where x > 0 else 0.0
    INDEX_SCATTER = 25 # rows into zeros, duplicates accumulate
    RESHAPE = 26


OP_NAMES: tuple[str, ...] = tuple(op.name for op in Op)

# Row 2-norms are guarded by this epsilon inside the squared norm so the
# all-zero row evaluates to zero instead of 0/0; the backward rule uses the
# same constant, which keeps analytic gradients exact for the guarded map.
L2NORM_EPS = 1e-30

# Public operation-kind names (what a Node reports), one per family of
# shape-resolved opcodes.
KIND_OF_OP = {
    Op.LEAF: "leaf",
    Op.CONST: "const",
    Op.ADD: "add",
    Op.ADD_BIAS: "add",
    Op.SUB: "sub",
    Op.MUL: "mul",
    Op.MUL_SCALAR: "mul",
    Op.MATMUL: "matmul",
    Op.RELU: "relu",
    Op.TANH: "tanh",
    Op.EXP: "exp",
    Op.LOG: "log",
    Op.SUM: "sum",
    Op.MEAN: "mean",
    Op.SOFTMAX: "softmax",
    Op.LOG_SOFTMAX: "log-softmax",
    Op.L2NORM_ROWS: "l2-normalize",
    Op.SCALE: "scale",
    Op.CONCAT_ROWS: "concat",
    Op.INDEX_SELECT: "index-select",
    Op.TRANSPOSE: "transpose",
    Op.ROWSUM: "rowsum",
    Op.COLMUL: "colmul",
    Op.POW_CONST: "pow-const",
    Op.GT_ZERO_MASK: "gt-zero-mask",
    Op.INDEX_SCATTER: "index-scatter",
    Op.RESHAPE: "reshape",
}
