"""Exception types shared across the package."""

from __future__ import annotations


class ValidationError(ValueError):
    """Arguments or configuration outside their documented ranges."""


class GraphError(ValueError):
    """Malformed expression-graph use (unknown leaf, non-scalar output, ...)."""


class ShapeError(GraphError):
    """Operand shapes violate an operation's shape rule."""

    def __init__(self, op: str, node_id: int | None, expected: str, actual: str):
        self.op = op
        self.node_id = node_id
        self.expected = expected
        self.actual = actual
        where = f" at node {node_id}" if node_id is not None else ""
        super().__init__(f"{op}{where}: expected {expected}, got {actual}")


class NumericError(ArithmeticError):
    """A computation produced NaN/Inf where finite values are required."""
