"""metaboot: episodic self-supervised meta-learning at desk scale.

Unlabeled images become pseudo-labeled few-shot episodes through seeded
augmentation; task models adapt in an inner SGD loop on a combined
cross-entropy + contrastive objective; the shared initialization updates
either through the exact second-order meta-gradient or by KL-matching a
bootstrapped target produced by running the inner loop further. Numerical
probes check the spectral characterization of good representations and the
descent behaviour of the bootstrapped outer step on small instances.
"""

from .autodiff import (
    adjoint_nodes,
    backward,
    evaluate,
    finite_difference_check,
    grad_nodes,
)
from .engine import backend_name
from .errors import GraphError, NumericError, ShapeError, ValidationError
from .graph import ExprGraph, Node
from .tensor import Tensor, tensor

__version__ = "0.1.0"

__all__ = [
    "ExprGraph",
    "GraphError",
    "Node",
    "NumericError",
    "ShapeError",
    "Tensor",
    "ValidationError",
    "adjoint_nodes",
    "backend_name",
    "backward",
    "evaluate",
    "finite_difference_check",
    "grad_nodes",
    "tensor",
    "__version__",
]
