"""The gradient oracle suite.

Central finite differences against every analytic gradient the package
computes: each differentiable op kind once, the composite episodic loss,
the second-order meta-gradient, and the KL meta-gradient of the
bootstrapped step. ``inject_fault`` deliberately corrupts one comparison to
prove the harness can fail.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import adjoint_nodes, backward, evaluate, finite_difference_check
from .bilevel import (
    bootstrap_target,
    episode_task,
    kl_matching_loss,
    mean_query_loss,
    meta_gradient_standard,
    sgd_unroll,
)
from .errors import ValidationError
from .graph import ExprGraph
from .model import EpisodeTensors, ParamSet, init_params, loss_total_nodes, register_param_leaves
from .rng import derive_seed, generator

OP_CHECK_KINDS = (
    "add", "add_bias", "sub", "mul", "mul_scalar", "matmul", "relu", "tanh",
    "exp", "log", "sum", "mean", "softmax", "log_softmax", "l2normalize",
    "scale", "concat", "index_select", "index_scatter", "transpose",
    "rowsum", "colmul", "pow_const", "reshape",
)


def build_op_check(kind: str, rng) -> tuple[ExprGraph, int, dict[str, np.ndarray]]:
    """A small scalar-valued graph exercising one op kind, with leaf values."""
    g = ExprGraph()
    m, n = int(rng.integers(2, 5)), int(rng.integers(2, 5))
    pos = lambda shape: rng.uniform(0.5, 2.0, shape)
    sym = lambda shape: rng.normal(0.0, 1.0, shape)

    if kind in ("add", "sub", "mul"):
        a, b = g.leaf("a", (m, n)), g.leaf("b", (m, n))
        vals = {"a": sym((m, n)), "b": sym((m, n))}
        y = getattr(g, kind)(a, b)
    elif kind == "add_bias":
        a, b = g.leaf("a", (m, n)), g.leaf("b", (1, n))
        vals = {"a": sym((m, n)), "b": sym((1, n))}
        y = g.add(a, b)
    elif kind == "mul_scalar":
        a, b = g.leaf("a", ()), g.leaf("b", (m, n))
        vals = {"a": sym(()), "b": sym((m, n))}
        y = g.mul(a, b)
    elif kind == "matmul":
        k = int(rng.integers(2, 5))
        a, b = g.leaf("a", (m, k)), g.leaf("b", (k, n))
        vals = {"a": sym((m, k)), "b": sym((k, n))}
        y = g.matmul(a, b)
    elif kind == "relu":
        a = g.leaf("a", (m, n))
        v = sym((m, n))
        v[np.abs(v) < 0.05] = 0.5  # keep central differences off the kink
        vals = {"a": v}
        y = g.relu(a)
    elif kind in ("tanh", "exp", "softmax", "log_softmax", "l2normalize"):
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = getattr(g, kind)(a)
    elif kind in ("log", "pow_const"):
        a = g.leaf("a", (m, n))
        vals = {"a": pos((m, n))}
        y = g.log(a) if kind == "log" else g.pow_const(a, float(rng.uniform(-2, 2)))
    elif kind in ("sum", "mean"):
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        return g, getattr(g, kind)(a), vals
    elif kind == "scale":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.scale(a, float(rng.uniform(-2, 2)))
    elif kind == "concat":
        a, b = g.leaf("a", (m, n)), g.leaf("b", (m + 1, n))
        vals = {"a": sym((m, n)), "b": sym((m + 1, n))}
        y = g.concat(a, b)
    elif kind == "index_select":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.index_select(a, rng.integers(0, m, size=m + 2))
    elif kind == "index_scatter":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.index_scatter(a, rng.integers(0, m + 2, size=m), m + 2)
    elif kind == "transpose":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.transpose(a)
    elif kind == "rowsum":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.rowsum(a)
    elif kind == "colmul":
        a, c = g.leaf("a", (m, n)), g.leaf("c", (m, 1))
        vals = {"a": sym((m, n)), "c": sym((m, 1))}
        y = g.colmul(a, c)
    elif kind == "reshape":
        a = g.leaf("a", (m, n))
        vals = {"a": sym((m, n))}
        y = g.reshape(a, (n, m))
    else:
        raise ValidationError(f"unknown op check {kind!r}")

    w = g.const(rng.normal(size=g.nodes[y].shape))
    return g, g.sum(g.mul(y, w)), vals


@dataclass(frozen=True)
class CheckRow:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance


@dataclass(frozen=True)
class GradcheckReport:
    rows: tuple[CheckRow, ...]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)


def _tiny_episode_tensors(seed: int, dim: int = 16, way: int = 2,
                          m1: int = 2, m2: int = 2) -> EpisodeTensors:
    rng = generator(derive_seed(seed, 0x6C))
    return EpisodeTensors(
        support_x=rng.uniform(size=(way * m1, dim)),
        support_y=np.repeat(np.arange(way), m1),
        query_x=rng.uniform(size=(way * m2, dim)),
        query_y=np.repeat(np.arange(way), m2),
        way=way,
    )


def _fd_on_theta(theta: ParamSet, value_fn, analytic: np.ndarray,
                 coords: np.ndarray, step: float = 1e-5) -> float:
    flat = theta.flatten()
    worst = 0.0
    for j in coords:
        base = flat[j]
        flat[j] = base + step
        hi = value_fn(theta.unflatten(flat))
        flat[j] = base - step
        lo = value_fn(theta.unflatten(flat))
        flat[j] = base
        numeric = (hi - lo) / (2.0 * step)
        denom = max(abs(analytic[j]), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic[j] - numeric) / denom)
    return worst


def run_gradcheck(scale: str = "tiny", inject_fault: bool = False,
                  tolerance: float = 1e-5) -> GradcheckReport:
    """Run the whole oracle suite; returns one row per check."""
    if scale not in ("tiny", "small"):
        raise ValidationError("scale must be tiny|small")
    reps = 1 if scale == "tiny" else 3
    rows: list[CheckRow] = []

    for kind in OP_CHECK_KINDS:
        worst = 0.0
        for rep in range(reps):
            rng = generator(derive_seed(0x9C, rep, OP_CHECK_KINDS.index(kind)))
            g, out, vals = build_op_check(kind, rng)
            worst = max(worst, finite_difference_check(g, out, sorted(vals), vals))
        if inject_fault and kind == OP_CHECK_KINDS[0]:
            worst += 1.0  # deliberate corruption: the harness must report failure
        rows.append(CheckRow(f"op:{kind}", worst, tolerance))

    # Composite episodic loss (cross-entropy + contrastive) on a small model.
    ep = _tiny_episode_tensors(1)
    theta = init_params(16, 6, 3, ep.way, seed=2)  # total dimension 179
    g = ExprGraph()
    nodes = register_param_leaves(g, theta)
    loss = loss_total_nodes(g, nodes, g.const(ep.support_x), ep.support_y, 1.0, 0.5)
    rows.append(CheckRow(
        "episodic-loss",
        finite_difference_check(g, loss, list(theta.names), theta.arrays()),
        tolerance))

    n_coords = 40 if scale == "tiny" else theta.dim
    coords = generator(derive_seed(0x9C, 0xC0))\
        .choice(theta.dim, size=min(n_coords, theta.dim), replace=False)

    # Second-order meta-gradient through two inner steps.
    L, alpha = 2, 0.1
    grads = meta_gradient_standard(theta, [ep], L, alpha)
    analytic = np.concatenate([grads[n].data.reshape(-1) for n in theta])
    rows.append(CheckRow(
        "meta-gradient",
        _fd_on_theta(theta, lambda t: mean_query_loss(t, [ep], L, alpha),
                     analytic, coords),
        tolerance))

    # KL meta-gradient of the bootstrapped step (target held fixed).
    delta = 2
    target = bootstrap_target(theta, ep, L, delta, alpha)
    g2 = ExprGraph()
    params = register_param_leaves(g2, theta)
    trail, _ = sgd_unroll(g2, params, episode_task(ep, 1.0, 0.5).support, L, alpha)
    from .bilevel import _log_predictive_values, kl_matching_nodes
    kl = kl_matching_nodes(g2, trail[-1], g2.const(ep.query_x),
                           _log_predictive_values(target, ep.query_x))
    adj = adjoint_nodes(g2, kl, [params[n] for n in theta])
    values = evaluate(g2, theta.arrays(), check_finite=False)
    analytic_kl = np.concatenate(
        [values.array(adj[params[n]]).reshape(-1) for n in theta])

    def kl_value(t: ParamSet) -> float:
        from .bilevel import inner_adapt
        w = inner_adapt(t, ep, L, alpha).final
        g3 = ExprGraph()
        kl_node = kl_matching_loss(target, w, ep.query_x, g3)
        return evaluate(g3, w.arrays(), check_finite=False).array(kl_node).item()

    rows.append(CheckRow(
        "kl-meta-gradient",
        _fd_on_theta(theta, kl_value, analytic_kl, coords),
        tolerance))

    return GradcheckReport(tuple(rows))
