"""Two-level optimization: inner adaptation, meta-gradients, bootstrapped targets.

Inner loop: L plain SGD steps on the support loss starting from the shared
initialization theta. In differentiable mode every step is recorded in the
graph (the update w_{k+1} = w_k - alpha * grad is built from adjoint nodes),
so the derivative of anything downstream with respect to theta is exact,
second-order terms included.

Outer loop, two variants:
  * standard: gradient of the mean query loss at w^L with respect to theta;
  * bootstrapped: the inner trajectory is continued for delta further steps
    to w^{L+delta} (the target, fully detached), and theta descends the mean
    KL divergence KL(pi_target || pi_student) between predictive
    distributions on the query views, with only the student path w^L(theta)
    differentiated.

Episode losses are averaged over the K episodes of a batch in fixed order,
so meta steps are deterministic; parallel episode processing must reduce in
episode order to preserve that.

Every routine also accepts a plain Task (a pair of loss builders) instead
of an episode; the scalar quadratic family used by the closed-form oracles
goes through exactly the same machinery as episodic training.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass

import numpy as np

from .autodiff import adjoint_nodes, evaluate
from .errors import GraphError, ValidationError
from .graph import ExprGraph
from .model import (
    EpisodeTensors,
    ParamSet,
    forward_nodes,
    loss_total_nodes,
    register_param_leaves,
)
from .tensor import Tensor

LossBuilder = Callable[[ExprGraph, Mapping[str, int]], int]


@dataclass(frozen=True)
class Task:
    """Support and query objectives as graph builders over parameter nodes."""

    support: LossBuilder
    query: LossBuilder


def episode_task(episode: EpisodeTensors, lam: float, tau: float) -> Task:
    def side(x: np.ndarray, y: np.ndarray) -> LossBuilder:
        def build(graph: ExprGraph, params: Mapping[str, int]) -> int:
            return loss_total_nodes(graph, params, graph.const(x), y, lam, tau)
        return build

    return Task(side(episode.support_x, episode.support_y),
                side(episode.query_x, episode.query_y))


def quadratic_task(center: ParamSet) -> Task:
    """l(w) = 0.5 * sum((w - c)^2); the closed-form oracle family."""

    def build(graph: ExprGraph, params: Mapping[str, int]) -> int:
        parts = None
        for name, c in center.items():
            d = graph.sub(params[name], graph.const(c.data))
            term = graph.sum(graph.mul(d, d))
            parts = term if parts is None else graph.add(parts, term)
        return graph.scale(parts, 0.5)

    return Task(build, build)


def _as_task(obj, lam: float, tau: float) -> Task:
    if isinstance(obj, Task):
        return obj
    if isinstance(obj, EpisodeTensors):
        return episode_task(obj, lam, tau)
    raise ValidationError(f"expected EpisodeTensors or Task, got {type(obj).__name__}")


def sgd_unroll(graph: ExprGraph, params: Mapping[str, int], loss_builder: LossBuilder,
               steps: int, alpha: float) -> tuple[list[dict[str, int]], list[int]]:
    """Record `steps` differentiable SGD steps; returns per-step params and losses.

    The first entry of the returned trail is the starting parameter map, the
    last is w^steps.
    """
    if steps < 0:
        raise ValidationError("step count must be >= 0")
    if alpha <= 0:
        raise ValidationError("inner learning rate must be positive")
    trail = [dict(params)]
    losses = []
    current = dict(params)
    for _ in range(steps):
        loss = loss_builder(graph, current)
        losses.append(loss)
        grads = adjoint_nodes(graph, loss, [current[n] for n in current])
        current = {
            name: graph.sub(current[name], graph.scale(grads[current[name]], alpha))
            for name in current
        }
        trail.append(current)
    return trail, losses


@dataclass(frozen=True)
class InnerTrajectory:
    """Parameter snapshots w^0 = theta ... w^L and per-step support losses."""

    steps: tuple[ParamSet, ...]
    support_losses: tuple[float, ...]

    @property
    def final(self) -> ParamSet:
        return self.steps[-1]


def _numeric_sgd(theta: ParamSet, loss_builder: LossBuilder, steps: int,
                 alpha: float) -> InnerTrajectory:
    """Plain SGD on fresh single-step graphs; returns concrete parameter values."""
    snapshots = [theta]
    losses = []
    current = theta
    for _ in range(steps):
        graph = ExprGraph()
        nodes = register_param_leaves(graph, current)
        loss = loss_builder(graph, nodes)
        grads = adjoint_nodes(graph, loss, [nodes[n] for n in current])
        values = evaluate(graph, current.arrays(), check_finite=False)
        losses.append(values.array(loss).item())
        current = current.updated(
            {n: values.array(grads[nodes[n]]) for n in current}, alpha)
        snapshots.append(current)
    return InnerTrajectory(tuple(snapshots), tuple(losses))


def inner_adapt(theta: ParamSet, support, L: int, alpha: float,
                lam: float = 1.0, tau: float = 0.5,
                graph: ExprGraph | None = None, differentiable: bool = False):
    """L SGD steps on the support loss from theta.

    Non-differentiable mode returns an InnerTrajectory of concrete
    ParamSets. Differentiable mode records the steps into ``graph`` and
    returns (trail of name->node-id maps, support loss node ids); evaluating
    the graph at theta reproduces the numeric trajectory bitwise.
    """
    if L < 0:
        raise ValidationError("L must be >= 0")
    task = _as_task(support, lam, tau)
    if not differentiable:
        return _numeric_sgd(theta, task.support, L, alpha)
    if graph is None:
        raise GraphError("differentiable adaptation needs a graph")
    params = register_param_leaves(graph, theta)
    return sgd_unroll(graph, params, task.support, L, alpha)


def bootstrap_target(theta: ParamSet, task, L: int, delta: int, alpha: float,
                     lam: float = 1.0, tau: float = 0.5) -> ParamSet:
    """w^{L+delta}: the inner trajectory continued delta steps, detached.

    No gradient flows from the result into theta; the target acts as the
    teacher. Identical arithmetic to inner adaptation, so the result equals
    the final step of a single (L+delta)-step run bitwise.
    """
    if delta < 1:
        raise ValidationError("delta must be >= 1")
    task = _as_task(task, lam, tau)
    return _numeric_sgd(theta, task.support, L + delta, alpha).final


def _episode_all_views_builder(episode: EpisodeTensors, lam: float,
                               tau: float) -> LossBuilder:
    x = np.vstack([episode.support_x, episode.query_x])
    y = np.concatenate([episode.support_y, episode.query_y])

    def build(graph: ExprGraph, params: Mapping[str, int]) -> int:
        return loss_total_nodes(graph, params, graph.const(x), y, lam, tau)

    return build


def bootstrap_teacher(theta: ParamSet, episode, L: int, delta: int, alpha: float,
                      lam: float = 1.0, tau: float = 0.5,
                      target_objective: str = "query") -> ParamSet:
    """Teacher weights: L support steps, then delta steps on a chosen objective.

    Which objective the delta continuation descends is configurable
    (support keeps the plain trajectory of ``bootstrap_target``; query and
    episode give the teacher data the student has not fit, which avoids the
    degenerate fixed point where adaptation stops changing predictions).
    """
    if target_objective == "support":
        return bootstrap_target(theta, episode, L, delta, alpha, lam, tau)
    if delta < 1:
        raise ValidationError("delta must be >= 1")
    task = _as_task(episode, lam, tau)
    base = _numeric_sgd(theta, task.support, L, alpha).final
    if target_objective == "query":
        builder = task.query
    elif target_objective == "episode":
        if not isinstance(episode, EpisodeTensors):
            raise ValidationError("episode target objective needs EpisodeTensors")
        builder = _episode_all_views_builder(episode, lam, tau)
    else:
        raise ValidationError(
            f"target_objective must be support|query|episode, got {target_objective!r}")
    return _numeric_sgd(base, builder, delta, alpha).final


def _log_predictive_values(params: ParamSet, views: np.ndarray) -> np.ndarray:
    graph = ExprGraph()
    nodes = {k: graph.const(v.data) for k, v in params.items()}
    out = forward_nodes(graph, nodes, graph.const(views))
    node = graph.log_softmax(out.logits)
    return evaluate(graph, {}, check_finite=False).array(node)


def kl_matching_nodes(graph: ExprGraph, student: Mapping[str, int],
                      query_views_node: int, target_log_probs: np.ndarray) -> int:
    """Mean-over-views KL(pi_target || pi_student), target held constant."""
    log_pt = graph.const(target_log_probs)
    pt = graph.const(np.exp(target_log_probs))
    student_logits = forward_nodes(graph, student, query_views_node).logits
    gap = graph.sub(log_pt, graph.log_softmax(student_logits))
    m = target_log_probs.shape[0]
    return graph.scale(graph.sum(graph.mul(pt, gap)), 1.0 / m)


def kl_matching_loss(target: ParamSet, student: ParamSet, query_views,
                     graph: ExprGraph) -> int:
    """Spec-shaped KL node: student enters as leaves, target as constants."""
    views = np.asarray(query_views, dtype=np.float64)
    student_nodes = register_param_leaves(graph, student)
    log_pt = _log_predictive_values(target, views)
    return kl_matching_nodes(graph, student_nodes, graph.const(views), log_pt)


@dataclass(frozen=True)
class MetaUpdateReport:
    outer_loss: float
    kl_value: float | None
    grad_norm: float
    theta_before: ParamSet
    theta_after: ParamSet


def _mean_over(graph: ExprGraph, losses: list[int]) -> int:
    total = losses[0]
    for nid in losses[1:]:
        total = graph.add(total, nid)
    return graph.scale(total, 1.0 / len(losses))


def meta_gradient_standard(theta: ParamSet, episodes: list, L: int,
                           alpha: float, lam: float = 1.0, tau: float = 0.5,
                           first_order: bool = False) -> dict[str, Tensor]:
    """Gradient w.r.t. theta of the mean query loss at the adapted weights w^L.

    Exact mode differentiates through all L inner steps. First-order mode
    treats w^L as a constant of theta and returns the query-loss gradient
    evaluated at w^L; the two agree when L == 0.
    """
    if not episodes:
        raise ValidationError("need at least one episode")
    tasks = [_as_task(ep, lam, tau) for ep in episodes]
    if not first_order:
        graph = ExprGraph()
        params = register_param_leaves(graph, theta)
        query_losses = []
        for task in tasks:
            trail, _ = sgd_unroll(graph, params, task.support, L, alpha)
            query_losses.append(task.query(graph, trail[-1]))
        outer = _mean_over(graph, query_losses)
        grads = adjoint_nodes(graph, outer, [params[n] for n in theta])
        values = evaluate(graph, theta.arrays(), check_finite=False)
        return {n: Tensor(values.array(grads[params[n]])) for n in theta}

    acc = {n: np.zeros(t.shape) for n, t in theta.items()}
    for task in tasks:
        adapted = _numeric_sgd(theta, task.support, L, alpha).final
        graph = ExprGraph()
        nodes = register_param_leaves(graph, adapted)
        loss = task.query(graph, nodes)
        grads = adjoint_nodes(graph, loss, [nodes[n] for n in theta])
        values = evaluate(graph, adapted.arrays(), check_finite=False)
        for n in theta:
            acc[n] += values.array(grads[nodes[n]])
    return {n: Tensor(acc[n] / len(tasks)) for n in theta}


def _grad_norm(grads: Mapping[str, Tensor]) -> float:
    return float(np.sqrt(sum(float(np.sum(g.data ** 2)) for g in grads.values())))


def mean_query_loss(theta: ParamSet, episodes: list, L: int, alpha: float,
                    lam: float = 1.0, tau: float = 0.5) -> float:
    """f(w^L(theta)): mean over episodes of the query loss after adaptation."""
    total = 0.0
    tasks = [_as_task(ep, lam, tau) for ep in episodes]
    for task in tasks:
        adapted = _numeric_sgd(theta, task.support, L, alpha).final
        graph = ExprGraph()
        nodes = {k: graph.const(v.data) for k, v in adapted.items()}
        loss = task.query(graph, nodes)
        total += evaluate(graph, {}, check_finite=False).array(loss).item()
    return total / len(tasks)


def meta_step_standard(theta: ParamSet, episodes: list, L: int, alpha: float,
                       beta: float, lam: float = 1.0, tau: float = 0.5,
                       first_order: bool = False) -> tuple[ParamSet, MetaUpdateReport]:
    """theta' = theta - beta * d(mean query loss at w^L)/d(theta)."""
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    grads = meta_gradient_standard(theta, episodes, L, alpha, lam, tau, first_order)
    new_theta = theta.updated(grads, beta) if beta != 0.0 else theta
    outer = mean_query_loss(theta, episodes, L, alpha, lam, tau)
    report = MetaUpdateReport(outer, None, _grad_norm(grads), theta, new_theta)
    return new_theta, report


def meta_step_bootstrapped(theta: ParamSet, episodes: list[EpisodeTensors], L: int,
                           delta: int, alpha: float, beta: float,
                           lam: float = 1.0, tau: float = 0.5,
                           target_objective: str = "query",
                           ) -> tuple[ParamSet, MetaUpdateReport]:
    """One bootstrapped outer step: descend mean KL(pi_{w^{L+delta}} || pi_{w^L(theta)})."""
    if not episodes:
        raise ValidationError("need at least one episode")
    if beta < 0:
        raise ValidationError("beta must be >= 0")
    for ep in episodes:
        if not isinstance(ep, EpisodeTensors):
            raise ValidationError("bootstrapped steps need episodes with query views")
    graph = ExprGraph()
    params = register_param_leaves(graph, theta)
    kl_nodes = []
    for ep in episodes:
        target = bootstrap_teacher(theta, ep, L, delta, alpha, lam, tau,
                                   target_objective)
        log_pt = _log_predictive_values(target, ep.query_x)
        trail, _ = sgd_unroll(graph, params,
                              episode_task(ep, lam, tau).support, L, alpha)
        kl_nodes.append(kl_matching_nodes(graph, trail[-1],
                                          graph.const(ep.query_x), log_pt))
    outer = _mean_over(graph, kl_nodes)
    grads = adjoint_nodes(graph, outer, [params[n] for n in theta])
    values = evaluate(graph, theta.arrays(), check_finite=False)
    grad_tensors = {n: Tensor(values.array(grads[params[n]])) for n in theta}
    kl_value = values.array(outer).item()
    new_theta = theta.updated(grad_tensors, beta) if beta != 0.0 else theta
    report = MetaUpdateReport(kl_value, kl_value, _grad_norm(grad_tensors),
                              theta, new_theta)
    return new_theta, report


@dataclass(frozen=True)
class ProbeRow:
    beta: float
    change: float
    kl: float
    predicted_change: float


def theorem2_probe(theta: ParamSet, episodes: list[EpisodeTensors], L: int,
                   delta: int, alpha: float, beta_grid: list[float],
                   lam: float = 1.0, tau: float = 0.5,
                   target_objective: str = "query") -> list[ProbeRow]:
    """Descent probe for the bootstrapped step.

    For each beta (positive, decreasing) performs one bootstrapped meta step
    and reports the change f(w^L(theta')) - f(w^L(theta)) in mean query
    loss, together with the KL value at theta and the first-order prediction
    -(beta/alpha) * KL.
    """
    if any(b <= 0 for b in beta_grid):
        raise ValidationError("beta grid must be positive")
    if any(b2 >= b1 for b1, b2 in zip(beta_grid, beta_grid[1:])):
        raise ValidationError("beta grid must be decreasing")
    base = mean_query_loss(theta, episodes, L, alpha, lam, tau)
    rows = []
    for beta in beta_grid:
        new_theta, report = meta_step_bootstrapped(
            theta, episodes, L, delta, alpha, beta, lam, tau, target_objective)
        rows.append(ProbeRow(
            beta,
            mean_query_loss(new_theta, episodes, L, alpha, lam, tau) - base,
            report.kl_value,
            -(beta / alpha) * report.kl_value,
        ))
    return rows
