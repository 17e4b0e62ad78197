"""Training drivers: the four run modes, few-shot evaluation, ablation sweeps.

Episode shapes are fixed by the configuration, so each run builds its
differentiable graphs once as templates (parameters and view batches enter
as leaves) and re-evaluates them with fresh values every meta step; the
evaluator reuses all buffers, which keeps the hot loop inside the compiled
kernels.

Run modes:
  scratch      no meta-training; the checkpoint is the random initialization
  metric-only  single-level SGD on the episodic loss over all views; the
               trained weights serve as the shared experience
  metassl      standard second-order meta-gradient on the query loss
  bmssl        bootstrapped outer step: KL-matching toward w^{L+delta}
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import adjoint_nodes
from .bilevel import sgd_unroll
from .config import RunConfig
from .engine.plan import Plan
from .errors import NumericError, ValidationError
from .graph import ExprGraph
from .io import MetricsWriter, save_checkpoint
from .model import (
    ParamSet,
    forward_nodes,
    init_params,
    loss_cl,
    loss_total_nodes,
)
from .rng import derive_seed, generator
from .synthdata import SIZE, SyntheticDataset, load_dataset, split
from .taskgen import construct_tasks, resample_pool
from .tensor import Tensor

INPUT_DIM = SIZE * SIZE


class Template:
    """A frozen graph evaluated repeatedly with fresh leaf values."""

    def __init__(self, graph: ExprGraph, outputs: dict[str, int]):
        self.graph = graph
        self.outputs = outputs
        self.plan = Plan(graph)
        self.plan.sync()

    def run(self, leaves: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        for name, value in leaves.items():
            self.plan.set_leaf(name, value)
        self.plan.run()
        return {key: self.plan.value(nid) for key, nid in self.outputs.items()}


def _class_major_labels(way: int, per_class: int) -> np.ndarray:
    return np.repeat(np.arange(way), per_class)


def _support_builder(views_node: int, labels: np.ndarray, lam: float, tau: float):
    def build(graph, params):
        return loss_total_nodes(graph, params, views_node, labels, lam, tau)
    return build


class AdaptTemplate:
    """One SGD step (loss + gradients) at arbitrary weights, fixed view shape."""

    def __init__(self, theta: ParamSet, m_views: int, labels: np.ndarray,
                 lam: float, tau: float):
        g = ExprGraph()
        params = {name: g.leaf(name, t.shape) for name, t in theta.items()}
        x = g.leaf("x", (m_views, INPUT_DIM))
        loss = loss_total_nodes(g, params, x, labels, lam, tau)
        grads = adjoint_nodes(g, loss, [params[n] for n in params])
        outputs = {"loss": loss}
        outputs.update({f"g:{n}": grads[params[n]] for n in params})
        self.names = list(params)
        self.template = Template(g, outputs)

    def step(self, weights: dict[str, np.ndarray],
             x: np.ndarray) -> tuple[float, dict[str, np.ndarray]]:
        out = self.template.run({**weights, "x": x})
        return float(out["loss"]), {n: out[f"g:{n}"] for n in self.names}

    def descend(self, weights: dict[str, np.ndarray], x: np.ndarray,
                steps: int, alpha: float) -> tuple[dict[str, np.ndarray], float]:
        """`steps` SGD steps; returns final weights and the last-seen loss."""
        current = dict(weights)
        last = float("nan")
        for _ in range(steps):
            last, grads = self.step(current, x)
            current = {n: current[n] - alpha * grads[n] for n in current}
        return current, last


class PredictTemplate:
    """Log predictive distribution at arbitrary weights, fixed view shape."""

    def __init__(self, theta: ParamSet, m_views: int):
        g = ExprGraph()
        params = {name: g.leaf(name, t.shape) for name, t in theta.items()}
        x = g.leaf("x", (m_views, INPUT_DIM))
        logits = forward_nodes(g, params, x).logits
        self.template = Template(g, {"log_probs": g.log_softmax(logits)})

    def log_probs(self, weights: dict[str, np.ndarray], x: np.ndarray) -> np.ndarray:
        return self.template.run({**weights, "x": x})["log_probs"]


def build_outer_template(theta: ParamSet, cfg: RunConfig) -> Template:
    """Meta-objective template for metassl/bmssl over one K-episode batch.

    Outputs the outer loss, the mean final support loss, and d(outer)/d(theta).
    """
    way = cfg.way
    ms, mq = way * cfg.M1, way * (cfg.M - cfg.M1)
    ys = _class_major_labels(way, cfg.M1)
    yq = _class_major_labels(way, cfg.M - cfg.M1)
    g = ExprGraph()
    params = {name: g.leaf(name, t.shape) for name, t in theta.items()}
    outer_parts, inner_parts = [], []
    for e in range(cfg.K):
        xs = g.leaf(f"xs{e}", (ms, INPUT_DIM))
        builder = _support_builder(xs, ys, cfg.lam, cfg.tau)
        trail, _ = sgd_unroll(g, params, builder, cfg.L, cfg.alpha)
        inner_parts.append(builder(g, trail[-1]))
        xq = g.leaf(f"xq{e}", (mq, INPUT_DIM))
        if cfg.mode == "bmssl":
            log_pt = g.leaf(f"logpt{e}", (mq, way))
            logits = forward_nodes(g, trail[-1], xq).logits
            gap = g.sub(log_pt, g.log_softmax(logits))
            outer_parts.append(
                g.scale(g.sum(g.mul(g.exp(log_pt), gap)), 1.0 / mq))
        else:
            outer_parts.append(
                loss_total_nodes(g, trail[-1], xq, yq, cfg.lam, cfg.tau))

    def mean(parts):
        total = parts[0]
        for nid in parts[1:]:
            total = g.add(total, nid)
        return g.scale(total, 1.0 / len(parts))

    outer = mean(outer_parts)
    mean_inner = mean(inner_parts)
    grads = adjoint_nodes(g, outer, [params[n] for n in params])
    outputs = {"outer": outer, "mean_inner": mean_inner}
    outputs.update({f"g:{n}": grads[params[n]] for n in params})
    return Template(g, outputs)


def build_metric_template(theta: ParamSet, cfg: RunConfig) -> Template:
    """Single-level contrastive loss over all M views of each class.

    Pseudo-class identities change every batch, so a shared classifier head
    cannot learn the cross-entropy term; the metric-only mode trains the
    view-similarity (contrastive) objective alone and carries the learned
    weights into evaluation as its experience.
    """
    way = cfg.way
    m_all = way * cfg.M
    labels = np.concatenate([_class_major_labels(way, cfg.M1),
                             _class_major_labels(way, cfg.M - cfg.M1)])
    g = ExprGraph()
    params = {name: g.leaf(name, t.shape) for name, t in theta.items()}
    parts = []
    for e in range(cfg.K):
        x = g.leaf(f"xa{e}", (m_all, INPUT_DIM))
        proj = forward_nodes(g, params, x).projections
        parts.append(loss_cl(g, proj, labels, cfg.tau))
    total = parts[0]
    for nid in parts[1:]:
        total = g.add(total, nid)
    outer = g.scale(total, 1.0 / len(parts))
    grads = adjoint_nodes(g, outer, [params[n] for n in params])
    outputs = {"outer": outer}
    outputs.update({f"g:{n}": grads[params[n]] for n in params})
    return Template(g, outputs)


@dataclass(frozen=True)
class EvalResult:
    mean_accuracy: float
    per_episode: tuple[float, ...]


def evaluate_fewshot(params: ParamSet, eval_ds: SyntheticDataset, way: int,
                     shot: int, query: int, episode_count: int, L_eval: int,
                     alpha: float, lam: float = 1.0, tau: float = 0.5,
                     seed: int = 0) -> EvalResult:
    """Few-shot accuracy on held-out latent classes.

    Each episode samples `way` classes, `shot` support and `query` query
    images per class (real labels, no augmentation), adapts from the given
    parameters with L_eval inner steps, and scores query accuracy. With a
    single support view per class there are no positive pairs, so
    adaptation is cross-entropy only.
    """
    classes = eval_ds.classes()
    if len(classes) < way:
        raise ValidationError(f"eval needs >= {way} classes, have {len(classes)}")
    latent = np.asarray(eval_ds.latent)
    per_class_idx = {c: np.nonzero(latent == c)[0] for c in classes}
    short = [c for c, idx in per_class_idx.items() if idx.size < shot + query]
    if short:
        raise ValidationError(f"classes {short} have fewer than {shot + query} samples")

    head = dict(params.arrays())
    hidden = head["Wc"].shape[0]
    if head["Wc"].shape[1] != way:  # head width must match the episode
        head["Wc"] = np.zeros((hidden, way))
        head["bc"] = np.zeros((1, way))
    theta = ParamSet({k: Tensor(v) for k, v in head.items()})

    lam_eval = lam if shot >= 2 else 0.0
    adapt = AdaptTemplate(theta, way * shot, _class_major_labels(way, shot),
                          lam_eval, tau)
    predict = PredictTemplate(theta, way * query)
    query_labels = _class_major_labels(way, query)

    vectors = np.stack([img.vector() for img in eval_ds.images])
    accs = []
    for e in range(episode_count):
        rng = generator(derive_seed(seed, 0xE7A1, e))
        chosen = [classes[i] for i in rng.permutation(len(classes))[:way]]
        sup_rows, qry_rows = [], []
        for c in chosen:
            picks = rng.permutation(per_class_idx[c])[:shot + query]
            sup_rows.extend(picks[:shot])
            qry_rows.extend(picks[shot:])
        weights, _ = adapt.descend(theta.arrays(), vectors[sup_rows],
                                   L_eval, alpha)
        log_probs = predict.log_probs(weights, vectors[qry_rows])
        accs.append(float(np.mean(np.argmax(log_probs, axis=1) == query_labels)))
    return EvalResult(float(np.mean(accs)), tuple(accs))


@dataclass(frozen=True)
class TrainResult:
    params: ParamSet
    final_accuracy: float
    meta_steps: int
    steps_per_sec: float
    checkpoint_path: str | None
    metrics_path: str | None
    eval_history: tuple[tuple[int, float], ...] = ()


def _check_finite(step: int, outer: float, grads: dict[str, np.ndarray]) -> None:
    if not np.isfinite(outer):
        raise NumericError(f"meta step {step}: non-finite outer loss")
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"meta step {step}: non-finite gradient for {name}")


def train(cfg: RunConfig, dataset: SyntheticDataset | None = None) -> TrainResult:
    """Run one configuration end to end; returns the final parameters.

    Writes metrics.csv and checkpoint.bmsl into cfg.out_dir when set. Fully
    seeded: same config and seeds give byte-identical outputs (wallclock
    cells stay empty unless cfg.timing).
    """
    cfg.validate()
    if dataset is None:
        if not cfg.data_path:
            raise ValidationError("config needs data_path (or pass a dataset)")
        dataset = load_dataset(cfg.data_path)
    train_ds, eval_ds = split(dataset, cfg.split_fraction, cfg.data_seed)

    theta = init_params(INPUT_DIM, cfg.hidden_dim, cfg.proj_dim, cfg.way,
                        derive_seed(cfg.seed, 0x1417))
    weights = theta.arrays()
    steps = 0 if cfg.mode == "scratch" else cfg.meta_steps

    outer_template = None
    metric_template = None
    target_adapt = None
    target_predict = None
    if steps:
        if cfg.mode in ("metassl", "bmssl"):
            outer_template = build_outer_template(theta, cfg)
        if cfg.mode == "bmssl":
            m2 = cfg.M - cfg.M1
            support_adapt = AdaptTemplate(
                theta, cfg.way * cfg.M1,
                _class_major_labels(cfg.way, cfg.M1), cfg.lam, cfg.tau)
            if cfg.target_objective == "support":
                target_adapt, target_stacks = support_adapt, "support"
            elif cfg.target_objective == "query":
                target_adapt = AdaptTemplate(
                    theta, cfg.way * m2, _class_major_labels(cfg.way, m2),
                    cfg.lam, cfg.tau)
                target_stacks = "query"
            else:  # episode: all M views per class
                labels = np.concatenate([_class_major_labels(cfg.way, cfg.M1),
                                         _class_major_labels(cfg.way, m2)])
                target_adapt = AdaptTemplate(theta, cfg.way * cfg.M, labels,
                                             cfg.lam, cfg.tau)
                target_stacks = "episode"
            target_predict = PredictTemplate(theta, cfg.way * m2)
        if cfg.mode == "metric-only":
            metric_template = build_metric_template(theta, cfg)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
    metrics = MetricsWriter(out_dir / "metrics.csv") if out_dir else None

    eval_history: list[tuple[int, float]] = []

    def run_eval(step_seed: int) -> float:
        result = evaluate_fewshot(
            ParamSet({k: Tensor(v) for k, v in weights.items()}),
            eval_ds, cfg.eval_way, cfg.eval_shot, cfg.eval_query,
            cfg.eval_episodes, cfg.eval_inner_steps, cfg.alpha,
            cfg.lam, cfg.tau, seed=derive_seed(cfg.seed, 0xEA1, step_seed))
        eval_history.append((step_seed, result.mean_accuracy))
        return result.mean_accuracy

    started = time.perf_counter()
    for step in range(steps):
        pool = resample_pool(train_ds, cfg.N, derive_seed(cfg.seed, 0xB00, step))
        batch = construct_tasks(pool, cfg.N, cfg.K, cfg.M, cfg.M1,
                                _level(cfg), derive_seed(cfg.seed, 0x7A5, step))
        episodes = [_episode_views(ep) for ep in batch.episodes]

        if cfg.mode == "metric-only":
            leaves = {f"xa{e}": np.vstack([s, q]) for e, (s, q) in enumerate(episodes)}
            out = metric_template.run({**weights, **leaves})
            grads = {n: out[f"g:{n}"] for n in weights}
            outer = float(out["outer"])
            kl_cell, mean_inner = None, outer
            lr = cfg.alpha  # single-level update runs at the task-level rate
        else:
            leaves = {}
            for e, (sup, qry) in enumerate(episodes):
                leaves[f"xs{e}"] = sup
                leaves[f"xq{e}"] = qry
                if cfg.mode == "bmssl":
                    target, _ = support_adapt.descend(weights, sup,
                                                      cfg.L, cfg.alpha)
                    extra = {"support": sup, "query": qry,
                             "episode": np.vstack([sup, qry])}[target_stacks]
                    target, _ = target_adapt.descend(target, extra,
                                                     cfg.delta, cfg.alpha)
                    leaves[f"logpt{e}"] = target_predict.log_probs(target, qry)
            out = outer_template.run({**weights, **leaves})
            grads = {n: out[f"g:{n}"] for n in weights}
            outer = float(out["outer"])
            mean_inner = float(out["mean_inner"])
            kl_cell = outer if cfg.mode == "bmssl" else None
            lr = cfg.beta

        _check_finite(step, outer, grads)
        weights = {n: weights[n] - lr * grads[n] for n in weights}

        scheduled = (cfg.eval_interval and (step + 1) % cfg.eval_interval == 0)
        final_row = step == steps - 1
        acc_cell = run_eval(step) if (scheduled or final_row) else None
        if metrics:
            wall = (time.perf_counter() - started) if cfg.timing else None
            metrics.write(step, outer, kl_cell, mean_inner, acc_cell, wall)
    train_seconds = time.perf_counter() - started

    final_accuracy = run_eval(steps)
    params = ParamSet({k: Tensor(v) for k, v in weights.items()})

    checkpoint_path = None
    if out_dir:
        checkpoint_path = str(out_dir / "checkpoint.bmsl")
        save_checkpoint(checkpoint_path, params, cfg, steps)
    if metrics:
        metrics.close()
    return TrainResult(params, final_accuracy, steps,
                       steps / train_seconds if train_seconds > 0 and steps else 0.0,
                       checkpoint_path, str(out_dir / "metrics.csv") if out_dir else None,
                       tuple(eval_history))


def _level(cfg: RunConfig):
    from .augment import get_level
    return get_level(cfg.level)


def _episode_views(episode) -> tuple[np.ndarray, np.ndarray]:
    from .model import views_matrix
    return views_matrix(episode.support), views_matrix(episode.query)


@dataclass(frozen=True)
class AblationRow:
    kind: str
    cell: str
    accuracy: float
    steps_per_sec: float


_DELTA_GRID = (1, 5, 10, 15, 20)
_LEVEL_GRID = ("A1", "A2", "A3", "A4")
_STRUCTURE_GRID = (("M1", "scratch"), ("M2", "metric-only"), ("M3", "bmssl"))


def _cell_accuracy(result: TrainResult, tail: int = 4) -> float:
    """Late-trajectory average: plain SGD keeps bouncing near its ceiling, so
    a single final checkpoint is a noisy cell estimate."""
    history = [acc for _, acc in result.eval_history[-tail:]]
    return float(np.mean(history)) if history else result.final_accuracy


def ablate(kind: str, cfg: RunConfig,
           dataset: SyntheticDataset | None = None) -> list[AblationRow]:
    """Sweep one ablation axis at desk scale; one training run per cell.

    Cell accuracy averages the last few scheduled evaluations of the run.
    """
    interval = max(1, cfg.meta_steps // 4) if cfg.meta_steps else 0
    base = cfg.replaced(out_dir="", eval_interval=interval)
    rows = []
    if kind == "delta":
        for delta in _DELTA_GRID:
            r = train(base.replaced(mode="bmssl", delta=delta), dataset)
            rows.append(AblationRow(kind, str(delta), _cell_accuracy(r),
                                    r.steps_per_sec))
    elif kind == "augmentation":
        for level in _LEVEL_GRID:
            r = train(base.replaced(level=level), dataset)
            rows.append(AblationRow(kind, level, _cell_accuracy(r),
                                    r.steps_per_sec))
    elif kind == "structure":
        for cell, mode in _STRUCTURE_GRID:
            r = train(base.replaced(mode=mode), dataset)
            rows.append(AblationRow(kind, cell, _cell_accuracy(r),
                                    r.steps_per_sec))
    else:
        raise ValidationError(f"unknown ablation kind {kind!r}")
    return rows
