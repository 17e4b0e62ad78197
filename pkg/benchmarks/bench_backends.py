"""Compare the compiled kernel core against the numpy fallback.

Times the two hot workloads: re-evaluating a full meta-objective template
(the per-meta-step cost of training) and the inner adaptation template used
for bootstrap targets and evaluation.

    python3 benchmarks/bench_backends.py [--steps 50]
"""

import argparse
import time

import numpy as np

from metaboot import engine
from metaboot.config import RunConfig
from metaboot.engine.plan import Plan
from metaboot.harness import INPUT_DIM, AdaptTemplate, build_outer_template
from metaboot.model import init_params
from metaboot.rng import generator


def time_template(template, leaves, steps):
    template.run(leaves)  # warm-up (plan freeze)
    start = time.perf_counter()
    for _ in range(steps):
        template.run(leaves)
    return (time.perf_counter() - start) / steps


def bench(backend, steps):
    # Pin the backend for every plan created in this block.
    import metaboot.engine as eng

    original = eng.active_backend
    eng.active_backend = lambda: backend
    try:
        cfg = RunConfig().validate()
        theta = init_params(INPUT_DIM, cfg.hidden_dim, cfg.proj_dim, cfg.way, 0)
        rng = generator(1)
        outer = build_outer_template(theta, cfg)
        leaves = dict(theta.arrays())
        ms, mq = cfg.way * cfg.M1, cfg.way * (cfg.M - cfg.M1)
        for e in range(cfg.K):
            leaves[f"xs{e}"] = rng.uniform(size=(ms, INPUT_DIM))
            leaves[f"xq{e}"] = rng.uniform(size=(mq, INPUT_DIM))
            lp = rng.uniform(size=(mq, cfg.way))
            leaves[f"logpt{e}"] = np.log(lp / lp.sum(axis=1, keepdims=True))
        outer_t = time_template(outer, leaves, steps)

        adapt = AdaptTemplate(theta, ms, np.repeat(np.arange(cfg.way), cfg.M1),
                              cfg.lam, cfg.tau)
        x = rng.uniform(size=(ms, INPUT_DIM))
        start = time.perf_counter()
        for _ in range(steps):
            adapt.descend(theta.arrays(), x, cfg.L + cfg.delta, cfg.alpha)
        adapt_t = (time.perf_counter() - start) / steps
        nodes = len(outer.graph.nodes)
        return outer_t, adapt_t, nodes
    finally:
        eng.active_backend = original


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--steps", type=int, default=50)
    args = parser.parse_args()

    backends = [("numpy", engine.NUMPY_BACKEND)]
    if engine.COMPILED_BACKEND is not None:
        backends.append(("compiled", engine.COMPILED_BACKEND))
    else:
        print("compiled core not built; benchmarking the fallback only")

    results = {}
    for name, backend in backends:
        outer_t, adapt_t, nodes = bench(backend, args.steps)
        results[name] = (outer_t, adapt_t)
        print(f"{name:>9}: meta-objective template ({nodes} nodes) "
              f"{outer_t * 1e3:8.2f} ms/step   inner adaptation "
              f"{adapt_t * 1e3:8.2f} ms/trajectory")
    if len(results) == 2:
        o_np, a_np = results["numpy"]
        o_c, a_c = results["compiled"]
        print(f"speedup: meta-objective x{o_np / o_c:.2f}, "
              f"inner adaptation x{a_np / a_c:.2f}")


if __name__ == "__main__":
    main()
