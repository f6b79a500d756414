"""Benchmark the numba-JIT kernels against the pure-Python fallback.

Runs the hot paths (forward solve and backprop-through-the-solver gradient)
of a mid-size grid model on both backends and prints the wall-clock ratio.

    python3 benchmarks/bench_backends.py [--size 12] [--repeat 3]
"""

import argparse
import time

import numpy as np


def build_case(size):
    from diffanalog import cnn
    from diffanalog import expr as E
    from diffanalog.gradient import LossSpec
    from diffanalog.relax import sample_mismatch
    from diffanalog.rng import rng_for
    from diffanalog.solver import SolveConfig
    from diffanalog.store import TrainableStore

    model = cnn.build_cnn(size, size, sigma=0.1)
    params = TrainableStore.from_decls(model.trainables).physical(
        hard=True).params
    delta = sample_mismatch(model.sigmas, rng_for(0, 1))
    img, ref = cnn.synth_silhouettes(1, size, size, rng_for(0, 2))[0]
    u = cnn.image_to_inputs(img)
    x0 = np.zeros(model.n_states)
    cfg = SolveConfig(dt=cnn.DEFAULT_DT, t_end=cnn.DEFAULT_T3, method="euler")
    spec = LossSpec(E.mean_squared_error(model.n_outputs),
                    ref.flat().reshape(1, -1))
    return model, params, delta, u, x0, cfg, spec


def time_backend(name, size, repeat):
    from diffanalog.backend import set_backend
    from diffanalog.gradient import grad_backprop
    from diffanalog.solver import solve

    set_backend(name)
    model, params, delta, u, x0, cfg, spec = build_case(size)
    # Warm once (JIT compilation / tape caches).
    solve(model, params, delta, u, x0, cfg)
    grad_backprop(model, params, delta, u, x0, cfg, spec)

    t0 = time.perf_counter()
    for _ in range(repeat):
        solve(model, params, delta, u, x0, cfg)
    t_solve = (time.perf_counter() - t0) / repeat

    t0 = time.perf_counter()
    for _ in range(repeat):
        loss, grad = grad_backprop(model, params, delta, u, x0, cfg, spec)
    t_grad = (time.perf_counter() - t0) / repeat
    return t_solve, t_grad, loss, grad


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--size", type=int, default=12)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()

    results = {}
    outputs = {}
    for name in ("numba", "numpy"):
        t_solve, t_grad, loss, grad = time_backend(name, args.size,
                                                   args.repeat)
        results[name] = (t_solve, t_grad)
        outputs[name] = (loss, grad)
        print(f"{name:>6}: solve {t_solve * 1e3:9.2f} ms   "
              f"grad {t_grad * 1e3:9.2f} ms")

    same = np.allclose(outputs["numba"][1], outputs["numpy"][1],
                       rtol=1e-12, atol=1e-15) and \
        abs(outputs["numba"][0] - outputs["numpy"][0]) < 1e-12
    print(f"results agree across backends: {same}")
    print(f"speedup: solve x{results['numpy'][0] / results['numba'][0]:.0f}, "
          f"grad x{results['numpy'][1] / results['numba'][1]:.0f}")


if __name__ == "__main__":
    main()
