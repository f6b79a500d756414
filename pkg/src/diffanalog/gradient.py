"""Loss gradients through time-domain solves.

Two routes:

* ``grad_backprop`` differentiates the discrete solver map step by step
  (exact gradient of what was actually computed; stores the forward
  trajectory, so memory grows linearly with the step count).
* ``grad_adjoint`` integrates the augmented (state, adjoint, accumulator)
  system backward from the last readout, reconstructing the state on the
  fly; memory is independent of the step count. ODE methods only.

``mc_grad`` averages pathwise gradients over (batch item x mismatch sample)
pairs, mapping raw trainables to physical values (bounded transform,
Gumbel-Softmax) and chaining the gradient back to raw space.

Losses are scalar expressions over the flattened readout matrix: readout
entry ``(r, j)`` is ``state(r * n_outputs + j)`` and the matching target is
``input(r * n_outputs + j)``.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional

import numpy as np

from . import expr as E
from .backend import kernels
from .errors import AdjointInstabilityError, ModelError, OptimError, SolveError
from .rng import STREAM_GUMBEL, STREAM_MISMATCH, STREAM_NOISE, rng_for, seed_for
from .solver import (
    EULER_MARUYAMA,
    SolveConfig,
    check_sizes,
    readout_grid_indices,
    wiener_increments,
)
from .store import TrainableStore
from .sysmodel import CompiledModel

__all__ = [
    "LossSpec",
    "GradEstimate",
    "BatchItem",
    "grad_backprop",
    "grad_adjoint",
    "mc_grad",
    "alloc_meter",
]

BACKPROP = "backprop"
ADJOINT = "adjoint"


class AllocationMeter:
    """Counts float64 workspace slots the gradient routines allocate.

    Off by default; tests enable it to assert the memory contracts (adjoint
    peak workspace independent of step count, backprop linear in it).
    """

    def __init__(self):
        self.enabled = False
        self.total = 0

    def reset(self):
        self.total = 0

    def add(self, n: int):
        if self.enabled:
            self.total += int(n)


alloc_meter = AllocationMeter()


def _zeros(*shape) -> np.ndarray:
    arr = np.zeros(shape, dtype=np.float64)
    alloc_meter.add(arr.size)
    return arr


@dataclass
class LossSpec:
    """Scalar loss over readout values and targets.

    ``targets`` must match the model readout shape [n_readouts, n_outputs];
    its flattened entries are what ``input(i)`` references inside
    ``loss_expr`` resolve to.
    """

    loss_expr: E.Expr
    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64)

    @cached_property
    def tape(self) -> E.Tape:
        tape = E.compile_tape([self.loss_expr])
        if tape.min_params > 0 or tape.min_mismatch > 0:
            raise ModelError(
                "loss expressions may reference readouts (state) and targets "
                "(input) only"
            )
        return tape


@dataclass
class GradEstimate:
    """Monte Carlo gradient over raw trainables with loss statistics."""

    grad: np.ndarray
    loss_mean: float
    loss_std: float
    n_samples: int


def _eval_loss_and_seeds(model: CompiledModel, loss: LossSpec, readouts):
    """Loss value plus dLoss/dreadout as an [n_readouts, n_outputs] matrix."""
    n_read = readouts.shape[0]
    n_out = readouts.shape[1]
    if loss.targets.shape != readouts.shape:
        raise ModelError(
            f"loss targets shape {loss.targets.shape} does not match readout "
            f"shape {readouts.shape}"
        )
    tape = loss.tape
    flat = readouts.reshape(-1)
    tflat = loss.targets.reshape(-1)
    if tape.min_states > len(flat) or tape.min_inputs > len(tflat):
        raise ModelError("loss expression references readout entries beyond "
                         f"the {n_read}x{n_out} readout matrix")
    env = E.EvalEnv(state=flat, inputs=tflat)
    values = tape.new_values()
    out = tape.forward(env, values)
    d_flat = np.zeros(len(flat), dtype=np.float64)
    d_dummy = np.zeros(0, dtype=np.float64)
    tape.reverse(values, np.ones(1), d_flat, d_dummy)
    return float(out[0]), d_flat.reshape(n_read, n_out)


def _readout_contribs(model, ridx, x_rows, params, inputs, delta, dt, seeds,
                      g_direct):
    """Chain dLoss/dreadout through the readout map at each stored row.

    Returns dLoss/dx per row; any direct parameter dependence of the readout
    accumulates into ``g_direct``.
    """
    rtape = model.readout_tape
    n = model.n_states
    contribs = _zeros(len(ridx), n)
    values = _zeros(rtape.n_slots)
    adj = _zeros(rtape.n_slots)
    for r in range(len(ridx)):
        env = E.EvalEnv(state=x_rows[r], params=params, inputs=inputs,
                        mismatch=delta, time=ridx[r] * dt)
        rtape.forward(env, values)
        rtape.reverse(values, seeds[r], contribs[r], g_direct, adj=adj)
    return contribs


def _raise_solver_error(code: int):
    step = code >> 2
    if (code & 3) == 1:
        raise SolveError(
            f"division by zero while evaluating derivatives at step {step}"
        )
    raise SolveError(f"non-finite state at step {step} (blow-up or stiffness)")


def grad_backprop(model: CompiledModel, params, delta, inputs, x0,
                  cfg: SolveConfig, loss: LossSpec):
    """Exact gradient of the discrete solver map composed with the loss.

    For Euler-Maruyama the gradient is pathwise: the Wiener increments drawn
    from ``cfg.noise_seed`` are held fixed. Returns ``(loss_value, grad)``
    with the gradient taken w.r.t. the physical parameter vector.
    """
    params, delta, inputs, x0 = check_sizes(model, params, delta, inputs, x0)
    ridx = readout_grid_indices(model, cfg)
    n = model.n_states
    m = model.n_params
    n_steps = cfg.n_steps
    dtape = model.deriv_tape
    ntape = model.noise_tape
    k = kernels()

    states = _zeros(n_steps + 1, n)
    states[0] = x0
    if cfg.method == EULER_MARUYAMA:
        noise = wiener_increments(n_steps, n, cfg.dt, cfg.noise_seed)
        alloc_meter.add(noise.size)
    else:
        noise = np.zeros((0, 0), dtype=np.float64)
    dvalues = _zeros(dtape.n_slots)
    nvalues = _zeros(ntape.n_slots)
    buf = [_zeros(n) for _ in range(4)]
    err = k.solve_forward(
        dtape.ops, dtape.ref, dtape.f0, dtape.f1, dtape.args, dtape.arg_off,
        dtape.out_slots,
        ntape.ops, ntape.ref, ntape.f0, ntape.f1, ntape.args, ntape.arg_off,
        ntape.out_slots,
        cfg.method_code, cfg.dt, n_steps, params, inputs, delta,
        noise, states, dvalues, nvalues, buf[0], buf[1], buf[2], buf[3],
    )
    if err >= 0:
        _raise_solver_error(err)

    rtape = model.readout_tape
    readouts = _zeros(len(ridx), model.n_outputs)
    rvals = _zeros(rtape.n_slots)
    for r, gi in enumerate(ridx):
        env = E.EvalEnv(state=states[gi], params=params, inputs=inputs,
                        mismatch=delta, time=gi * cfg.dt)
        readouts[r] = rtape.forward(env, rvals)
    loss_value, seeds = _eval_loss_and_seeds(model, loss, readouts)

    g = _zeros(m)
    contribs = _readout_contribs(model, ridx, states[ridx], params, inputs,
                                 delta, cfg.dt, seeds, g)
    dadj = _zeros(dtape.n_slots)
    nadj = _zeros(ntape.n_slots)
    a = _zeros(n)
    work = [_zeros(n) for _ in range(9)]
    k.backprop_sweep(
        dtape.ops, dtape.ref, dtape.f0, dtape.f1, dtape.args, dtape.arg_off,
        dtape.out_slots,
        ntape.ops, ntape.ref, ntape.f0, ntape.f1, ntape.args, ntape.arg_off,
        ntape.out_slots,
        cfg.method_code, cfg.dt, n_steps, params, inputs, delta,
        noise, states, ridx, contribs,
        dvalues, dadj, nvalues, nadj,
        a, g, work[0], work[1], work[2], work[3], work[4], work[5],
        work[6], work[7], work[8],
    )
    return loss_value, g


def grad_adjoint(model: CompiledModel, params, delta, inputs, x0,
                 cfg: SolveConfig, loss: LossSpec):
    """Continuous-adjoint gradient (ODE methods only).

    Integrates (x, a, u) backward from the last readout with
    a(t_k) = dLoss/dx(t_k) and u(t_k) = 0, adding dLoss/dx(t_i) to the
    adjoint at each earlier readout crossing; u(0) is the gradient. The
    state is re-integrated backward on the fly, so peak memory does not
    depend on the number of steps; divergence of that reconstruction raises
    ``AdjointInstabilityError``.
    """
    if cfg.method == EULER_MARUYAMA:
        raise SolveError("the continuous adjoint does not support "
                         "euler_maruyama; use grad_backprop for SDE models")
    params, delta, inputs, x0 = check_sizes(model, params, delta, inputs, x0)
    ridx = readout_grid_indices(model, cfg)
    n = model.n_states
    m = model.n_params
    dtape = model.deriv_tape
    rtape = model.readout_tape
    k = kernels()

    x = _zeros(n)
    x[:] = x0
    x_rows = _zeros(len(ridx), n)
    dvalues = _zeros(dtape.n_slots)
    buf = [_zeros(n) for _ in range(4)]
    err = k.solve_rows(
        dtape.ops, dtape.ref, dtape.f0, dtape.f1, dtape.args, dtape.arg_off,
        dtape.out_slots,
        cfg.method_code, cfg.dt, cfg.n_steps, params, inputs, delta,
        x, ridx, x_rows, dvalues, buf[0], buf[1], buf[2], buf[3],
    )
    if err >= 0:
        _raise_solver_error(err)

    readouts = _zeros(len(ridx), model.n_outputs)
    rvals = _zeros(rtape.n_slots)
    for r in range(len(ridx)):
        env = E.EvalEnv(state=x_rows[r], params=params, inputs=inputs,
                        mismatch=delta, time=ridx[r] * cfg.dt)
        readouts[r] = rtape.forward(env, rvals)
    loss_value, seeds = _eval_loss_and_seeds(model, loss, readouts)

    xrec = _zeros(n)
    a = _zeros(n)
    u = _zeros(m)
    dadj = _zeros(dtape.n_slots)
    radj = _zeros(rtape.n_slots)
    sx = _zeros(4, n)
    sa = _zeros(4, n)
    su = _zeros(4, m)
    tx = _zeros(n)
    ta = _zeros(n)
    tu = _zeros(m)
    fx = _zeros(n)
    fa = _zeros(n)
    fu = _zeros(m)
    err = k.adjoint_sweep(
        dtape.ops, dtape.ref, dtape.f0, dtape.f1, dtape.args, dtape.arg_off,
        dtape.out_slots,
        rtape.ops, rtape.ref, rtape.f0, rtape.f1, rtape.args, rtape.arg_off,
        rtape.out_slots,
        cfg.method_code, cfg.dt, params, inputs, delta,
        x_rows, ridx, seeds,
        xrec, a, u,
        dvalues, dadj, rvals, radj,
        sx, sa, su, tx, ta, tu, fx, fa, fu,
    )
    if err >= 0:
        step = err >> 2
        raise AdjointInstabilityError(
            f"backward state reconstruction diverged at step {step}"
        )
    return loss_value, u


@dataclass
class BatchItem:
    """One dataset element: model inputs, initial state and loss targets."""

    inputs: np.ndarray
    x0: np.ndarray
    targets: np.ndarray


def mc_grad(model: CompiledModel, store: TrainableStore, batch,
            n_mismatch: int, rng_seed: int, cfg: SolveConfig,
            loss_expr: E.Expr, method: str = BACKPROP,
            tau: Optional[float] = None, gumbel_per_sample: bool = True,
            workers: int = 1) -> GradEstimate:
    """Monte Carlo gradient over (batch item x mismatch sample) pairs.

    Each pair gets its own mismatch draw, noise seed and (by default) fresh
    Gumbel noise, all derived from ``rng_seed`` by counter; the mean is
    reduced in a fixed order so results do not depend on ``workers``.
    Sample failures propagate with the (item, sample) identifier — samples
    are never silently dropped.
    """
    if n_mismatch < 1:
        raise OptimError(f"n_mismatch must be >= 1, got {n_mismatch}")
    if method not in (BACKPROP, ADJOINT):
        raise OptimError(f"unknown gradient method {method!r}")
    batch = list(batch)
    if not batch:
        raise OptimError("mc_grad needs a nonempty batch")
    grad_fn = grad_backprop if method == BACKPROP else grad_adjoint
    frozen_gumbel_rng = None
    if not gumbel_per_sample and store.has_discrete():
        frozen_gumbel_rng = rng_for(rng_seed, STREAM_GUMBEL)
        frozen_map = store.physical(tau=tau, rng=frozen_gumbel_rng)

    pairs = [(b, s) for b in range(len(batch)) for s in range(n_mismatch)]

    def run_one(idx):
        b, s = pairs[idx]
        item = batch[b]
        try:
            if gumbel_per_sample and store.has_discrete():
                pmap = store.physical(
                    tau=tau, rng=rng_for(rng_seed, STREAM_GUMBEL, b, s)
                )
            elif store.has_discrete():
                pmap = frozen_map
            else:
                pmap = store.physical()
            delta = _sample_delta(model, rng_seed, b, s)
            cfg_s = cfg
            if cfg.method == EULER_MARUYAMA:
                cfg_s = replace(
                    cfg, noise_seed=seed_for(rng_seed, STREAM_NOISE, b, s)
                )
            spec = LossSpec(loss_expr, item.targets)
            loss_value, g_phys = grad_fn(
                model, pmap.params, delta, item.inputs, item.x0, cfg_s, spec
            )
            return loss_value, store.chain_to_raw(g_phys, pmap)
        except Exception as e:
            raise OptimError(
                f"sample (item={b}, mismatch={s}) failed: {e}"
            ) from e

    results = _run_indexed(run_one, len(pairs), workers)
    losses = np.array([r[0] for r in results], dtype=np.float64)
    grad = np.zeros(store.n_raw, dtype=np.float64)
    for _, g in results:  # fixed order: bit-stable for any worker count
        grad += g
    grad /= len(results)
    return GradEstimate(
        grad=grad,
        loss_mean=float(np.mean(losses)),
        loss_std=float(np.std(losses)),
        n_samples=len(results),
    )


def _sample_delta(model, rng_seed, b, s):
    from .relax import sample_mismatch

    if model.n_mismatch == 0:
        return np.zeros(0, dtype=np.float64)
    return sample_mismatch(model.sigmas, rng_for(rng_seed, STREAM_MISMATCH, b, s))


def _run_indexed(fn, n, workers):
    if workers <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    results = [None] * n
    with ThreadPoolExecutor(max_workers=workers) as ex:
        futures = [ex.submit(fn, i) for i in range(n)]
        for i, fut in enumerate(futures):
            results[i] = fut.result()
    return results
