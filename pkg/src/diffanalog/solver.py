"""Fixed-step time-domain integration of compiled models.

Methods: explicit Euler and classic RK4 for ODEs, Euler-Maruyama for SDEs
(diagonal Wiener increments, one per state per step, drawn i.i.d. from
N(0, dt) and fully determined by the noise seed). Trajectories record every
grid state plus readout snapshots at the model's readout times.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import expr as E
from ._ops import METHOD_EULER, METHOD_EULER_MARUYAMA, METHOD_RK4
from .backend import kernels
from .errors import SolveError
from .sysmodel import CompiledModel

__all__ = ["SolveConfig", "Trajectory", "solve", "write_trajectory_csv"]

EULER = "euler"
RK4 = "rk4"
EULER_MARUYAMA = "euler_maruyama"

_METHOD_CODES = {
    EULER: METHOD_EULER,
    RK4: METHOD_RK4,
    EULER_MARUYAMA: METHOD_EULER_MARUYAMA,
}

ERR_DIV = 1
ERR_NONFINITE = 2


@dataclass(frozen=True)
class SolveConfig:
    dt: float
    t_end: float
    method: str = RK4
    noise_seed: Optional[int] = None

    def __post_init__(self):
        if self.dt <= 0:
            raise SolveError(f"dt must be positive, got {self.dt}")
        if self.t_end <= 0:
            raise SolveError(f"t_end must be positive, got {self.t_end}")
        if self.method not in _METHOD_CODES:
            raise SolveError(
                f"unknown method {self.method!r}; expected one of "
                f"{sorted(_METHOD_CODES)}"
            )
        steps = self.t_end / self.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
            raise SolveError(
                f"t_end {self.t_end!r} is not an integer number of steps of "
                f"dt {self.dt!r}"
            )
        if self.method == EULER_MARUYAMA and self.noise_seed is None:
            raise SolveError("euler_maruyama requires a noise_seed")
        if self.method != EULER_MARUYAMA and self.noise_seed is not None:
            raise SolveError(f"noise_seed only applies to euler_maruyama, "
                             f"not {self.method!r}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.dt))

    @property
    def method_code(self) -> int:
        return _METHOD_CODES[self.method]


@dataclass
class Trajectory:
    times: np.ndarray           # [n_steps+1]
    states: np.ndarray          # [n_steps+1, n_states]
    readout_times: np.ndarray   # [n_readouts]
    readouts: np.ndarray        # [n_readouts, n_outputs]


def readout_grid_indices(model: CompiledModel, cfg: SolveConfig) -> np.ndarray:
    """Grid row index of every readout time; errors if any is off-grid."""
    idx = np.zeros(len(model.readout_times), dtype=np.int64)
    for r, t in enumerate(model.readout_times):
        steps = t / cfg.dt
        if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
            raise SolveError(
                f"readout time {t!r} does not lie on the dt={cfg.dt!r} grid"
            )
        idx[r] = int(round(steps))
        if idx[r] > cfg.n_steps:
            raise SolveError(
                f"readout time {t!r} exceeds t_end {cfg.t_end!r}"
            )
    return idx


def check_sizes(model: CompiledModel, params, delta, inputs, x0=None):
    params = np.ascontiguousarray(params, dtype=np.float64)
    delta = np.ascontiguousarray(delta, dtype=np.float64)
    inputs = np.ascontiguousarray(inputs, dtype=np.float64)
    if params.shape != (model.n_params,):
        raise SolveError(
            f"expected {model.n_params} parameter values, got {params.shape}"
        )
    if delta.shape != (model.n_mismatch,):
        raise SolveError(
            f"expected {model.n_mismatch} mismatch values, got {delta.shape}"
        )
    if inputs.shape != (model.n_inputs,):
        raise SolveError(
            f"expected {model.n_inputs} input values, got {inputs.shape}"
        )
    if x0 is None:
        return params, delta, inputs
    x0 = np.ascontiguousarray(x0, dtype=np.float64)
    if x0.shape != (model.n_states,):
        raise SolveError(
            f"expected initial state of length {model.n_states}, got {x0.shape}"
        )
    return params, delta, inputs, x0


def wiener_increments(n_steps: int, n_states: int, dt: float, seed: int) -> np.ndarray:
    """Matrix of N(0, dt) increments, deterministic in the seed."""
    gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    return gen.normal(0.0, np.sqrt(dt), size=(n_steps, n_states))


def _raise_solver_error(code: int):
    step = code >> 2
    kind = code & 3
    if kind == ERR_DIV:
        raise SolveError(f"division by zero while evaluating derivatives at "
                         f"step {step}")
    raise SolveError(f"non-finite state at step {step} (blow-up or stiffness)")


def solve(model: CompiledModel, params, delta, inputs, x0,
          cfg: SolveConfig) -> Trajectory:
    """Integrate the model on the fixed grid and snapshot the readouts.

    Pure in its arguments: identical calls produce bitwise-identical
    trajectories, so Monte Carlo samples can be solved concurrently and
    reduced in a fixed order.
    """
    params, delta, inputs, x0 = check_sizes(model, params, delta, inputs, x0)
    ridx = readout_grid_indices(model, cfg)
    n = model.n_states
    n_steps = cfg.n_steps
    dtape = model.deriv_tape
    ntape = model.noise_tape
    states = np.zeros((n_steps + 1, n), dtype=np.float64)
    states[0] = x0
    if cfg.method == EULER_MARUYAMA:
        noise = wiener_increments(n_steps, n, cfg.dt, cfg.noise_seed)
    else:
        noise = np.zeros((0, 0), dtype=np.float64)
    k = kernels()
    err = k.solve_forward(
        dtape.ops, dtape.ref, dtape.f0, dtape.f1, dtape.args, dtape.arg_off,
        dtape.out_slots,
        ntape.ops, ntape.ref, ntape.f0, ntape.f1, ntape.args, ntape.arg_off,
        ntape.out_slots,
        cfg.method_code, cfg.dt, n_steps, params, inputs, delta,
        noise, states, dtape.new_values(), ntape.new_values(),
        np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(n),
    )
    if err >= 0:
        _raise_solver_error(err)
    times = np.arange(n_steps + 1, dtype=np.float64) * cfg.dt
    readouts = np.zeros((len(ridx), model.n_outputs), dtype=np.float64)
    rtape = model.readout_tape
    rvals = rtape.new_values()
    for r, gi in enumerate(ridx):
        env = E.EvalEnv(state=states[gi], params=params, inputs=inputs,
                        mismatch=delta, time=times[gi])
        readouts[r] = rtape.forward(env, rvals)
    return Trajectory(
        times=times,
        states=states,
        readout_times=np.array(model.readout_times, dtype=np.float64),
        readouts=readouts,
    )


def write_trajectory_csv(traj: Trajectory, path, provenance: Optional[str] = None):
    """Export grid states to CSV (`t,x0,x1,...`) and readouts to a sibling
    file (`<stem>.readouts.csv`)."""
    path = str(path)
    n = traj.states.shape[1]
    with open(path, "w") as f:
        if provenance is not None:
            f.write(f"# provenance: {provenance}\n")
        f.write("t," + ",".join(f"x{j}" for j in range(n)) + "\n")
        for i in range(len(traj.times)):
            row = ",".join(repr(float(v)) for v in traj.states[i])
            f.write(f"{float(traj.times[i])!r},{row}\n")
    sibling = path[:-4] + ".readouts.csv" if path.endswith(".csv") \
        else path + ".readouts.csv"
    n_out = traj.readouts.shape[1]
    with open(sibling, "w") as f:
        if provenance is not None:
            f.write(f"# provenance: {provenance}\n")
        f.write("t," + ",".join(f"y{j}" for j in range(n_out)) + "\n")
        for r in range(len(traj.readout_times)):
            row = ",".join(repr(float(v)) for v in traj.readouts[r])
            f.write(f"{float(traj.readout_times[r])!r},{row}\n")
    return sibling
