"""Transmission-line network security primitive (switchable-star PUF).

Two nominally identical stars of LC segment chains hang off center
capacitors; a challenge bit per branch opens or closes the switch coupling
that branch to its center. A voltage pulse starts on both centers, and the
response is the sign of the center-voltage difference at the readout time,
softened by a logistic so it stays differentiable. Device mismatch on the
per-segment scaling conductances is the entropy source.

Discretized Telegrapher dynamics per branch segment (position p, shared
across branches and stars):

    dV/dt = (gct_p I_this - gcs_{p+1} I_next) / C_p
    dI/dt = (glt_p V_prev - gls_p V_this) / L_p

The center node obeys dVc/dt = -sum_j b_j gcs_1 I_j1 / C0. Every g site
carries its own mismatch symbol. Trainables are the center capacitance C0
plus {C, L, gct, gcs, glt, gls} per segment position; the position-1
inductance is the center-link L0 of the fixed-center ablation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import expr as E
from .errors import ModelError, SolveError
from .gradient import GradEstimate, LossSpec, grad_backprop, _run_indexed
from .optim import TrainConfig, TrainResult, train
from .relax import sample_mismatch
from .rng import (STREAM_CHALLENGE, STREAM_EVAL, STREAM_MISMATCH,
                  STREAM_NOISE, rng_for, seed_for)
from .solver import EULER_MARUYAMA, RK4, SolveConfig, solve
from .store import TrainableStore
from .sysmodel import CompiledModel, SystemBuilder

__all__ = [
    "SsPufConfig",
    "Challenge",
    "build_sspuf",
    "initial_state",
    "challenge_response",
    "sample_challenges",
    "flip_bit",
    "i2o_from_responses",
    "i2o_loss",
    "i2o_grad",
    "evaluate_puf",
    "run_tln_experiment",
    "save_challenges",
    "load_challenges",
]

C_RANGE = (1e-10, 1e-8)
L_RANGE = (1e-10, 1e-8)
G_RANGE = (0.1, 10.0)
INIT_CL = 1e-9
INIT_G = 1.0


@dataclass(frozen=True)
class SsPufConfig:
    n_branches: int = 32
    segments_per_branch: int = 4
    t_readout: float = 10e-9
    dt: Optional[float] = None            # default t_readout / 512
    # Sized so the typical center-difference magnitude under the unit pulse
    # (|dV| ~ 0.1 V) lands on the logistic's active slope; hard thresholding
    # is unaffected, training gradients stay alive.
    logistic_steepness: float = 25.0
    mismatch_sigma: float = 0.05
    noise_std: float = 1e-7
    pulse_amplitude: float = 1.0
    fix_center: bool = False

    def __post_init__(self):
        if self.n_branches < 2:
            raise ModelError("SS-PUF needs at least 2 branches")
        if self.segments_per_branch < 1:
            raise ModelError("SS-PUF needs at least 1 segment per branch")
        if self.mismatch_sigma < 0:
            raise ModelError("mismatch_sigma must be >= 0")

    @property
    def step(self) -> float:
        return self.t_readout / 512.0 if self.dt is None else self.dt


@dataclass(frozen=True)
class Challenge:
    """One challenge word: a bit per branch, applied to both stars."""

    bits: tuple

    def __post_init__(self):
        if any(b not in (0, 1) for b in self.bits):
            raise ModelError("challenge bits must be 0/1")

    def as_inputs(self) -> np.ndarray:
        return np.array(self.bits, dtype=np.float64)

    def to_hex(self) -> str:
        n = len(self.bits)
        value = 0
        for b in self.bits:
            value = (value << 1) | b
        return format(value, f"0{(n + 3) // 4}x")

    @classmethod
    def from_hex(cls, text: str, n_bits: int) -> "Challenge":
        value = int(text.strip(), 16)
        bits = tuple((value >> (n_bits - 1 - i)) & 1 for i in range(n_bits))
        return cls(bits)


def build_sspuf(cfg: SsPufConfig) -> CompiledModel:
    """Compile the two-star model; challenge bits are model inputs.

    With ``cfg.fix_center`` the center capacitance and the center-link
    inductance become fixed constants instead of trainables (the ablation
    that probes their influence).
    """
    B = cfg.n_branches
    S = cfg.segments_per_branch
    b = SystemBuilder(f"sspuf_{B}x{S}", default_dt=cfg.step)

    state_idx = {}
    for star in ("a", "b"):
        state_idx[star, "vc"] = b.add_state(f"vc_{star}")
        for j in range(B):
            for t in range(S):
                state_idx[star, j, t, "i"] = b.add_state(f"i_{star}{j}_{t}")
                state_idx[star, j, t, "v"] = b.add_state(f"v_{star}{j}_{t}")
    for j in range(B):
        b.declare_input(f"b{j}")

    if cfg.fix_center:
        c0 = E.const(INIT_CL)
    else:
        c0 = b.analog("c0", INIT_CL, C_RANGE)
    pos = []
    for p in range(1, S + 1):
        if p == 1 and cfg.fix_center:
            l_p = E.const(INIT_CL)
        else:
            l_p = b.analog(f"l{p}", INIT_CL, L_RANGE)
        pos.append({
            "c": b.analog(f"c{p}", INIT_CL, C_RANGE),
            "l": l_p,
            "gct": b.analog(f"gct{p}", INIT_G, G_RANGE),
            "gcs": b.analog(f"gcs{p}", INIT_G, G_RANGE),
            "glt": b.analog(f"glt{p}", INIT_G, G_RANGE),
            "gls": b.analog(f"gls{p}", INIT_G, G_RANGE),
        })

    for star in ("a", "b"):
        center_terms = []
        for j in range(B):
            gate = E.inp(j)
            i0 = E.state(state_idx[star, j, 0, "i"])
            site = b.mismatch(E.mul(pos[0]["gcs"], i0), cfg.mismatch_sigma,
                              label=f"gcs1@{star}{j}")
            center_terms.append(E.neg(E.mul(gate, site)))
        b.set_derivative(state_idx[star, "vc"],
                         E.div(E.nsum(center_terms), c0))
        for j in range(B):
            gate = E.inp(j)
            for t in range(S):
                p = pos[t]
                v_prev = (E.state(state_idx[star, "vc"]) if t == 0
                          else E.state(state_idx[star, j, t - 1, "v"]))
                v_this = E.state(state_idx[star, j, t, "v"])
                i_this = E.state(state_idx[star, j, t, "i"])
                drive = b.mismatch(E.mul(p["glt"], v_prev),
                                   cfg.mismatch_sigma,
                                   label=f"glt{t + 1}@{star}{j}")
                if t == 0:
                    drive = E.mul(gate, drive)
                load = b.mismatch(E.mul(p["gls"], v_this), cfg.mismatch_sigma,
                                  label=f"gls{t + 1}@{star}{j}")
                b.set_derivative(state_idx[star, j, t, "i"],
                                 E.div(E.sub(drive, load), p["l"]))
                inflow = b.mismatch(E.mul(p["gct"], i_this),
                                    cfg.mismatch_sigma,
                                    label=f"gct{t + 1}@{star}{j}")
                if t < S - 1:
                    i_next = E.state(state_idx[star, j, t + 1, "i"])
                    outflow = b.mismatch(
                        E.mul(pos[t + 1]["gcs"], i_next), cfg.mismatch_sigma,
                        label=f"gcs{t + 2}@{star}{j}")
                    rhs = E.sub(inflow, outflow)
                else:
                    rhs = inflow  # open end: no outgoing current
                b.set_derivative(state_idx[star, j, t, "v"],
                                 E.div(rhs, p["c"]))

    if cfg.noise_std > 0:
        for s in range(len(b._state_names)):
            b.set_noise(s, E.const(cfg.noise_std))

    diff = E.sub(E.state(state_idx["a", "vc"]), E.state(state_idx["b", "vc"]))
    b.set_readout([cfg.t_readout],
                  [E.logistic(diff, cfg.logistic_steepness)])
    return b.compile()


def initial_state(model: CompiledModel, cfg: SsPufConfig) -> np.ndarray:
    """Unit pulse on both center voltages, everything else at rest."""
    x0 = np.zeros(model.n_states)
    for s, name in enumerate(model.state_names):
        if name.startswith("vc_"):
            x0[s] = cfg.pulse_amplitude
    return x0


def _solve_cfg(cfg: SsPufConfig, noisy: bool = False,
               noise_seed: Optional[int] = None) -> SolveConfig:
    if noisy:
        return SolveConfig(dt=cfg.step, t_end=cfg.t_readout,
                           method=EULER_MARUYAMA, noise_seed=noise_seed)
    return SolveConfig(dt=cfg.step, t_end=cfg.t_readout, method=RK4)


def challenge_response(model: CompiledModel, params, delta,
                       challenge: Challenge, cfg: SsPufConfig,
                       noisy: bool = False,
                       noise_seed: Optional[int] = None) -> float:
    """Soft response in (0, 1); > 0.5 reads as a '1' bit."""
    scfg = _solve_cfg(cfg, noisy, noise_seed)
    traj = solve(model, params, delta, challenge.as_inputs(),
                 initial_state(model, cfg), scfg)
    return float(traj.readouts[0, 0])


def sample_challenges(n: int, n_bits: int, rng: np.random.Generator):
    return [Challenge(tuple(int(v) for v in rng.integers(0, 2, size=n_bits)))
            for _ in range(n)]


def flip_bit(c: Challenge, j: int) -> Challenge:
    bits = list(c.bits)
    bits[j] = 1 - bits[j]
    return Challenge(tuple(bits))


def save_challenges(challenges, path):
    with open(path, "w") as f:
        for c in challenges:
            f.write(c.to_hex() + "\n")


def load_challenges(path, n_bits: int):
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line and not line.startswith("#"):
                out.append(Challenge.from_hex(line, n_bits))
    return out


# -- the instance-to-optimum metric -------------------------------------------


def i2o_from_responses(responses: np.ndarray):
    """Per-instance metric from a [n_refs, 1 + n_bits] response table.

    Column 0 is the reference response, column j+1 the response after
    flipping bit j. S_j is the mean response flip indicator over the
    references (|difference| for soft responses, XOR for hard bits), and
    the metric averages |S_j - 0.5| over bits: 0 is ideal, 0.5 is worst.
    """
    responses = np.asarray(responses, dtype=np.float64)
    s = np.mean(np.abs(responses[:, 1:] - responses[:, :1]), axis=0)
    return float(np.mean(np.abs(s - 0.5))), s


def _response_table(model, params, delta, refs, cfg):
    B = cfg.n_branches
    table = np.zeros((len(refs), B + 1))
    for k, ref in enumerate(refs):
        table[k, 0] = challenge_response(model, params, delta, ref, cfg)
        for j in range(B):
            table[k, j + 1] = challenge_response(model, params, delta,
                                                 flip_bit(ref, j), cfg)
    return table


def i2o_loss(model: CompiledModel, params, n_instances: int,
             n_reference_challenges: int, rng: np.random.Generator,
             cfg: SsPufConfig) -> float:
    """Mean instance-to-optimum over freshly sampled mismatch instances,
    estimated with soft responses."""
    if n_instances < 1:
        raise ModelError("i2o_loss needs at least one instance")
    values = []
    for _ in range(n_instances):
        delta = sample_mismatch(model.sigmas, rng)
        refs = sample_challenges(n_reference_challenges, cfg.n_branches, rng)
        value, _ = i2o_from_responses(_response_table(model, params, delta,
                                                      refs, cfg))
        values.append(value)
    return float(np.mean(values))


def _i2o_outer_weights(responses: np.ndarray, n_bits: int):
    """dI2O_instance / dresponse for every table entry (subgradient signs)."""
    n_refs = responses.shape[0]
    _, s = i2o_from_responses(responses)
    w = np.zeros_like(responses)
    ds = np.sign(s - 0.5) / n_bits          # dI2O/dS_j
    diff_sign = np.sign(responses[:, 1:] - responses[:, :1])
    w[:, 1:] = ds[None, :] * diff_sign / n_refs
    w[:, 0] = -np.sum(ds[None, :] * diff_sign / n_refs, axis=1)
    return w


def i2o_grad(model: CompiledModel, params, n_instances: int,
             n_reference_challenges: int, rng_seed: int, cfg: SsPufConfig,
             workers: int = 1):
    """(loss, dloss/dparams) of the soft metric.

    The metric couples every solve of an instance's challenge table, so the
    gradient is assembled as the outer-chain-weighted sum of per-solve
    response gradients; mismatch draws and challenge sets derive from
    ``rng_seed`` by counter. Also returns per-instance losses.
    """
    B = cfg.n_branches
    scfg = _solve_cfg(cfg)
    x0 = None
    spec = LossSpec(E.state(0), np.zeros((1, 1)))
    instance_data = []
    for i in range(n_instances):
        delta = sample_mismatch(model.sigmas,
                                rng_for(rng_seed, STREAM_MISMATCH, i))
        refs = sample_challenges(n_reference_challenges, B,
                                 rng_for(rng_seed, STREAM_CHALLENGE, i))
        instance_data.append((delta, refs))

    jobs = []
    for i, (delta, refs) in enumerate(instance_data):
        for k, ref in enumerate(refs):
            jobs.append((i, k, 0, ref))
            for j in range(B):
                jobs.append((i, k, j + 1, flip_bit(ref, j)))

    def run_one(idx):
        i, k, col, ch = jobs[idx]
        delta = instance_data[i][0]
        nonlocal_x0 = initial_state(model, cfg)
        value, grad = grad_backprop(model, params, delta, ch.as_inputs(),
                                    nonlocal_x0, scfg, spec)
        return value, grad

    results = _run_indexed(run_one, len(jobs), workers)

    n_refs = n_reference_challenges
    grad_total = np.zeros(model.n_params)
    losses = []
    for i in range(n_instances):
        table = np.zeros((n_refs, B + 1))
        grads = {}
        base = i * n_refs * (B + 1)
        for k in range(n_refs):
            for col in range(B + 1):
                value, grad = results[base + k * (B + 1) + col]
                table[k, col] = value
                grads[k, col] = grad
        value, _ = i2o_from_responses(table)
        losses.append(value)
        w = _i2o_outer_weights(table, B)
        for k in range(n_refs):
            for col in range(B + 1):
                if w[k, col] != 0.0:
                    grad_total += w[k, col] * grads[k, col]
    grad_total /= n_instances
    return float(np.mean(losses)), grad_total, np.array(losses)


# -- evaluation ----------------------------------------------------------------


def evaluate_puf(model: CompiledModel, params, n_test_instances: int,
                 cfg: SsPufConfig, seed: int, n_reference_challenges: int = 8,
                 n_noise_trials: int = 2, workers: int = 1) -> dict:
    """Test report over fresh mismatch instances.

    Hard (thresholded) response bits drive the reported statistics — the
    soft metric appears alongside for reference. ``noise_stability`` is the
    fraction of hard bits unchanged when transient noise of the configured
    standard deviation is injected into the solve.
    """
    B = cfg.n_branches

    def run_instance(i):
        delta = sample_mismatch(model.sigmas,
                                rng_for(seed, STREAM_EVAL, i, 0))
        refs = sample_challenges(n_reference_challenges, B,
                                 rng_for(seed, STREAM_EVAL, i, 1))
        table = _response_table(model, params, delta, refs, cfg)
        soft_i2o, _ = i2o_from_responses(table)
        hard = (table > 0.5).astype(np.float64)
        hard_i2o, s_hard = i2o_from_responses(hard)
        bias = float(np.mean(hard))
        stable = 0
        total = 0
        for k in range(min(2, len(refs))):
            base_bit = hard[k, 0]
            for t in range(n_noise_trials):
                r = challenge_response(
                    model, params, delta, refs[k], cfg, noisy=True,
                    noise_seed=seed_for(seed, STREAM_NOISE, i, k, t))
                stable += int((r > 0.5) == bool(base_bit))
                total += 1
        return soft_i2o, hard_i2o, bias, stable, total

    rows = _run_indexed(run_instance, n_test_instances, workers)
    soft = np.array([r[0] for r in rows])
    hard = np.array([r[1] for r in rows])
    bias = np.array([r[2] for r in rows])
    stable = sum(r[3] for r in rows)
    total = sum(r[4] for r in rows)
    return {
        "n_instances": n_test_instances,
        "i2o": float(np.mean(hard)),
        "i2o_soft": float(np.mean(soft)),
        "i2o_std": float(np.std(hard)),
        "bit_bias_mean": float(np.mean(bias)),
        "bit_bias_std": float(np.std(bias)),
        "noise_stability": float(stable / total) if total else 1.0,
    }


# -- experiment driver ----------------------------------------------------------


@dataclass
class TlnExperimentConfig:
    n_branches: int = 32
    segments_per_branch: int = 4
    mismatch_sigma: float = 0.05
    n_train_instances: int = 8
    n_challenge_sets: int = 32
    n_test_instances: int = 192
    n_steps: int = 24
    lr: float = 0.005
    seed: int = 0
    workers: int = 1
    fix_center: bool = False


def run_tln_experiment(c: TlnExperimentConfig, log_hook=None) -> dict:
    """Train the PUF parameters against the soft metric; report hard-bit
    test statistics before and after."""
    cfg = SsPufConfig(n_branches=c.n_branches,
                      segments_per_branch=c.segments_per_branch,
                      mismatch_sigma=c.mismatch_sigma,
                      fix_center=c.fix_center)
    model = build_sspuf(cfg)
    store = TrainableStore.from_decls(model.trainables)

    initial_report = evaluate_puf(model, store.physical(hard=True).params,
                                  c.n_test_instances, cfg, c.seed,
                                  workers=c.workers)

    def grad_fn(st, step, tau, step_seed):
        pmap = st.physical()
        loss, g_phys, per_instance = i2o_grad(
            model, pmap.params, c.n_train_instances, c.n_challenge_sets,
            step_seed, cfg, workers=c.workers)
        return GradEstimate(grad=st.chain_to_raw(g_phys, pmap),
                            loss_mean=loss,
                            loss_std=float(np.std(per_instance)),
                            n_samples=c.n_train_instances)

    tc = TrainConfig(n_steps=c.n_steps, batch_size=1, lr=c.lr,
                     seed=c.seed, workers=c.workers)
    result = train(model, store, None, tc, _solve_cfg(cfg), grad_fn=grad_fn)
    best_params = result.best_store.physical(hard=True).params
    final_report = evaluate_puf(model, best_params, c.n_test_instances, cfg,
                                c.seed, workers=c.workers)
    if log_hook:
        log_hook(result)
    return {
        "paradigm": "tln",
        "initial": initial_report,
        "optimized": final_report,
        "best_step": result.best_step,
        "best_train_loss": result.best_loss,
        "trainables": {d.name: float(v) for d, v in
                       zip(model.trainables, best_params)},
        "history": result.history,
        "result": result,
    }
