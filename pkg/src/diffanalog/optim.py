"""Adam optimizer and the training loop.

Updates happen in raw trainable space: analog raw values are clipped back
into [-1, 1] after every step (the bounded-parameter contract), discrete
logits stay unconstrained. The loop tracks the lowest-training-loss store,
logs one CSV row per step and writes resumable JSON checkpoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import expr as E
from .errors import OptimError
from .gradient import BACKPROP, GradEstimate, mc_grad
from .relax import TauSchedule, clip_raw
from .rng import STREAM_BATCH, rng_for, seed_for
from .solver import SolveConfig
from .store import TrainableStore
from .sysmodel import CompiledModel

__all__ = ["AdamState", "adam_step", "TrainConfig", "TrainResult", "train",
           "write_training_log", "save_checkpoint", "load_checkpoint"]


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n: int, lr: float = 0.1, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n), step=0, lr=lr,
                   beta1=beta1, beta2=beta2, eps=eps)

    def to_doc(self) -> dict:
        return {
            "m": [float(x) for x in self.m],
            "v": [float(x) for x in self.v],
            "step": self.step,
            "lr": self.lr,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> "AdamState":
        return cls(m=np.asarray(doc["m"], dtype=np.float64),
                   v=np.asarray(doc["v"], dtype=np.float64),
                   step=int(doc["step"]), lr=float(doc["lr"]),
                   beta1=float(doc["beta1"]), beta2=float(doc["beta2"]),
                   eps=float(doc["eps"]))


def adam_step(store: TrainableStore, grad, state: AdamState):
    """One Adam update with bias correction, in place.

    Analog raw values are clipped to [-1, 1] afterwards; non-finite gradient
    entries are an error rather than silent NaN propagation.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != store.raw.shape:
        raise OptimError(
            f"gradient shape {grad.shape} does not match raw store "
            f"{store.raw.shape}"
        )
    if not np.all(np.isfinite(grad)):
        bad = np.flatnonzero(~np.isfinite(grad))
        raise OptimError(f"non-finite gradient entries at raw indices "
                         f"{bad.tolist()[:8]}")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    store.raw -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    mask = store.analog_mask
    store.raw[mask] = clip_raw(store.raw[mask])


@dataclass
class TrainConfig:
    n_steps: int
    batch_size: int = 1
    lr: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    n_mismatch: int = 1
    method: str = BACKPROP
    seed: int = 0
    tau_schedule: Optional[TauSchedule] = None
    gumbel_per_sample: bool = True
    workers: int = 1

    def __post_init__(self):
        if self.n_steps < 1:
            raise OptimError("n_steps must be >= 1")
        if self.batch_size < 1:
            raise OptimError("batch_size must be >= 1")


@dataclass
class TrainResult:
    best_store: TrainableStore
    final_store: TrainableStore
    history: list = field(default_factory=list)  # rows of log dicts
    best_step: int = -1
    best_loss: float = float("inf")


GradFn = Callable[[TrainableStore, int, Optional[float], int], GradEstimate]


def train(model: CompiledModel, store: TrainableStore, dataset,
          config: TrainConfig, cfg: SolveConfig,
          loss_expr: Optional[E.Expr] = None,
          grad_fn: Optional[GradFn] = None,
          select_fn: Optional[Callable] = None,
          start_step: int = 0,
          adam: Optional[AdamState] = None) -> TrainResult:
    """Run the optimization loop; returns the lowest-training-loss store.

    Per step: draw a batch, resample mismatch/noise (all derived from the
    config seed and the absolute step index, so a resumed run retraces the
    original exactly), estimate the gradient, apply Adam. ``grad_fn``
    replaces the default dataset/mc_grad estimator for paradigms whose loss
    spans several solves (the PUF metric does this).

    ``select_fn(store, step, tau, step_seed) -> float`` overrides the
    checkpoint-selection metric. Models with discrete trainables need this:
    the relaxed loss at high temperature is not realizable in hardware, so
    selection should score the hardened twin instead.
    """
    if grad_fn is None:
        if loss_expr is None or dataset is None or len(dataset) == 0:
            raise OptimError("train needs a dataset and loss_expr (or a "
                             "custom grad_fn)")
    if adam is None:
        adam = AdamState.fresh(store.n_raw, lr=config.lr, beta1=config.beta1,
                               beta2=config.beta2, eps=config.eps)
    result = TrainResult(best_store=store.copy(), final_store=store)
    for step in range(start_step, config.n_steps):
        tau = config.tau_schedule.tau(step) if config.tau_schedule else None
        step_seed = seed_for(config.seed, STREAM_BATCH, step)
        if grad_fn is not None:
            est = grad_fn(store, step, tau, step_seed)
        else:
            batch = _draw_batch(dataset, config.batch_size,
                                rng_for(config.seed, STREAM_BATCH, step))
            est = mc_grad(model, store, batch, config.n_mismatch, step_seed,
                          cfg, loss_expr, method=config.method, tau=tau,
                          gumbel_per_sample=config.gumbel_per_sample,
                          workers=config.workers)
        try:
            adam_step(store, est.grad, adam)
        except OptimError as e:
            raise OptimError(f"step {step}: {e}") from e
        row = {
            "step": step,
            "loss_mean": est.loss_mean,
            "loss_std": est.loss_std,
            "grad_norm": float(np.linalg.norm(est.grad)),
            "tau": tau if tau is not None else "",
        }
        result.history.append(row)
        select_loss = est.loss_mean if select_fn is None else float(
            select_fn(store, step, tau, step_seed)
        )
        if select_loss < result.best_loss:
            result.best_loss = select_loss
            result.best_step = step
            result.best_store = store.copy()
    result.final_store = store
    result.adam = adam
    return result


def _draw_batch(dataset: Sequence, batch_size: int, rng: np.random.Generator):
    n = len(dataset)
    if batch_size >= n:
        idx = rng.integers(0, n, size=batch_size)
    else:
        idx = rng.choice(n, size=batch_size, replace=False)
    return [dataset[int(i)] for i in idx]


def write_training_log(history, path, provenance: Optional[str] = None):
    """CSV log: `step,loss_mean,loss_std,grad_norm,tau`, one row per step."""
    with open(path, "w") as f:
        if provenance is not None:
            f.write(f"# provenance: {provenance}\n")
        f.write("step,loss_mean,loss_std,grad_norm,tau\n")
        for row in history:
            tau = row["tau"]
            tau_s = repr(float(tau)) if tau != "" else ""
            f.write(f"{row['step']},{float(row['loss_mean'])!r},"
                    f"{float(row['loss_std'])!r},"
                    f"{float(row['grad_norm'])!r},{tau_s}\n")


def save_checkpoint(path, store: TrainableStore, adam: AdamState,
                    seed: int, next_step: int,
                    extra: Optional[dict] = None):
    """Resumable snapshot: raw trainables, Adam moments and the rng cursor
    (root seed + next step index)."""
    doc = {
        "format": "diffanalog-checkpoint/1",
        "store": store.to_doc(),
        "adam": adam.to_doc(),
        "seed": int(seed),
        "next_step": int(next_step),
    }
    if extra:
        doc["extra"] = extra
    with open(path, "w") as f:
        f.write(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, decls):
    with open(path) as f:
        doc = json.load(f)
    if doc.get("format") != "diffanalog-checkpoint/1":
        raise OptimError(f"unsupported checkpoint format {doc.get('format')!r}")
    store = TrainableStore.from_doc(decls, doc["store"])
    adam = AdamState.from_doc(doc["adam"])
    return store, adam, int(doc["seed"]), int(doc["next_step"]), doc.get("extra")
