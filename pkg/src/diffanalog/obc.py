"""Oscillator-based pattern recognizer paradigm.

Phase oscillators on a grid, coupled to their 4-neighbors through discrete
DAC-programmed weights and pinned by an injection-locking term:

    dx_i/dt = -sum_j k_ij sin(pi (x_i - x_j)) - l sin(2 pi x_i) + alpha xi(t)

Phases are normalized (x = 1 is a half turn). Couplings are symmetric, one
shared trainable per undirected edge. The measured pixel value is the phase
folded onto [0, 1]; the default triangular fold is built from clamp
segments so the readout stays inside the expression DAG, a cosine readout
is available as an alternative convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from importlib import resources
from typing import Optional

import numpy as np

from . import expr as E
from .errors import ModelError
from .gradient import BatchItem
from .optim import TrainConfig, TrainResult, train
from .relax import TauSchedule, dac_levels
from .rng import (STREAM_BATCH, STREAM_DATASET, STREAM_EVAL, STREAM_INIT,
                  rng_for, seed_for)
from .solver import EULER_MARUYAMA, SolveConfig, solve
from .store import TrainableStore
from .sysmodel import CompiledModel, SystemBuilder

__all__ = [
    "ObcConfig",
    "PatternSet",
    "grid_edges",
    "build_obc",
    "hebbian_weights",
    "phase_readout",
    "noisy_dataset",
    "load_patterns",
    "builtin_patterns",
    "evaluate_obc",
    "run_obc_setup",
    "run_obc_table",
    "SETUPS",
]

DEFAULT_DT = 1.0 / 256.0
HEBBIAN_LOGIT_SCALE = 3.0


@dataclass(frozen=True)
class ObcConfig:
    rows: int = 10
    cols: int = 6
    bitwidth: int = 1
    noise_alpha: float = 0.025
    locking_trainable: bool = False
    init: str = "hebbian"            # "hebbian" | "random"
    t_measure: float = 1.0
    dt: float = DEFAULT_DT
    readout: str = "triangle"        # "triangle" | "cosine"
    fold_span: int = 16
    locking_init: float = 1.0
    locking_range: tuple = (0.0, 4.0)

    def __post_init__(self):
        if self.bitwidth < 1:
            raise ModelError("bitwidth must be >= 1")
        if self.noise_alpha < 0:
            raise ModelError("noise_alpha must be >= 0")
        if self.init not in ("hebbian", "random"):
            raise ModelError(f"unknown init {self.init!r}")
        if self.readout not in ("triangle", "cosine"):
            raise ModelError(f"unknown readout {self.readout!r}")


@dataclass
class PatternSet:
    """Binary patterns sharing one grid shape."""

    patterns: list  # of [rows, cols] float arrays with values in {0, 1}

    def __post_init__(self):
        if not self.patterns:
            raise ModelError("pattern set is empty")
        shape = self.patterns[0].shape
        for p in self.patterns:
            if p.shape != shape:
                raise ModelError("patterns must share one shape")
            if not np.all((p == 0.0) | (p == 1.0)):
                raise ModelError("patterns must be binary")

    @property
    def shape(self):
        return self.patterns[0].shape

    def flat(self) -> np.ndarray:
        return np.stack([p.reshape(-1) for p in self.patterns])


def load_patterns(path) -> PatternSet:
    """Parse an ASCII pattern file: rows of 0/1, patterns separated by
    blank lines, '#' lines are comments."""
    with open(path) as f:
        text = f.read()
    return _parse_patterns(text)


def _parse_patterns(text: str) -> PatternSet:
    blocks = []
    current = []
    for line in text.splitlines():
        line = line.strip()
        if line.startswith("#"):
            continue
        if not line:
            if current:
                blocks.append(current)
                current = []
            continue
        if set(line) - {"0", "1"}:
            raise ModelError(f"pattern rows must be 0/1 strings, got {line!r}")
        current.append([float(c) for c in line])
    if current:
        blocks.append(current)
    return PatternSet([np.array(b, dtype=np.float64) for b in blocks])


def builtin_patterns() -> PatternSet:
    text = resources.files("diffanalog.data").joinpath("obc_digits.txt").read_text()
    return _parse_patterns(text)


def grid_edges(rows: int, cols: int):
    """Undirected 4-neighborhood edges of the grid, row-major cells."""
    edges = []
    for r in range(rows):
        for c in range(cols):
            i = r * cols + c
            if c + 1 < cols:
                edges.append((i, i + 1))
            if r + 1 < rows:
                edges.append((i, i + cols))
    return edges


def hebbian_weights(patterns: PatternSet, bitwidth: int, edges) -> np.ndarray:
    """Coupling per edge from the stored patterns, snapped to DAC levels.

    Hopfield-style products of bipolar pixels averaged over patterns,
    normalized to [-1, 1] by the largest magnitude, then quantized to the
    nearest level (ties toward the lower level).
    """
    s = 2.0 * patterns.flat() - 1.0
    raw = np.array([float(np.mean(s[:, i] * s[:, j])) for i, j in edges])
    peak = np.max(np.abs(raw))
    if peak > 0:
        raw = raw / peak
    levels = dac_levels(bitwidth)
    snapped = np.array([levels[int(np.argmin(np.abs(levels - v)))] for v in raw])
    return snapped


def phase_readout(x) -> np.ndarray:
    """Fold phases onto [0, 1]: 0 -> 0, 1 -> 1, period 2, triangular."""
    x = np.asarray(x, dtype=np.float64)
    return 1.0 - np.abs(1.0 - np.mod(x, 2.0))


def _coupling_logits(cfg: ObcConfig, patterns: Optional[PatternSet],
                     seed: Optional[int], n_edges: int, edges) -> np.ndarray:
    levels = dac_levels(cfg.bitwidth)
    if cfg.init == "hebbian":
        if patterns is None:
            raise ModelError("hebbian initialization needs patterns")
        values = hebbian_weights(patterns, cfg.bitwidth, edges)
        logits = np.zeros((n_edges, len(levels)))
        for e, v in enumerate(values):
            logits[e, int(np.argmin(np.abs(levels - v)))] = HEBBIAN_LOGIT_SCALE
        return logits
    if seed is None:
        raise ModelError("random initialization needs a seed")
    rng = rng_for(seed, STREAM_INIT)
    return rng.uniform(-0.5, 0.5, size=(n_edges, len(levels)))


def build_obc(cfg: ObcConfig, patterns: Optional[PatternSet] = None,
              seed: Optional[int] = None) -> CompiledModel:
    """Compile the oscillator grid; couplings become discrete trainables.

    The initial logits come from the Hebbian rule (needs ``patterns``) or a
    seeded uniform draw, per ``cfg.init``. The locking weight is a bounded
    analog trainable when ``cfg.locking_trainable``, else fixed at
    ``cfg.locking_init``.
    """
    rows, cols = cfg.rows, cfg.cols
    edges = grid_edges(rows, cols)
    levels = dac_levels(cfg.bitwidth)
    logits = _coupling_logits(cfg, patterns, seed, len(edges), edges)

    b = SystemBuilder(f"obc{rows}x{cols}_b{cfg.bitwidth}", default_dt=cfg.dt)
    for r in range(rows):
        for c in range(cols):
            b.add_state(f"x{r}_{c}")
    k_refs = [
        b.discrete(f"k_{i}_{j}", levels, logits[e])
        for e, (i, j) in enumerate(edges)
    ]
    if cfg.locking_trainable:
        l_ref = b.analog("l", cfg.locking_init, cfg.locking_range)
    else:
        l_ref = E.const(cfg.locking_init)

    n = rows * cols
    terms = [[] for _ in range(n)]
    pi = math.pi
    for e, (i, j) in enumerate(edges):
        # sin(pi (x_i - x_j)) shared; the reverse edge is its negation.
        s_ij = E.sin(E.mul(E.const(pi), E.sub(E.state(i), E.state(j))))
        coupled = E.mul(k_refs[e], s_ij)
        terms[i].append(E.neg(coupled))
        terms[j].append(coupled)
    for i in range(n):
        lock = E.neg(E.mul(l_ref, E.sin(E.mul(E.const(2.0 * pi), E.state(i)))))
        b.set_derivative(i, E.nsum(terms[i] + [lock]))
        if cfg.noise_alpha > 0:
            b.set_noise(i, E.const(cfg.noise_alpha))

    span = cfg.fold_span
    if cfg.readout == "triangle":
        outs = [E.triangle_fold(E.state(i), -span, span + 1) for i in range(n)]
    else:
        # (1 - cos(pi x)) / 2 via the sine phase shift.
        outs = [
            E.mul(E.const(0.5),
                  E.sub(E.const(1.0),
                        E.sin(E.add(E.mul(E.const(pi), E.state(i)),
                                    E.const(pi / 2.0)))))
            for i in range(n)
        ]
    b.set_readout([cfg.t_measure], outs)
    return b.compile()


def noisy_dataset(patterns: PatternSet, n_pairs: int,
                  rng: np.random.Generator, noise_amp: float = 0.5):
    """(noisy image, ideal image) pairs; the noisy pixels become the
    oscillators' initial phases."""
    flat = patterns.flat()
    n_pat, n_px = flat.shape
    items = []
    for _ in range(n_pairs):
        p = int(rng.integers(0, n_pat))
        ideal = flat[p]
        noisy = np.clip(ideal + rng.uniform(-noise_amp, noise_amp, size=n_px),
                        0.0, 1.0)
        items.append(BatchItem(
            inputs=np.zeros(0),
            x0=noisy,
            targets=ideal.reshape(1, -1),
        ))
    return items


def _solve_cfg(cfg: ObcConfig, noise_seed: int = 0) -> SolveConfig:
    return SolveConfig(dt=cfg.dt, t_end=cfg.t_measure, method=EULER_MARUYAMA,
                       noise_seed=noise_seed)


def evaluate_obc(model: CompiledModel, params: np.ndarray, items,
                 cfg: ObcConfig, seed: int) -> float:
    """Mean MSE between the folded readout at t_measure and the ideal
    pattern, with transient noise active (per-item derived seeds)."""
    losses = []
    delta = np.ones(model.n_mismatch)
    for i, item in enumerate(items):
        scfg = _solve_cfg(cfg, noise_seed=seed_for(seed, STREAM_EVAL, i))
        traj = solve(model, params, delta, item.inputs, item.x0, scfg)
        losses.append(float(np.mean((traj.readouts[0] - item.targets[0]) ** 2)))
    return float(np.mean(losses))


SETUPS = (
    ("hebbian", "none"),
    ("random", "couple"),
    ("random", "couple_lock"),
    ("hebbian", "couple_lock"),
)


@dataclass
class ObcExperimentConfig:
    bitwidths: tuple = (1, 2, 3)
    noise_alpha: float = 0.025
    n_train: int = 512
    n_test: int = 2048
    batch_size: int = 32
    n_steps: int = 64
    lr: float = 0.1
    tau_start: float = 10.0
    tau_end: float = 1.0
    seed: int = 0
    workers: int = 1


def run_obc_setup(bitwidth: int, init: str, trainables: str,
                  c: ObcExperimentConfig,
                  patterns: Optional[PatternSet] = None) -> dict:
    """One cell of the comparison table.

    ``trainables``: "none" evaluates the initialization as-is (the Hebbian
    baseline), "couple" trains coupling logits with the locking weight
    fixed, "couple_lock" trains both.
    """
    if patterns is None:
        patterns = builtin_patterns()
    cfg = ObcConfig(bitwidth=bitwidth, noise_alpha=c.noise_alpha,
                    locking_trainable=(trainables == "couple_lock"),
                    init=init)
    model = build_obc(cfg, patterns=patterns, seed=c.seed)
    store = TrainableStore.from_decls(model.trainables)
    test_items = noisy_dataset(patterns, c.n_test,
                               rng_for(c.seed, STREAM_DATASET, 1))
    out = {"bitwidth": bitwidth, "init": init, "trainables": trainables}
    if trainables == "none":
        params = store.physical(hard=True).params
        out["test_loss"] = evaluate_obc(model, params, test_items, cfg, c.seed)
        return out
    train_items = noisy_dataset(patterns, c.n_train,
                                rng_for(c.seed, STREAM_DATASET, 0))
    tc = TrainConfig(
        n_steps=c.n_steps, batch_size=c.batch_size, lr=c.lr,
        n_mismatch=1, seed=c.seed, workers=c.workers,
        tau_schedule=TauSchedule(c.tau_start, c.tau_end, c.n_steps,
                                 "exponential"),
    )
    scfg = _solve_cfg(cfg, noise_seed=0)
    loss_expr = E.mean_squared_error(model.n_outputs)

    def select_hardened(st, step, tau, step_seed):
        # Score the realizable (hardened) twin on this step's batch; the
        # relaxed loss at high temperature rewards coupling strengths no
        # DAC setting can produce.
        batch_rng = rng_for(c.seed, STREAM_BATCH, step)
        idx = (batch_rng.integers(0, len(train_items), size=tc.batch_size)
               if tc.batch_size >= len(train_items) else
               batch_rng.choice(len(train_items), size=tc.batch_size,
                                replace=False))
        batch = [train_items[int(i)] for i in idx]
        return evaluate_obc(model, st.physical(hard=True).params, batch,
                            cfg, step_seed)

    result = train(model, store, train_items, tc, scfg, loss_expr=loss_expr,
                   select_fn=select_hardened)
    params = result.best_store.physical(hard=True).params
    out["test_loss"] = evaluate_obc(model, params, test_items, cfg, c.seed)
    out["best_step"] = result.best_step
    out["best_train_loss"] = result.best_loss
    out["history"] = result.history
    out["result"] = result
    return out


def run_obc_table(c: ObcExperimentConfig,
                  patterns: Optional[PatternSet] = None) -> dict:
    """Full comparison: rows = bitwidth, columns = (init, trainables)."""
    if patterns is None:
        patterns = builtin_patterns()
    table = {}
    for bw in c.bitwidths:
        row = {}
        for init, trainables in SETUPS:
            cell = run_obc_setup(bw, init, trainables, c, patterns)
            row[f"{init}/{trainables}"] = cell["test_loss"]
        table[str(bw)] = row
    return {"paradigm": "obc", "noise_alpha": c.noise_alpha, "table": table}
