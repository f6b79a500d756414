"""Differentiable relaxations and samplers for hardware nonidealities.

sample_mismatch   static fabrication deviations, delta ~ N(1, sigma^2)
gumbel_softmax    relaxed selection over discrete DAC levels
harden            evaluation-mode argmax selection
bound_transform   affine map between raw [-1, 1] values and physical ranges
TauSchedule       temperature annealing for the Gumbel-Softmax relaxation
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ModelError

__all__ = [
    "sample_mismatch",
    "gumbel_softmax",
    "gumbel_softmax_grad_logits",
    "harden",
    "bound_transform",
    "bound_inverse",
    "clip_raw",
    "dac_levels",
    "TauSchedule",
]


def sample_mismatch(sigmas, rng: np.random.Generator) -> np.ndarray:
    """Draw delta_k ~ N(1, sigma_k^2), independent per symbol.

    Zero-sigma symbols come out exactly 1.0. The normal draw happens for
    every symbol regardless of sigma so stream consumption (and therefore
    replay) does not depend on the sigma values.
    """
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(sigmas < 0):
        raise ModelError("mismatch sigmas must be >= 0")
    z = rng.standard_normal(len(sigmas))
    return 1.0 + sigmas * z


def gumbel_softmax(logits, levels, tau: float, rng: np.random.Generator = None,
                   gumbel=None):
    """Relaxed draw from the discrete levels.

    Returns ``(value, weights)`` with weights on the open simplex and
    ``value = weights @ levels``. ``gumbel`` overrides the noise draw (test
    hook / frozen-noise training); otherwise standard Gumbel(0,1) noise is
    sampled from ``rng`` via -log(-log(U)).
    """
    logits = np.asarray(logits, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    if tau <= 0:
        raise ModelError(f"gumbel_softmax temperature must be > 0, got {tau}")
    if not np.all(np.isfinite(logits)):
        raise ModelError("gumbel_softmax logits must be finite")
    if gumbel is None:
        if rng is None:
            raise ModelError("gumbel_softmax needs an rng or explicit gumbel noise")
        u = rng.random(len(logits))
        u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-16)
        gumbel = -np.log(-np.log(u))
    z = (logits + np.asarray(gumbel, dtype=np.float64)) / tau
    z = z - np.max(z)
    w = np.exp(z)
    w /= w.sum()
    return float(w @ levels), w


def gumbel_softmax_grad_logits(weights, levels, value: float, tau: float) -> np.ndarray:
    """d(value)/d(logits) for a fixed Gumbel noise sample.

    From the softmax Jacobian: dvalue/dlogit_j = w_j (p_j - value) / tau.
    """
    weights = np.asarray(weights, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    return weights * (levels - value) / tau


def harden(logits, levels) -> float:
    """Evaluation-mode selection: the level with the largest logit.

    Ties break toward the lower index (numpy argmax convention).
    """
    logits = np.asarray(logits, dtype=np.float64)
    levels = np.asarray(levels, dtype=np.float64)
    return float(levels[int(np.argmax(logits))])


def bound_transform(raw: float, lo: float, hi: float) -> float:
    """Affine map of raw in [-1, 1] onto the physical range [lo, hi]."""
    if not lo < hi:
        raise ModelError(f"bound_transform requires lo < hi, got [{lo}, {hi}]")
    return lo + (raw + 1.0) * 0.5 * (hi - lo)


def bound_inverse(value: float, lo: float, hi: float) -> float:
    """Exact inverse of ``bound_transform`` on [lo, hi]."""
    if not lo < hi:
        raise ModelError(f"bound_inverse requires lo < hi, got [{lo}, {hi}]")
    return 2.0 * (value - lo) / (hi - lo) - 1.0


def clip_raw(raw):
    """Clip raw analog values back into [-1, 1] (idempotent)."""
    return np.clip(raw, -1.0, 1.0)


def dac_levels(bitwidth: int) -> np.ndarray:
    """2^b uniformly spaced levels spanning [-1, 1] inclusive.

    A 1-bit DAC yields {-1, +1}.
    """
    if bitwidth < 1:
        raise ModelError(f"DAC bitwidth must be >= 1, got {bitwidth}")
    return np.linspace(-1.0, 1.0, 2 ** bitwidth)


@dataclass(frozen=True)
class TauSchedule:
    """Monotone nonincreasing temperature schedule over optimizer steps."""

    tau_start: float
    tau_end: float
    n_steps: int
    mode: str = "exponential"

    def __post_init__(self):
        if self.tau_start <= 0 or self.tau_end <= 0:
            raise ModelError("temperatures must be positive")
        if self.tau_end > self.tau_start:
            raise ModelError("tau_end must not exceed tau_start")
        if self.n_steps < 1:
            raise ModelError("schedule needs at least one step")
        if self.mode not in ("exponential", "linear"):
            raise ModelError(f"unknown schedule mode {self.mode!r}")

    def tau(self, step: int) -> float:
        if self.n_steps == 1:
            return self.tau_start
        s = min(max(step, 0), self.n_steps - 1) / (self.n_steps - 1)
        if self.mode == "linear":
            return self.tau_start + (self.tau_end - self.tau_start) * s
        return self.tau_start * (self.tau_end / self.tau_start) ** s
