"""Raw trainable storage and the raw <-> physical mapping.

Analog trainables keep one raw value in [-1, 1] that maps affinely onto
their physical range; discrete trainables keep one logit per level and
resolve to a Gumbel-Softmax relaxed value during training or the argmax
level during evaluation. The chain rule through both mappings is closed
form (``chain_to_raw``), which is how Monte Carlo gradients over physical
parameters become updates of the raw vector.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import relax
from .errors import ModelError
from .sysmodel import AnalogSpec, DiscreteSpec, TrainableDecl

__all__ = ["TrainableStore", "PhysicalMap"]


@dataclass
class PhysicalMap:
    """Cache of one raw->physical evaluation, consumed by chain_to_raw."""

    params: np.ndarray              # physical value per trainable
    weights: dict                   # trainable index -> softmax weights
    tau: Optional[float]
    hard: bool


class TrainableStore:
    """Raw trainable values in declaration order.

    Layout: analog trainables occupy one slot, discrete ones occupy one slot
    per level (their logits). ``raw_slices[i]`` gives trainable i's slice of
    the raw vector.
    """

    def __init__(self, decls, raw: np.ndarray):
        self.decls = tuple(decls)
        self.raw = np.asarray(raw, dtype=np.float64).copy()
        self.raw_slices = []
        off = 0
        for d in self.decls:
            self.raw_slices.append(slice(off, off + d.n_raw))
            off += d.n_raw
        if off != len(self.raw):
            raise ModelError(
                f"raw vector has {len(self.raw)} slots but declarations "
                f"need {off}"
            )
        self._analog_mask = np.zeros(off, dtype=bool)
        for d, sl in zip(self.decls, self.raw_slices):
            if isinstance(d.kind, AnalogSpec):
                self._analog_mask[sl] = True

    @classmethod
    def from_decls(cls, decls) -> "TrainableStore":
        """Initialize raw values from the declared inits."""
        parts = []
        for d in decls:
            if isinstance(d.kind, AnalogSpec):
                lo, hi = d.kind.physical_range
                parts.append([relax.bound_inverse(d.kind.init, lo, hi)])
            else:
                parts.append(list(d.kind.init_logits))
        flat = np.array([v for p in parts for v in p], dtype=np.float64)
        return cls(decls, flat)

    @property
    def n_raw(self) -> int:
        return len(self.raw)

    @property
    def n_params(self) -> int:
        return len(self.decls)

    @property
    def analog_mask(self) -> np.ndarray:
        return self._analog_mask

    def has_discrete(self) -> bool:
        return any(isinstance(d.kind, DiscreteSpec) for d in self.decls)

    def copy(self) -> "TrainableStore":
        return TrainableStore(self.decls, self.raw)

    def logits(self, index: int) -> np.ndarray:
        d = self.decls[index]
        if not isinstance(d.kind, DiscreteSpec):
            raise ModelError(f"trainable {d.name!r} is not discrete")
        return self.raw[self.raw_slices[index]]

    def physical(self, tau: Optional[float] = None,
                 rng: Optional[np.random.Generator] = None,
                 hard: bool = False) -> PhysicalMap:
        """Map raw values to one physical value per trainable.

        Training mode resolves discrete trainables through the
        Gumbel-Softmax relaxation (requires ``tau`` and ``rng``); ``hard``
        resolves them to their argmax level and clips analog raws, which is
        the evaluation/reporting convention.
        """
        params = np.zeros(self.n_params, dtype=np.float64)
        weights = {}
        for i, (d, sl) in enumerate(zip(self.decls, self.raw_slices)):
            if isinstance(d.kind, AnalogSpec):
                lo, hi = d.kind.physical_range
                raw = self.raw[sl][0]
                if hard:
                    raw = float(relax.clip_raw(raw))
                params[i] = relax.bound_transform(raw, lo, hi)
            else:
                levels = np.asarray(d.kind.levels)
                logits = self.raw[sl]
                if hard:
                    params[i] = relax.harden(logits, levels)
                else:
                    if tau is None:
                        raise ModelError(
                            f"discrete trainable {d.name!r} needs a temperature "
                            "(tau) outside hard evaluation mode"
                        )
                    value, w = relax.gumbel_softmax(logits, levels, tau, rng)
                    params[i] = value
                    weights[i] = w
        return PhysicalMap(params=params, weights=weights, tau=tau, hard=hard)

    def chain_to_raw(self, d_params, pmap: PhysicalMap) -> np.ndarray:
        """Pull a gradient over physical values back to the raw vector."""
        d_params = np.asarray(d_params, dtype=np.float64)
        if d_params.shape != (self.n_params,):
            raise ModelError(
                f"expected {self.n_params} physical gradients, got {d_params.shape}"
            )
        if pmap.hard:
            raise ModelError("cannot differentiate through hard evaluation mode")
        d_raw = np.zeros(self.n_raw, dtype=np.float64)
        for i, (d, sl) in enumerate(zip(self.decls, self.raw_slices)):
            if isinstance(d.kind, AnalogSpec):
                lo, hi = d.kind.physical_range
                d_raw[sl] = d_params[i] * 0.5 * (hi - lo)
            else:
                levels = np.asarray(d.kind.levels)
                w = pmap.weights[i]
                value = pmap.params[i]
                d_raw[sl] = d_params[i] * relax.gumbel_softmax_grad_logits(
                    w, levels, value, pmap.tau
                )
        return d_raw

    def to_doc(self) -> dict:
        return {"raw": [float(v) for v in self.raw]}

    @classmethod
    def from_doc(cls, decls, doc: dict) -> "TrainableStore":
        return cls(decls, np.asarray(doc["raw"], dtype=np.float64))
