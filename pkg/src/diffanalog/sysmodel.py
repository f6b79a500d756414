"""Builder and validator for parameterized dynamical systems.

A :class:`SystemBuilder` collects states, inputs, trainable parameters,
mismatch annotations, per-state derivative and noise-amplitude expressions
and a readout specification, then compiles them into an immutable
:class:`CompiledModel` that the solver and gradient machinery consume.

Models round-trip through a canonical JSON file format (prefix-notation
expressions); see ``model_to_json`` / ``model_from_json``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Optional, Sequence, Union

import numpy as np

from . import expr as E
from .errors import ModelError

__all__ = [
    "AnalogSpec",
    "DiscreteSpec",
    "TrainableDecl",
    "MismatchDecl",
    "NoiseDecl",
    "SystemBuilder",
    "CompiledModel",
    "model_to_json",
    "model_from_json",
    "save_model",
    "load_model",
]


@dataclass(frozen=True)
class AnalogSpec:
    """Continuous trainable: stored raw in [-1, 1], mapped affinely onto
    ``physical_range`` for use in the dynamics."""

    init: float
    physical_range: tuple

    def __post_init__(self):
        lo, hi = self.physical_range
        if not lo < hi:
            raise ModelError(f"analog range must satisfy lo < hi, got [{lo}, {hi}]")
        if not lo <= self.init <= hi:
            raise ModelError(
                f"analog init {self.init} outside physical range [{lo}, {hi}]"
            )


@dataclass(frozen=True)
class DiscreteSpec:
    """Discrete trainable: a set of levels with learnable selection logits."""

    levels: tuple
    init_logits: tuple

    def __post_init__(self):
        if len(self.levels) < 2:
            raise ModelError("discrete trainable needs at least 2 levels")
        if len(self.levels) != len(self.init_logits):
            raise ModelError(
                f"{len(self.levels)} levels but {len(self.init_logits)} init logits"
            )


@dataclass(frozen=True)
class TrainableDecl:
    name: str
    kind: Union[AnalogSpec, DiscreteSpec]
    shared: bool = True

    @property
    def n_raw(self) -> int:
        """Raw storage slots: 1 for analog, one logit per level for discrete."""
        if isinstance(self.kind, AnalogSpec):
            return 1
        return len(self.kind.levels)


@dataclass(frozen=True)
class MismatchDecl:
    """A multiplicative mismatch symbol with relative standard deviation."""

    target: str
    sigma: float

    def __post_init__(self):
        if self.sigma < 0:
            raise ModelError(f"mismatch sigma must be >= 0, got {self.sigma}")


@dataclass(frozen=True)
class NoiseDecl:
    state: int
    amplitude: E.Expr


class SystemBuilder:
    """Single-owner builder; compile() yields a shareable CompiledModel."""

    def __init__(self, name: str = "model", default_dt: Optional[float] = None):
        self.name = name
        self.default_dt = default_dt
        self._state_names = []
        self._input_names = []
        self._trainables = []
        self._mismatch = []
        self._derivatives = {}
        self._noise = {}
        self._readout_times = None
        self._readout_map = None

    # -- declarations ------------------------------------------------------

    def add_state(self, name: str) -> int:
        if name in self._state_names:
            raise ModelError(f"duplicate state name {name!r}")
        self._state_names.append(name)
        return len(self._state_names) - 1

    def declare_input(self, name: str) -> int:
        if name in self._input_names:
            raise ModelError(f"duplicate input name {name!r}")
        self._input_names.append(name)
        return len(self._input_names) - 1

    def state_ref(self, index: int) -> E.Expr:
        if not 0 <= index < len(self._state_names):
            raise ModelError(f"state index {index} not declared")
        return E.state(index)

    def input_ref(self, index: int) -> E.Expr:
        if not 0 <= index < len(self._input_names):
            raise ModelError(f"input index {index} not declared")
        return E.inp(index)

    def analog(self, name: str, init: float, physical_range) -> E.Expr:
        """Declare a continuous trainable; returns its parameter reference."""
        decl = TrainableDecl(name, AnalogSpec(float(init), tuple(physical_range)))
        return self._add_trainable(decl)

    def discrete(self, name: str, levels, init_logits) -> E.Expr:
        """Declare a discrete trainable; returns its parameter reference."""
        decl = TrainableDecl(
            name, DiscreteSpec(tuple(float(v) for v in levels),
                               tuple(float(v) for v in init_logits))
        )
        return self._add_trainable(decl)

    def _add_trainable(self, decl: TrainableDecl) -> E.Expr:
        if any(t.name == decl.name for t in self._trainables):
            raise ModelError(f"duplicate trainable name {decl.name!r}")
        self._trainables.append(decl)
        return E.param(len(self._trainables) - 1)

    def mismatch(self, target: E.Expr, sigma: float, label: str = "") -> E.Expr:
        """Wrap a term in a fresh multiplicative mismatch symbol."""
        if sigma < 0:
            raise ModelError(f"mismatch sigma must be >= 0, got {sigma}")
        idx = len(self._mismatch)
        self._mismatch.append(MismatchDecl(label or f"site{idx}", float(sigma)))
        return E.mul(E.mismatch_ref(idx), target)

    # -- equations ---------------------------------------------------------

    def set_derivative(self, state_index: int, rhs: E.Expr):
        if not 0 <= state_index < len(self._state_names):
            raise ModelError(f"state index {state_index} not declared")
        if state_index in self._derivatives:
            raise ModelError(
                f"derivative for state {self._state_names[state_index]!r} "
                "assigned twice"
            )
        self._derivatives[state_index] = rhs

    def set_noise(self, state_index: int, amplitude: E.Expr):
        if not 0 <= state_index < len(self._state_names):
            raise ModelError(f"state index {state_index} not declared")
        if state_index in self._noise:
            raise ModelError(
                f"noise amplitude for state {self._state_names[state_index]!r} "
                "assigned twice"
            )
        self._noise[state_index] = amplitude

    def set_readout(self, times: Sequence[float], map_exprs: Sequence[E.Expr]):
        times = [float(t) for t in times]
        if not times:
            raise ModelError("readout requires at least one time")
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ModelError("readout times must be strictly ascending")
        self._readout_times = times
        self._readout_map = list(map_exprs)

    # -- compilation -------------------------------------------------------

    def compile(self) -> "CompiledModel":
        n_states = len(self._state_names)
        if n_states == 0:
            raise ModelError("model has no states")
        missing = [self._state_names[i] for i in range(n_states)
                   if i not in self._derivatives]
        if missing:
            raise ModelError(f"no derivative assigned for state(s): {missing}")
        if self._readout_times is None:
            raise ModelError("model has no readout specification")
        if self.default_dt is not None:
            for t in self._readout_times:
                _check_grid_multiple(t, self.default_dt)
        model = CompiledModel(
            name=self.name,
            state_names=tuple(self._state_names),
            input_names=tuple(self._input_names),
            trainables=tuple(self._trainables),
            mismatch=tuple(self._mismatch),
            derivative=tuple(self._derivatives[i] for i in range(n_states)),
            noise_amp=tuple(self._noise.get(i) for i in range(n_states)),
            readout_times=tuple(self._readout_times),
            readout_map=tuple(self._readout_map),
            default_dt=self.default_dt,
        )
        model.validate()
        return model


def _check_grid_multiple(t: float, dt: float):
    steps = t / dt
    if abs(steps - round(steps)) > 1e-9 * max(1.0, abs(steps)):
        raise ModelError(
            f"readout time {t!r} is not a multiple of the solver step {dt!r}"
        )


class CompiledModel:
    """Validated, immutable dynamical system.

    Shareable across threads: expression DAGs and tapes are read-only after
    construction; per-solve workspaces live with the caller.
    """

    def __init__(self, name, state_names, input_names, trainables, mismatch,
                 derivative, noise_amp, readout_times, readout_map, default_dt):
        self.name = name
        self.state_names = state_names
        self.input_names = input_names
        self.trainables = trainables
        self.mismatch = mismatch
        self.derivative = derivative
        self.noise_amp = noise_amp
        self.readout_times = readout_times
        self.readout_map = readout_map
        self.default_dt = default_dt

    # -- sizes -------------------------------------------------------------

    @property
    def n_states(self) -> int:
        return len(self.state_names)

    @property
    def n_inputs(self) -> int:
        return len(self.input_names)

    @property
    def n_params(self) -> int:
        return len(self.trainables)

    @property
    def n_mismatch(self) -> int:
        return len(self.mismatch)

    @property
    def n_outputs(self) -> int:
        return len(self.readout_map)

    @property
    def n_raw(self) -> int:
        return sum(t.n_raw for t in self.trainables)

    @cached_property
    def sigmas(self) -> np.ndarray:
        return np.array([m.sigma for m in self.mismatch], dtype=np.float64)

    @cached_property
    def has_noise(self) -> bool:
        return any(a is not None for a in self.noise_amp)

    # -- tapes (compiled lazily, cached; models are immutable) --------------

    @cached_property
    def deriv_tape(self) -> E.Tape:
        return E.compile_tape(self.derivative)

    @cached_property
    def noise_tape(self) -> E.Tape:
        zero = E.const(0.0)
        return E.compile_tape([a if a is not None else zero for a in self.noise_amp])

    @cached_property
    def readout_tape(self) -> E.Tape:
        return E.compile_tape(self.readout_map)

    # -- validation ----------------------------------------------------------

    def validate(self):
        all_exprs = list(self.derivative) + list(self.readout_map) + [
            a for a in self.noise_amp if a is not None
        ]
        parents = {}
        occurrences = {}
        param_sites = {}
        for node in E._walk_unique(all_exprs):
            for ch in node.children:
                if ch.kind == "mismatch":
                    parents.setdefault(ch.index, []).append(node)
                if ch.kind == "param":
                    param_sites[ch.index] = param_sites.get(ch.index, 0) + 1
            if node.kind == "mismatch":
                occurrences[node.index] = occurrences.get(node.index, 0) + 1
            self._check_bounds(node)
        for idx in range(self.n_mismatch):
            if idx not in occurrences:
                raise ModelError(
                    f"mismatch symbol {idx} ({self.mismatch[idx].target}) declared "
                    "but never used"
                )
            ps = parents.get(idx, [])
            if len(ps) != 1 or ps[0].kind != "mul":
                raise ModelError(
                    f"mismatch symbol {idx} must appear as exactly one "
                    "multiplicative factor"
                )
        for idx, decl in enumerate(self.trainables):
            if not decl.shared and param_sites.get(idx, 0) > 1:
                raise ModelError(
                    f"trainable {decl.name!r} is declared unshared but is "
                    f"referenced at {param_sites[idx]} sites"
                )
        if len(self.readout_map) == 0:
            raise ModelError("readout map is empty")
        if self.default_dt is not None:
            for t in self.readout_times:
                _check_grid_multiple(t, self.default_dt)

    def _check_bounds(self, node: E.Expr):
        limits = {
            "state": self.n_states,
            "param": self.n_params,
            "input": self.n_inputs,
            "mismatch": self.n_mismatch,
        }
        lim = limits.get(node.kind)
        if lim is not None and not 0 <= node.index < lim:
            raise ModelError(
                f"{node.kind} index {node.index} out of range (have {lim})"
            )


# -- JSON model format -------------------------------------------------------

FORMAT_TAG = "diffanalog-model/1"


def model_to_json(model: CompiledModel) -> str:
    """Canonical JSON text for a model (byte-stable across round trips)."""
    doc = {
        "format": FORMAT_TAG,
        "name": model.name,
        "states": list(model.state_names),
        "inputs": list(model.input_names),
        "trainables": [_trainable_doc(t) for t in model.trainables],
        "mismatch": [{"target": m.target, "sigma": m.sigma} for m in model.mismatch],
        "derivatives": [E.to_prefix(e) for e in model.derivative],
        "noise": [None if a is None else E.to_prefix(a) for a in model.noise_amp],
        "readout": {
            "times": list(model.readout_times),
            "outputs": [E.to_prefix(e) for e in model.readout_map],
        },
        "dt": model.default_dt,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def _trainable_doc(t: TrainableDecl):
    if isinstance(t.kind, AnalogSpec):
        return {
            "name": t.name,
            "kind": "analog",
            "init": t.kind.init,
            "range": list(t.kind.physical_range),
            "shared": t.shared,
        }
    return {
        "name": t.name,
        "kind": "discrete",
        "levels": list(t.kind.levels),
        "init_logits": list(t.kind.init_logits),
        "shared": t.shared,
    }


def model_from_json(text: str) -> CompiledModel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelError(f"model file is not valid JSON: {e}") from e
    if doc.get("format") != FORMAT_TAG:
        raise ModelError(f"unsupported model format {doc.get('format')!r}")
    trainables = []
    for td in doc["trainables"]:
        if td["kind"] == "analog":
            kind = AnalogSpec(float(td["init"]), tuple(td["range"]))
        elif td["kind"] == "discrete":
            kind = DiscreteSpec(tuple(td["levels"]), tuple(td["init_logits"]))
        else:
            raise ModelError(f"unknown trainable kind {td['kind']!r}")
        trainables.append(TrainableDecl(td["name"], kind, bool(td.get("shared", True))))
    interned = {}
    derivative = tuple(E.from_prefix(f, interned) for f in doc["derivatives"])
    noise = tuple(None if f is None else E.from_prefix(f, interned)
                  for f in doc["noise"])
    readout = tuple(E.from_prefix(f, interned) for f in doc["readout"]["outputs"])
    model = CompiledModel(
        name=doc["name"],
        state_names=tuple(doc["states"]),
        input_names=tuple(doc["inputs"]),
        trainables=tuple(trainables),
        mismatch=tuple(MismatchDecl(m["target"], float(m["sigma"]))
                       for m in doc["mismatch"]),
        derivative=derivative,
        noise_amp=noise,
        readout_times=tuple(float(t) for t in doc["readout"]["times"]),
        readout_map=readout,
        default_dt=None if doc.get("dt") is None else float(doc["dt"]),
    )
    if len(derivative) != model.n_states:
        raise ModelError(
            f"{model.n_states} states but {len(derivative)} derivative expressions"
        )
    model.validate()
    return model


def save_model(model: CompiledModel, path):
    with open(path, "w") as f:
        f.write(model_to_json(model))


def load_model(path) -> CompiledModel:
    with open(path) as f:
        return model_from_json(f.read())
