"""Immutable expression DAG over states, parameters, inputs, mismatch and time.

Expressions are built once and shared freely: node identity (``id``) is the
sharing key, so a subexpression reused in several places is evaluated exactly
once per sweep. For execution, a DAG is flattened into a :class:`Tape` whose
slots are the unique nodes in topological order; the tape arrays are what the
numba/numpy kernels consume.

Derivative rules cover every node kind. ``clamp`` uses the saturating
convention: derivative 1 strictly inside ``(lo, hi)``, 0 outside and 0 at the
boundary, matching a saturated analog stage that passes no perturbation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._ops import (
    KIND_TO_OP,
    OP_ADD,
    OP_CLAMP,
    OP_CONST,
    OP_DIV,
    OP_EXP,
    OP_INPUT,
    OP_LOG,
    OP_LOGISTIC,
    OP_MISMATCH,
    OP_MUL,
    OP_NEG,
    OP_PARAM,
    OP_SIN,
    OP_STATE,
    OP_SUB,
    OP_SUM,
    OP_TIME,
)
from .backend import kernels
from .errors import EvalError, ModelError

__all__ = [
    "Expr",
    "EvalEnv",
    "Tape",
    "const",
    "state",
    "param",
    "inp",
    "mismatch_ref",
    "time_ref",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "sin",
    "exp",
    "log",
    "clamp",
    "logistic",
    "nsum",
    "compile_tape",
    "count_unique_nodes",
    "eval_expr",
    "vjp",
]

_LEAF_KINDS = ("const", "state", "param", "input", "mismatch", "time")
_UNARY_KINDS = ("neg", "sin", "exp", "log", "clamp", "logistic")
_BINARY_KINDS = ("add", "sub", "mul", "div")


@dataclass(frozen=True, eq=False)
class Expr:
    """One node of the expression DAG.

    ``eq=False`` keeps identity semantics: two structurally equal nodes are
    distinct unless they are literally the same object, which is what makes
    sharing explicit and memoization exact.
    """

    kind: str
    children: tuple = ()
    index: int = -1
    payload: tuple = ()

    def __post_init__(self):
        if self.kind not in KIND_TO_OP:
            raise ModelError(f"unknown expression kind {self.kind!r}")

    # Arithmetic sugar so model builders read like the equations they encode.
    def __add__(self, other):
        return add(self, _as_expr(other))

    def __radd__(self, other):
        return add(_as_expr(other), self)

    def __sub__(self, other):
        return sub(self, _as_expr(other))

    def __rsub__(self, other):
        return sub(_as_expr(other), self)

    def __mul__(self, other):
        return mul(self, _as_expr(other))

    def __rmul__(self, other):
        return mul(_as_expr(other), self)

    def __truediv__(self, other):
        return div(self, _as_expr(other))

    def __rtruediv__(self, other):
        return div(_as_expr(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        if self.kind == "const":
            return f"Expr(const {self.payload[0]!r})"
        if self.kind in ("state", "param", "input", "mismatch"):
            return f"Expr({self.kind} {self.index})"
        return f"Expr({self.kind}, {len(self.children)} children)"


def _as_expr(v):
    if isinstance(v, Expr):
        return v
    return const(float(v))


def const(value: float) -> Expr:
    return Expr("const", payload=(float(value),))


def state(index: int) -> Expr:
    if index < 0:
        raise ModelError("state index must be nonnegative")
    return Expr("state", index=int(index))


def param(index: int) -> Expr:
    if index < 0:
        raise ModelError("parameter index must be nonnegative")
    return Expr("param", index=int(index))


def inp(index: int) -> Expr:
    if index < 0:
        raise ModelError("input index must be nonnegative")
    return Expr("input", index=int(index))


def mismatch_ref(index: int) -> Expr:
    if index < 0:
        raise ModelError("mismatch index must be nonnegative")
    return Expr("mismatch", index=int(index))


def time_ref() -> Expr:
    return Expr("time")


def add(a: Expr, b: Expr) -> Expr:
    return Expr("add", children=(a, b))


def sub(a: Expr, b: Expr) -> Expr:
    return Expr("sub", children=(a, b))


def mul(a: Expr, b: Expr) -> Expr:
    return Expr("mul", children=(a, b))


def div(a: Expr, b: Expr) -> Expr:
    return Expr("div", children=(a, b))


def neg(a: Expr) -> Expr:
    return Expr("neg", children=(a,))


def sin(a: Expr) -> Expr:
    return Expr("sin", children=(a,))


def exp(a: Expr) -> Expr:
    return Expr("exp", children=(a,))


def log(a: Expr) -> Expr:
    return Expr("log", children=(a,))


def clamp(a: Expr, lo: float, hi: float) -> Expr:
    lo, hi = float(lo), float(hi)
    if not lo < hi:
        raise ModelError(f"clamp requires lo < hi, got [{lo}, {hi}]")
    return Expr("clamp", children=(a,), payload=(lo, hi))


def logistic(a: Expr, steepness: float) -> Expr:
    return Expr("logistic", children=(a,), payload=(float(steepness),))


def nsum(terms) -> Expr:
    """N-ary sum. Empty sums are the constant 0."""
    terms = tuple(terms)
    if not terms:
        return const(0.0)
    if len(terms) == 1:
        return terms[0]
    return Expr("sum", children=terms)


@dataclass
class EvalEnv:
    """Concrete values for every leaf an expression may reference."""

    state: np.ndarray = field(default_factory=lambda: np.zeros(0))
    params: np.ndarray = field(default_factory=lambda: np.zeros(0))
    inputs: np.ndarray = field(default_factory=lambda: np.zeros(0))
    mismatch: np.ndarray = field(default_factory=lambda: np.zeros(0))
    time: float = 0.0

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        self.params = np.asarray(self.params, dtype=np.float64)
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.mismatch = np.asarray(self.mismatch, dtype=np.float64)
        self.time = float(self.time)


def _walk_unique(exprs):
    """Iterative post-order walk yielding each unique node exactly once."""
    order = []
    seen = set()
    # (node, expanded) work stack
    stack = [(e, False) for e in reversed(list(exprs))]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for ch in reversed(node.children):
            if id(ch) not in seen:
                stack.append((ch, False))
    return order


def count_unique_nodes(exprs) -> int:
    """Number of distinct DAG nodes, i.e. evaluations one sweep performs."""
    return len(_walk_unique(exprs))


class Tape:
    """Flattened DAG: one slot per unique node, children resolved to slots.

    Arrays (all preallocated, consumed directly by the kernels):
      ops       int64[n]   instruction code per slot
      ref       int64[n]   leaf index (state/param/input/mismatch), -1 otherwise
      f0, f1    float64[n] payload (const value, clamp lo/hi, logistic k)
      args      int64[.]   flattened child slot indices
      arg_off   int64[n+1] CSR offsets into args
      out_slots int64[k]   slot holding each requested output expression
    """

    def __init__(self, ops, ref, f0, f1, args, arg_off, out_slots, bounds):
        self.ops = ops
        self.ref = ref
        self.f0 = f0
        self.f1 = f1
        self.args = args
        self.arg_off = arg_off
        self.out_slots = out_slots
        self.n_slots = len(ops)
        self.n_outputs = len(out_slots)
        # Smallest env sizes that satisfy every leaf reference.
        self.min_states, self.min_params, self.min_inputs, self.min_mismatch = bounds

    def new_values(self):
        return np.zeros(self.n_slots, dtype=np.float64)

    def forward(self, env: EvalEnv, values=None):
        """Evaluate all slots; returns the output vector."""
        if values is None:
            values = self.new_values()
        self.check_env(env)
        err = kernels().tape_forward(
            self.ops, self.ref, self.f0, self.f1, self.args, self.arg_off,
            env.state, env.params, env.inputs, env.mismatch, env.time, values,
        )
        if err >= 0:
            raise EvalError(f"division by zero at node #{err} (div)")
        return values[self.out_slots].copy()

    def reverse(self, values, seed, d_state=None, d_params=None, adj=None):
        """Accumulate seed^T * d(outputs)/d(state, params) into the adjoints."""
        seed = np.asarray(seed, dtype=np.float64)
        if seed.shape != (self.n_outputs,):
            raise EvalError(
                f"seed length {seed.shape} does not match {self.n_outputs} outputs"
            )
        if d_state is None:
            d_state = np.zeros(max(self.min_states, 0), dtype=np.float64)
        if d_params is None:
            d_params = np.zeros(max(self.min_params, 0), dtype=np.float64)
        if adj is None:
            adj = np.zeros(self.n_slots, dtype=np.float64)
        else:
            adj[:] = 0.0
        for k in range(self.n_outputs):
            adj[self.out_slots[k]] += seed[k]
        kernels().tape_reverse(
            self.ops, self.ref, self.f0, self.f1, self.args, self.arg_off,
            values, adj, d_state, d_params,
        )
        return d_state, d_params

    def check_env(self, env: EvalEnv):
        if len(env.state) < self.min_states:
            raise ModelError(
                f"state vector of length {len(env.state)} but index "
                f"{self.min_states - 1} is referenced"
            )
        if len(env.params) < self.min_params:
            raise ModelError(
                f"parameter vector of length {len(env.params)} but index "
                f"{self.min_params - 1} is referenced"
            )
        if len(env.inputs) < self.min_inputs:
            raise ModelError(
                f"input vector of length {len(env.inputs)} but index "
                f"{self.min_inputs - 1} is referenced"
            )
        if len(env.mismatch) < self.min_mismatch:
            raise ModelError(
                f"mismatch vector of length {len(env.mismatch)} but index "
                f"{self.min_mismatch - 1} is referenced"
            )


def compile_tape(exprs) -> Tape:
    """Flatten a list of output expressions into a Tape."""
    exprs = list(exprs)
    order = _walk_unique(exprs)
    slot_of = {id(node): k for k, node in enumerate(order)}
    n = len(order)
    ops = np.zeros(n, dtype=np.int64)
    ref = np.full(n, -1, dtype=np.int64)
    f0 = np.zeros(n, dtype=np.float64)
    f1 = np.zeros(n, dtype=np.float64)
    args = []
    arg_off = np.zeros(n + 1, dtype=np.int64)
    bounds = [0, 0, 0, 0]  # states, params, inputs, mismatch
    for k, node in enumerate(order):
        ops[k] = KIND_TO_OP[node.kind]
        if node.kind == "const":
            f0[k] = node.payload[0]
        elif node.kind == "clamp":
            f0[k], f1[k] = node.payload
        elif node.kind == "logistic":
            f0[k] = node.payload[0]
        if node.kind in ("state", "param", "input", "mismatch"):
            ref[k] = node.index
            which = ("state", "param", "input", "mismatch").index(node.kind)
            bounds[which] = max(bounds[which], node.index + 1)
        for ch in node.children:
            args.append(slot_of[id(ch)])
        arg_off[k + 1] = len(args)
    out_slots = np.array([slot_of[id(e)] for e in exprs], dtype=np.int64)
    return Tape(
        ops, ref, f0, f1,
        np.asarray(args, dtype=np.int64), arg_off, out_slots, tuple(bounds),
    )


def eval_expr(expr: Expr, env: EvalEnv) -> float:
    """Evaluate one expression. Deterministic; shared nodes evaluate once."""
    tape = compile_tape([expr])
    return float(tape.forward(env)[0])


def vjp(exprs, env: EvalEnv, seed):
    """Vector-Jacobian product of a list of expressions.

    Returns ``(d_state, d_params)`` where ``d_state = seed^T * d(exprs)/dx``
    and ``d_params = seed^T * d(exprs)/dtheta``, both sized like the env
    vectors they differentiate against.
    """
    exprs = list(exprs)
    tape = compile_tape(exprs)
    values = tape.new_values()
    tape.forward(env, values)
    d_state = np.zeros(len(env.state), dtype=np.float64)
    d_params = np.zeros(len(env.params), dtype=np.float64)
    tape.reverse(values, seed, d_state, d_params)
    return d_state, d_params


def to_prefix(node: Expr):
    """Expression to the JSON prefix form used by the model file format."""
    k = node.kind
    if k == "const":
        return ["const", node.payload[0]]
    if k in ("state", "param", "input", "mismatch"):
        return [k, node.index]
    if k == "time":
        return ["time"]
    if k == "clamp":
        return ["clamp", node.payload[0], node.payload[1], to_prefix(node.children[0])]
    if k == "logistic":
        return ["logistic", node.payload[0], to_prefix(node.children[0])]
    return [k] + [to_prefix(c) for c in node.children]


def from_prefix(form, interned=None) -> Expr:
    """Parse the JSON prefix form, re-establishing subexpression sharing.

    Structurally identical subtrees intern to one node so that a round trip
    through the file format does not degrade evaluation cost.
    """
    if interned is None:
        interned = {}

    def build(f):
        if not isinstance(f, list) or not f:
            raise ModelError(f"malformed expression {f!r}")
        kind = f[0]
        if kind == "const":
            key = ("const", float(f[1]))
            if key not in interned:
                interned[key] = const(f[1])
            return interned[key]
        if kind in ("state", "param", "input", "mismatch"):
            key = (kind, int(f[1]))
            if key not in interned:
                interned[key] = Expr(kind, index=int(f[1]))
            return interned[key]
        if kind == "time":
            key = ("time",)
            if key not in interned:
                interned[key] = time_ref()
            return interned[key]
        if kind == "clamp":
            child = build(f[3])
            key = ("clamp", float(f[1]), float(f[2]), id(child))
            if key not in interned:
                interned[key] = clamp(child, f[1], f[2])
            return interned[key]
        if kind == "logistic":
            child = build(f[2])
            key = ("logistic", float(f[1]), id(child))
            if key not in interned:
                interned[key] = logistic(child, f[1])
            return interned[key]
        if kind in _BINARY_KINDS:
            if len(f) != 3:
                raise ModelError(f"{kind} expects 2 children, got {len(f) - 1}")
            a, b = build(f[1]), build(f[2])
            key = (kind, id(a), id(b))
            if key not in interned:
                interned[key] = Expr(kind, children=(a, b))
            return interned[key]
        if kind == "neg" or kind in ("sin", "exp", "log"):
            if len(f) != 2:
                raise ModelError(f"{kind} expects 1 child, got {len(f) - 1}")
            a = build(f[1])
            key = (kind, id(a))
            if key not in interned:
                interned[key] = Expr(kind, children=(a,))
            return interned[key]
        if kind == "sum":
            ch = tuple(build(c) for c in f[1:])
            key = ("sum",) + tuple(id(c) for c in ch)
            if key not in interned:
                interned[key] = Expr("sum", children=ch)
            return interned[key]
        raise ModelError(f"unknown expression kind {kind!r}")

    return build(form)


def triangle_fold(x: Expr, lo: int, hi: int) -> Expr:
    """Periodic triangular fold of ``x`` onto [0, 1], exact on [lo, hi].

    Built from clamp segment increments: the piecewise-linear fold equals the
    sum of its per-unit-interval slope contributions, each saturated by a
    clamp. ``lo`` must be even so the fold starts at value 0. Outside
    [lo, hi] the expression saturates (constant value, zero derivative).
    """
    lo, hi = int(lo), int(hi)
    if lo % 2 != 0:
        raise ModelError("triangle_fold lower bound must be even")
    if hi <= lo:
        raise ModelError("triangle_fold requires hi > lo")
    terms = []
    for m in range(lo, hi):
        s = 1.0 if m % 2 == 0 else -1.0
        seg = sub(clamp(x, float(m), float(m + 1)), const(float(m)))
        terms.append(mul(const(s), seg))
    return nsum(terms)


def mean_squared_error(n: int) -> Expr:
    """Scalar MSE loss expression over ``n`` readout entries vs. targets.

    Readout entry ``i`` is referenced as ``state(i)`` and the matching target
    as ``inp(i)``; the gradient machinery evaluates loss expressions in that
    flattened environment.
    """
    if n <= 0:
        raise ModelError("mean_squared_error needs at least one entry")
    terms = []
    for i in range(n):
        d = sub(state(i), inp(i))
        terms.append(mul(d, d))
    return mul(const(1.0 / n), nsum(terms))
