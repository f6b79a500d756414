"""Shared fixtures: small nonlinear regression models with analytic-free
oracles (finite differences) used by both the unit and acceptance suites."""

import numpy as np
import pytest

from diffanalog import expr as E
from diffanalog.gradient import LossSpec, grad_backprop
from diffanalog.solver import SolveConfig
from diffanalog.sysmodel import SystemBuilder


def build_pendulum():
    """Damped pendulum: frequency and damping trainable."""
    b = SystemBuilder("pendulum", default_dt=0.005)
    x0 = b.add_state("angle")
    x1 = b.add_state("rate")
    w = b.analog("w", init=1.3, physical_range=(0.1, 3.0))
    c = b.analog("c", init=0.4, physical_range=(0.0, 2.0))
    b.set_derivative(x0, E.mul(w, E.state(x1)))
    b.set_derivative(x1, E.nsum([
        E.neg(E.mul(w, E.sin(E.state(x0)))),
        E.neg(E.mul(c, E.state(x1))),
    ]))
    b.set_readout([0.5, 1.0], [E.state(x0), E.state(x1)])
    model = b.compile()
    params = np.array([1.3, 0.4])
    x_init = np.array([0.7, 0.0])
    targets = np.array([[0.1, 0.0], [0.2, -0.1]])
    return model, params, x_init, targets


def build_ring_oscillators():
    """Three phase oscillators, ring coupling plus locking."""
    b = SystemBuilder("ring3", default_dt=0.005)
    for i in range(3):
        b.add_state(f"x{i}")
    ks = [b.analog(f"k{i}", init=0.6 + 0.2 * i, physical_range=(-2.0, 2.0))
          for i in range(3)]
    lock = b.analog("lock", init=0.8, physical_range=(0.0, 4.0))
    pi = np.pi
    for i in range(3):
        j = (i + 1) % 3
        h = (i + 2) % 3
        b.set_derivative(i, E.nsum([
            E.neg(E.mul(ks[i], E.sin(E.mul(E.const(pi),
                                           E.sub(E.state(i), E.state(j)))))),
            E.neg(E.mul(ks[h], E.sin(E.mul(E.const(pi),
                                           E.sub(E.state(i), E.state(h)))))),
            E.neg(E.mul(lock, E.sin(E.mul(E.const(2 * pi), E.state(i))))),
        ]))
    b.set_readout([1.0], [E.state(i) for i in range(3)])
    model = b.compile()
    params = np.array([0.6, 0.8, 1.0, 0.8])
    x_init = np.array([0.2, 0.7, 0.4])
    targets = np.array([[0.0, 1.0, 0.0]])
    return model, params, x_init, targets


def build_saturating_growth():
    """Logistic growth with a Gaussian-bump source term."""
    b = SystemBuilder("growth", default_dt=0.005)
    x = b.add_state("x")
    a = b.analog("a", init=1.1, physical_range=(0.0, 3.0))
    c = b.analog("c", init=0.5, physical_range=(0.0, 2.0))
    xs = E.state(x)
    b.set_derivative(x, E.nsum([
        E.mul(a, E.mul(xs, E.sub(E.const(1.0), xs))),
        E.mul(c, E.exp(E.neg(E.mul(xs, xs)))),
    ]))
    b.set_readout([0.5, 1.0], [xs])
    model = b.compile()
    return model, np.array([1.1, 0.5]), np.array([0.1]), np.array([[0.6], [0.9]])


def build_rational_chain():
    """Two-state chain with rational (division) dynamics."""
    b = SystemBuilder("rational", default_dt=0.005)
    x0 = b.add_state("x0")
    x1 = b.add_state("x1")
    a = b.analog("a", init=0.9, physical_range=(0.0, 3.0))
    c = b.analog("c", init=1.4, physical_range=(0.0, 3.0))
    one = E.const(1.0)
    s0, s1 = E.state(x0), E.state(x1)
    b.set_derivative(x0, E.div(a, E.add(one, E.mul(s0, s0))))
    b.set_derivative(x1, E.div(E.mul(c, s0), E.add(one, E.mul(s1, s1))))
    b.set_readout([1.0], [s0, s1])
    model = b.compile()
    return model, np.array([0.9, 1.4]), np.array([0.2, -0.1]), \
        np.array([[0.8, 0.4]])


def build_soft_saturator():
    """Clamped feedback (exercised away from its kinks) with a logistic."""
    b = SystemBuilder("saturator", default_dt=0.005)
    x0 = b.add_state("x0")
    x1 = b.add_state("x1")
    a = b.analog("a", init=1.2, physical_range=(0.0, 3.0))
    c = b.analog("c", init=0.7, physical_range=(0.0, 3.0))
    s0, s1 = E.state(x0), E.state(x1)
    b.set_derivative(x0, E.add(E.neg(s0),
                               E.mul(a, E.logistic(s1, 2.0))))
    b.set_derivative(x1, E.add(E.neg(E.mul(E.const(0.5), s1)),
                               E.mul(c, E.clamp(s0, -2.0, 2.0))))
    b.set_readout([0.5, 1.0], [s0, s1])
    model = b.compile()
    return model, np.array([1.2, 0.7]), np.array([0.3, -0.2]), \
        np.array([[0.5, 0.1], [0.7, 0.2]])


REGRESSION_BUILDERS = (
    build_pendulum,
    build_ring_oscillators,
    build_saturating_growth,
    build_rational_chain,
    build_soft_saturator,
)


@pytest.fixture(scope="session")
def regression_suite():
    """(model, params, x0, targets, loss_spec) per regression model."""
    suite = []
    for build in REGRESSION_BUILDERS:
        model, params, x0, targets = build()
        n = targets.size
        suite.append((model, params, x0, targets,
                      LossSpec(E.mean_squared_error(n), targets)))
    return suite


@pytest.fixture(scope="session")
def warm_kernels(regression_suite):
    """Trigger kernel compilation so timed tests measure algorithms, not
    the one-off JIT cost."""
    model, params, x0, targets, loss = regression_suite[0]
    cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
    grad_backprop(model, params, np.zeros(0), np.zeros(0), x0, cfg, loss)
    from diffanalog.gradient import grad_adjoint
    from diffanalog.solver import EULER_MARUYAMA, solve

    grad_adjoint(model, params, np.zeros(0), np.zeros(0), x0, cfg, loss)
    cfg_e = SolveConfig(dt=0.01, t_end=1.0, method="euler")
    solve(model, params, np.zeros(0), np.zeros(0), x0, cfg_e)
    return True


def central_fd(model, params, x0, cfg, loss, h_scale=1e-6):
    """Finite-difference gradient oracle, step scaled per coordinate."""
    grads = np.zeros(len(params))
    delta = np.zeros(model.n_mismatch)
    inputs = np.zeros(model.n_inputs)
    for k in range(len(params)):
        h = h_scale * max(1.0, abs(params[k]))
        pp = params.copy()
        pp[k] += h
        up, _ = grad_backprop(model, pp, delta, inputs, x0, cfg, loss)
        pp[k] -= 2 * h
        dn, _ = grad_backprop(model, pp, delta, inputs, x0, cfg, loss)
        grads[k] = (up - dn) / (2 * h)
    return grads
