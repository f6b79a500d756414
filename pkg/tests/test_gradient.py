"""Gradients through solves: correctness, cross-method agreement, Monte
Carlo averaging, memory contracts."""

import numpy as np
import pytest

from diffanalog import expr as E
from diffanalog.errors import ModelError, OptimError, SolveError
from diffanalog.gradient import (BatchItem, LossSpec, alloc_meter,
                                 grad_adjoint, grad_backprop, mc_grad)
from diffanalog.solver import SolveConfig
from diffanalog.store import TrainableStore
from diffanalog.sysmodel import SystemBuilder
from tests.conftest import central_fd


def linear_model():
    b = SystemBuilder("linear", default_dt=0.01)
    i = b.add_state("x")
    a = b.analog("a", init=0.0, physical_range=(-2, 2))
    b.set_derivative(i, E.mul(a, E.state(i)))
    b.set_readout([1.0], [E.state(i)])
    return b.compile()


def noisy_linear_model():
    b = SystemBuilder("sde", default_dt=0.01)
    i = b.add_state("x")
    a = b.analog("a", init=-0.5, physical_range=(-2, 2))
    amp = b.analog("amp", init=0.1, physical_range=(0, 1))
    b.set_derivative(i, E.mul(a, E.state(i)))
    b.set_noise(i, E.mul(amp, E.state(i)))
    b.set_readout([1.0], [E.state(i)])
    return b.compile()


IDENTITY_LOSS = LossSpec(E.state(0), np.zeros((1, 1)))


class TestBackprop:
    def test_exponential_growth_rate_gradient(self):
        # loss = x(1) with dx/dt = a x, x0 = 1: dloss/da at a=0 is 1.
        model = linear_model()
        for method in ("euler", "rk4"):
            cfg = SolveConfig(dt=0.01, t_end=1.0, method=method)
            loss, grad = grad_backprop(model, [0.0], [], [], [1.0], cfg,
                                       IDENTITY_LOSS)
            assert loss == pytest.approx(1.0, abs=1e-6)
            assert grad[0] == pytest.approx(1.0, abs=1e-4)

    def test_constant_loss_gives_exactly_zero(self):
        model = linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
        spec = LossSpec(E.const(7.5), np.zeros((1, 1)))
        loss, grad = grad_backprop(model, [0.3], [], [], [1.0], cfg, spec)
        assert loss == 7.5
        assert np.all(grad == 0.0)

    def test_matches_finite_differences(self, regression_suite):
        for model, params, x0, targets, loss in regression_suite:
            cfg = SolveConfig(dt=model.default_dt, t_end=1.0, method="rk4")
            _, grad = grad_backprop(model, params, np.zeros(model.n_mismatch),
                                    np.zeros(model.n_inputs), x0, cfg, loss)
            fd = central_fd(model, params, x0, cfg, loss)
            assert np.allclose(grad, fd, rtol=1e-4, atol=1e-9), \
                f"{model.name}: {grad} vs {fd}"

    def test_sde_pathwise_gradient_matches_fd(self):
        model = noisy_linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                          noise_seed=7)
        spec = LossSpec(E.mul(E.state(0), E.state(0)), np.zeros((1, 1)))
        params = np.array([-0.5, 0.1])
        _, grad = grad_backprop(model, params, [], [], [1.0], cfg, spec)
        fd = central_fd(model, params, np.array([1.0]), cfg, spec)
        assert np.allclose(grad, fd, rtol=1e-4)

    def test_pathwise_determinism(self):
        model = noisy_linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                          noise_seed=3)
        runs = [grad_backprop(model, [-0.5, 0.1], [], [], [1.0], cfg,
                              IDENTITY_LOSS) for _ in range(2)]
        assert runs[0][0] == runs[1][0]
        assert np.array_equal(runs[0][1], runs[1][1])

    def test_loss_referencing_params_rejected(self):
        model = linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
        spec = LossSpec(E.add(E.state(0), E.param(0)), np.zeros((1, 1)))
        with pytest.raises(ModelError, match="readouts"):
            grad_backprop(model, [0.0], [], [], [1.0], cfg, spec)


class TestAdjoint:
    def test_agrees_with_backprop_on_linear(self):
        model = linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
        _, gb = grad_backprop(model, [0.0], [], [], [1.0], cfg, IDENTITY_LOSS)
        _, ga = grad_adjoint(model, [0.0], [], [], [1.0], cfg, IDENTITY_LOSS)
        assert ga[0] == pytest.approx(gb[0], rel=1e-3)

    def test_parameter_free_field_has_zero_gradient(self):
        b = SystemBuilder("free", default_dt=0.1)
        i = b.add_state("x")
        p = b.analog("unused", init=0.5, physical_range=(0, 1))
        b.set_derivative(i, E.const(0.0))
        b.set_readout([1.0], [E.state(i)])
        # reference the trainable in the readout only: d readout/d param = 0
        model_free = b.compile()
        cfg = SolveConfig(dt=0.1, t_end=1.0, method="rk4")
        loss, grad = grad_adjoint(model_free, [0.5], [], [], [2.0], cfg,
                                  IDENTITY_LOSS)
        assert loss == 2.0
        assert np.all(grad == 0.0)

    def test_agrees_with_backprop_on_suite(self, regression_suite):
        for model, params, x0, targets, loss in regression_suite:
            cfg = SolveConfig(dt=model.default_dt, t_end=1.0, method="rk4")
            lb, gb = grad_backprop(model, params, np.zeros(model.n_mismatch),
                                   np.zeros(model.n_inputs), x0, cfg, loss)
            la, ga = grad_adjoint(model, params, np.zeros(model.n_mismatch),
                                  np.zeros(model.n_inputs), x0, cfg, loss)
            assert la == pytest.approx(lb, rel=1e-12)
            scale = np.maximum(np.abs(gb), 1e-8)
            assert np.all(np.abs(ga - gb) / scale < 1e-3), \
                f"{model.name}: {ga} vs {gb}"

    def test_multi_readout_jumps_match_fd(self):
        b = SystemBuilder("jumps", default_dt=0.01)
        i = b.add_state("x")
        a = b.analog("a", init=-0.7, physical_range=(-2, 0))
        b.set_derivative(i, E.mul(a, E.state(i)))
        b.set_readout([0.25, 0.5, 1.0], [E.state(i)])
        model = b.compile()
        targets = np.array([[0.5], [0.4], [0.2]])
        spec = LossSpec(E.mean_squared_error(3), targets)
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
        _, ga = grad_adjoint(model, [-0.7], [], [], [1.0], cfg, spec)
        fd = central_fd(model, np.array([-0.7]), np.array([1.0]), cfg, spec)
        assert ga[0] == pytest.approx(fd[0], rel=1e-4)

    def test_rejects_sde(self):
        model = noisy_linear_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                          noise_seed=1)
        with pytest.raises(SolveError, match="adjoint"):
            grad_adjoint(model, [-0.5, 0.1], [], [], [1.0], cfg,
                         IDENTITY_LOSS)


class TestMemoryContract:
    def _measure(self, fn, model, params, x0, loss, n_steps):
        cfg = SolveConfig(dt=1.0 / n_steps, t_end=1.0, method="rk4")
        alloc_meter.enabled = True
        alloc_meter.reset()
        fn(model, params, [], [], x0, cfg, loss)
        total = alloc_meter.total
        alloc_meter.enabled = False
        return total

    def test_adjoint_memory_independent_of_steps(self):
        model = linear_model()
        a200 = self._measure(grad_adjoint, model, [0.1], [1.0],
                             IDENTITY_LOSS, 200)
        a2000 = self._measure(grad_adjoint, model, [0.1], [1.0],
                              IDENTITY_LOSS, 2000)
        assert abs(a2000 - a200) <= model.n_states

    def test_backprop_memory_grows_linearly(self):
        model = linear_model()
        b200 = self._measure(grad_backprop, model, [0.1], [1.0],
                             IDENTITY_LOSS, 200)
        b2000 = self._measure(grad_backprop, model, [0.1], [1.0],
                              IDENTITY_LOSS, 2000)
        growth = (b2000 - b200) / (1800 * model.n_states)
        assert growth == pytest.approx(1.0, rel=0.05)


class TestMonteCarlo:
    def _mismatched_model(self, sigma=0.1):
        b = SystemBuilder("mm", default_dt=0.02)
        i = b.add_state("x")
        a = b.analog("a", init=-1.0, physical_range=(-3, 0))
        b.set_derivative(i, E.mul(b.mismatch(a, sigma), E.state(i)))
        b.set_readout([1.0], [E.state(i)])
        return b.compile()

    def test_degenerate_mc_equals_single_backprop(self):
        model = self._mismatched_model(sigma=0.0)
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.02, t_end=1.0, method="rk4")
        item = BatchItem(inputs=np.zeros(0), x0=np.array([1.0]),
                         targets=np.zeros((1, 1)))
        est = mc_grad(model, store, [item], 1, 99, cfg, E.state(0))
        pmap = store.physical()
        loss, g_phys = grad_backprop(model, pmap.params, [1.0], [],
                                     [1.0], cfg, IDENTITY_LOSS)
        assert est.loss_mean == pytest.approx(loss, rel=1e-12)
        assert est.grad == pytest.approx(store.chain_to_raw(g_phys, pmap),
                                         rel=1e-12)
        assert est.n_samples == 1

    def test_zero_sigma_grad_invariant_to_seed(self):
        model = self._mismatched_model(sigma=0.0)
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.02, t_end=1.0, method="rk4")
        item = BatchItem(inputs=np.zeros(0), x0=np.array([1.0]),
                         targets=np.zeros((1, 1)))
        a = mc_grad(model, store, [item], 4, 1, cfg, E.state(0))
        b = mc_grad(model, store, [item], 4, 2, cfg, E.state(0))
        assert np.array_equal(a.grad, b.grad)

    def test_standard_error_shrinks_with_samples(self):
        model = self._mismatched_model(sigma=0.1)
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.02, t_end=1.0, method="rk4")
        item = BatchItem(inputs=np.zeros(0), x0=np.array([1.0]),
                         targets=np.zeros((1, 1)))

        def spread(n_mismatch):
            grads = [mc_grad(model, store, [item], n_mismatch, seed, cfg,
                             E.state(0)).grad[0] for seed in range(24)]
            return np.std(grads)

        ratio = spread(64) / spread(8)
        # expect ~ 1/sqrt(8) = 0.354
        assert 0.15 < ratio < 0.65

    def test_worker_count_does_not_change_result(self):
        model = self._mismatched_model(sigma=0.1)
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.02, t_end=1.0, method="rk4")
        items = [BatchItem(inputs=np.zeros(0), x0=np.array([v]),
                           targets=np.zeros((1, 1))) for v in (0.5, 1.0, 2.0)]
        a = mc_grad(model, store, items, 4, 5, cfg, E.state(0), workers=1)
        b = mc_grad(model, store, items, 4, 5, cfg, E.state(0), workers=3)
        assert a.loss_mean == b.loss_mean
        assert np.array_equal(a.grad, b.grad)

    def test_failing_sample_is_identified(self):
        b = SystemBuilder("boom", default_dt=0.5)
        i = b.add_state("x")
        a = b.analog("a", init=2.9, physical_range=(0, 3))
        s = E.state(i)
        b.set_derivative(i, E.mul(a, E.mul(s, E.mul(s, s))))
        b.set_readout([50.0], [s])
        model = b.compile()
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.5, t_end=50.0, method="euler")
        item = BatchItem(inputs=np.zeros(0), x0=np.array([5.0]),
                         targets=np.zeros((1, 1)))
        with pytest.raises(OptimError, match=r"item=0, mismatch=\d"):
            mc_grad(model, store, [item], 2, 0, cfg, E.state(0))

    def test_mismatch_expectation_matches_average(self):
        model = self._mismatched_model(sigma=0.1)
        store = TrainableStore.from_decls(model.trainables)
        cfg = SolveConfig(dt=0.02, t_end=1.0, method="rk4")
        item = BatchItem(inputs=np.zeros(0), x0=np.array([1.0]),
                         targets=np.zeros((1, 1)))
        est = mc_grad(model, store, [item], 16, 3, cfg, E.state(0))
        assert est.n_samples == 16
        assert est.loss_std > 0
