"""Adam updates, the training loop, logs and checkpoints."""

import numpy as np
import pytest

from diffanalog import expr as E
from diffanalog.errors import OptimError
from diffanalog.gradient import BatchItem
from diffanalog.optim import (AdamState, TrainConfig, adam_step,
                              load_checkpoint, save_checkpoint, train,
                              write_training_log)
from diffanalog.solver import SolveConfig
from diffanalog.store import TrainableStore
from diffanalog.sysmodel import SystemBuilder


def quadratic_problem():
    """Convex toy: linear ODE, quadratic loss; minimum at a = -1."""
    b = SystemBuilder("toy", default_dt=0.05)
    i = b.add_state("x")
    a = b.analog("a", init=0.5, physical_range=(-2, 2))
    b.set_derivative(i, E.mul(a, E.state(i)))
    b.set_readout([1.0], [E.state(i)])
    model = b.compile()
    target = np.array([[np.exp(-1.0)]])
    items = [BatchItem(inputs=np.zeros(0), x0=np.array([1.0]),
                       targets=target)]
    return model, items


def fresh_store(model):
    return TrainableStore.from_decls(model.trainables)


class TestAdamStep:
    def test_zero_gradient_is_fixed_point(self):
        model, _ = quadratic_problem()
        store = fresh_store(model)
        state = AdamState.fresh(store.n_raw, lr=0.1)
        before = store.raw.copy()
        adam_step(store, np.zeros(store.n_raw), state)
        assert np.array_equal(store.raw, before)
        assert state.step == 1

    def test_first_step_size_is_learning_rate(self):
        model, _ = quadratic_problem()
        store = fresh_store(model)
        state = AdamState.fresh(store.n_raw, lr=0.05)
        before = store.raw.copy()
        adam_step(store, np.array([0.37]), state)
        update = store.raw - before
        assert update[0] == pytest.approx(-0.05, abs=1e-6 * 0.05)

    def test_analog_raw_clipped_after_update(self):
        model, _ = quadratic_problem()
        store = fresh_store(model)
        store.raw[0] = 0.99
        state = AdamState.fresh(store.n_raw, lr=0.05)
        adam_step(store, np.array([-1.0]), state)  # pushes raw upward
        assert store.raw[0] == 1.0

    def test_discrete_logits_not_clipped(self):
        b = SystemBuilder("disc", default_dt=0.5)
        i = b.add_state("x")
        k = b.discrete("k", levels=[-1, 1], init_logits=[3.0, 0.0])
        b.set_derivative(i, E.mul(k, E.state(i)))
        b.set_readout([1.0], [E.state(i)])
        model = b.compile()
        store = fresh_store(model)
        state = AdamState.fresh(store.n_raw, lr=1.0)
        adam_step(store, np.array([-1.0, 0.5]), state)
        assert store.raw[0] > 1.0  # moved beyond the analog clip range

    def test_non_finite_gradient_rejected(self):
        model, _ = quadratic_problem()
        store = fresh_store(model)
        state = AdamState.fresh(store.n_raw)
        with pytest.raises(OptimError, match="non-finite"):
            adam_step(store, np.array([np.nan]), state)


class TestTrainingLoop:
    def _run(self, n_steps=20, seed=0, workers=1):
        model, items = quadratic_problem()
        store = fresh_store(model)
        # lr small enough that Adam's momentum does not orbit the optimum
        tc = TrainConfig(n_steps=n_steps, batch_size=1, lr=0.05, seed=seed,
                         workers=workers)
        cfg = SolveConfig(dt=0.05, t_end=1.0, method="rk4")
        return train(model, store, items, tc, cfg,
                     loss_expr=E.mean_squared_error(1))

    def test_convex_loss_monotone_after_warmup(self):
        result = self._run(n_steps=25)
        losses = [h["loss_mean"] for h in result.history]
        assert all(a >= b - 1e-12 for a, b in zip(losses[5:], losses[6:]))
        assert losses[-1] < losses[0]

    def test_full_run_determinism_across_workers(self):
        a = self._run(n_steps=8, seed=3, workers=1)
        b = self._run(n_steps=8, seed=3, workers=2)
        assert [h["loss_mean"] for h in a.history] == \
            [h["loss_mean"] for h in b.history]
        assert np.array_equal(a.final_store.raw, b.final_store.raw)

    def test_best_checkpoint_has_lowest_loss(self):
        result = self._run(n_steps=15)
        losses = [h["loss_mean"] for h in result.history]
        assert result.best_loss == min(losses)
        assert result.best_step == int(np.argmin(losses))

    def test_resume_reproduces_unbroken_run(self):
        model, items = quadratic_problem()
        cfg = SolveConfig(dt=0.05, t_end=1.0, method="rk4")
        tc = TrainConfig(n_steps=12, batch_size=1, lr=0.1, seed=5)
        full = train(model, fresh_store(model), items, tc, cfg,
                     loss_expr=E.mean_squared_error(1))

        tc_half = TrainConfig(n_steps=6, batch_size=1, lr=0.1, seed=5)
        first = train(model, fresh_store(model), items, tc_half, cfg,
                      loss_expr=E.mean_squared_error(1))
        resumed = train(model, first.final_store, items, tc, cfg,
                        loss_expr=E.mean_squared_error(1),
                        start_step=6, adam=first.adam)
        assert np.array_equal(resumed.final_store.raw, full.final_store.raw)
        assert [h["loss_mean"] for h in resumed.history] == \
            [h["loss_mean"] for h in full.history[6:]]


class TestArtifacts:
    def test_training_log_schema(self, tmp_path):
        model, items = quadratic_problem()
        tc = TrainConfig(n_steps=3, batch_size=1, lr=0.1, seed=0)
        cfg = SolveConfig(dt=0.05, t_end=1.0, method="rk4")
        result = train(model, fresh_store(model), items, tc, cfg,
                       loss_expr=E.mean_squared_error(1))
        path = tmp_path / "log.csv"
        write_training_log(result.history, path, provenance='{"seed":0}')
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# provenance:")
        assert lines[1] == "step,loss_mean,loss_std,grad_norm,tau"
        assert len(lines) == 2 + 3
        first = lines[2].split(",")
        assert first[0] == "0"
        float(first[1]), float(first[2]), float(first[3])

    def test_checkpoint_round_trip(self, tmp_path):
        model, items = quadratic_problem()
        store = fresh_store(model)
        store.raw[0] = 0.123456789
        adam = AdamState.fresh(store.n_raw, lr=0.07)
        adam.m[:] = 0.5
        adam.step = 9
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, store, adam, seed=42, next_step=10,
                        extra={"note": "x"})
        store2, adam2, seed, next_step, extra = load_checkpoint(
            path, model.trainables)
        assert np.array_equal(store2.raw, store.raw)
        assert np.array_equal(adam2.m, adam.m)
        assert adam2.step == 9 and adam2.lr == 0.07
        assert (seed, next_step) == (42, 10)
        assert extra == {"note": "x"}
