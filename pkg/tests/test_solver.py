"""Fixed-step solvers: accuracy orders, SDE increments, determinism."""

import numpy as np
import pytest

from diffanalog import expr as E
from diffanalog.errors import SolveError
from diffanalog.solver import (SolveConfig, solve, wiener_increments,
                               write_trajectory_csv)
from diffanalog.sysmodel import SystemBuilder


def decay_model(dt=0.01):
    b = SystemBuilder("decay", default_dt=dt)
    i = b.add_state("x")
    b.set_derivative(i, E.neg(E.state(i)))
    b.set_readout([1.0], [E.state(i)])
    return b.compile()


def decay_with_noise(amp_expr):
    b = SystemBuilder("sde")
    i = b.add_state("x")
    b.set_derivative(i, E.neg(E.state(i)))
    b.set_noise(i, amp_expr)
    b.set_readout([1.0], [E.state(i)])
    return b.compile()


class TestAccuracy:
    def test_rk4_matches_analytic_decay(self):
        model = decay_model()
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="rk4")
        traj = solve(model, [], [], [], [1.0], cfg)
        assert traj.readouts[0, 0] == pytest.approx(np.exp(-1.0), abs=1e-6)

    def test_zero_field_stays_constant(self):
        b = SystemBuilder("still")
        i = b.add_state("x")
        b.set_derivative(i, E.const(0.0))
        b.set_readout([1.0], [E.state(i)])
        model = b.compile()
        for method in ("euler", "rk4"):
            traj = solve(model, [], [], [], [0.7],
                         SolveConfig(dt=0.1, t_end=1.0, method=method))
            assert np.all(traj.states == 0.7)

    def test_euler_error_halves_with_dt(self):
        model = decay_model()
        errors = []
        for dt in (0.02, 0.01, 0.005):
            traj = solve(model, [], [], [], [1.0],
                         SolveConfig(dt=dt, t_end=1.0, method="euler"))
            errors.append(abs(traj.readouts[0, 0] - np.exp(-1.0)))
        for a, b in zip(errors, errors[1:]):
            assert a / b == pytest.approx(2.0, rel=0.2)

    def test_rk4_error_scales_fourth_order(self):
        model = decay_model()
        errors = []
        for dt in (0.2, 0.1, 0.05):
            traj = solve(model, [], [], [], [1.0],
                         SolveConfig(dt=dt, t_end=1.0, method="rk4"))
            errors.append(abs(traj.readouts[0, 0] - np.exp(-1.0)))
        for a, b in zip(errors, errors[1:]):
            assert a / b == pytest.approx(16.0, rel=0.2)

    def test_kuramoto_pair_fixed_point(self):
        b = SystemBuilder("pair")
        for name in ("x0", "x1"):
            b.add_state(name)
        k = b.analog("k", init=1.0, physical_range=(-2, 2))
        pi = np.pi
        s01 = E.sin(E.mul(E.const(pi), E.sub(E.state(0), E.state(1))))
        b.set_derivative(0, E.neg(E.mul(k, s01)))
        b.set_derivative(1, E.mul(k, s01))
        b.set_readout([1.0], [E.state(0), E.state(1)])
        model = b.compile()
        traj = solve(model, [1.0], [], [], [0.3, 0.3],
                     SolveConfig(dt=1 / 256, t_end=1.0, method="rk4"))
        assert np.all(traj.states == 0.3)


class TestStochastic:
    def test_zero_amplitude_is_bitwise_euler(self):
        model = decay_with_noise(E.const(0.0))
        euler = solve(model, [], [], [], [1.0],
                      SolveConfig(dt=0.01, t_end=1.0, method="euler"))
        em = solve(model, [], [], [], [1.0],
                   SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                               noise_seed=1234))
        assert np.array_equal(euler.states, em.states)

    def test_seed_determinism_is_bitwise(self):
        model = decay_with_noise(E.const(0.3))
        cfg = SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                          noise_seed=77)
        a = solve(model, [], [], [], [1.0], cfg)
        b = solve(model, [], [], [], [1.0], cfg)
        assert np.array_equal(a.states, b.states)

    def test_different_seeds_differ(self):
        model = decay_with_noise(E.const(0.3))
        a = solve(model, [], [], [], [1.0],
                  SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                              noise_seed=1))
        b = solve(model, [], [], [], [1.0],
                  SolveConfig(dt=0.01, t_end=1.0, method="euler_maruyama",
                              noise_seed=2))
        assert not np.array_equal(a.states, b.states)

    def test_wiener_increment_statistics(self):
        dt = 0.01
        xi = wiener_increments(1000, 128, dt, seed=5).ravel()
        n = xi.size
        assert n >= 1e5
        se_mean = np.sqrt(dt / n)
        assert abs(xi.mean()) < 3 * se_mean
        var = xi.var()
        se_var = dt * np.sqrt(2.0 / n)
        assert abs(var - dt) < 3 * se_var


class TestValidation:
    def test_non_integer_step_count_rejected(self):
        with pytest.raises(SolveError, match="integer number of steps"):
            SolveConfig(dt=0.3, t_end=1.0, method="euler")

    def test_em_requires_noise_seed(self):
        with pytest.raises(SolveError, match="noise_seed"):
            SolveConfig(dt=0.1, t_end=1.0, method="euler_maruyama")

    def test_ode_rejects_noise_seed(self):
        with pytest.raises(SolveError, match="noise_seed"):
            SolveConfig(dt=0.1, t_end=1.0, method="rk4", noise_seed=1)

    def test_unknown_method_rejected(self):
        with pytest.raises(SolveError, match="unknown method"):
            SolveConfig(dt=0.1, t_end=1.0, method="leapfrog")

    def test_readout_beyond_t_end_rejected(self):
        model = decay_model()
        with pytest.raises(SolveError, match="exceeds t_end"):
            solve(model, [], [], [], [1.0],
                  SolveConfig(dt=0.1, t_end=0.5, method="euler"))

    def test_off_grid_readout_rejected_at_solve(self):
        model = decay_model()
        with pytest.raises(SolveError, match="does not lie on"):
            solve(model, [], [], [], [1.0],
                  SolveConfig(dt=0.3 / 2, t_end=1.5, method="euler"))

    def test_blow_up_reports_step_index(self):
        b = SystemBuilder("explode")
        i = b.add_state("x")
        s = E.state(i)
        b.set_derivative(i, E.mul(s, E.mul(s, s)))
        b.set_readout([50.0], [s])
        model = b.compile()
        with pytest.raises(SolveError, match=r"step \d+"):
            solve(model, [], [], [], [4.0],
                  SolveConfig(dt=0.5, t_end=50.0, method="euler"))

    def test_size_mismatch_rejected(self):
        model = decay_model()
        with pytest.raises(SolveError, match="initial state"):
            solve(model, [], [], [], [1.0, 2.0],
                  SolveConfig(dt=0.1, t_end=1.0, method="euler"))


class TestExport:
    def test_trajectory_csv_round_trip(self, tmp_path):
        model = decay_model()
        traj = solve(model, [], [], [], [1.0],
                     SolveConfig(dt=0.25, t_end=1.0, method="rk4"))
        path = tmp_path / "traj.csv"
        sibling = write_trajectory_csv(traj, path, provenance='{"seed":1}')
        lines = path.read_text().splitlines()
        assert lines[0].startswith("# provenance:")
        assert lines[1] == "t,x0"
        assert len(lines) == 2 + 5  # header rows + 5 grid points
        values = np.array([[float(v) for v in ln.split(",")]
                           for ln in lines[2:]])
        assert np.array_equal(values[:, 1], traj.states[:, 0])
        rlines = open(sibling).read().splitlines()
        assert rlines[1] == "t,y0"
        assert len(rlines) == 3
