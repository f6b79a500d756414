"""Oscillator pattern recognizer: topology, Hebbian rule, readout, datasets."""

import numpy as np
import pytest

from diffanalog import expr as E
from diffanalog import obc
from diffanalog.errors import ModelError
from diffanalog.rng import rng_for
from diffanalog.solver import SolveConfig, solve
from diffanalog.store import TrainableStore


class TestTopology:
    def test_grid_edge_count(self):
        assert len(obc.grid_edges(10, 6)) == 104
        assert len(obc.grid_edges(3, 3)) == 12

    def test_model_shape(self):
        pats = obc.builtin_patterns()
        model = obc.build_obc(obc.ObcConfig(bitwidth=1, init="hebbian",
                                            locking_trainable=True),
                              patterns=pats)
        assert model.n_states == 60
        assert model.n_params == 105  # 104 couplings + locking weight

    def test_locking_fixed_when_not_trainable(self):
        pats = obc.builtin_patterns()
        model = obc.build_obc(obc.ObcConfig(bitwidth=1, init="hebbian"),
                              patterns=pats)
        assert model.n_params == 104

    def test_equal_phases_are_stationary(self):
        cfg = obc.ObcConfig(rows=3, cols=3, bitwidth=1, init="random",
                            noise_alpha=0.0, locking_init=0.0)
        model = obc.build_obc(cfg, seed=0)
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        x0 = np.full(9, 0.3)
        traj = solve(model, params, np.zeros(0), np.zeros(0), x0,
                     SolveConfig(dt=1 / 256, t_end=1.0, method="rk4"))
        assert np.all(traj.states == 0.3)

    def test_zero_alpha_is_seed_independent(self):
        cfg = obc.ObcConfig(rows=3, cols=3, bitwidth=1, init="random",
                            noise_alpha=0.0)
        model = obc.build_obc(cfg, seed=0)
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        x0 = np.linspace(0, 1, 9)
        t1 = solve(model, params, np.zeros(0), np.zeros(0), x0,
                   SolveConfig(dt=1 / 256, t_end=1.0,
                               method="euler_maruyama", noise_seed=1))
        t2 = solve(model, params, np.zeros(0), np.zeros(0), x0,
                   SolveConfig(dt=1 / 256, t_end=1.0,
                               method="euler_maruyama", noise_seed=2))
        assert np.array_equal(t1.states, t2.states)

    def test_two_coupled_oscillators_synchronize(self):
        cfg = obc.ObcConfig(rows=1, cols=2, bitwidth=1, init="random",
                            noise_alpha=0.0, locking_init=0.0)
        model = obc.build_obc(cfg, seed=0)
        params = np.array([1.0])  # positive coupling
        x0 = np.array([0.2, 0.6])
        traj = solve(model, params, np.zeros(0), np.zeros(0), x0,
                     SolveConfig(dt=1 / 256, t_end=1.0, method="rk4"))
        outs = obc.phase_readout(traj.states)
        gaps = np.abs(outs[:, 0] - outs[:, 1])
        assert gaps[-1] < gaps[0]
        assert gaps[-1] < 0.05


class TestHebbian:
    def test_single_pattern_products(self):
        pats = obc.PatternSet([obc.builtin_patterns().patterns[0]])
        edges = obc.grid_edges(10, 6)
        k = obc.hebbian_weights(pats, 1, edges)
        s = 2 * pats.flat()[0] - 1
        expect = np.array([s[i] * s[j] for i, j in edges])
        assert np.array_equal(k, expect)
        assert set(np.unique(k)) <= {-1.0, 1.0}

    def test_opposite_evidence_ties_to_lower_level(self):
        a = np.zeros((2, 2))
        a[0, 0] = 1.0  # products disagree across the two patterns
        b = np.zeros((2, 2))
        b[0, 1] = 1.0
        pats = obc.PatternSet([a, b])
        edges = [(0, 1)]
        k = obc.hebbian_weights(pats, 1, edges)
        assert k[0] == -1.0  # mean 0 tie snaps to the lower level

    def test_quantization_respects_bitwidth(self):
        pats = obc.builtin_patterns()
        for bw in (1, 2, 3):
            k = obc.hebbian_weights(pats, bw, obc.grid_edges(10, 6))
            levels = set(np.round(np.linspace(-1, 1, 2 ** bw), 12))
            assert set(np.round(k, 12)) <= levels


class TestPhaseReadout:
    @pytest.mark.parametrize("x,expected", [
        (0.0, 0.0), (1.0, 1.0), (2.0, 0.0), (0.5, 0.5), (-0.25, 0.25),
        (1.5, 0.5), (-1.0, 1.0),
    ])
    def test_fold_values(self, x, expected):
        assert obc.phase_readout([x])[0] == pytest.approx(expected, abs=1e-12)

    def test_model_readout_matches_fold(self):
        cfg = obc.ObcConfig(rows=1, cols=2, bitwidth=1, init="random",
                            noise_alpha=0.0)
        model = obc.build_obc(cfg, seed=0)
        params = TrainableStore.from_decls(model.trainables).physical(
            hard=True).params
        x0 = np.array([0.37, 0.81])
        traj = solve(model, params, np.zeros(0), np.zeros(0), x0,
                     SolveConfig(dt=1 / 256, t_end=1.0, method="rk4"))
        assert np.allclose(traj.readouts[0],
                           obc.phase_readout(traj.states[-1]), atol=1e-12)

    def test_cosine_variant_agrees_at_half_integers(self):
        cfg = obc.ObcConfig(rows=1, cols=2, bitwidth=1, init="random",
                            noise_alpha=0.0, readout="cosine")
        model = obc.build_obc(cfg, seed=0)
        env = E.EvalEnv(state=[0.5, 1.0],
                        params=TrainableStore.from_decls(
                            model.trainables).physical(hard=True).params)
        out = model.readout_tape.forward(env)
        assert out[0] == pytest.approx(0.5, abs=1e-12)
        assert out[1] == pytest.approx(1.0, abs=1e-12)


class TestDatasets:
    def test_zero_noise_hook(self):
        pats = obc.builtin_patterns()
        items = obc.noisy_dataset(pats, 4, rng_for(0, 0), noise_amp=0.0)
        for item in items:
            assert np.array_equal(item.x0, item.targets[0])

    def test_noisy_values_clamped(self):
        pats = obc.builtin_patterns()
        items = obc.noisy_dataset(pats, 64, rng_for(0, 1))
        for item in items:
            assert np.all(item.x0 >= 0.0) and np.all(item.x0 <= 1.0)

    def test_deterministic_per_seed(self):
        pats = obc.builtin_patterns()
        a = obc.noisy_dataset(pats, 8, rng_for(1, 2))
        b = obc.noisy_dataset(pats, 8, rng_for(1, 2))
        for ia, ib in zip(a, b):
            assert np.array_equal(ia.x0, ib.x0)

    def test_sizes(self):
        pats = obc.builtin_patterns()
        assert len(obc.noisy_dataset(pats, 512, rng_for(0, 3))) == 512


class TestPatternFiles:
    def test_builtin_patterns_shape(self):
        pats = obc.builtin_patterns()
        assert len(pats.patterns) == 5
        assert pats.shape == (10, 6)

    def test_round_trip_through_file(self, tmp_path):
        pats = obc.builtin_patterns()
        path = tmp_path / "pats.txt"
        with open(path, "w") as f:
            for p in pats.patterns:
                for row in p:
                    f.write("".join(str(int(v)) for v in row) + "\n")
                f.write("\n")
        back = obc.load_patterns(path)
        for a, b in zip(pats.patterns, back.patterns):
            assert np.array_equal(a, b)

    def test_bad_characters_rejected(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0102\n")
        with pytest.raises(ModelError):
            obc.load_patterns(path)


class TestHardening:
    def test_one_bit_hardened_couplings_are_binary(self):
        pats = obc.builtin_patterns()
        cfg = obc.ObcConfig(bitwidth=1, init="hebbian", locking_trainable=True)
        model = obc.build_obc(cfg, patterns=pats)
        store = TrainableStore.from_decls(model.trainables)
        rng = np.random.default_rng(0)
        store.raw += rng.normal(0, 0.3, size=store.n_raw)  # post-training-ish
        params = store.physical(hard=True).params
        couplings = params[:104]
        assert set(np.unique(couplings)) <= {-1.0, 1.0}
