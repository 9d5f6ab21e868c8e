"""Stepping schemes: exact diffusion, cut-off semantics, conservation, blow-up."""

import dataclasses

import numpy as np
import pytest

from torusrd.fields import GridField, TorusGrid, l2_norm_spectral, single_mode, to_grid
from torusrd.noise import (
    IncrementSet,
    NoiseModel,
    build_theta_shell,
    path_rng,
    sample_increments,
)
from torusrd.reactions import MassActionSpec, build_builtin, mass_action_build
from torusrd.solver import (
    CutOffParams,
    SimState,
    SolverConfig,
    Stepper,
    initial_state,
    phi_bump,
    run,
    step_deterministic,
    step_stochastic,
)


def grid_32():
    return TorusGrid(2, 32)


def constant_fields(grid, values):
    return [GridField(grid, np.full(grid.shape, v)) for v in values]


class TestPhiBump:
    def test_plateau(self):
        assert phi_bump(0.5) == 1.0
        assert phi_bump(1.0) == 1.0

    def test_tail(self):
        assert phi_bump(3.0) == 0.0
        assert phi_bump(2.0) == 0.0

    def test_midpoint(self):
        assert phi_bump(1.5) == pytest.approx(0.5)

    def test_monotone_nonincreasing(self):
        xs = np.linspace(0.0, 2.5, 400)
        ys = [phi_bump(x) for x in xs]
        assert all(b <= a + 1e-15 for a, b in zip(ys, ys[1:]))

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            phi_bump(-0.1)


class TestConfigValidation:
    def test_bad_dt(self):
        with pytest.raises(ValueError):
            SolverConfig(dt=0.0, T=1.0)

    def test_bad_scheme(self):
        with pytest.raises(ValueError):
            SolverConfig(dt=0.1, T=1.0, scheme="heun")

    def test_bad_q0(self):
        with pytest.raises(ValueError):
            SolverConfig(dt=0.1, T=1.0, blowup_norm_q0=2.0)

    def test_cutoff_params(self):
        with pytest.raises(ValueError):
            CutOffParams(R=1.0, r=1.0, q=2.0)

    def test_cfl_guard(self):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.1])
        cfg = SolverConfig(dt=0.5, T=1.0, noise_on=True)
        with pytest.raises(ValueError, match="step guard"):
            Stepper(grid, sys0, noise, cfg)


class TestLinearDiffusion:
    def test_single_mode_exact_decay(self):
        grid = grid_32()
        sys0 = build_builtin("zero", [0.02])
        cfg = SolverConfig(dt=1e-3, T=0.25, noise_on=False, track_balance=False)
        v0 = [to_grid(single_mode(grid, (2, 1), 0.3))]
        state, _ = run(sys0, None, cfg, v0, nu_enhancement=0.05)
        expected = 0.3 * np.exp(-4 * np.pi**2 * 5 * (0.02 + 0.05) * 0.25)
        got = state.fields[0][2, 1]
        assert abs(got - expected) < 1e-12 * abs(expected)

    def test_step_deterministic_matches_run(self):
        grid = grid_32()
        sys0 = build_builtin("zero", [0.02])
        cfg = SolverConfig(dt=1e-2, T=1e-2, noise_on=False, track_balance=False)
        v0 = [to_grid(single_mode(grid, (1, 0), 1.0))]
        st = initial_state(grid, v0, cfg)
        stepped = step_deterministic(st, sys0, 0.05, cfg, grid)
        ran, _ = run(sys0, None, cfg, v0, nu_enhancement=0.05)
        assert np.array_equal(stepped.fields, ran.fields)


class TestReactionStepping:
    def test_equilibrium_constant_state(self):
        grid = grid_32()
        sys = mass_action_build(MassActionSpec(q=(2, 0), p=(0, 1)), nu=[0.1, 0.1])
        cfg = SolverConfig(dt=1e-2, T=0.5, noise_on=False, track_balance=False)
        v0 = constant_fields(grid, [1.0, 1.0])
        state, _ = run(sys, None, cfg, v0)
        for i, target in enumerate([1.0, 1.0]):
            vals = np.fft.ifftn(state.fields[i]).real * grid.n_points
            assert np.abs(vals - target).max() < 1e-12

    def test_logistic_converges_to_one(self):
        grid = TorusGrid(2, 8)
        sys = build_builtin("logistic", [0.1])
        cfg = SolverConfig(dt=1e-2, T=20.0, noise_on=False, track_balance=False,
                           record_every=10**9)
        state, _ = run(sys, None, cfg, constant_fields(grid, [0.5]))
        vals = np.fft.ifftn(state.fields[0]).real * grid.n_points
        assert np.abs(vals - 1.0).max() < 1e-6


class TestRunContract:
    def test_t_zero_returns_v0_unchanged(self):
        grid = grid_32()
        rng = np.random.default_rng(0)
        v0 = [GridField(grid, rng.standard_normal(grid.shape))]
        cfg = SolverConfig(dt=0.1, T=0.0, noise_on=False, track_balance=False)
        state, record = run(build_builtin("zero", [0.1]), None, cfg, v0)
        back = np.fft.ifftn(state.fields[0]).real * grid.n_points
        assert np.abs(back - v0[0].values).max() < 1e-13
        assert state.t == 0.0 and len(record.times) == 1

    def test_bitwise_determinism(self):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys = build_builtin("logistic", [0.05])
        cfg = SolverConfig(dt=2e-3, T=0.1, noise_on=True, seed=42)
        v0 = [GridField(grid, 0.5 + 0.1 * np.cos(2 * np.pi * grid.node_coordinates()[0]))]
        s1, r1 = run(sys, noise, cfg, v0)
        s2, r2 = run(sys, noise, cfg, v0)
        assert np.array_equal(s1.fields, s2.fields)
        assert np.array_equal(r1.lq[2.0], r2.lq[2.0])
        assert np.array_equal(r1.grad_energy[2.0], r2.grad_energy[2.0])

    def test_require_nonneg(self):
        grid = grid_32()
        cfg = SolverConfig(dt=0.1, T=0.1, noise_on=False, require_nonneg=True)
        v0 = [GridField(grid, -np.ones(grid.shape))]
        with pytest.raises(ValueError, match="nonneg"):
            run(build_builtin("zero", [0.1]), None, cfg, v0)


class TestMeanModeDecayWithNoise:
    def test_enhanced_rate_within_mc_error(self):
        # mean amplitude of mode (1,0) decays at the nu-enhanced rate
        grid = TorusGrid(2, 48)
        noise = NoiseModel(build_theta_shell(8, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.01])
        T = 0.2
        cfg = SolverConfig(dt=2e-3, T=T, noise_on=True, track_balance=False,
                           record_every=10**9, seed=7)
        v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
        amps = []
        for p in range(24):
            st, _ = run(sys0, noise, cfg, v0, path_index=p)
            amps.append(st.fields[0][1, 0])
        amps = np.array(amps)
        expected = 0.5 * np.exp(-4 * np.pi**2 * (0.01 + 0.1) * T)
        se = amps.std(ddof=1) / np.sqrt(len(amps))
        assert abs(amps.mean() - expected) <= 3 * abs(se)


class TestMassInvariance:
    def test_mode0_untouched_by_noise_and_diffusion(self):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(2, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.05])
        cfg = SolverConfig(dt=2e-3, T=0.1, noise_on=True, track_balance=False, seed=3)
        x = grid.node_coordinates()[0]
        v0 = [GridField(grid, 1.5 + 0.5 * np.cos(2 * np.pi * x))]
        state, record = run(sys0, noise, cfg, v0)
        assert np.abs(record.mass[:, 0] - 1.5).max() < 1e-13

    def test_pathwise_weighted_mass_conserved(self):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys = mass_action_build(MassActionSpec(q=(2, 0), p=(0, 1)), nu=[0.05, 0.08])
        cfg = SolverConfig(dt=2e-3, T=0.2, noise_on=True, track_balance=False, seed=11)
        x, y = grid.node_coordinates()
        v0 = [
            GridField(grid, 1.0 + 0.3 * np.cos(2 * np.pi * x)),
            GridField(grid, 1.0 + 0.3 * np.sin(2 * np.pi * y)),
        ]
        _, record = run(sys, noise, cfg, v0)
        M = record.mass @ np.array([1.0, 2.0])
        assert np.abs(M - M[0]).max() < 1e-10 * abs(M[0])

    def test_conservative_flux_leaves_mass_alone(self):
        grid = grid_32()
        sys = build_builtin("linear_flux", [0.05], d=2)
        cfg = SolverConfig(dt=2e-3, T=0.2, noise_on=False, track_balance=False)
        x = grid.node_coordinates()[0]
        v0 = [GridField(grid, 1.0 + 0.4 * np.cos(2 * np.pi * x))]
        _, record = run(sys, None, cfg, v0)
        assert np.abs(record.mass[:, 0] - 1.0).max() < 1e-13

    def test_mass_decays_through_f(self):
        grid = grid_32()
        sys = build_builtin("decay", [0.1])
        cfg = SolverConfig(dt=1e-3, T=1.0, noise_on=False, track_balance=False)
        _, record = run(sys, None, cfg, constant_fields(grid, [2.0]))
        expected = 2.0 * np.exp(-record.times)
        # explicit Euler on dM/dt = -M: rate error O(dt)
        assert np.abs(record.mass[:, 0] - expected).max() < 2e-3


class TestCutOffSemantics:
    def _setup(self, R, T=0.1):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys = build_builtin("logistic", [0.05])
        cutoff = CutOffParams(R=R, r=2.0, q=2.0) if R is not None else None
        cfg = SolverConfig(dt=2e-3, T=T, noise_on=True, seed=21, cutoff=cutoff,
                           track_balance=False)
        x = grid.node_coordinates()[0]
        v0 = [GridField(grid, 0.6 + 0.2 * np.cos(2 * np.pi * x))]
        return grid, noise, sys, cfg, v0

    def test_huge_R_bitwise_equals_disabled(self):
        grid, noise, sys, cfg_on, v0 = self._setup(R=1e6)
        _, _, _, cfg_off, _ = self._setup(R=None)
        s_on, _ = run(sys, noise, cfg_on, v0)
        s_off, _ = run(sys, noise, cfg_off, v0)
        assert np.array_equal(s_on.fields, s_off.fields)

    def test_tiny_R_freezes_within_ten_steps(self):
        grid, noise, sys, cfg, v0 = self._setup(R=1e-3)
        _, record = run(sys, noise, cfg, v0)
        frozen = np.nonzero(record.phi == 0.0)[0]
        assert len(frozen) > 0 and frozen[0] <= 10
        assert np.all(record.phi[frozen[0]:] == 0.0)  # phi never recovers

    def test_frozen_evolution_matches_linear_solver_bitwise(self):
        grid, noise, sys, cfg, v0 = self._setup(R=1e-3)
        stepper_nl = Stepper(grid, sys, noise, cfg)
        cfg_lin = dataclasses.replace(cfg, cutoff=None)
        sys_lin = build_builtin("zero", [0.05])
        stepper_lin = Stepper(grid, sys_lin, noise, cfg_lin)

        state, _ = run(sys, noise, dataclasses.replace(cfg, T=0.02), v0)
        assert state.phi_value == 0.0  # frozen by now
        lin_state = SimState(
            t=state.t, fields=state.fields.copy(), cutoff_acc=0.0,
            step_index=state.step_index,
        )
        for _ in range(20):
            inc = sample_increments(noise, cfg.dt, path_rng(cfg.seed, 0, state.step_index))
            state = stepper_nl.step(state, inc)
            inc = sample_increments(noise, cfg.dt, path_rng(cfg.seed, 0, lin_state.step_index))
            lin_state = stepper_lin.step(lin_state, inc)
            assert np.array_equal(state.fields, lin_state.fields)

    def test_accumulator_nondecreasing(self):
        grid, noise, sys, cfg, v0 = self._setup(R=1.0)
        _, record = run(sys, noise, cfg, v0)
        assert np.all(np.diff(record.cutoff_acc) >= 0)


class TestBlowUpDetection:
    def test_quadratic_ode_blowup_time(self):
        grid = TorusGrid(2, 8)
        sys = build_builtin("quadratic_unsafe", [0.1], allow_unsafe=True)
        cfg = SolverConfig(dt=5e-4, T=1.0, noise_on=False, track_balance=False,
                           blowup_threshold=1e3, blowup_norm_q0=4.0)
        state, record = run(sys, None, cfg, constant_fields(grid, [2.0]))
        assert state.blown_up is not None
        assert abs(state.blown_up - 0.5) < 0.1  # within 20% of 1/v0
        assert record.blowup_tau == state.blown_up

    def test_non_finite_becomes_blowup_flag(self):
        grid = TorusGrid(2, 8)
        sys = build_builtin("quadratic_unsafe", [0.1], allow_unsafe=True)
        # threshold too high to trip first: overflow produces inf -> flagged
        cfg = SolverConfig(dt=5e-2, T=10.0, noise_on=False, track_balance=False,
                           blowup_threshold=1e300, blowup_norm_q0=4.0)
        state, _ = run(sys, None, cfg, constant_fields(grid, [5.0]))
        assert state.blown_up is not None

    def test_stepping_after_blowup_rejected(self):
        grid = TorusGrid(2, 8)
        sys = build_builtin("quadratic_unsafe", [0.1], allow_unsafe=True)
        cfg = SolverConfig(dt=5e-4, T=1.0, noise_on=False, track_balance=False,
                           blowup_threshold=10.0, blowup_norm_q0=4.0)
        state, _ = run(sys, None, cfg, constant_fields(grid, [2.0]))
        stepper = Stepper(grid, sys, None, dataclasses.replace(cfg, noise_on=False))
        with pytest.raises(ValueError, match="blew up"):
            stepper.step(state, None)


class TestStratSubstep:
    def test_pathwise_l2_conservation_short(self):
        grid = TorusGrid(2, 64)
        noise = NoiseModel(build_theta_shell(2, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.0])
        cfg = SolverConfig(dt=1e-3, T=0.05, scheme="strat_substep", noise_on=True,
                           track_balance=False, seed=5, record_every=10**9)
        v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
        state, _ = run(sys0, noise, cfg, v0)
        energy = l2_norm_spectral(state.spectral_fields(grid)[0]) ** 2
        assert abs(energy - 0.5) < 1e-7

    def test_step_stochastic_wrapper(self):
        grid = grid_32()
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.01])
        cfg = SolverConfig(dt=2e-3, T=2e-3, noise_on=True, seed=9, track_balance=False)
        v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
        st = initial_state(grid, v0, cfg)
        stepped = step_stochastic(st, sys0, noise, cfg, grid)
        ran, _ = run(sys0, noise, cfg, v0)
        assert np.array_equal(stepped.fields, ran.fields)


class TestThreeDimensions:
    def test_noise_run_preserves_structure(self):
        grid = TorusGrid(3, 12)
        noise = NoiseModel(build_theta_shell(1, 0.0, 3), nu=0.05)
        sys0 = build_builtin("zero", [0.02])
        cfg = SolverConfig(dt=5e-3, T=0.05, noise_on=True, seed=8, track_balance=False)
        x = grid.node_coordinates()[0]
        v0 = [GridField(grid, 1.0 + 0.5 * np.cos(2 * np.pi * x))]
        state, record = run(sys0, noise, cfg, v0)
        assert state.blown_up is None
        # mode 0 untouched, output stays real
        assert np.abs(record.mass[:, 0] - 1.0).max() < 1e-13
        values = np.fft.ifftn(state.fields[0])
        assert np.abs(values.imag).max() < 1e-12 * np.abs(values.real).max()

    def test_strat_scheme_conserves_in_3d(self):
        grid = TorusGrid(3, 12)
        noise = NoiseModel(build_theta_shell(1, 0.0, 3), nu=0.05)
        sys0 = build_builtin("zero", [0.0])
        cfg = SolverConfig(dt=5e-3, T=0.03, scheme="strat_substep", noise_on=True,
                           seed=8, track_balance=False)
        v0 = [to_grid(single_mode(grid, (1, 0, 0), 0.4))]
        state, _ = run(sys0, noise, cfg, v0)
        energy = float(np.sum(np.abs(state.fields[0]) ** 2))
        assert abs(energy - 2 * 0.4**2) < 1e-7


class TestPureTransportMeanEnergy:
    def test_bias_shrinks_under_refinement(self):
        # weak-bias magnitude of E||v(T)||^2 decreases monotonically in dt
        # (mild-mixing regime; the coupled coarse increments are the pair
        # sums of the fine ones)
        grid = TorusGrid(2, 64)
        nu = 0.01
        noise = NoiseModel(build_theta_shell(2, 0.0, 2), nu=nu)
        sys0 = build_builtin("zero", [0.0])
        v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
        T, paths, seed = 0.25, 16, 7
        dt_f = 2e-3
        n_f = int(round(T / dt_f))
        biases = {1: [], 2: []}
        for p in range(paths):
            fine = [sample_increments(noise, dt_f, path_rng(seed, p, s)) for s in range(n_f)]
            for mult in (1, 2):
                incs = [
                    IncrementSet(dt_f * mult, noise,
                                 sum(fine[mult * s + j].dw_plus for j in range(mult)))
                    for s in range(n_f // mult)
                ]
                cfg = SolverConfig(dt=dt_f * mult, T=T, noise_on=True, seed=seed,
                                   track_balance=False, record_every=10**9)
                st, _ = run(sys0, noise, cfg, v0, path_index=p,
                            increments=lambda s, a=incs: a[s])
                biases[mult].append(float(np.sum(np.abs(st.fields[0]) ** 2)) - 0.5)
        coarse, fine_b = np.mean(biases[2]), np.mean(biases[1])
        assert coarse < 0 and fine_b < 0
        assert abs(coarse) > 1.2 * abs(fine_b)
