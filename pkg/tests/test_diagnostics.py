"""Balance residuals, trajectory distances, mass traces, survival statistics."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from torusrd.diagnostics import (
    DiagnosticsRecord,
    hminus_gamma_norm,
    lq_balance_residual,
    lrlq_distance,
    mass_trace,
    survival_estimate,
)
from torusrd.fields import GridField, TorusGrid, single_mode, to_grid
from torusrd.noise import NoiseModel, build_theta_shell
from torusrd.reactions import MassActionSpec, build_builtin, mass_action_build
from torusrd.solver import SolverConfig, run


def heat_run(dt, T=0.2, q=(2.0,), record_every=1):
    grid = TorusGrid(2, 32)
    sys0 = build_builtin("zero", [0.05])
    cfg = SolverConfig(dt=dt, T=T, noise_on=False, balance_q=q, lq_norms=q,
                       record_every=record_every)
    v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
    return sys0, run(sys0, None, cfg, v0)


@pytest.fixture
def snapshot_pair():
    grid = TorusGrid(2, 16)
    rng = np.random.default_rng(0)
    times = np.linspace(0.0, 1.0, 11)
    snaps = rng.standard_normal((11, 2) + grid.shape)
    return _record_with(times, snaps), _record_with(times, snaps.copy())


def _record_with(times, snaps):
    n, ell = snaps.shape[0], snaps.shape[1]
    return DiagnosticsRecord(
        times=times,
        lq={},
        mass=np.zeros((n, ell)),
        min_value=np.zeros((n, ell)),
        grad_energy={},
        work={},
        phi=np.ones(n),
        cutoff_acc=np.zeros(n),
        blowup_tau=None,
        snapshots=snaps,
    )


class TestBalanceResidual:
    def test_equilibrium_residual_zero(self):
        grid = TorusGrid(2, 16)
        sys = mass_action_build(MassActionSpec(q=(2, 0), p=(0, 1)), nu=[0.1, 0.1])
        cfg = SolverConfig(dt=1e-2, T=0.3, noise_on=False, balance_q=(2.0,), lq_norms=(2.0,))
        v0 = [GridField(grid, np.ones(grid.shape))] * 2
        _, record = run(sys, None, cfg, v0)
        res = lq_balance_residual(record, 2.0, sys)
        assert np.abs(res).max() < 1e-12

    def test_linear_heat_refinement_halves_residual(self):
        # residual is O(dt): halving dt shrinks it by a factor in [1.5, 3]
        sys0, (_, rec_a) = heat_run(2e-3)
        _, (_, rec_b) = heat_run(1e-3)
        res_a = abs(lq_balance_residual(rec_a, 2.0, sys0)[-1, 0])
        res_b = abs(lq_balance_residual(rec_b, 2.0, sys0)[-1, 0])
        assert 1.5 <= res_a / res_b <= 3.0

    def test_untracked_exponent_rejected(self):
        sys0, (_, record) = heat_run(2e-3, T=0.02)
        with pytest.raises(ValueError, match="balance data"):
            lq_balance_residual(record, 4.0, sys0)

    def test_q_below_two_rejected(self):
        sys0, (_, record) = heat_run(2e-3, T=0.02)
        with pytest.raises(ValueError):
            lq_balance_residual(record, 1.5, sys0)

    def test_strat_transport_l2_drift_small(self):
        grid = TorusGrid(2, 32)
        noise = NoiseModel(build_theta_shell(1, 0.0, 2), nu=0.1)
        sys0 = build_builtin("zero", [0.0])
        cfg = SolverConfig(dt=2e-3, T=0.1, scheme="strat_substep", noise_on=True,
                           seed=3, balance_q=(2.0,), lq_norms=(2.0,))
        v0 = [to_grid(single_mode(grid, (1, 0), 0.5))]
        _, record = run(sys0, noise, cfg, v0)
        # pathwise conservation: |v(t)|_2^2 stays at its initial value
        drift = record.lq[2.0][:, 0] ** 2 - record.lq[2.0][0, 0] ** 2
        assert np.abs(drift).max() < 1e-7


class TestLrLqDistance:
    def test_identical_trajectories(self, snapshot_pair):
        u, w = snapshot_pair
        assert lrlq_distance(u, w, 2.0, 2.0) == 0.0

    def test_constant_offset_closed_form(self):
        grid = TorusGrid(2, 16)
        times = np.linspace(0.0, 1.0, 21)
        ell = 3
        base = np.zeros((len(times), ell) + grid.shape)
        u = _record_with(times, base)
        w = _record_with(times, base + 0.7)
        # |u - w|_{L^q} = c sqrt(ell) at every time; L^r over [0,1] keeps it
        assert lrlq_distance(u, w, 2.0, 2.0) == pytest.approx(0.7 * np.sqrt(ell), rel=1e-12)

    def test_mismatched_sampling_rejected(self):
        grid = TorusGrid(2, 16)
        u = _record_with(np.linspace(0, 1, 5), np.zeros((5, 1) + grid.shape))
        w = _record_with(np.linspace(0, 2, 5), np.zeros((5, 1) + grid.shape))
        with pytest.raises(ValueError, match="mismatched"):
            lrlq_distance(u, w, 2.0, 2.0)

    @settings(max_examples=20, deadline=None)
    @given(seed=st.integers(0, 1000))
    def test_triangle_inequality(self, seed):
        grid = TorusGrid(2, 8)
        rng = np.random.default_rng(seed)
        times = np.linspace(0.0, 1.0, 6)
        recs = [
            _record_with(times, rng.standard_normal((6, 2) + grid.shape))
            for _ in range(3)
        ]
        d = lambda a, b: lrlq_distance(a, b, 2.0, 3.0)
        assert d(recs[0], recs[2]) <= d(recs[0], recs[1]) + d(recs[1], recs[2]) + 1e-12
        assert d(recs[0], recs[1]) == pytest.approx(d(recs[1], recs[0]))


class TestMassTrace:
    def test_conservative_path(self):
        grid = TorusGrid(2, 16)
        sys = mass_action_build(MassActionSpec(q=(2, 0), p=(0, 1)), nu=[0.1, 0.1])
        cfg = SolverConfig(dt=1e-2, T=0.5, noise_on=False, track_balance=False)
        x = grid.node_coordinates()[0]
        v0 = [GridField(grid, 1.0 + 0.2 * np.cos(2 * np.pi * x))] * 2
        _, record = run(sys, None, cfg, v0)
        series, ok, excess = mass_trace(record, sys.mass_alpha, a0=0.0, a1=0.0)
        assert ok
        assert np.abs(series - series[0]).max() < 1e-10 * series[0]

    def test_exponential_decay_bound(self):
        grid = TorusGrid(2, 16)
        sys = build_builtin("decay", [0.1])
        cfg = SolverConfig(dt=1e-3, T=1.0, noise_on=False, track_balance=False)
        v0 = [GridField(grid, np.full(grid.shape, 2.0))]
        _, record = run(sys, None, cfg, v0)
        series, ok, excess = mass_trace(record, np.ones(1), a0=0.0, a1=-1.0,
                                        tol=1e-6)
        assert ok  # Euler under-shoots e^{-t}, so the bound holds
        assert np.abs(series - 2.0 * np.exp(-record.times)).max() < 2e-3

    def test_zero_data(self):
        grid = TorusGrid(2, 16)
        sys = build_builtin("decay", [0.1])
        cfg = SolverConfig(dt=1e-2, T=0.2, noise_on=False, track_balance=False)
        v0 = [GridField(grid, np.zeros(grid.shape))]
        _, record = run(sys, None, cfg, v0)
        series, ok, _ = mass_trace(record, np.ones(1), a0=0.0, a1=-1.0)
        assert ok and np.all(series == 0.0)

    def test_bad_weights(self):
        grid = TorusGrid(2, 16)
        sys = build_builtin("decay", [0.1])
        cfg = SolverConfig(dt=1e-2, T=0.05, noise_on=False, track_balance=False)
        _, record = run(sys, None, cfg, [GridField(grid, np.ones(grid.shape))])
        with pytest.raises(ValueError):
            mass_trace(record, np.array([-1.0]))


class TestSurvivalEstimate:
    def test_all_survive(self):
        p, (lo, hi) = survival_estimate([None] * 12, T=1.0)
        assert p == 1.0
        assert hi == pytest.approx(1.0)

    def test_none_survive(self):
        p, (lo, hi) = survival_estimate([0.5] * 12, T=1.0)
        assert p == 0.0
        assert lo == pytest.approx(0.0)

    def test_nine_of_ten(self):
        taus = [None] * 9 + [0.3]
        p, (lo, hi) = survival_estimate(taus, T=1.0)
        assert p == pytest.approx(0.9)
        assert lo == pytest.approx(0.596, abs=1e-3)
        assert hi == pytest.approx(0.982, abs=1e-3)

    def test_tau_at_horizon_counts_as_survival(self):
        p, _ = survival_estimate([1.0, None], T=1.0)
        assert p == 1.0

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            survival_estimate([], T=1.0)

    def test_wilson_width_shrinks_like_sqrt_paths(self):
        def width(n):
            taus = [None] * (9 * n) + [0.1] * n
            _, (lo, hi) = survival_estimate(taus, T=1.0)
            return hi - lo

        assert width(40) == pytest.approx(width(10) / 2, rel=0.15)

    def test_doubling_paths_stays_inside_previous_interval(self):
        # consistency of the estimator: in >= 90% of repeated trials the
        # doubled-sample estimate lands inside the smaller sample's interval
        rng = np.random.default_rng(5)
        hits = 0
        trials = 200
        for _ in range(trials):
            draws = rng.random(128) < 0.8
            taus_small = [None if s else 0.1 for s in draws[:64]]
            taus_big = [None if s else 0.1 for s in draws]
            _, (lo, hi) = survival_estimate(taus_small, T=1.0)
            p_big, _ = survival_estimate(taus_big, T=1.0)
            hits += lo <= p_big <= hi
        assert hits / trials >= 0.9


class TestHminusNorm:
    def test_single_mode_value(self):
        grid = TorusGrid(2, 16)
        c = single_mode(grid, (3, 0), 0.5)
        # two conjugate modes at |k|^2 = 9
        expected = np.sqrt(2 * 0.25 * (1 + 9.0) ** -0.5)
        assert hminus_gamma_norm(c, 0.5) == pytest.approx(expected, rel=1e-12)

    def test_gamma_zero_is_l2(self):
        grid = TorusGrid(2, 16)
        c = single_mode(grid, (2, 1), 1.0)
        assert hminus_gamma_norm(c, 0.0) == pytest.approx(np.sqrt(2.0))

    def test_negative_gamma_rejected(self):
        grid = TorusGrid(2, 16)
        with pytest.raises(ValueError):
            hminus_gamma_norm(single_mode(grid, (1, 0), 1.0), -0.5)
