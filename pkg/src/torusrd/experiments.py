"""Monte-Carlo harnesses: scaling limit, survival sweeps, decay fits.

Paths are embarrassingly parallel; each one derives its randomness from a
counter-based key (seed, path_index), so aggregate tables are independent
of execution order and worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .diagnostics import hminus_gamma_norm, survival_estimate
from .fields import GridField, SpectralField, TorusGrid
from .noise import NoiseModel, build_theta_shell
from .reactions import ReactionSystem
from .solver import SolverConfig, run

DEFAULT_THREADS = 1


def _map_paths(worker, n_paths: int, threads: int):
    """Run path workers, merging results in path order (scheduling-invariant)."""
    if threads <= 1:
        return [worker(p) for p in range(n_paths)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(worker, range(n_paths)))


@dataclass(frozen=True)
class ScalingLimitPlan:
    shells: tuple[int, ...]
    gamma: float
    nu: float
    paths: int
    solver: SolverConfig
    sys: ReactionSystem
    v0: list[GridField]
    epsilon: float
    r: float = 2.0
    q: float = 2.0
    hminus_gamma: float | None = None  # also track sup_t H^{-gamma} distance

    def __post_init__(self) -> None:
        if list(self.shells) != sorted(set(self.shells)):
            raise ValueError("shells must be strictly increasing")
        if self.paths < 1 or self.epsilon <= 0:
            raise ValueError("paths >= 1 and epsilon > 0 required")
        n = self.v0[0].grid.n_per_dim
        if 2 * max(self.shells) > n / 3:
            raise ValueError(
                f"grid n={n} does not resolve shell {max(self.shells)}: "
                f"need 2*n_max <= n/3"
            )


@dataclass
class ShellResult:
    shell: int
    distances: np.ndarray  # per path
    hminus_distances: np.ndarray | None
    max_lq: float  # sup over paths and times of the vector L^q norm
    taus: list[float | None] | None = None  # per-path blow-up times

    @property
    def mean(self) -> float:
        return float(self.distances.mean())

    @property
    def stderr(self) -> float:
        if len(self.distances) < 2:
            return 0.0
        return float(self.distances.std(ddof=1) / np.sqrt(len(self.distances)))

    def p_exceed(self, epsilon: float) -> float:
        return float(np.mean(self.distances > epsilon))


@dataclass
class ScalingLimitResult:
    plan: ScalingLimitPlan
    reference_times: np.ndarray
    shells: list[ShellResult]

    def table(self) -> list[dict]:
        return [
            {
                "shell_n": s.shell,
                "mean_distance": s.mean,
                "stderr": s.stderr,
                "p_exceed_eps": s.p_exceed(self.plan.epsilon),
                "max_lq": s.max_lq,
            }
            for s in self.shells
        ]


class _StreamingDistance:
    """Accumulates the L^r(0,T;L^q) distance to a reference trajectory."""

    def __init__(self, ref_times, ref_snaps, r: float, q: float,
                 grid: TorusGrid, hminus_gamma: float | None):
        self.ref_times = ref_times
        self.ref_snaps = ref_snaps
        self.r = r
        self.q = q
        self.grid = grid
        self.hminus_gamma = hminus_gamma
        self.norms: list[float] = []
        self.times: list[float] = []
        self.hminus_sup = 0.0
        self.max_lq = 0.0
        self._idx = 0

    def __call__(self, t: float, values: np.ndarray, state) -> None:
        j = self._idx
        if j >= len(self.ref_times) or abs(self.ref_times[j] - t) > 1e-12:
            if state.blown_up is not None:
                return  # final off-cadence sample of a blown-up path
            raise ValueError("stochastic path sampled off the reference cadence")
        diff = values - self.ref_snaps[j]
        mag = np.sqrt(np.sum(diff**2, axis=0))
        self.norms.append(float(np.mean(mag**self.q) ** (1.0 / self.q)))
        self.times.append(t)
        vmag = np.sqrt(np.sum(values**2, axis=0))
        self.max_lq = max(self.max_lq, float(np.mean(vmag**self.q) ** (1.0 / self.q)))
        if self.hminus_gamma is not None:
            acc = 0.0
            for i in range(len(values)):
                dspec = np.fft.fftn(diff[i]) / self.grid.n_points
                acc += hminus_gamma_norm(
                    SpectralField(self.grid, dspec), self.hminus_gamma
                ) ** 2
            self.hminus_sup = max(self.hminus_sup, float(np.sqrt(acc)))
        self._idx += 1

    def distance(self) -> float:
        arr = np.array(self.norms)
        return float(np.trapezoid(arr**self.r, np.array(self.times)) ** (1.0 / self.r))


def run_scaling_limit(plan: ScalingLimitPlan, threads: int = DEFAULT_THREADS) -> ScalingLimitResult:
    """Distance of stochastic shell runs to the deterministic enhanced solution.

    The reference is integrated once with the same grid, dt and dealiasing
    as the stochastic paths, so the measured distance isolates the noise
    effect from discretization bias.
    """
    grid = plan.v0[0].grid
    ref_snaps: list[np.ndarray] = []
    ref_times: list[float] = []

    def ref_observer(t, values, state):
        ref_times.append(t)
        ref_snaps.append(values.copy())

    run(plan.sys, None, plan.solver, plan.v0,
        nu_enhancement=plan.nu, observer=ref_observer)
    rtimes = np.array(ref_times)

    shell_results = []
    for si, n in enumerate(plan.shells):
        # nu = 0 means no stochastic forcing: paths reproduce the reference
        noise = (
            NoiseModel(build_theta_shell(n, plan.gamma, grid.d), nu=plan.nu)
            if plan.nu > 0
            else None
        )

        def worker(p: int, noise=noise, si=si):
            obs = _StreamingDistance(rtimes, ref_snaps, plan.r, plan.q,
                                     grid, plan.hminus_gamma)
            state, _ = run(plan.sys, noise, plan.solver, plan.v0,
                           path_index=si * plan.paths + p, observer=obs)
            return obs.distance(), obs.hminus_sup, obs.max_lq, state.blown_up

        rows = _map_paths(worker, plan.paths, threads)
        dists = np.array([r[0] for r in rows])
        hm = np.array([r[1] for r in rows]) if plan.hminus_gamma is not None else None
        shell_results.append(
            ShellResult(
                shell=n,
                distances=dists,
                hminus_distances=hm,
                max_lq=float(max(r[2] for r in rows)),
                taus=[r[3] for r in rows],
            )
        )
    return ScalingLimitResult(plan=plan, reference_times=rtimes, shells=shell_results)


@dataclass(frozen=True)
class SurvivalPlan:
    nus: tuple[float, ...]
    shell_n: int
    gamma: float
    paths: int
    solver: SolverConfig
    sys: ReactionSystem
    v0: list[GridField]

    def __post_init__(self) -> None:
        if self.paths < 1 or not self.nus:
            raise ValueError("need at least one path and one nu value")
        for f in self.v0:
            if np.min(f.values) < 0:
                raise ValueError("survival experiments require v0 >= 0")


@dataclass
class SurvivalRow:
    nu: float
    taus: list[float | None]
    p_hat: float
    wilson: tuple[float, float]
    mean_tau_blowups: float | None


@dataclass
class SurvivalResult:
    plan: SurvivalPlan
    rows: list[SurvivalRow]

    def monotone_in_nu(self) -> bool:
        ps = [r.p_hat for r in self.rows]
        return all(b >= a for a, b in zip(ps, ps[1:]))

    def table(self) -> list[dict]:
        return [
            {
                "nu": r.nu,
                "p_hat": r.p_hat,
                "wilson_lo": r.wilson[0],
                "wilson_hi": r.wilson[1],
                "mean_tau_blowups": r.mean_tau_blowups,
            }
            for r in self.rows
        ]


def run_survival(plan: SurvivalPlan, threads: int = DEFAULT_THREADS) -> SurvivalResult:
    grid = plan.v0[0].grid
    rows = []
    for vi, nu in enumerate(plan.nus):
        noise = NoiseModel(
            build_theta_shell(plan.shell_n, plan.gamma, grid.d), nu=nu
        ) if plan.solver.noise_on and nu > 0 else None

        def worker(p: int, noise=noise, vi=vi):
            state, _ = run(plan.sys, noise, plan.solver, plan.v0,
                           path_index=vi * plan.paths + p)
            return state.blown_up

        taus = _map_paths(worker, plan.paths, threads)
        p_hat, wilson = survival_estimate(taus, plan.solver.T)
        blow = [t for t in taus if t is not None and t < plan.solver.T]
        rows.append(
            SurvivalRow(
                nu=nu,
                taus=taus,
                p_hat=p_hat,
                wilson=wilson,
                mean_tau_blowups=float(np.mean(blow)) if blow else None,
            )
        )
    return SurvivalResult(plan=plan, rows=rows)


@dataclass(frozen=True)
class DecayPlan:
    solver: SolverConfig
    sys: ReactionSystem
    v0: list[GridField]
    q0: float = 2.0
    paths: int = 1
    shell_n: int = 1
    gamma: float = 0.0
    nu: float = 0.0  # noise intensity; 0 disables the noise
    tracked_mode: tuple[int, ...] | None = None
    tail_fraction: float = 0.5

    def __post_init__(self) -> None:
        if self.sys.mass_consts is None:
            raise ValueError("decay experiments need declared mass constants")
        a0, a1 = self.sys.mass_consts
        if a0 != 0.0 or a1 >= 0.0:
            raise ValueError(f"decay regime requires a0 = 0 and a1 < 0, got ({a0}, {a1})")


@dataclass
class DecayReport:
    degenerate: bool
    fitted_rate: float | None
    expected_rate: float | None
    mode_rate: float | None  # fitted decay of the tracked mean mode amplitude
    mode_expected: float | None


def _tail_fit(times: np.ndarray, values: np.ndarray, tail_fraction: float) -> float | None:
    """Least-squares slope of log(values) on the trailing window."""
    mask = values > 0
    if mask.sum() < 3:
        return None
    start = int(len(times) * (1.0 - tail_fraction))
    t, v = times[start:], values[start:]
    keep = v > 0
    if keep.sum() < 3:
        return None
    slope = np.polyfit(t[keep], np.log(v[keep]), 1)[0]
    return float(-slope)


def run_decay(plan: DecayPlan, threads: int = DEFAULT_THREADS) -> DecayReport:
    """Fit the exponential-decay regime and compare with the |a1| rate.

    Without noise the L^{q0} norm of the single deterministic path is
    fitted; with noise the mean of the tracked mode amplitude over paths
    decays at |a1| + 4 pi^2 |k|^2 (nu_i + nu).
    """
    grid = plan.v0[0].grid
    a1 = plan.sys.mass_consts[1]
    noise = (
        NoiseModel(build_theta_shell(plan.shell_n, plan.gamma, grid.d), nu=plan.nu)
        if plan.nu > 0
        else None
    )

    if all(np.all(f.values == 0.0) for f in plan.v0):
        return DecayReport(True, None, None, None, None)

    mode = plan.tracked_mode
    n = grid.n_per_dim

    def worker(p: int):
        times: list[float] = []
        norms: list[float] = []
        amps: list[complex] = []

        def obs(t, values, state):
            times.append(t)
            norms.append(float(np.mean(np.abs(values[0]) ** plan.q0) ** (1.0 / plan.q0)))
            if mode is not None:
                amps.append(complex(state.fields[0][tuple(m % n for m in mode)]))

        run(plan.sys, noise, plan.solver, plan.v0,
            nu_enhancement=plan.nu if noise is None else 0.0,
            path_index=p, observer=obs)
        return np.array(times), np.array(norms), np.array(amps)

    results = _map_paths(worker, plan.paths, threads)
    times = results[0][0]
    mode_rate = mode_expected = None
    if mode is not None:
        mean_amp = np.abs(np.mean(np.stack([r[2] for r in results]), axis=0))
        mode_rate = _tail_fit(times, mean_amp, plan.tail_fraction)
        k2 = float(np.dot(mode, mode))
        nu_eff = plan.sys.nu[0] + plan.nu
        mode_expected = abs(a1) + 4.0 * np.pi**2 * k2 * nu_eff
    mean_norm = np.mean(np.stack([r[1] for r in results]), axis=0)
    rate = _tail_fit(times, mean_norm, plan.tail_fraction)
    return DecayReport(
        degenerate=rate is None,
        fitted_rate=rate,
        expected_rate=abs(a1),
        mode_rate=mode_rate,
        mode_expected=mode_expected,
    )
