"""Observables along trajectories: norms, mass traces, balance residuals,
inter-trajectory distances and blow-up statistics.

Running time-integrals (gradient energy, reaction work) are accumulated
inside the stepping loop with the left-endpoint rule, so the linear-case
balance residual is O(dt); integrals assembled after the fact from recorded
samples use the trapezoid rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fields import SpectralField, TorusGrid
from .reactions import ReactionSystem

WILSON_Z = 1.959963984540054  # two-sided 95%


@dataclass
class DiagnosticsRecord:
    """Per-path time series sampled on the recording cadence."""

    times: np.ndarray  # (n,)
    lq: dict[float, np.ndarray]  # q -> (n, ell) per-species L^q norms
    mass: np.ndarray  # (n, ell) mode-0 coefficients
    min_value: np.ndarray  # (n, ell) pointwise minima
    grad_energy: dict[float, np.ndarray]  # q -> (n, ell) running integrals
    work: dict[float, np.ndarray]  # q -> (n, ell) running reaction work
    phi: np.ndarray  # (n,)
    cutoff_acc: np.ndarray  # (n,)
    blowup_tau: float | None
    snapshots: np.ndarray | None  # (n, ell, grid...) grid values if kept

    @property
    def survived(self) -> bool:
        return self.blowup_tau is None


class RecordBuilder:
    """Accumulates one path's diagnostics during stepping."""

    def __init__(
        self,
        grid: TorusGrid,
        sys: ReactionSystem,
        lq_list: tuple[float, ...],
        balance_q: tuple[float, ...],
        keep_snapshots: bool = False,
    ):
        self.grid = grid
        self.sys = sys
        self.lq_list = tuple(lq_list)
        self.balance_q = tuple(balance_q)
        self.keep_snapshots = keep_snapshots
        self._times: list[float] = []
        self._lq: dict[float, list[np.ndarray]] = {q: [] for q in self.lq_list}
        self._mass: list[np.ndarray] = []
        self._min: list[np.ndarray] = []
        self._phi: list[float] = []
        self._acc: list[float] = []
        self._snaps: list[np.ndarray] = []
        self._grad_running = {q: np.zeros(sys.ell) for q in self.balance_q}
        self._work_running = {q: np.zeros(sys.ell) for q in self.balance_q}
        self._grad_series: dict[float, list[np.ndarray]] = {q: [] for q in self.balance_q}
        self._work_series: dict[float, list[np.ndarray]] = {q: [] for q in self.balance_q}

    def accumulate_balance(self, dt: float, t: float, state, stepper) -> None:
        """Left-rule advance of the running balance integrals (pre-step values)."""
        if not self.balance_q:
            return
        values = state.grid_values
        fvals = self.sys.f(t, values)
        for i in range(self.sys.ell):
            grad_sq = np.sum(stepper.gradients(state.fields[i]) ** 2, axis=0)
            for q in self.balance_q:
                weight = np.abs(values[i]) ** (q - 2.0)
                self._grad_running[q][i] += dt * float(np.mean(weight * grad_sq))
                self._work_running[q][i] += dt * float(np.mean(weight * fvals[i] * values[i]))

    def sample(self, t: float, values: np.ndarray, phi: float, acc: float) -> None:
        self._times.append(t)
        for q in self.lq_list:
            self._lq[q].append(
                np.array([np.mean(np.abs(values[i]) ** q) ** (1.0 / q)
                          for i in range(self.sys.ell)])
            )
        self._mass.append(values.mean(axis=tuple(range(1, values.ndim))))
        self._min.append(values.min(axis=tuple(range(1, values.ndim))))
        self._phi.append(phi)
        self._acc.append(acc)
        for q in self.balance_q:
            self._grad_series[q].append(self._grad_running[q].copy())
            self._work_series[q].append(self._work_running[q].copy())
        if self.keep_snapshots:
            self._snaps.append(values.copy())

    def finalize(self, blowup_tau: float | None) -> DiagnosticsRecord:
        return DiagnosticsRecord(
            times=np.array(self._times),
            lq={q: np.stack(v) for q, v in self._lq.items()},
            mass=np.stack(self._mass),
            min_value=np.stack(self._min),
            grad_energy={q: np.stack(v) for q, v in self._grad_series.items()},
            work={q: np.stack(v) for q, v in self._work_series.items()},
            phi=np.array(self._phi),
            cutoff_acc=np.array(self._acc),
            blowup_tau=blowup_tau,
            snapshots=np.stack(self._snaps) if self._snaps else None,
        )


def lq_balance_residual(record: DiagnosticsRecord, q: float, sys: ReactionSystem) -> np.ndarray:
    """Residual time series (n, ell) of the L^q energy balance.

    residual_i(t) = |v_i(t)|_q^q + nu_i q(q-1) G_i(t) - |v_i(0)|_q^q - q W_i(t),
    where G is the running gradient-energy integral and W the running
    reaction work.  Zero for exact trajectories, O(dt) for the scheme.
    """
    if q < 2:
        raise ValueError(f"balance exponent must be >= 2, got {q}")
    if q not in record.lq or q not in record.grad_energy or len(record.times) < 2:
        raise ValueError(
            f"trajectory stores no balance data for q={q}: "
            "rerun with track_balance and this q in balance_q/lq_norms"
        )
    norms_q = record.lq[q] ** q
    res = (
        norms_q
        + sys.nu[None, :] * q * (q - 1.0) * record.grad_energy[q]
        - norms_q[0][None, :]
        - q * record.work[q]
    )
    return res


def lrlq_distance(u, w, r: float, q: float) -> float:
    """Trapezoid L^r(0,T; L^q) distance of two snapshot trajectories."""
    tu, tw = np.asarray(u.times), np.asarray(w.times)
    if tu.shape != tw.shape or not np.allclose(tu, tw):
        raise ValueError("trajectories have mismatched sample times")
    if u.snapshots is None or w.snapshots is None:
        raise ValueError("both trajectories must carry snapshots")
    norms = np.empty(len(tu))
    for j in range(len(tu)):
        diff = u.snapshots[j] - w.snapshots[j]
        mag = np.sqrt(np.sum(diff**2, axis=0))
        norms[j] = np.mean(mag**q) ** (1.0 / q)
    return float(np.trapezoid(norms**r, tu) ** (1.0 / r))


def mass_trace(
    record: DiagnosticsRecord,
    alpha: np.ndarray,
    a0: float | None = None,
    a1: float | None = None,
    growth_const: float = 1.0,
    tol: float = 1e-9,
) -> tuple[np.ndarray, bool, float]:
    """Weighted mass M(t) = sum alpha_i mode0(v_i) and the Gronwall bound check.

    Returns (series, bound_ok, worst_excess); the bound is
    M(t) <= C (e^{a1 t} M(0) + a0 (e^{a1 t} - 1)/a1), checked when (a0, a1)
    are given.
    """
    alpha = np.asarray(alpha, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("mass weights must be positive")
    series = record.mass @ alpha
    if a0 is None or a1 is None:
        return series, True, 0.0
    t = record.times
    if a1 != 0.0:
        bound = growth_const * (np.exp(a1 * t) * series[0] + a0 * (np.exp(a1 * t) - 1.0) / a1)
    else:
        bound = growth_const * (series[0] + a0 * t)
    excess = float(np.max(series - bound))
    return series, excess <= tol * (1.0 + abs(series[0])), excess


def survival_estimate(
    taus: list[float | None], T: float
) -> tuple[float, tuple[float, float]]:
    """Survival fraction P(tau >= T) with its Wilson 95% interval."""
    if not taus:
        raise ValueError("survival estimate needs at least one path")
    n = len(taus)
    k = sum(1 for tau in taus if tau is None or tau >= T)
    p_hat = k / n
    z2 = WILSON_Z**2
    denom = 1.0 + z2 / n
    center = (p_hat + z2 / (2.0 * n)) / denom
    half = (WILSON_Z / denom) * np.sqrt(p_hat * (1.0 - p_hat) / n + z2 / (4.0 * n * n))
    return p_hat, (max(0.0, center - half), min(1.0, center + half))


def hminus_gamma_norm(field: SpectralField, gamma: float) -> float:
    """Spectral negative-order norm: (sum (1+|k|^2)^{-gamma} |c_k|^2)^{1/2}."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    weight = (1.0 + field.grid.k_squared) ** (-gamma)
    return float(np.sqrt(np.sum(weight * np.abs(field.coeffs) ** 2)))
