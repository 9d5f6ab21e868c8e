"""Reaction nonlinearities and conservative fluxes.

Systems are immutable bundles of pure evaluators: f maps species values
(ell, ...) to reaction rates of the same shape, F (optional) maps them to
per-species flux vectors (ell, d, ...).  The mass-action builder produces

    f_i(y) = (p_i - q_i) (R_- prod_j y_j^{q_j} - R_+ prod_j y_j^{p_j}),

whose weighted sum cancels identically whenever positive weights alpha with
sum alpha_i (q_i - p_i) = 0 exist.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .fields import (
    GridField,
    SpectralField,
    dealias as dealias_field,
    partial_derivative,
    to_spectral,
)

# guard so that declared growth stays > 1 even for (sub)linear systems
EPS_H = 1e-6

Evaluator = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ReactionSystem:
    """Species count, diffusivities, and growth-certified evaluators."""

    ell: int
    nu: np.ndarray  # (ell,) diffusivities, > 0
    h: float  # growth exponent, > 1
    f: Evaluator
    F: Evaluator | None = None  # (t, Y) -> (ell, d, ...) flux, None means F == 0
    mass_alpha: np.ndarray | None = None
    mass_consts: tuple[float, float] | None = None  # (a0, a1)
    name: str = "custom"

    def __post_init__(self) -> None:
        nu = np.asarray(self.nu, dtype=float)
        object.__setattr__(self, "nu", nu)
        if nu.shape != (self.ell,):
            raise ValueError(f"nu must have shape ({self.ell},), got {nu.shape}")
        # nu_i = 0 is admitted for the pure-transport diagnostics
        if np.any(nu < 0):
            raise ValueError("diffusivities must be nonnegative")
        if self.h <= 1:
            raise ValueError(f"growth exponent h must be > 1, got {self.h}")
        if self.mass_alpha is not None:
            alpha = np.asarray(self.mass_alpha, dtype=float)
            object.__setattr__(self, "mass_alpha", alpha)
            if alpha.shape != (self.ell,) or np.any(alpha <= 0):
                raise ValueError("mass weights must be positive, one per species")

    @property
    def is_linear(self) -> bool:
        return self.name == "zero"


@dataclass(frozen=True)
class MassActionSpec:
    """Stoichiometry q -> p with forward/backward rates."""

    q: tuple[int, ...]
    p: tuple[int, ...]
    r_plus: float = 1.0
    r_minus: float = 1.0

    def __post_init__(self) -> None:
        if len(self.q) != len(self.p) or not self.q:
            raise ValueError("q and p must be equal-length, nonempty")
        if any(x < 0 for x in self.q + self.p):
            raise ValueError("stoichiometric coefficients are nonnegative")
        if not any(self.q) and not any(self.p):
            raise ValueError("at least one coefficient must be positive")
        if self.r_plus <= 0 or self.r_minus <= 0:
            raise ValueError("reaction rates must be positive")

    @property
    def ell(self) -> int:
        return len(self.q)

    @property
    def h(self) -> float:
        return float(max(sum(self.q), sum(self.p), 1 + EPS_H))


def _monomial(Y: np.ndarray, expo: tuple[int, ...]) -> np.ndarray:
    out = np.ones_like(Y[0])
    for y, e in zip(Y, expo):
        if e:
            out = out * y**e
    return out


def mass_action_build(
    spec: MassActionSpec, nu: np.ndarray | None = None
) -> ReactionSystem:
    """Law-of-mass-action system for q V -> p V with rates R+/R-."""
    q, p = spec.q, spec.p
    coeff = np.array([pi - qi for qi, pi in zip(q, p)], dtype=float)

    def f(t: float, Y: np.ndarray) -> np.ndarray:
        g = spec.r_minus * _monomial(Y, q) - spec.r_plus * _monomial(Y, p)
        return coeff.reshape((-1,) + (1,) * (Y.ndim - 1)) * g

    alpha = find_mass_weights(spec)
    return ReactionSystem(
        ell=spec.ell,
        nu=np.ones(spec.ell) if nu is None else np.asarray(nu, dtype=float),
        h=spec.h,
        f=f,
        F=None,
        mass_alpha=alpha,
        mass_consts=(0.0, 0.0) if alpha is not None else None,
        name=f"mass_action(q={q}, p={p})",
    )


def find_mass_weights(spec: MassActionSpec) -> np.ndarray | None:
    """Positive alpha with sum alpha_i (q_i - p_i) = 0, min alpha_i = 1.

    The constraint is one-dimensional: split indices by the sign of
    c = q - p and balance the two groups; infeasible when c is nonzero and
    single-signed.
    """
    c = np.array(spec.q) - np.array(spec.p)
    pos, neg = c > 0, c < 0
    if not pos.any() and not neg.any():
        return np.ones(spec.ell)
    if not pos.any() or not neg.any():
        return None
    a_tot = float(c[pos].sum())
    b_tot = float(-c[neg].sum())
    alpha = np.ones(spec.ell)
    alpha[pos] = b_tot
    alpha[neg] = a_tot
    return alpha / alpha.min()


def check_mass_control(
    sys: ReactionSystem,
    samples: int = 1024,
    radius: float = 10.0,
) -> tuple[bool, float]:
    """Probe sum alpha_i f_i <= a0 + a1 sum y_i on Sobol points of [0, radius]^ell.

    Returns (holds, worst violation); the worst value is the max of
    sum alpha_i f_i - a0 - a1 sum y_i over the sample.
    """
    if sys.mass_alpha is None or sys.mass_consts is None:
        raise ValueError("system declares no mass weights / constants")
    a0, a1 = sys.mass_consts
    sampler = qmc.Sobol(d=sys.ell, scramble=False)
    ys = sampler.random(samples).T * radius  # (ell, samples)
    fy = sys.f(0.0, ys)
    lhs = np.einsum("i,i...->...", sys.mass_alpha, fy)
    margin = lhs - a0 - a1 * ys.sum(axis=0)
    worst = float(margin.max())
    return worst <= 1e-10 * (1.0 + abs(a0) + radius), worst


def growth_certificate(
    sys: ReactionSystem, radius: float = 10.0, samples: int = 4096, rng=None
) -> float:
    """Max of |f(y)| / (1 + |y|^h) over sampled |y| <= radius."""
    rng = np.random.default_rng(0) if rng is None else rng
    ys = rng.uniform(0.0, radius, size=(sys.ell, samples))
    fy = sys.f(0.0, ys)
    ratio = np.max(np.abs(fy), axis=0) / (
        1.0 + np.linalg.norm(ys, axis=0) ** sys.h
    )
    return float(ratio.max())


def evaluate_reaction(
    sys: ReactionSystem, t: float, fields: list[GridField]
) -> tuple[list[GridField], bool]:
    """Pointwise f at every node; the flag is False when NaN/Inf appeared."""
    grid = fields[0].grid
    if any(f.grid != grid for f in fields):
        raise ValueError("species fields must share one grid")
    Y = np.stack([f.values for f in fields])
    out = sys.f(t, Y)
    finite = bool(np.all(np.isfinite(out)))
    return [GridField(grid, out[i]) for i in range(sys.ell)], finite


def evaluate_flux_divergence(
    sys: ReactionSystem,
    t: float,
    fields: list[GridField],
    apply_dealias: bool = True,
) -> tuple[list[SpectralField], bool]:
    """div(F_i(., v)) in spectral space; mode 0 vanishes exactly.

    F is evaluated pointwise, transformed, contracted with the spectral
    divergence, and dealiased.
    """
    grid = fields[0].grid
    if sys.F is None:
        zero = SpectralField(grid, np.zeros(grid.shape, dtype=complex))
        return [zero] * sys.ell, True
    Y = np.stack([f.values for f in fields])
    flux = sys.F(t, Y)  # (ell, d, ...)
    finite = bool(np.all(np.isfinite(flux)))
    out = []
    for i in range(sys.ell):
        total = np.zeros(grid.shape, dtype=complex)
        for j in range(grid.d):
            fj = to_spectral(GridField(grid, flux[i, j]))
            total = total + partial_derivative(fj, j).coeffs
        spec_i = SpectralField(grid, total)
        if apply_dealias:
            spec_i = dealias_field(spec_i)
        out.append(spec_i)
    return out, finite


def _builtin_zero(nu: np.ndarray) -> ReactionSystem:
    def f(t, Y):
        return np.zeros_like(Y)

    return ReactionSystem(
        ell=len(nu), nu=nu, h=1 + EPS_H, f=f,
        mass_alpha=np.ones(len(nu)), mass_consts=(0.0, 0.0), name="zero",
    )


def _builtin_logistic(nu: np.ndarray) -> ReactionSystem:
    # scalar f(v) = v - v^2: bounded growth, converges to 1 from (0, 1]
    def f(t, Y):
        return Y - Y**2

    return ReactionSystem(
        ell=1, nu=nu[:1], h=2.0, f=f,
        mass_alpha=np.ones(1), mass_consts=(0.0, 1.0), name="logistic",
    )


def _builtin_decay(nu: np.ndarray) -> ReactionSystem:
    def f(t, Y):
        return -Y

    return ReactionSystem(
        ell=len(nu), nu=nu, h=1 + EPS_H, f=f,
        mass_alpha=np.ones(len(nu)), mass_consts=(0.0, -1.0), name="decay",
    )


def _builtin_quadratic_unsafe(nu: np.ndarray) -> ReactionSystem:
    # detector-calibration mode: violates the mass-control assumption
    def f(t, Y):
        return Y**2

    return ReactionSystem(ell=1, nu=nu[:1], h=2.0, f=f, name="quadratic_unsafe")


def _builtin_cubic_nontriangular(nu: np.ndarray, d: int) -> ReactionSystem:
    # the problematic two-species cubic system: q1=p2=1, q2=p1=2
    sys = mass_action_build(MassActionSpec(q=(1, 2), p=(2, 1)), nu=nu[:2])
    return dataclasses.replace(sys, name="cubic_nontriangular")


def _builtin_linear_flux(nu: np.ndarray, d: int) -> ReactionSystem:
    # F_i(v) = v_i e_1, exercising the conservative term
    def f(t, Y):
        return np.zeros_like(Y)

    def F(t, Y):
        out = np.zeros((Y.shape[0], d) + Y.shape[1:])
        out[:, 0] = Y
        return out

    return ReactionSystem(
        ell=len(nu), nu=nu, h=1 + EPS_H, f=f, F=F,
        mass_alpha=np.ones(len(nu)), mass_consts=(0.0, 0.0), name="linear_flux",
    )


BUILTIN_REACTIONS: dict[str, Callable[..., ReactionSystem]] = {
    "zero": lambda nu, d: _builtin_zero(nu),
    "logistic": lambda nu, d: _builtin_logistic(nu),
    "decay": lambda nu, d: _builtin_decay(nu),
    "quadratic_unsafe": lambda nu, d: _builtin_quadratic_unsafe(nu),
    "cubic_nontriangular": _builtin_cubic_nontriangular,
    "linear_flux": _builtin_linear_flux,
}

UNSAFE_BUILTINS = frozenset({"quadratic_unsafe"})


def build_builtin(
    name: str, nu: np.ndarray, d: int = 2, allow_unsafe: bool = False
) -> ReactionSystem:
    if name not in BUILTIN_REACTIONS:
        raise ValueError(
            f"unknown builtin reaction {name!r}; known: {sorted(BUILTIN_REACTIONS)}"
        )
    if name in UNSAFE_BUILTINS and not allow_unsafe:
        raise ValueError(
            f"builtin {name!r} violates the mass-control assumption and is "
            "gated behind --unsafe-reaction"
        )
    return BUILTIN_REACTIONS[name](np.asarray(nu, dtype=float), d)
