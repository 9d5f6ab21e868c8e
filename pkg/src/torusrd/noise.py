"""Divergence-free transport noise on the torus.

A noise model is a finite, radially symmetric, l2-normalized spectrum
theta_k together with an orthonormal basis {a_{k,alpha}} of the hyperplane
k-perp for every supported mode, and an intensity nu.  The associated
vector fields a_{k,alpha} e^{2*pi*i k.x} are divergence free, and the basis
weights satisfy the ellipticity identity

    sum_{k,alpha} theta_k^2 a_{k,alpha}^n a_{k,alpha}^m = delta_{nm} / c_d,

with c_d = d/(d-1).  Complex Brownian increments carry the conjugation
symmetry dW(-k) = conj(dW(k)), so every sampled velocity field is real.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import cached_property, lru_cache

import numpy as np

from .fields import SpectralField, TorusGrid

SPECTRUM_L2_TOL = 1e-12


def lattice_partition(k) -> int:
    """+1 if k is in the plus half-lattice, -1 otherwise.

    The rule is lexicographic: k is plus iff its first nonzero coordinate is
    positive.  Exactly one of {k, -k} is plus.
    """
    for kj in np.asarray(k).ravel():
        if kj > 0:
            return 1
        if kj < 0:
            return -1
    raise ValueError("k = 0 has no partition sign")


def hyperplane_basis(k, d: int) -> np.ndarray:
    """Orthonormal basis of k-perp, shape (d-1, d).

    Deterministic construction on the plus representative of {k, -k}; the
    result is shared by k and -k.  In d=2 the basis vector is k rotated by
    +90 degrees; in d>=3 it is Gram-Schmidt on the canonical unit vectors in
    index order, skipping the one most parallel to k.
    """
    kv = np.asarray(k).ravel()
    if kv.shape != (d,):
        raise ValueError(f"k has dimension {kv.shape}, expected ({d},)")
    if not np.any(kv):
        raise ValueError("k = 0 spans no hyperplane")
    if lattice_partition(kv) < 0:
        kv = -kv
    return _hyperplane_basis_cached(tuple(float(x) for x in kv)).copy()


@lru_cache(maxsize=200_000)
def _hyperplane_basis_cached(kv_plus: tuple[float, ...]) -> np.ndarray:
    kv = np.array(kv_plus)
    d = len(kv)
    norm_k = np.linalg.norm(kv)
    if d == 2:
        return np.array([[-kv[1], kv[0]]]) / norm_k
    skip = int(np.argmax(np.abs(kv)))
    basis = [kv / norm_k]
    out = []
    for i in range(d):
        if i == skip:
            continue
        e = np.zeros(d)
        e[i] = 1.0
        for b in basis:
            e = e - np.dot(e, b) * b
        e /= np.linalg.norm(e)
        basis.append(e)
        out.append(e)
    return np.array(out)


@dataclass(frozen=True)
class NoiseSpectrum:
    """Finite noise spectrum: lattice support and nonnegative weights."""

    support: np.ndarray  # (m, d) int lattice vectors
    theta: np.ndarray  # (m,) weights, l2-normalized

    def __post_init__(self) -> None:
        if self.support.ndim != 2 or len(self.support) != len(self.theta):
            raise ValueError("support and theta shapes are inconsistent")
        if np.any(~np.any(self.support, axis=1)):
            raise ValueError("k = 0 is not an admissible noise mode")
        if np.any(self.theta < 0):
            raise ValueError("theta must be nonnegative")
        l2 = float(np.sqrt(np.sum(self.theta**2)))
        if abs(l2 - 1.0) > SPECTRUM_L2_TOL:
            raise ValueError(f"theta is not l2-normalized: |theta|_2 = {l2!r}")
        self._check_symmetry()

    def _check_symmetry(self) -> None:
        # radial symmetry implies theta(-k) = theta(k); assert both directly
        by_radius: dict[int, float] = {}
        table = self.as_table()
        for kvec, th in zip(self.support, self.theta):
            r2 = int(np.dot(kvec, kvec))
            if r2 in by_radius:
                if abs(by_radius[r2] - th) > 1e-12:
                    raise ValueError(f"theta is not radially symmetric at |k|^2={r2}")
            else:
                by_radius[r2] = float(th)
            mk = tuple(-int(x) for x in kvec)
            if mk not in table:
                raise ValueError(f"support is not symmetric: missing -k for k={tuple(kvec)}")

    def as_table(self) -> dict[tuple[int, ...], float]:
        return {
            tuple(int(x) for x in kvec): float(th)
            for kvec, th in zip(self.support, self.theta)
        }

    @property
    def d(self) -> int:
        return int(self.support.shape[1])

    def linf(self) -> float:
        return float(np.max(self.theta))

    def max_component(self) -> int:
        """Largest |k_j| over the support, the resolution driver."""
        return int(np.max(np.abs(self.support)))


def build_theta_shell(n: int, gamma: float, d: int) -> NoiseSpectrum:
    """Normalized annulus spectrum: theta ~ |k|^-gamma on n <= |k| <= 2n."""
    if n < 1:
        raise ValueError(f"shell scale must be >= 1, got {n}")
    if gamma < 0:
        raise ValueError(f"decay gamma must be >= 0, got {gamma}")
    rng_1d = np.arange(-2 * n, 2 * n + 1)
    mesh = np.meshgrid(*([rng_1d] * d), indexing="ij")
    lattice = np.stack([m.ravel() for m in mesh], axis=1)
    r2 = np.sum(lattice**2, axis=1)
    keep = (r2 >= n * n) & (r2 <= 4 * n * n)
    support = lattice[keep]
    if len(support) == 0:
        raise ValueError(f"annulus {n} <= |k| <= {2*n} is empty in d={d}")
    weights = np.sum(support**2, axis=1) ** (-gamma / 2.0)
    theta = weights / np.sqrt(np.sum(weights**2))
    return NoiseSpectrum(support=support, theta=theta)


@dataclass(frozen=True)
class NoiseModel:
    """Spectrum + hyperplane bases + intensity nu."""

    spectrum: NoiseSpectrum
    nu: float

    def __post_init__(self) -> None:
        if self.nu <= 0:
            raise ValueError(f"noise intensity nu must be > 0, got {self.nu}")

    @property
    def d(self) -> int:
        return self.spectrum.d

    @property
    def c_d(self) -> float:
        return self.d / (self.d - 1.0)

    @cached_property
    def plus_modes(self) -> np.ndarray:
        """(m+, d) plus-representative modes; support = plus U (-plus)."""
        signs = np.array([lattice_partition(k) for k in self.spectrum.support])
        plus = self.spectrum.support[signs > 0]
        if 2 * len(plus) != len(self.spectrum.support):
            raise ValueError("support is not conjugation-symmetric")
        return plus

    @cached_property
    def theta_plus(self) -> np.ndarray:
        table = self.spectrum.as_table()
        return np.array([table[tuple(int(x) for x in k)] for k in self.plus_modes])

    @cached_property
    def basis_plus(self) -> np.ndarray:
        """(m+, d-1, d) orthonormal hyperplane bases for the plus modes."""
        return np.stack([hyperplane_basis(k, self.d) for k in self.plus_modes])

    def basis(self, k) -> np.ndarray:
        """Basis a_{k,.} for any supported mode (shared between k and -k)."""
        return hyperplane_basis(k, self.d)


def verify_ellipticity(model: NoiseModel) -> float:
    """Max deviation of sum theta^2 a^n a^m from delta_{nm}/c_d."""
    d = model.d
    # plus modes count twice: a and theta are even in k
    gram = 2.0 * np.einsum(
        "m,mad,mae->de",
        model.theta_plus**2,
        model.basis_plus,
        model.basis_plus,
    )
    target = np.eye(d) / model.c_d
    return float(np.max(np.abs(gram - target)))


@dataclass(frozen=True)
class IncrementSet:
    """Complex Brownian increments over one step, stored on plus modes.

    Minus-mode increments are materialized by conjugation, so the symmetry
    dW(-k, alpha) = conj(dW(k, alpha)) is exact by construction.
    """

    dt: float
    model: NoiseModel
    dw_plus: np.ndarray  # (m+, d-1) complex

    def dW(self, k, alpha: int) -> complex:
        kv = np.asarray(k).ravel()
        sign = lattice_partition(kv)
        modes = self.model.plus_modes
        match = np.all(modes == (kv if sign > 0 else -kv), axis=1)
        idx = np.nonzero(match)[0]
        if len(idx) != 1:
            raise KeyError(f"mode {tuple(kv)} is not in the noise support")
        val = self.dw_plus[int(idx[0]), alpha]
        return complex(val) if sign > 0 else complex(np.conj(val))


def sample_increments(model: NoiseModel, dt: float, rng: np.random.Generator) -> IncrementSet:
    """Draw one step of increments: Re, Im ~ N(0, dt) independently per plus mode."""
    if dt < 0:
        raise ValueError(f"dt must be >= 0, got {dt}")
    shape = (len(model.plus_modes), model.d - 1)
    if dt == 0:
        dw = np.zeros(shape, dtype=complex)
    else:
        scale = np.sqrt(dt)
        dw = scale * rng.standard_normal(shape) + 1j * scale * rng.standard_normal(shape)
    return IncrementSet(dt=dt, model=model, dw_plus=dw)


def path_rng(seed: int, path_index: int, step_index: int) -> np.random.Generator:
    """Counter-based generator for one (path, step): order-independent."""
    return np.random.Generator(
        np.random.Philox(key=[seed, path_index], counter=[0, 0, 0, step_index])
    )


class NoiseGridOps:
    """Grid-resolved noise machinery shared by transport evaluations.

    Precomputes scatter indices of the plus/minus modes into the fftn layout
    and the per-mode basis weights, so that assembling the sampled velocity
    field costs one inverse transform per component.
    """

    def __init__(self, model: NoiseModel, grid: TorusGrid):
        if grid.d != model.d:
            raise ValueError("noise and grid dimensions differ")
        max_k = model.spectrum.max_component()
        if max_k > grid.n_per_dim / 3:
            raise ValueError(
                f"noise support max|k_j| = {max_k} is under-resolved on "
                f"n = {grid.n_per_dim}: products would not be dealiasable "
                f"(need max|k_j| <= n/3)"
            )
        self.model = model
        self.grid = grid
        n = grid.n_per_dim
        plus = model.plus_modes
        self._flat_plus = np.ravel_multi_index(tuple((plus.T % n)), grid.shape)
        self._flat_minus = np.ravel_multi_index(tuple(((-plus.T) % n)), grid.shape)
        # weight[m, alpha, j] = sqrt(c_d nu) * theta_m * a_{m,alpha}^j
        self.weights = (
            np.sqrt(model.c_d * model.nu)
            * model.theta_plus[:, None, None]
            * model.basis_plus
        )

    def velocity_field(self, inc: IncrementSet) -> np.ndarray:
        """Real velocity components (d, n, ..., n) for one increment set.

        This is sqrt(c_d nu) sum_{k,alpha} theta_k a_{k,alpha} e^{2 pi i k.x}
        dW^{k,alpha}; it is divergence free mode by mode.
        """
        amp = np.einsum("ma,maj->mj", inc.dw_plus, self.weights)
        out = np.empty((self.grid.d,) + self.grid.shape)
        spec = np.zeros(self.grid.shape, dtype=complex)
        flat = spec.ravel()
        for j in range(self.grid.d):
            flat[:] = 0.0
            flat[self._flat_plus] = amp[:, j]
            flat[self._flat_minus] += np.conj(amp[:, j])
            out[j] = np.fft.ifftn(spec).real * self.grid.n_points
        return out


def transport_increment(
    model: NoiseModel,
    v: SpectralField,
    inc: IncrementSet,
    apply_dealias: bool = True,
) -> SpectralField:
    """Spectral transport term sqrt(c_d nu) sum theta (sigma.grad)v dW.

    The minus modes are the conjugates of the plus modes, so the sum equals
    2 Re of the plus half and the output is a real field; its spatial mean
    is exactly zero because the advecting field is divergence free.
    """
    ops = NoiseGridOps(model, v.grid)
    out = _transport_raw(ops, v.coeffs, inc, apply_dealias)
    return SpectralField(v.grid, out)


def _transport_raw(
    ops: NoiseGridOps,
    coeffs: np.ndarray,
    inc: IncrementSet,
    apply_dealias: bool,
    dealias_mask: np.ndarray | None = None,
) -> np.ndarray:
    grid = ops.grid
    u = ops.velocity_field(inc)
    rhs = np.zeros(grid.shape)
    for j in range(grid.d):
        dj = np.fft.ifftn(_derivative_coeffs(grid, coeffs, j)).real * grid.n_points
        rhs += u[j] * dj
    out = np.fft.fftn(rhs) / grid.n_points
    if apply_dealias:
        mask = dealias_mask if dealias_mask is not None else grid.dealias_mask()
        out *= mask
    else:
        out[grid.nyquist_mask] = out[grid.nyquist_mask].real
    # div sigma = 0 makes the term mean free; pin the mode-0 roundoff to zero
    out[(0,) * grid.d] = 0.0
    return out


def _derivative_coeffs(grid: TorusGrid, coeffs: np.ndarray, axis: int) -> np.ndarray:
    k = grid.k_axes[axis].astype(float)
    ny = grid.n_per_dim // 2
    mult = 2.0 * np.pi * 1j * np.where(np.abs(grid.k_axes[axis]) == ny, 0.0, k)
    return coeffs * mult


def spectrum_to_csv(spectrum: NoiseSpectrum, path) -> None:
    """Export as CSV with columns k1..kd, theta."""
    d = spectrum.d
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"k{j+1}" for j in range(d)] + ["theta"])
        for kvec, th in zip(spectrum.support, spectrum.theta):
            writer.writerow([*(int(x) for x in kvec), repr(float(th))])


def spectrum_from_csv(path) -> NoiseSpectrum:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    if header[-1] != "theta" or not header[0].startswith("k"):
        raise ValueError(f"unrecognized spectrum CSV header: {header}")
    d = len(header) - 1
    support = np.array([[int(x) for x in row[:d]] for row in rows[1:]], dtype=np.int64)
    theta = np.array([float(row[d]) for row in rows[1:]])
    return NoiseSpectrum(support=support, theta=theta)
