"""Fourier-space machinery for fields on the periodic square [0, 2pi)^2.

Conventions, used consistently everywhere:

- forward transform unnormalized, inverse divides by n^2
  (numpy's default), so Parseval reads
  (1/n^2) sum_x w^2 == (1/n^4) sum_k |w_hat|^2;
- integer wavenumbers in FFT layout {0, 1, ..., n/2-1, -n/2, ..., -1};
- total enstrophy Z = mean(w^2)/2, i.e. (1/A) integral of w^2/2 with
  A = (2pi)^2 absorbed into the grid mean;
- the spectrum's shell density is normalized so that
  sum(density * dk) == Z exactly, with shells at round(|k|) and dk = 1.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class VorticityField:
    """Real n x n scalar vorticity sample at one instant."""

    values: np.ndarray
    n: int
    time: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (self.n, self.n):
            raise ValueError(f"field shape {self.values.shape} != ({self.n}, {self.n})")


@dataclass
class SpectralField:
    """Complex n x n Fourier coefficients w_hat(k)."""

    coeffs: np.ndarray
    n: int
    domain_length: float = 2.0 * np.pi

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=np.complex128)
        if self.coeffs.shape != (self.n, self.n):
            raise ValueError(f"coeff shape {self.coeffs.shape} != ({self.n}, {self.n})")


@dataclass
class SpectrumCurve:
    """Shell-binned enstrophy density E_Z(k)."""

    k_bins: np.ndarray
    density: np.ndarray
    dk: float = 1.0

    def total(self) -> float:
        return float(np.sum(self.density) * self.dk)


def _require_power_of_two(n: int) -> None:
    if n < 2 or (n & (n - 1)) != 0:
        raise ValueError(f"grid size {n} is not a power of two")


def fft2(field: VorticityField) -> SpectralField:
    """Forward transform of a real field; unnormalized coefficients."""
    _require_power_of_two(field.n)
    return SpectralField(np.fft.fft2(field.values), field.n)


def ifft2(spec: SpectralField) -> VorticityField:
    """Inverse transform (divides by n^2); imaginary residue discarded."""
    _require_power_of_two(spec.n)
    return VorticityField(np.fft.ifft2(spec.coeffs).real, spec.n)


def wavenumber_grid(n: int):
    """Integer wavenumbers (kx, ky, k2) in FFT layout.

    kx varies along axis 0 and ky along axis 1, matching the index order
    of the coefficient arrays; k2 = kx^2 + ky^2.
    """
    if n % 2 != 0:
        raise ValueError(f"grid size {n} must be even")
    k = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
    kx = k[:, None] * np.ones((1, n), dtype=np.int64)
    ky = np.ones((n, 1), dtype=np.int64) * k[None, :]
    return kx, ky, kx * kx + ky * ky


def dealias_mask(n: int) -> np.ndarray:
    """Boolean 2/3-rule mask: keep modes with max(|kx|, |ky|) <= floor(n/3)."""
    kx, ky, _ = wavenumber_grid(n)
    cut = n // 3
    return np.maximum(np.abs(kx), np.abs(ky)) <= cut


def total_enstrophy(field: VorticityField) -> float:
    """Z = half the mean squared vorticity."""
    return float(np.mean(field.values**2) / 2.0)


def total_energy_from_spectrum(spec: SpectralField) -> float:
    """Kinetic energy (1/A) integral |u|^2/2 via the streamfunction."""
    _, _, k2 = wavenumber_grid(spec.n)
    k2s = np.where(k2 == 0, 1, k2).astype(np.float64)
    n4 = float(spec.n) ** 4
    e = np.abs(spec.coeffs) ** 2 / k2s
    e[0, 0] = 0.0
    return float(e.sum() / (2.0 * n4))


def shell_index(n: int) -> np.ndarray:
    """Isotropic shell assignment round(|k|), half-away-from-zero ties."""
    _, _, k2 = wavenumber_grid(n)
    return np.floor(np.sqrt(k2.astype(np.float64)) + 0.5).astype(np.int64)


def enstrophy_spectrum(field: VorticityField) -> SpectrumCurve:
    """Shell-binned enstrophy density.

    The density of shell s collects |w_hat(k)|^2 / (2 n^4) over every
    mode with round(|k|) == s, divided by dk = 1. By Parseval the binned
    curve then integrates exactly to Z = mean(w^2)/2; the continuous
    shell-circumference weighting is absorbed into this normalization.
    """
    n = field.n
    shells = shell_index(n)
    coeffs = np.fft.fft2(field.values)
    contrib = np.abs(coeffs) ** 2 / (2.0 * float(n) ** 4)
    k_max = int(shells.max())
    density = np.bincount(shells.reshape(-1), weights=contrib.reshape(-1),
                          minlength=k_max + 1)
    return SpectrumCurve(np.arange(k_max + 1), density, dk=1.0)


ABSENT_SHELL_FLOOR = 1e-14


def normalized_spectral_error(pred: SpectrumCurve, gt: SpectrumCurve):
    """Per-shell (E_pred - E_gt) / E_gt.

    Returns (values, valid): shells whose ground-truth density falls
    below 1e-14 are marked invalid (absent) rather than infinite; their
    value slot holds NaN.
    """
    if len(pred.k_bins) != len(gt.k_bins) or pred.dk != gt.dk:
        raise ValueError("spectrum binning mismatch between pred and gt")
    if not np.array_equal(pred.k_bins, gt.k_bins):
        raise ValueError("spectrum shell indices differ")
    valid = gt.density >= ABSENT_SHELL_FLOOR
    values = np.full(gt.density.shape, np.nan)
    values[valid] = (pred.density[valid] - gt.density[valid]) / gt.density[valid]
    return values, valid


def project_high(field: VorticityField, k_c: float) -> VorticityField:
    """Zero every Fourier mode with |k| <= k_c and transform back.

    Orthogonal projection: idempotent, linear, and orthogonal to its
    complement. Requires 0 < k_c < n/2.
    """
    n = field.n
    if not 0 < k_c < n / 2:
        raise ValueError(f"cutoff {k_c} outside (0, {n / 2})")
    _, _, k2 = wavenumber_grid(n)
    keep = np.sqrt(k2.astype(np.float64)) > k_c
    coeffs = np.fft.fft2(field.values) * keep
    return VorticityField(np.fft.ifft2(coeffs).real, n, field.time)


def high_band_norm(values: np.ndarray, k_c: float) -> float:
    """Unnormalized grid L2 norm of the high-pass part of a raw array."""
    n = values.shape[0]
    f = VorticityField(values, n)
    return float(np.sqrt(np.sum(project_high(f, k_c).values ** 2)))


def write_spectrum_csv(curve: SpectrumCurve, path) -> None:
    """Spectrum as CSV with header k,E_Z; 9 significant digits."""
    lines = ["k,E_Z"]
    for k, e in zip(curve.k_bins, curve.density):
        lines.append(f"{int(k)},{e:.9g}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
