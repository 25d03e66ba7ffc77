"""Analytic biphoton spectrum and waveform of a double-Lambda SFWM medium.

All frequencies are angular (rad/s), times in seconds, lengths in metres.
The spectrum is the product of the nonlinear coupling and the longitudinal
detuning function; the waveform is the squared modulus of its Fourier
transform over the AS detuning.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .atomic import CONSTANTS, LevelScheme, default_scheme
from .errors import ConfigurationError, ResolutionError, ShapeError

__all__ = [
    "SfwmParams",
    "ComplexSpectrum",
    "BiphotonWaveform",
    "rabi_from_power",
    "density_from_od",
    "atomic_density",
    "linear_susceptibility",
    "chi3",
    "phase_matching",
    "coupling_coefficient",
    "biphoton_waveform",
    "default_delta_grid",
    "fwhm",
    "characteristic_time",
]

MODE_FIELD_DIAMETER = 5.5e-6


def rabi_from_power(power: float, mu: float, mode_field_diameter: float = MODE_FIELD_DIAMETER) -> float:
    """Peak Rabi frequency (rad/s) of a Gaussian mode carrying ``power`` watts.

    Uses the on-axis intensity 2P/(pi w^2) with w the 1/e^2 intensity radius.
    """
    if power < 0:
        raise ConfigurationError("power must be non-negative")
    w = mode_field_diameter / 2
    intensity = 2 * power / (math.pi * w**2)
    field = math.sqrt(2 * intensity / (CONSTANTS.c * CONSTANTS.epsilon0))
    return mu * field / CONSTANTS.hbar


@dataclass(frozen=True)
class SfwmParams:
    """Parameters of the homogeneous SFWM medium.

    Exactly one of ``od`` and ``atom_number`` must be given, and at least one of
    ``omega_p`` and ``pump_power``. Detuning/decoherence default to the level
    scheme values when left as ``None``.
    """

    length: float = 0.06
    diameter: float = 3.4e-6
    omega_c: float = 0.0
    od: float | None = None
    atom_number: float | None = None
    omega_p: float | None = None
    pump_power: float | None = None
    mode_field_diameter: float = MODE_FIELD_DIAMETER
    detuning: float | None = None
    gamma12: float | None = None
    wavelength_s: float | None = None
    wavelength_as: float | None = None
    scheme: LevelScheme | None = None

    def __post_init__(self):
        if self.length <= 0 or self.diameter <= 0:
            raise ConfigurationError("medium length and diameter must be positive")
        if (self.od is None) == (self.atom_number is None):
            raise ConfigurationError("supply exactly one of od and atom_number")
        if self.omega_c < 0:
            raise ConfigurationError("control Rabi frequency must be non-negative")
        if self.od is not None and self.od < 0:
            raise ConfigurationError("optical depth must be non-negative")
        if self.omega_p is None and self.pump_power is None:
            raise ConfigurationError("supply omega_p or pump_power")
        if self.scheme is None:
            object.__setattr__(self, "scheme", default_scheme())
        s = self.scheme
        if self.detuning is None:
            object.__setattr__(self, "detuning", s.detuning)
        if self.gamma12 is None:
            object.__setattr__(self, "gamma12", s.gamma12)
        if self.wavelength_s is None:
            object.__setattr__(self, "wavelength_s", s.wavelengths["D2"])
        if self.wavelength_as is None:
            object.__setattr__(self, "wavelength_as", s.wavelengths["D1"])

    @property
    def gamma_d1(self) -> float:
        return self.scheme.gamma_d1

    @property
    def gamma_d2(self) -> float:
        return self.scheme.gamma_d2

    @property
    def omega_as(self) -> float:
        return 2 * math.pi * CONSTANTS.c / self.wavelength_as

    @property
    def omega_s(self) -> float:
        return 2 * math.pi * CONSTANTS.c / self.wavelength_s

    @property
    def pump_rabi(self) -> float:
        if self.omega_p is not None:
            return self.omega_p
        return rabi_from_power(self.pump_power, self.scheme.dipoles.mu41, self.mode_field_diameter)

    def replace(self, **changes) -> "SfwmParams":
        return replace(self, **changes)

    @classmethod
    def from_dict(cls, doc: dict, scheme: LevelScheme | None = None) -> "SfwmParams":
        """Build from a JSON-style mapping; rates may be given in units of Gamma_D1
        via keys ending in ``_gamma`` (e.g. ``omega_c_gamma``)."""
        scheme = scheme or default_scheme()
        doc = dict(doc)
        g1 = scheme.gamma_d1
        for key in ("omega_c", "omega_p", "gamma12"):
            if f"{key}_gamma" in doc:
                doc[key] = doc.pop(f"{key}_gamma") * g1
        if "detuning_gamma_d2" in doc:
            doc["detuning"] = doc.pop("detuning_gamma_d2") * scheme.gamma_d2
        if "pump_power_nw" in doc:
            doc["pump_power"] = doc.pop("pump_power_nw") * 1e-9
        known = {f for f in cls.__dataclass_fields__ if f != "scheme"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown SFWM parameters: {sorted(unknown)}")
        return cls(scheme=scheme, **doc)


@dataclass(frozen=True)
class ComplexSpectrum:
    delta: np.ndarray  # rad/s, uniform
    amplitude: np.ndarray  # complex, 1/m

    def __post_init__(self):
        _check_uniform(self.delta)

    @property
    def intensity(self) -> np.ndarray:
        return np.abs(self.amplitude) ** 2


@dataclass(frozen=True)
class BiphotonWaveform:
    """|psi(tau)|^2 in 1/s^2; excludes the uncorrelated unit background."""

    tau: np.ndarray
    psi2: np.ndarray

    def normalized(self) -> np.ndarray:
        peak = self.psi2.max()
        return self.psi2 / peak if peak > 0 else self.psi2.copy()


def _check_uniform(grid: np.ndarray) -> float:
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 3:
        raise ConfigurationError("grid must be one-dimensional with at least 3 points")
    step = np.diff(grid)
    if np.any(step <= 0):
        raise ConfigurationError("grid must be strictly increasing")
    h = (grid[-1] - grid[0]) / (grid.size - 1)
    if np.max(np.abs(step - h)) > 1e-9 * max(abs(h), 1.0) + 1e-6 * abs(h):
        raise ConfigurationError("grid must be uniformly spaced")
    return h


# ---------------------------------------------------------------------------
# susceptibilities
# ---------------------------------------------------------------------------

def _od_factor(params: SfwmParams) -> float:
    """x = N |mu13|^2 / (eps0 hbar Gamma_D1) for the requested optical depth.

    With the control off, chi_AS(0) = 2 i x, and the intensity transmission
    exp(-2 k L Im sqrt(1 + 2 i x)) must equal exp(-OD). Writing
    sqrt(1 + 2 i x) = a + i b gives b = OD / (2 k L) and x = b sqrt(1 + b^2).
    """
    k = params.omega_as / CONSTANTS.c
    b = params.od / (2 * k * params.length)
    return b * math.sqrt(1 + b * b)


def density_from_od(params: SfwmParams) -> float:
    """Atomic density (1/m^3) whose resonant control-free AS transmission is exp(-OD)."""
    if params.od is None:
        raise ConfigurationError("params carry an atom number, not an optical depth")
    if params.od < 0:
        raise ConfigurationError("optical depth must be non-negative")
    mu = params.scheme.dipoles.mu13
    return _od_factor(params) * CONSTANTS.epsilon0 * CONSTANTS.hbar * params.gamma_d1 / mu**2


def atomic_density(params: SfwmParams) -> float:
    if params.atom_number is not None:
        return params.atom_number / (params.length * math.pi * (params.diameter / 2) ** 2)
    return density_from_od(params)


def linear_susceptibility(channel: str, delta, params: SfwmParams, density: float | None = None):
    """Linear susceptibility of the Stokes (``"S"``) or anti-Stokes (``"AS"``) field."""
    delta = np.asarray(delta, dtype=float)
    n = atomic_density(params) if density is None else density
    eps_hbar = CONSTANTS.epsilon0 * CONSTANTS.hbar
    g1, g12 = params.gamma_d1, params.gamma12
    oc2 = params.omega_c**2
    mu = params.scheme.dipoles
    if channel == "AS":
        if oc2 == 0:
            # the (delta + i gamma12) factor cancels; avoids 0/0 on resonance
            return -n * mu.mu13**2 / eps_hbar / (delta + 0.5j * g1)
        num = 4 * n * mu.mu13**2 * (delta + 1j * g12) / eps_hbar
        den = oc2 - 4 * (delta + 0.5j * g1) * (delta + 1j * g12)
        return num / den
    if channel == "S":
        num = n * mu.mu24**2 * (delta - 0.5j * g1) / eps_hbar
        den = oc2 - 4 * (delta - 0.5j * g1) * (delta - 1j * g12)
        pump = params.pump_rabi**2 / (params.detuning**2 + (params.gamma_d2 / 2) ** 2)
        return num / den * pump
    raise ValueError(f"channel must be 'S' or 'AS', got {channel!r}")


def chi3(delta, params: SfwmParams, density: float | None = None):
    """Third-order susceptibility of the AS field (SI, m^2/V^2)."""
    delta = np.asarray(delta, dtype=float)
    n = atomic_density(params) if density is None else density
    mu = params.scheme.dipoles
    num = n * mu.mu13 * mu.mu32 * mu.mu24 * mu.mu41 / (CONSTANTS.epsilon0 * CONSTANTS.hbar**3)
    den = (params.detuning + 0.5j * params.gamma_d2) * (
        params.omega_c**2 - 4 * (delta + 0.5j * params.gamma_d1) * (delta + 1j * params.gamma12)
    )
    return num / den


def _sinc(x):
    # sin(x)/x for complex x, exact 1 at the origin
    x = np.asarray(x, dtype=complex)
    out = np.ones_like(x)
    nz = np.abs(x) > 1e-8
    out[nz] = np.sin(x[nz]) / x[nz]
    small = ~nz
    out[small] = 1 - x[small] ** 2 / 6
    return out


def phase_matching(delta, params: SfwmParams, density: float | None = None):
    """Longitudinal detuning function sinc(dk L/2) exp(i (k_AS + k_S) L / 2).

    Pump and control wavenumbers take vacuum values; energy conservation places
    the Stokes photon at -delta when the AS photon sits at +delta.
    """
    delta = np.asarray(delta, dtype=float)
    n = atomic_density(params) if density is None else density
    c = CONSTANTS.c
    w_as = params.omega_as + delta
    w_s = params.omega_s - delta
    k_as = w_as / c * np.sqrt(1 + linear_susceptibility("AS", delta, params, n) + 0j)
    k_s = w_s / c * np.sqrt(1 + linear_susceptibility("S", delta, params, n) + 0j)
    # vacuum phase mismatch vanishes for collinear beams: w_as + w_s = w_p + w_c
    dk = (k_as - w_as / c) + (k_s - w_s / c)
    L = params.length
    return _sinc(dk * L / 2) * np.exp(1j * (k_as + k_s) * L / 2)


def coupling_coefficient(delta, params: SfwmParams, density: float | None = None):
    """kappa(delta) in 1/m, with E_P and E_C taken from the Rabi frequencies."""
    n = atomic_density(params) if density is None else density
    mu = params.scheme.dipoles
    e_p = CONSTANTS.hbar * params.pump_rabi / mu.mu41
    e_c = CONSTANTS.hbar * params.omega_c / mu.mu32
    pre = -1j * math.sqrt(params.omega_as * params.omega_s) / (2 * CONSTANTS.c)
    return pre * chi3(delta, params, n) * e_p * e_c


def default_delta_grid(params: SfwmParams, span_gamma: float = 32.0, points: int = 2**14) -> np.ndarray:
    """Uniform AS detuning grid of ``points`` samples over +-span_gamma Gamma_D1."""
    span = span_gamma * params.gamma_d1
    # endpoint excluded so the grid tiles one FFT period exactly
    return -span + 2 * span * np.arange(points) / points


def biphoton_waveform(
    params: SfwmParams,
    delta_grid: np.ndarray | None = None,
    tau_grid: np.ndarray | None = None,
    leakage_tol: float = 1e-3,
):
    """Spectrum kappa*Phi on ``delta_grid`` and |psi(tau)|^2.

    The transform is a trapezoid-weighted DFT, so on its native grid
    (tau_j = 2 pi j / (N d_delta)) it equals the quadrature of
    (L/2pi) int kappa Phi exp(-i delta tau) d delta over the finite span.
    If ``tau_grid`` is given, the transform is evaluated there directly.

    Raises ResolutionError when the spectrum has not decayed by the grid edges
    or the waveform wraps around the FFT period.
    """
    if delta_grid is None:
        delta_grid = default_delta_grid(params)
    delta_grid = np.asarray(delta_grid, dtype=float)
    h = _check_uniform(delta_grid)
    n = atomic_density(params)
    amp = coupling_coefficient(delta_grid, params, n) * phase_matching(delta_grid, params, n)
    spectrum = ComplexSpectrum(delta_grid, amp)

    weights = np.ones(delta_grid.size)
    weights[0] = weights[-1] = 0.5
    pre = params.length / (2 * math.pi) * h
    inten = np.abs(amp) ** 2
    peak = inten.max()
    if peak > 0 and max(inten[0], inten[-1]) > leakage_tol * peak:
        raise ResolutionError(
            "spectrum has not decayed at the grid edges; widen the detuning span"
        )

    N = delta_grid.size
    if tau_grid is None:
        # psi_j = pre * sum_k w_k A_k exp(-i delta_k tau_j), tau_j = 2 pi j / (N h)
        raw = np.fft.fft(weights * amp)
        j = np.arange(N)
        tau = 2 * math.pi * j / (N * h)
        psi = pre * raw * np.exp(-1j * delta_grid[0] * tau)
        # map indices above N/2 to negative delays
        tau = np.where(j < (N + 1) // 2, tau, tau - 2 * math.pi / h)
        order = np.argsort(tau)
        tau, psi = tau[order], psi[order]
        psi2 = np.abs(psi) ** 2
        if psi2.max() > 0:
            edge = max(psi2[: N // 64].max(), psi2[-(N // 64):].max())
            if edge > leakage_tol * psi2.max():
                raise ResolutionError("waveform wraps around the FFT period; refine the detuning grid")
    else:
        tau = np.asarray(tau_grid, dtype=float)
        phase = np.exp(-1j * np.outer(tau, delta_grid))
        psi = pre * phase @ (weights * amp)
        psi2 = np.abs(psi) ** 2
    return spectrum, BiphotonWaveform(tau, psi2)


# ---------------------------------------------------------------------------
# widths
# ---------------------------------------------------------------------------

def fwhm(x, y=None) -> float:
    """Full width at half of the global maximum, linearly interpolated.

    Accepts ``(grid, values)``, a ComplexSpectrum (uses |amplitude|^2) or a
    BiphotonWaveform. The width is taken between the outermost half-maximum
    crossings that bracket the dominant lobe.
    """
    if isinstance(x, ComplexSpectrum):
        grid, vals = x.delta, x.intensity
    elif isinstance(x, BiphotonWaveform):
        grid, vals = x.tau, x.psi2
    else:
        grid, vals = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
    i0 = int(np.argmax(vals))
    half = vals[i0] / 2
    if vals[i0] <= 0:
        raise ShapeError("curve has no positive maximum")
    above = vals >= half
    # walk outwards from the peak to the first sub-half sample on each side
    left = i0
    while left > 0 and above[left - 1]:
        left -= 1
    right = i0
    while right < len(vals) - 1 and above[right + 1]:
        right += 1
    if left == 0 or right == len(vals) - 1:
        raise ShapeError("no half-maximum crossing on one side of the peak")

    def cross(i_out, i_in):
        x0, x1 = grid[i_out], grid[i_in]
        y0, y1 = vals[i_out], vals[i_in]
        return x0 + (half - y0) * (x1 - x0) / (y1 - y0)

    return float(cross(right + 1, right) - cross(left - 1, left))


def characteristic_time(spectrum: ComplexSpectrum) -> float:
    """Inverse of the angular spectral FWHM, in seconds."""
    return 1.0 / fwhm(spectrum)
