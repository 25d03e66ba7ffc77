"""Single-mode detection model for the Stokes/anti-Stokes cross-correlation.

Pair numbers ``n`` are photons per temporal mode; noise numbers are detected
noise counts per characteristic time ``tau_c``. Powers are in watts, rates in
1/s, brightness (GSB) in pairs/s/MHz.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, least_squares

from .errors import ConfigurationError, FitError

__all__ = [
    "ChannelModel",
    "NoiseModelParams",
    "DEFAULT_CHANNELS",
    "noise_photons",
    "g2_detected",
    "pairs_per_mode",
    "g2_vs_gsb",
    "g2_band",
    "gsb_at_g2",
    "AlphaFit",
    "fit_alpha",
    "peak_g2_vs_power",
]

NW = 1e-9


@dataclass(frozen=True)
class ChannelModel:
    """Detection efficiency and noise rates of one detection channel.

    Parameters
    ----------
    efficiency : float
        Total detection efficiency including all losses, in [0, 1].
    base_rate : float
        Noise rate without atoms and without pump (1/s).
    pump_slope : float
        Additional noise rate per watt of pump power (1/s/W).
    atomic_rate : callable or None
        Optional hook for atom-originated noise (Raman scattering, optical
        pumping) as a function of pump power; ignored when ``None``.
    """

    efficiency: float
    base_rate: float = 0.0
    pump_slope: float = 0.0
    atomic_rate: object = field(default=None, compare=False)

    def __post_init__(self):
        if not 0.0 <= self.efficiency <= 1.0:
            raise ConfigurationError("efficiency must lie in [0, 1]")
        if self.base_rate < 0 or self.pump_slope < 0:
            raise ConfigurationError("noise rates must be non-negative")

    def rate(self, power: float) -> float:
        r = self.base_rate + self.pump_slope * power
        if self.atomic_rate is not None:
            r += self.atomic_rate(power)
        return r


DEFAULT_CHANNELS = {
    "S": ChannelModel(efficiency=0.08, base_rate=2800.0, pump_slope=84.0 / NW),
    "AS": ChannelModel(efficiency=0.08, base_rate=1200.0, pump_slope=7.6 / NW),
}


@dataclass(frozen=True)
class NoiseModelParams:
    """Scaling between brightness and pair number.

    ``n = alpha * GSB * mode_time`` with GSB in pairs/s/MHz, so ``alpha`` carries
    MHz. ``mode_time`` defaults to the coherence time ``2 tau_c`` of a line whose
    angular FWHM is ``1/tau_c``.
    """

    alpha: float = 103.0
    tau_c: float = 24e-9
    gsbp: float | None = None  # pairs/s/MHz/W
    modes: int = 1
    mode_time: float | None = None

    def __post_init__(self):
        if self.alpha <= 0 or self.tau_c <= 0:
            raise ConfigurationError("alpha and tau_c must be positive")
        if self.modes < 1 or int(self.modes) != self.modes:
            raise ConfigurationError("mode count must be a positive integer")
        if self.mode_time is None:
            object.__setattr__(self, "mode_time", 2 * self.tau_c)


def noise_photons(channel: ChannelModel, power: float, tau_c: float) -> float:
    """Detected noise counts per ``tau_c``: (r0 + slope * P) * tau_c."""
    if power < 0:
        raise ConfigurationError("pump power must be non-negative")
    return channel.rate(power) * tau_c


def g2_detected(n, noise_s, noise_as, t_s: float, t_as: float, modes: int = 1, cross_terms: bool = False):
    """Peak cross-correlation with loss and uncorrelated noise.

    With ``x = N_S/(T_S n)`` and ``y = N_AS/(T_AS n)`` the default returns

        g2 = (1 + 1/M + 1/n + x y) / ((1 + x)(1 + y)).

    ``cross_terms=True`` also keeps the signal-noise coincidences that the
    expression above drops, giving ``1 + (1/M + 1/n) / ((1 + x)(1 + y))``.
    That form is bounded below by 1 and falls monotonically with either noise.
    """
    n = np.asarray(n, dtype=float)
    noise_s = np.asarray(noise_s, dtype=float)
    noise_as = np.asarray(noise_as, dtype=float)
    if np.any(n < 0) or np.any(noise_s < 0) or np.any(noise_as < 0):
        raise ConfigurationError("pair and noise numbers must be non-negative")
    if not (0 < t_s <= 1 and 0 < t_as <= 1):
        raise ConfigurationError("efficiencies must lie in (0, 1]")
    if np.any((n == 0) & (noise_s == 0) & (noise_as == 0)):
        raise ConfigurationError("g2 undefined: no pairs and no noise")
    bunch = 1.0 + 1.0 / modes
    # multiply through by n^2 so that n = 0 with noise stays finite
    a = t_s * n
    b = t_as * n
    with np.errstate(divide="ignore", invalid="ignore"):
        if cross_terms:
            num = ((bunch - 1) * n + 1) * t_s * t_as * n
            out = 1.0 + num / ((a + noise_s) * (b + noise_as))
        else:
            num = (bunch * n * n + n) * t_s * t_as + noise_s * noise_as
            out = num / ((a + noise_s) * (b + noise_as))
    return out if out.ndim else float(out)


def pairs_per_mode(gsb, params: NoiseModelParams):
    return params.alpha * np.asarray(gsb, dtype=float) * params.mode_time


def g2_vs_gsb(gsb, params: NoiseModelParams, channels=None, power=0.0, cross_terms: bool = False):
    """Cross-correlation as a function of brightness with pump-dependent noise.

    ``power`` (W) may be a scalar or an array broadcastable with ``gsb``.
    """
    channels = channels or DEFAULT_CHANNELS
    gsb = np.asarray(gsb, dtype=float)
    if np.any(gsb <= 0):
        raise ConfigurationError("GSB must be positive")
    power = np.asarray(power, dtype=float)
    ch_s, ch_as = channels["S"], channels["AS"]
    ns = (ch_s.base_rate + ch_s.pump_slope * power) * params.tau_c
    nas = (ch_as.base_rate + ch_as.pump_slope * power) * params.tau_c
    if ch_s.atomic_rate is not None:
        ns = ns + np.vectorize(ch_s.atomic_rate)(power) * params.tau_c
    if ch_as.atomic_rate is not None:
        nas = nas + np.vectorize(ch_as.atomic_rate)(power) * params.tau_c
    n = pairs_per_mode(gsb, params)
    return g2_detected(n, ns, nas, ch_s.efficiency, ch_as.efficiency, params.modes, cross_terms)


def g2_band(gsb, params: NoiseModelParams, power_range: tuple[float, float], channels=None, samples: int = 33):
    """Lower and upper envelope of ``g2_vs_gsb`` over a pump-power range."""
    p = np.linspace(power_range[0], power_range[1], samples)
    gsb = np.atleast_1d(np.asarray(gsb, dtype=float))
    curves = g2_vs_gsb(gsb[None, :], params, channels, p[:, None])
    return curves.min(axis=0), curves.max(axis=0)


def gsb_at_g2(target: float, params: NoiseModelParams, channels=None, power=None, lo=1.0, hi=1e9) -> float:
    """Brightness at which the model crosses ``target`` (root find in log GSB).

    With ``power=None`` the pump power follows the brightness via ``params.gsbp``
    (or is zero when no GSBP is set).
    """

    def f(log_gsb):
        g = math.exp(log_gsb)
        p = power
        if p is None:
            p = g / params.gsbp if params.gsbp else 0.0
        return float(g2_vs_gsb(g, params, channels, p)) - target

    a, b = math.log(lo), math.log(hi)
    if f(a) * f(b) > 0:
        raise FitError("g2 target not bracketed in the requested brightness range")
    return math.exp(brentq(f, a, b, xtol=1e-12))


@dataclass
class AlphaFit:
    alpha: float
    alpha_err: float
    residuals: np.ndarray
    cost: float
    n_points: int


def fit_alpha(gsb, g2, power, params: NoiseModelParams | None = None, channels=None, alpha0: float = 10.0) -> AlphaFit:
    """Least-squares estimate of the scaling factor alpha.

    Residuals are differences of ``log(g2 - 1)`` between model and data, which
    weights points spanning several decades of brightness evenly.
    """
    params = params or NoiseModelParams()
    gsb = np.asarray(gsb, dtype=float)
    g2 = np.asarray(g2, dtype=float)
    power = np.broadcast_to(np.asarray(power, dtype=float), gsb.shape)
    if gsb.ndim != 1 or gsb.size != g2.size:
        raise FitError("gsb and g2 must be 1-D arrays of equal length")
    if gsb.size < 3:
        raise FitError("need at least three points to fit alpha")
    if np.any(gsb <= 0) or gsb.max() / gsb.min() < 10:
        raise FitError("brightness values must span at least a decade")
    if np.any(g2 <= 1):
        raise FitError("log(g2 - 1) loss needs every g2 above 1")
    target = np.log(g2 - 1)

    def resid(theta):
        p = NoiseModelParams(math.exp(theta[0]), params.tau_c, params.gsbp, params.modes, params.mode_time)
        model = g2_vs_gsb(gsb, p, channels, power)
        return np.log(np.maximum(model - 1, 1e-300)) - target

    sol = least_squares(resid, x0=[math.log(alpha0)], method="lm")
    if not sol.success:
        raise FitError(f"alpha fit did not converge: {sol.message}")
    alpha = math.exp(sol.x[0])
    dof = max(gsb.size - 1, 1)
    s2 = 2 * sol.cost / dof
    jtj = float(sol.jac[:, 0] @ sol.jac[:, 0])
    err_log = math.sqrt(s2 / jtj) if jtj > 0 else math.inf
    return AlphaFit(alpha, alpha * err_log, sol.fun.copy(), float(sol.cost), int(gsb.size))


def peak_g2_vs_power(power, gsbp: float, params: NoiseModelParams, channels=None, cross_terms: bool = False):
    """Peak g2 when brightness grows linearly with pump power, GSB = GSBP * P.

    ``gsbp`` is in pairs/s/MHz/W.
    """
    power = np.asarray(power, dtype=float)
    if np.any(power <= 0):
        raise ConfigurationError("pump power must be positive")
    return g2_vs_gsb(gsbp * power, params, channels, power, cross_terms)
