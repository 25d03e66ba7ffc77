"""Reproduction recipes chaining the spectrum, source, analysis and noise model.

The closed-loop comparison maps a Monte Carlo configuration onto the
single-mode noise model: with pair rate ``r``, noise rate ``r_n`` and a delay
bin of width ``w`` holding a fraction ``p`` of the biphoton waveform, the
pairs and noise counts per mode are ``n = r w / p`` and ``N = r_n w / p``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .analysis import (
    CorrelationHistogram,
    HeraldedHistogram,
    cross_correlation,
    delay_edges,
    heralded_autocorrelation,
)
from .errors import StatisticsError
from .montecarlo import DelayTable, Schedule, SourceConfig, generate_stream
from .noise_model import ChannelModel, g2_detected
from .spectrum import SfwmParams, biphoton_waveform, characteristic_time, fwhm

__all__ = [
    "DEFAULT_SPECTRUM",
    "SpectrumSummary",
    "ClosedLoopCell",
    "spectrum_summary",
    "waveform_delay",
    "peak_bin",
    "model_pairs_per_mode",
    "closed_loop_cell",
    "GRID_PAIR_RATES",
    "GRID_NOISE_RATES",
    "GRID_EFFICIENCY",
    "model_cell_g2",
    "closest_cell",
]

# OD 15, control 2.8 Gamma_D1, 14 nW pump; detuning and decoherence from the level scheme
DEFAULT_SPECTRUM = {"od": 15.0, "omega_c_gamma": 2.8, "pump_power_nw": 14.0}
# closed-loop grid: pair rates and detected noise rates (1/s), shared efficiency
GRID_PAIR_RATES = (3e4, 2e5, 1e6)
GRID_NOISE_RATES = (3e3, 3e4, 3e5)
GRID_EFFICIENCY = 0.3


@dataclass(frozen=True)
class SpectrumSummary:
    fwhm_mhz: float  # FWHM of |kappa Phi|^2 divided by 2 pi, in MHz
    characteristic_time_ns: float
    waveform_fwhm_ns: float
    peak_delay_ns: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def spectrum_summary(params: SfwmParams):
    """Spectrum, waveform and their widths for one parameter set."""
    spectrum, waveform = biphoton_waveform(params)
    summary = SpectrumSummary(
        fwhm_mhz=fwhm(spectrum) / (2 * math.pi) / 1e6,
        characteristic_time_ns=characteristic_time(spectrum) * 1e9,
        waveform_fwhm_ns=fwhm(waveform) * 1e9,
        peak_delay_ns=float(waveform.tau[np.argmax(waveform.psi2)]) * 1e9,
    )
    return spectrum, waveform, summary


def waveform_delay(params: SfwmParams | None = None, tau_max: float = 400e-9) -> DelayTable:
    """Delay table sampled from the biphoton waveform (default parameters if ``None``)."""
    params = params or SfwmParams.from_dict(DEFAULT_SPECTRUM)
    _, waveform = biphoton_waveform(params)
    return DelayTable.from_waveform(waveform.tau, waveform.psi2, 0.0, tau_max)


def peak_bin(edges_ps: np.ndarray, delay: DelayTable) -> tuple[int, float]:
    """Index of the histogram bin holding the largest waveform fraction, and that fraction."""
    probs = np.array([delay.bin_probability(edges_ps[i] * 1e-12, edges_ps[i + 1] * 1e-12)
                      for i in range(edges_ps.size - 1)])
    i = int(np.argmax(probs))
    return i, float(probs[i])


def model_pairs_per_mode(rate: float, bin_s: float, fraction: float) -> float:
    """Counts per mode for a rate seen through a bin holding ``fraction`` of the waveform."""
    return rate * bin_s / fraction


@dataclass
class ClosedLoopCell:
    pair_rate: float
    noise_rate: float
    efficiency: float
    n_windows: int
    pairs_per_mode: float
    noise_per_mode: float
    mc_g2: float
    mc_err: float
    model_g2: float  # single-mode expression without signal-noise coincidences
    model_g2_complete: float  # including signal-noise coincidences
    peak_delay_ps: float
    histogram: CorrelationHistogram
    heralded: HeraldedHistogram | None = None

    @property
    def pull(self) -> float:
        return (self.mc_g2 - self.model_g2) / self.mc_err

    @property
    def pull_complete(self) -> float:
        return (self.mc_g2 - self.model_g2_complete) / self.mc_err

    def row(self) -> dict:
        out = {
            "pair_rate": self.pair_rate,
            "noise_rate": self.noise_rate,
            "efficiency": self.efficiency,
            "n_windows": self.n_windows,
            "pairs_per_mode": self.pairs_per_mode,
            "mc_g2": self.mc_g2,
            "mc_err": self.mc_err,
            "model_g2": self.model_g2,
            "model_g2_complete": self.model_g2_complete,
            "pull": self.pull,
            "pull_complete": self.pull_complete,
        }
        if self.heralded is not None:
            out["heralded_g2"] = self.heralded.g2_zero
            out["heralded_err"] = self.heralded.g2_zero_err
        return out


def closed_loop_cell(delay: DelayTable, pair_rate: float, noise_rate: float, efficiency: float,
                     n_cycles: int, seed: int = 0, bin_ps: int = 4000, span_ps: int = 400_000,
                     herald_gate_ps: tuple[int, int] | None = None, schedule: Schedule | None = None,
                     executor=None) -> ClosedLoopCell:
    """Generate a thermal-pair stream, measure its peak g2 and evaluate the model there.

    Both channels share ``efficiency`` and the detected ``noise_rate``. With
    ``herald_gate_ps`` the heralded autocorrelation is measured as well.
    """
    channels = {"S": ChannelModel(efficiency, noise_rate), "AS": ChannelModel(efficiency, noise_rate)}
    cfg = SourceConfig(pair_rate=pair_rate, delay=delay, channels=channels, n_cycles=n_cycles,
                       thermal=True, seed=seed, schedule=schedule or Schedule())
    tags = generate_stream(cfg, executor=executor)
    hist = cross_correlation(tags, bin_ps, span_ps)
    i, frac = peak_bin(hist.edges, delay)
    if not hist.valid[i]:
        raise StatisticsError("no accidental estimate at the waveform peak")
    bin_s = (hist.edges[i + 1] - hist.edges[i]) * 1e-12
    n = float(model_pairs_per_mode(pair_rate, bin_s, frac))
    noise = float(model_pairs_per_mode(noise_rate, bin_s, frac))
    single_mode = float(g2_detected(n, noise, noise, efficiency, efficiency))
    complete = float(g2_detected(n, noise, noise, efficiency, efficiency, cross_terms=True))
    heralded = heralded_autocorrelation(tags, herald_gate_ps) if herald_gate_ps is not None else None
    return ClosedLoopCell(pair_rate, noise_rate, efficiency, tags.n_windows, n, noise, float(hist.g2[i]),
                          float(hist.error[i]), single_mode, complete, float(hist.centers[i]), hist, heralded)


def model_cell_g2(delay: DelayTable, pair_rate: float, noise_rate: float, efficiency: float,
                  bin_ps: int = 4000, span_ps: int = 400_000, cross_terms: bool = False) -> float:
    """Model peak g2 of a closed-loop cell without simulating it."""
    edges = delay_edges(bin_ps, span_ps)
    i, frac = peak_bin(edges, delay)
    bin_s = (edges[i + 1] - edges[i]) * 1e-12
    n = model_pairs_per_mode(pair_rate, bin_s, frac)
    noise = model_pairs_per_mode(noise_rate, bin_s, frac)
    return float(g2_detected(n, noise, noise, efficiency, efficiency, cross_terms=cross_terms))


def closest_cell(delay: DelayTable, target: float, pair_rates=GRID_PAIR_RATES, noise_rates=GRID_NOISE_RATES,
                 efficiency: float = GRID_EFFICIENCY) -> tuple[float, float]:
    """Grid cell whose model peak g2 is nearest to ``target`` on a log scale."""
    cells = [(r, rn) for r in pair_rates for rn in noise_rates]
    dist = [abs(math.log(model_cell_g2(delay, r, rn, efficiency) / target)) for r, rn in cells]
    return cells[int(np.argmin(dist))]
