"""Correlation statistics of detector time-tag streams.

Coincidences are counted between events of the same SFWM window. Accidental
coincidences are estimated from events in *different* windows: the delay
distribution over all ordered pairs of distinct windows is obtained exactly
from per-window arrival-offset histograms, then scaled down by ``W - 1`` for
``W`` acquired windows. All partial results are integer counts, so chunks of
whole cycles can be processed independently and merged.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import curve_fit
from scipy.signal import fftconvolve

from .errors import ConfigurationError, StatisticsError, UndefinedHistogramError
from .montecarlo import TagStream

__all__ = [
    "CorrelationHistogram",
    "CorrelationAccumulator",
    "HeraldedHistogram",
    "RateCorrections",
    "RateReport",
    "delay_edges",
    "cross_correlation",
    "auto_correlation",
    "heralded_autocorrelation",
    "cauchy_schwarz",
    "rates_and_gsb",
    "fit_gsbp",
]

S_CHANNELS = ("S1", "S2")
AS_CHANNELS = ("AS1", "AS2")


def delay_edges(bin_ps: int = 4000, span_ps: int = 400_000) -> np.ndarray:
    """Bin edges from ``-span`` to ``+span`` in steps of ``bin_ps`` (integers, ps)."""
    if bin_ps <= 0 or span_ps <= 0:
        raise ConfigurationError("bin and span must be positive")
    n = int(math.ceil(span_ps / bin_ps))
    return np.arange(-n, n + 1, dtype=np.int64) * int(bin_ps)


@dataclass
class CorrelationHistogram:
    """Normalized coincidence histogram.

    ``accidentals`` is the expected same-window accidental count per bin;
    ``valid`` marks bins with a non-zero accidental estimate (others hold NaN).
    """

    edges: np.ndarray
    counts: np.ndarray
    accidentals: np.ndarray
    raw_accidentals: np.ndarray
    g2: np.ndarray
    error: np.ndarray
    valid: np.ndarray
    n_windows: int

    @property
    def centers(self) -> np.ndarray:
        return 0.5 * (self.edges[:-1] + self.edges[1:])

    def value_at(self, delay_ps: float) -> tuple[float, float]:
        i = int(np.searchsorted(self.edges, delay_ps, side="right") - 1)
        if not 0 <= i < self.counts.size:
            raise ConfigurationError("delay outside histogram span")
        return float(self.g2[i]), float(self.error[i])

    def peak(self, smooth: bool = False) -> tuple[float, float, float]:
        """Return ``(g2, error, delay_ps)`` at the maximum bin.

        With ``smooth`` the maximum is located on a 3-bin moving average.
        """
        g = np.where(self.valid, self.g2, -np.inf)
        if smooth:
            kernel = np.ones(3) / 3
            filled = np.where(self.valid, self.g2, 0.0)
            g = np.where(self.valid, np.convolve(filled, kernel, mode="same"), -np.inf)
        if not np.any(np.isfinite(g)):
            raise StatisticsError("no bin with an accidental estimate")
        i = int(np.argmax(g))
        val = float(g[i])
        err = float(self.error[i]) if not smooth else float(
            np.sqrt(np.sum(self.error[max(i - 1, 0): i + 2] ** 2)) / 3
        )
        return val, err, float(self.centers[i])

    def to_csv(self, path) -> None:
        data = np.column_stack([self.edges[:-1], self.edges[1:], self.counts, self.accidentals, self.g2, self.error])
        np.savetxt(path, data, delimiter=",", header="lo_ps,hi_ps,counts,accidentals,g2,g2_err", comments="",
                   fmt=["%d", "%d", "%d", "%.10g", "%.10g", "%.10g"])


@dataclass
class CorrelationAccumulator:
    """Additive partial state of a correlation measurement."""

    edges: np.ndarray
    window_ps: int
    counts: np.ndarray = None
    offsets_a: np.ndarray = None
    offsets_b: np.ndarray = None
    n_windows: int = 0

    def __post_init__(self):
        nb = self.edges.size - 1
        if self.counts is None:
            self.counts = np.zeros(nb, dtype=np.int64)
        if self.offsets_a is None:
            self.offsets_a = np.zeros(self.window_ps, dtype=np.int64)
        if self.offsets_b is None:
            self.offsets_b = np.zeros(self.window_ps, dtype=np.int64)

    def add(self, tags: TagStream, start: tuple[str, ...], stop: tuple[str, ...]) -> "CorrelationAccumulator":
        a = tags.channel_mask(*start)
        b = tags.channel_mask(*stop)
        abs_t = tags.absolute_ps()
        off = tags.offset_ps()
        ta, tb = abs_t[a], abs_t[b]
        order_b = np.argsort(tb, kind="stable")
        tb = tb[order_b]
        key_a = _window_key(tags)[a]
        key_b = _window_key(tags)[b][order_b]
        self.counts += _pair_histogram(ta, key_a, tb, key_b, self.edges)
        self.offsets_a += np.bincount(off[a], minlength=self.window_ps)[: self.window_ps]
        self.offsets_b += np.bincount(off[b], minlength=self.window_ps)[: self.window_ps]
        self.n_windows += tags.n_windows
        return self

    def merge(self, other: "CorrelationAccumulator") -> "CorrelationAccumulator":
        if not np.array_equal(self.edges, other.edges) or self.window_ps != other.window_ps:
            raise ConfigurationError("cannot merge histograms with different binning")
        return CorrelationAccumulator(self.edges, self.window_ps, self.counts + other.counts,
                                      self.offsets_a + other.offsets_a, self.offsets_b + other.offsets_b,
                                      self.n_windows + other.n_windows)

    def result(self) -> CorrelationHistogram:
        if self.offsets_a.sum() == 0 or self.offsets_b.sum() == 0:
            raise UndefinedHistogramError("a correlated channel has no events")
        W = self.n_windows
        if W < 2:
            raise StatisticsError("accidental estimate needs at least two windows")
        all_pairs = _offset_correlation(self.offsets_a, self.offsets_b, self.edges)
        raw = all_pairs - self.counts  # ordered pairs from distinct windows
        acc = raw / (W - 1)
        valid = acc > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            g2 = np.where(valid, self.counts / acc, np.nan)
            rel_acc = np.where(raw > 0, 1.0 / np.sqrt(np.maximum(raw, 1)), 0.0)
            err = np.where(valid, np.sqrt(self.counts / acc**2 + (g2 * rel_acc) ** 2), np.nan)
        return CorrelationHistogram(self.edges, self.counts.copy(), acc, raw, g2, err, valid, W)


def _window_key(tags: TagStream) -> np.ndarray:
    return tags.cycle.astype(np.int64) * (tags.schedule.windows_per_cycle + 1) + tags.window


def _pair_histogram(ta, key_a, tb, key_b, edges) -> np.ndarray:
    """Histogram of tb - ta over same-window pairs with delay inside ``edges``."""
    nb = edges.size - 1
    if ta.size == 0 or tb.size == 0:
        return np.zeros(nb, dtype=np.int64)
    lo = np.searchsorted(tb, ta + edges[0], side="left")
    hi = np.searchsorted(tb, ta + edges[-1], side="left")
    n = hi - lo
    total = int(n.sum())
    if total == 0:
        return np.zeros(nb, dtype=np.int64)
    ia = np.repeat(np.arange(ta.size), n)
    first = np.repeat(lo, n)
    step = np.arange(total) - np.repeat(np.cumsum(n) - n, n)
    ib = first + step
    same = key_a[ia] == key_b[ib]
    d = tb[ib[same]] - ta[ia[same]]
    idx = np.searchsorted(edges, d, side="right") - 1
    return np.bincount(idx, minlength=nb)[:nb].astype(np.int64)


def _offset_correlation(ha: np.ndarray, hb: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Sum over all event pairs (any windows) of the offset difference, binned."""
    corr = fftconvolve(hb.astype(float), ha[::-1].astype(float), mode="full")
    corr = np.rint(corr).astype(np.int64)
    lag0 = ha.size - 1  # corr[lag0 + d] = sum_i ha[i] hb[i + d]
    csum = np.concatenate([[0], np.cumsum(corr)])
    lo = np.clip(edges[:-1] + lag0, 0, corr.size)
    hi = np.clip(edges[1:] + lag0, 0, corr.size)
    return csum[hi] - csum[lo]


def _correlate(tags: TagStream, start, stop, bin_ps, span_ps, chunks) -> CorrelationHistogram:
    edges = delay_edges(bin_ps, span_ps)
    if tags.n_windows < 2:
        raise StatisticsError("accidental estimate needs at least two windows")
    acc = CorrelationAccumulator(edges, tags.schedule.window_ps)
    parts = tags.split_cycles(chunks) if chunks and chunks > 1 else [tags]
    for part in parts:
        acc = acc.merge(CorrelationAccumulator(edges, tags.schedule.window_ps).add(part, start, stop))
    return acc.result()


def cross_correlation(tags: TagStream, bin_ps: int = 4000, span_ps: int = 400_000, chunks: int | None = None):
    """g2_{S,AS}(tau) with tau = t_AS - t_S, both sub-detectors merged per channel."""
    return _correlate(tags, S_CHANNELS, AS_CHANNELS, bin_ps, span_ps, chunks)


def auto_correlation(tags: TagStream, channel: str = "S", bin_ps: int = 4000, span_ps: int = 400_000,
                     chunks: int | None = None):
    """Hanbury Brown-Twiss histogram between the two sub-detectors of ``channel``."""
    if channel not in ("S", "AS"):
        raise ConfigurationError("channel must be 'S' or 'AS'")
    return _correlate(tags, (f"{channel}1",), (f"{channel}2",), bin_ps, span_ps, chunks)


# ---------------------------------------------------------------------------
# heralded autocorrelation
# ---------------------------------------------------------------------------

@dataclass
class HeraldedHistogram:
    n: np.ndarray
    counts: np.ndarray
    fit: tuple[float, float]  # intercept, slope of the baseline over n != 0
    fit_err: float  # standard error of the intercept
    g2_zero: float
    g2_zero_err: float
    heralded: int

    @property
    def zero_count(self) -> int:
        return int(self.counts[self.n == 0][0])


def _herald_index(t_s: np.ndarray, t_as: np.ndarray, gate) -> tuple[np.ndarray, np.ndarray]:
    lo, hi = gate
    first = np.searchsorted(t_as, t_s + lo, side="left")
    ok = first < t_as.size
    ok[ok] = t_as[first[ok]] <= t_s[ok] + hi
    return first, ok


def heralded_autocorrelation(tags: TagStream, gate_ps=(0, 48_000), n_max: int = 10) -> HeraldedHistogram:
    """Conditional autocorrelation g2_{S,S|AS}(0) by the herald-count histogram method.

    An S event is heralded when an AS event arrives within ``gate_ps`` (delays
    relative to the S event); its herald is the first such AS event. Every
    heralded S1 (S2) event starts a pair with each later heralded S2 (S1) event;
    the pair lands in bin +n (-n), n being the number of AS events between the
    two heralds. Bin 0 holds pairs heralded by the same AS event and is
    compared to a straight-line fit through the other bins.
    """
    if n_max < 1:
        raise ConfigurationError("n_max must be at least 1")
    abs_t = tags.absolute_ps()
    s_mask = tags.channel_mask(*S_CHANNELS)
    as_mask = tags.channel_mask(*AS_CHANNELS)
    t_as = np.sort(abs_t[as_mask])
    order = np.argsort(abs_t[s_mask], kind="stable")
    t_s = abs_t[s_mask][order]
    det = (tags.channel[s_mask][order] == 1).astype(np.int8)  # 0 -> S1, 1 -> S2
    herald, ok = _herald_index(t_s, t_as, gate_ps)
    h, d = herald[ok], det[ok]

    n_bins = 2 * n_max + 1
    counts = np.zeros(n_bins, dtype=np.int64)
    if h.size:
        end = np.searchsorted(h, h + n_max, side="right")
        start = np.arange(h.size) + 1
        k = np.maximum(end - start, 0)
        total = int(k.sum())
        if total:
            i = np.repeat(np.arange(h.size), k)
            j = np.repeat(start, k) + (np.arange(total) - np.repeat(np.cumsum(k) - k, k))
            other = d[i] != d[j]
            i, j = i[other], j[other]
            n = h[j] - h[i]
            signed = np.where(d[i] == 0, n, -n)
            counts += np.bincount(signed + n_max, minlength=n_bins)
    nvals = np.arange(-n_max, n_max + 1)
    side = nvals != 0
    populated = np.count_nonzero(counts[side])
    if populated < 2:
        raise StatisticsError("too few heralded pairs for the baseline fit")
    x, y = nvals[side], counts[side].astype(float)
    sigma = np.sqrt(np.maximum(y, 1.0))
    coef, cov = np.polyfit(x, y, 1, w=1.0 / sigma, cov="unscaled")
    slope, intercept = coef
    a_err = float(math.sqrt(cov[1, 1]))
    c0 = counts[n_max]
    if intercept <= 0:
        raise StatisticsError("baseline fit predicts no pairs at n = 0")
    g = c0 / intercept
    g_err = math.sqrt(max(c0, 1)) / intercept if c0 == 0 else g * math.sqrt(1 / c0 + (a_err / intercept) ** 2)
    return HeraldedHistogram(nvals, counts, (float(intercept), float(slope)), a_err, float(g), float(g_err),
                             int(h.size))


# ---------------------------------------------------------------------------
# Cauchy-Schwarz ratio and rates
# ---------------------------------------------------------------------------

def cauchy_schwarz(g2_cross: float, g2_auto_s: float, g2_auto_as: float,
                   err_cross: float = 0.0, err_s: float = 0.0, err_as: float = 0.0) -> tuple[float, float]:
    """R = g2_cross^2 / (g2_SS g2_ASAS) and its propagated standard error.

    Values of R above 1 cannot be produced by classical fields.
    """
    if g2_auto_s <= 0 or g2_auto_as <= 0:
        raise ConfigurationError("autocorrelations must be positive")
    r = g2_cross**2 / (g2_auto_s * g2_auto_as)
    rel = math.sqrt((2 * err_cross / g2_cross) ** 2 + (err_s / g2_auto_s) ** 2 + (err_as / g2_auto_as) ** 2) \
        if g2_cross != 0 else 0.0
    return r, r * rel


@dataclass(frozen=True)
class RateCorrections:
    """Inputs needed to turn detected counts into a generated spectral brightness.

    ``gate_ps`` selects the S-AS delays counted as pairs; ``capture_fraction``
    is the share of the biphoton waveform inside that gate. ``duty_cycle``
    defaults to the selected acquisition time over the wall-clock cycle time.
    """

    efficiency_s: float
    efficiency_as: float
    bandwidth_mhz: float | None
    gate_ps: tuple[int, int] = (0, 48_000)
    duty_cycle: float | None = None
    background_rates: dict = field(default_factory=dict)  # detected noise rates (1/s) per channel
    capture_fraction: float = 1.0


@dataclass
class RateReport:
    acquisition_time: float
    wall_time: float
    duty_cycle: float
    singles: dict  # detected rate per sub-detector during acquisition (1/s)
    singles_wall: dict  # same, per wall-clock second
    coincidences: int
    accidentals: float
    pair_rate_detected: float  # background subtracted, per acquisition second
    pair_rate_generated: float
    pair_rate_generated_err: float
    gsb: float
    gsb_err: float
    heralding_efficiency: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def rates_and_gsb(tags: TagStream, corrections: RateCorrections) -> RateReport:
    """Rates, generated spectral brightness (pairs/s/MHz) and heralding efficiency."""
    if corrections.bandwidth_mhz is None or corrections.bandwidth_mhz <= 0:
        raise ConfigurationError("spectral brightness needs a positive bandwidth")
    if not (0 < corrections.efficiency_s <= 1 and 0 < corrections.efficiency_as <= 1):
        raise ConfigurationError("efficiencies must lie in (0, 1]")
    sched = tags.schedule
    acq = tags.n_windows * sched.window_length
    duty = corrections.duty_cycle
    if duty is None:
        duty = tags.windows_per_cycle * sched.window_length / sched.cycle_time
    if duty <= 0:
        raise ConfigurationError("duty cycle must be positive")
    wall = acq / duty

    counts = tags.counts()
    singles = {k: v / acq for k, v in counts.items()}
    singles_wall = {k: v / wall for k, v in counts.items()}

    lo, hi = corrections.gate_ps
    edges = np.array([lo, hi], dtype=np.int64)
    acc = CorrelationAccumulator(edges, sched.window_ps)
    if len(tags):
        acc.add(tags, S_CHANNELS, AS_CHANNELS)
    else:
        acc.n_windows = tags.n_windows
    coinc = int(acc.counts[0])
    accidental = 0.0
    acc_raw = 0
    if coinc and acc.offsets_a.sum() and acc.offsets_b.sum() and acc.n_windows > 1:
        acc_raw = int((_offset_correlation(acc.offsets_a, acc.offsets_b, edges) - acc.counts)[0])
        accidental = acc_raw / (acc.n_windows - 1)
    t_s, t_as = corrections.efficiency_s, corrections.efficiency_as
    detected = max(coinc - accidental, 0.0) / acq
    scale = 1.0 / (t_s * t_as * corrections.capture_fraction)
    generated = detected * scale
    var = coinc + (accidental**2 / acc_raw if acc_raw else 0.0)
    gen_err = math.sqrt(var) / acq * scale
    gsb = generated / corrections.bandwidth_mhz
    gsb_err = gen_err / corrections.bandwidth_mhz

    as_rate = singles["AS1"] + singles["AS2"]
    as_rate -= corrections.background_rates.get("AS", 0.0)
    herald_rate = as_rate / t_as
    eta = generated / herald_rate if herald_rate > 0 else float("nan")
    return RateReport(acq, wall, duty, singles, singles_wall, coinc, accidental, detected, generated, gen_err,
                      gsb, gsb_err, eta)


def fit_gsbp(power, gsb, gsb_err=None) -> tuple[float, float]:
    """Weighted fit of GSB = GSBP * P through the origin; returns (GSBP, error)."""
    power = np.asarray(power, dtype=float)
    gsb = np.asarray(gsb, dtype=float)
    if power.size < 2 or np.ptp(power) == 0:
        raise StatisticsError("GSBP fit needs at least two distinct pump powers")
    sigma = None if gsb_err is None else np.asarray(gsb_err, dtype=float)
    p0 = [float(np.sum(gsb * power) / np.sum(power**2))]
    popt, pcov = curve_fit(lambda p, k: k * p, power, gsb, p0=p0, sigma=sigma,
                           absolute_sigma=sigma is not None)
    return float(popt[0]), float(math.sqrt(pcov[0, 0]))
