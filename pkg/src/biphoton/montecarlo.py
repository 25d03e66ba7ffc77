"""Monte Carlo time-tag generator for a windowed biphoton source.

Every SFWM window produces a random number of pairs. The Stokes photon is
emitted uniformly inside the window (or at a fixed offset), the anti-Stokes
photon follows after a delay drawn from a tabulated waveform. Photons survive
detection with the channel efficiency and are routed 50:50 onto two
sub-detectors per channel. Uncorrelated noise tags are added per channel.

Timestamps are integer picoseconds measured from the start of each cycle.
"""
from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigurationError
from .noise_model import ChannelModel

__all__ = [
    "CHANNELS",
    "DelayTable",
    "Schedule",
    "SourceConfig",
    "TagStream",
    "generate_stream",
    "od_schedule",
    "duty_cycle",
    "cycle_rng",
]

CHANNELS = ("S1", "S2", "AS1", "AS2")
PS = 1e12


@dataclass(frozen=True)
class DelayTable:
    """Discrete S-to-AS delay distribution.

    Each entry ``tau[i]`` carries probability ``prob[i]`` spread uniformly over
    ``[tau[i] - width/2, tau[i] + width/2)``; ``width=0`` gives point masses.
    """

    tau: np.ndarray
    prob: np.ndarray
    width: float = 0.0

    def __post_init__(self):
        tau = np.atleast_1d(np.asarray(self.tau, dtype=float))
        prob = np.atleast_1d(np.asarray(self.prob, dtype=float))
        if tau.shape != prob.shape or tau.ndim != 1:
            raise ConfigurationError("delay table needs matching 1-D tau and prob arrays")
        if np.any(prob < 0):
            raise ConfigurationError("delay probabilities must be non-negative")
        if abs(prob.sum() - 1.0) > 1e-6:
            raise ConfigurationError(f"delay table not normalized (sum = {prob.sum():.6g})")
        if self.width < 0:
            raise ConfigurationError("bin width must be non-negative")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "prob", prob)

    @classmethod
    def delta(cls, tau: float) -> "DelayTable":
        return cls(np.array([tau]), np.array([1.0]))

    @classmethod
    def from_waveform(cls, tau, psi2, tau_min: float = 0.0, tau_max: float | None = None) -> "DelayTable":
        """Normalize a sampled waveform on a uniform grid into a delay table."""
        tau = np.asarray(tau, dtype=float)
        psi2 = np.clip(np.asarray(psi2, dtype=float), 0, None)
        keep = tau >= tau_min
        if tau_max is not None:
            keep &= tau <= tau_max
        tau, psi2 = tau[keep], psi2[keep]
        total = psi2.sum()
        if total <= 0:
            raise ConfigurationError("waveform has no weight in the selected delay range")
        return cls(tau, psi2 / total, float(tau[1] - tau[0]) if tau.size > 1 else 0.0)

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        idx = rng.choice(self.tau.size, size=size, p=self.prob) if self.tau.size > 1 else np.zeros(size, int)
        out = self.tau[idx]
        if self.width > 0:
            out = out + (rng.random(size) - 0.5) * self.width
        return out

    def bin_probability(self, lo: float, hi: float) -> float:
        """Probability that a sampled delay falls in ``[lo, hi)``."""
        if self.width == 0:
            return float(self.prob[(self.tau >= lo) & (self.tau < hi)].sum())
        a = self.tau - self.width / 2
        b = self.tau + self.width / 2
        overlap = np.clip(np.minimum(b, hi) - np.maximum(a, lo), 0, None) / self.width
        return float(np.sum(self.prob * overlap))

    def peak(self) -> float:
        return float(self.tau[np.argmax(self.prob)])

    def fwhm_gate(self) -> tuple[float, float]:
        """Delay interval where the density exceeds half its maximum."""
        half = self.prob.max() / 2
        above = np.flatnonzero(self.prob >= half)
        lo, hi = self.tau[above[0]], self.tau[above[-1]]
        return float(lo - self.width / 2), float(hi + self.width / 2)


@dataclass(frozen=True)
class Schedule:
    """Timing of SFWM windows inside one experimental cycle (seconds)."""

    window_length: float = 1.2e-6
    fort_off: float = 2.4e-6
    fort_on: float = 1.6e-6
    window_offset: float = 1.2e-6  # preparation before the SFWM phase
    windows_per_cycle: int = 3500
    cycle_time: float = 8.4  # wall-clock time of one full cycle incl. MOT loading

    def __post_init__(self):
        if min(self.window_length, self.fort_off, self.fort_on) <= 0:
            raise ConfigurationError("window and FORT periods must be positive")
        if self.window_offset < 0 or self.window_offset + self.window_length > self.fort_off:
            raise ConfigurationError("SFWM window must fit inside the FORT-off period")
        if self.windows_per_cycle < 1:
            raise ConfigurationError("need at least one window per cycle")
        if self.cycle_time < self.windows_per_cycle * self.period:
            raise ConfigurationError("cycle time shorter than the window train")

    @property
    def period(self) -> float:
        return self.fort_off + self.fort_on

    @property
    def train_duration(self) -> float:
        return self.windows_per_cycle * self.period

    def window_start_ps(self, window) -> np.ndarray:
        w = np.asarray(window, dtype=np.int64)
        return w * round(self.period * PS) + round(self.window_offset * PS)

    @property
    def window_ps(self) -> int:
        return round(self.window_length * PS)


@dataclass(frozen=True)
class SourceConfig:
    """Configuration of the synthetic source.

    ``pair_rate`` is the generation rate (pairs/s) during an SFWM window at the
    peak optical depth. With ``rate_follows_od`` the rate of each window is
    scaled by ``rate_map(OD)/rate_map(OD0)`` (default: proportional to OD).
    """

    pair_rate: float = 0.0
    delay: DelayTable = field(default_factory=lambda: DelayTable.delta(0.0))
    channels: dict = field(default_factory=lambda: {"S": ChannelModel(1.0), "AS": ChannelModel(1.0)})
    pump_power: float = 0.0
    slow_light_offset: float = 0.0
    schedule: Schedule = field(default_factory=Schedule)
    n_cycles: int = 1
    od0: float = 155.0
    od_tau: float = 3.2e-3
    rate_follows_od: bool = False
    rate_map: Callable[[np.ndarray], np.ndarray] | None = field(default=None, compare=False)
    od_range: tuple[float, float] | None = None
    split: float = 0.5
    dead_time: float = 0.0
    thermal: bool = False
    forced_pairs: int | None = None
    emission: str = "uniform"
    seed: int = 0

    def __post_init__(self):
        if self.pair_rate < 0 or self.pump_power < 0 or self.dead_time < 0:
            raise ConfigurationError("rates, powers and dead time must be non-negative")
        if self.n_cycles < 1:
            raise ConfigurationError("need at least one cycle")
        if not 0 <= self.split <= 1:
            raise ConfigurationError("split ratio must lie in [0, 1]")
        if self.od0 <= 0 or self.od_tau <= 0:
            raise ConfigurationError("OD0 and its decay time must be positive")
        if self.emission not in ("uniform", "fixed"):
            raise ConfigurationError("emission must be 'uniform' or 'fixed'")
        if self.forced_pairs is not None and self.forced_pairs < 0:
            raise ConfigurationError("forced pair number must be non-negative")
        for key in ("S", "AS"):
            if key not in self.channels:
                raise ConfigurationError(f"missing channel model {key!r}")

    def replace(self, **changes) -> "SourceConfig":
        return replace(self, **changes)

    @property
    def window_mean(self) -> float:
        return self.pair_rate * self.schedule.window_length

    def to_dict(self) -> dict:
        doc = {
            "pair_rate": self.pair_rate,
            "pump_power": self.pump_power,
            "slow_light_offset": self.slow_light_offset,
            "n_cycles": self.n_cycles,
            "od0": self.od0,
            "od_tau": self.od_tau,
            "rate_follows_od": self.rate_follows_od,
            "od_range": list(self.od_range) if self.od_range else None,
            "split": self.split,
            "dead_time": self.dead_time,
            "thermal": self.thermal,
            "forced_pairs": self.forced_pairs,
            "emission": self.emission,
            "seed": self.seed,
            "schedule": asdict(self.schedule),
            "channels": {
                k: {"efficiency": c.efficiency, "base_rate": c.base_rate, "pump_slope": c.pump_slope}
                for k, c in self.channels.items()
            },
            "delay": {"tau": self.delay.tau.tolist(), "prob": self.delay.prob.tolist(), "width": self.delay.width},
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SourceConfig":
        doc = dict(doc)
        if "schedule" in doc:
            doc["schedule"] = Schedule(**doc["schedule"])
        if "channels" in doc:
            doc["channels"] = {k: ChannelModel(**v) for k, v in doc["channels"].items()}
        if "delay" in doc:
            d = doc["delay"]
            doc["delay"] = DelayTable(np.asarray(d["tau"]), np.asarray(d["prob"]), d.get("width", 0.0))
        if doc.get("od_range") is not None:
            doc["od_range"] = tuple(doc["od_range"])
        known = set(cls.__dataclass_fields__) - {"rate_map"}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown source parameters: {sorted(unknown)}")
        return cls(**doc)


@dataclass
class TagStream:
    """Detection events sorted by (cycle, time).

    ``channel`` holds indices into ``CHANNELS``.
    """

    channel: np.ndarray
    time_ps: np.ndarray
    window: np.ndarray
    cycle: np.ndarray
    schedule: Schedule = field(default_factory=Schedule)
    n_cycles: int = 1
    selected_windows: np.ndarray | None = None  # window indices acquired per cycle; None = all

    def __post_init__(self):
        if self.selected_windows is not None:
            self.selected_windows = np.asarray(self.selected_windows, dtype=np.int64)
        self.channel = np.asarray(self.channel, dtype=np.int8)
        self.time_ps = np.asarray(self.time_ps, dtype=np.int64)
        self.window = np.asarray(self.window, dtype=np.int32)
        self.cycle = np.asarray(self.cycle, dtype=np.int32)
        n = self.channel.size
        if not (self.time_ps.size == self.window.size == self.cycle.size == n):
            raise ConfigurationError("tag arrays must have equal length")

    def __len__(self) -> int:
        return int(self.channel.size)

    @property
    def windows_per_cycle(self) -> int:
        if self.selected_windows is None:
            return self.schedule.windows_per_cycle
        return int(self.selected_windows.size)

    @property
    def n_windows(self) -> int:
        """Number of acquired windows, including those without any tag."""
        return self.n_cycles * self.windows_per_cycle

    def _like(self, channel, time_ps, window, cycle, n_cycles=None) -> "TagStream":
        return TagStream(channel, time_ps, window, cycle, self.schedule,
                         self.n_cycles if n_cycles is None else n_cycles, self.selected_windows)

    @classmethod
    def empty(cls, schedule: Schedule | None = None, n_cycles: int = 1) -> "TagStream":
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z, schedule or Schedule(), n_cycles)

    def sort(self) -> "TagStream":
        order = np.lexsort((self.channel, self.time_ps, self.cycle))
        return self._like(self.channel[order], self.time_ps[order], self.window[order], self.cycle[order])

    def select(self, mask) -> "TagStream":
        mask = np.asarray(mask)
        return self._like(self.channel[mask], self.time_ps[mask], self.window[mask], self.cycle[mask])

    def split_cycles(self, n_chunks: int) -> list["TagStream"]:
        """Partition into chunks of whole cycles; window statistics stay exact."""
        bounds = np.linspace(0, self.n_cycles, n_chunks + 1).round().astype(int)
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            if hi <= lo:
                continue
            mask = (self.cycle >= lo) & (self.cycle < hi)
            out.append(self._like(self.channel[mask], self.time_ps[mask], self.window[mask],
                                  self.cycle[mask] - lo, hi - lo))
        return out

    def channel_mask(self, *names: str) -> np.ndarray:
        codes = [CHANNELS.index(n) for n in names]
        return np.isin(self.channel, codes)

    def counts(self) -> dict:
        return {name: int(np.count_nonzero(self.channel == i)) for i, name in enumerate(CHANNELS)}

    def absolute_ps(self) -> np.ndarray:
        """Timestamps on a single axis, with cycles laid end to end."""
        span = int(self.schedule.window_start_ps(self.schedule.windows_per_cycle))
        return self.cycle.astype(np.int64) * span + self.time_ps

    def offset_ps(self) -> np.ndarray:
        """Time since the start of each tag's SFWM window."""
        return self.time_ps - self.schedule.window_start_ps(self.window)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["channel", "time_ps", "window", "cycle"])
            names = np.array(CHANNELS)[self.channel]
            writer.writerows(zip(names, self.time_ps.tolist(), self.window.tolist(), self.cycle.tolist()))

    @classmethod
    def from_csv(cls, path: str | Path, schedule: Schedule | None = None, n_cycles: int | None = None) -> "TagStream":
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != ["channel", "time_ps", "window", "cycle"]:
                raise ConfigurationError(f"unexpected tag file header: {header}")
            rows = list(reader)
        lookup = {n: i for i, n in enumerate(CHANNELS)}
        try:
            channel = np.array([lookup[r[0]] for r in rows], dtype=np.int8)
            time_ps = np.array([int(r[1]) for r in rows], dtype=np.int64)
            window = np.array([int(r[2]) for r in rows], dtype=np.int32)
            cycle = np.array([int(r[3]) for r in rows], dtype=np.int32)
        except (KeyError, ValueError, IndexError) as exc:
            raise ConfigurationError(f"malformed tag record: {exc}") from None
        if n_cycles is None:
            n_cycles = int(cycle.max()) + 1 if cycle.size else 1
        stream = cls(channel, time_ps, window, cycle, schedule or Schedule(), n_cycles)
        if len(stream):
            if window.min() < 0 or window.max() >= stream.schedule.windows_per_cycle or cycle.min() < 0:
                raise ConfigurationError("window or cycle index outside the schedule")
            off = stream.offset_ps()
            if off.min() < 0 or off.max() >= stream.schedule.window_ps:
                raise ConfigurationError("tag time lies outside its SFWM window")
        return stream


def cycle_rng(seed: int, cycle: int) -> np.random.Generator:
    """Counter-based generator for one cycle; independent of processing order."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(cycle,))))


def od_schedule(config: SourceConfig):
    """Optical depth and relative pair rate for every window of a cycle.

    Returns ``(od, rate_scale, selected)`` arrays of length ``windows_per_cycle``.
    """
    sched = config.schedule
    t = np.arange(sched.windows_per_cycle) * sched.period
    od = config.od0 * np.exp(-t / config.od_tau)
    if config.rate_follows_od:
        fmap = config.rate_map or (lambda x: np.asarray(x, dtype=float))
        scale = np.asarray(fmap(od), dtype=float) / float(fmap(np.array([config.od0]))[0])
    else:
        scale = np.ones_like(od)
    if config.od_range is None:
        selected = np.ones(od.size, dtype=bool)
    else:
        lo, hi = config.od_range
        selected = (od >= lo) & (od <= hi)
    return od, scale, selected


def duty_cycle(config: SourceConfig, selected: np.ndarray | int | None = None) -> float:
    """Selected SFWM acquisition time divided by the wall-clock cycle time."""
    sched = config.schedule
    if selected is None:
        selected = od_schedule(config)[2]
    count = int(selected) if np.ndim(selected) == 0 else int(np.count_nonzero(selected))
    return count * sched.window_length / sched.cycle_time


def _route(rng, n, split):
    return (rng.random(n) >= split).astype(np.int8)


def _dead_time_filter(times: np.ndarray, dead_ps: int) -> np.ndarray:
    keep = np.ones(times.size, dtype=bool)
    last = None
    for i, t in enumerate(times):
        if last is not None and t - last < dead_ps:
            keep[i] = False
        else:
            last = t
    return keep


def _generate_cycle(config: SourceConfig, cycle: int, scale: np.ndarray, selected: np.ndarray):
    rng = cycle_rng(config.seed, cycle)
    sched = config.schedule
    windows = np.flatnonzero(selected)
    n_win = windows.size
    w_ps = sched.window_ps
    start = sched.window_start_ps(windows)

    mean = config.window_mean * scale[windows]
    if config.forced_pairs is not None:
        pairs = np.full(n_win, config.forced_pairs, dtype=np.int64)
    elif config.thermal:
        pairs = rng.geometric(1.0 / (1.0 + mean)) - 1
    else:
        pairs = rng.poisson(mean)
    total = int(pairs.sum())
    pair_window = np.repeat(np.arange(n_win), pairs)

    if config.emission == "uniform":
        s_off = rng.random(total) * sched.window_length
    else:
        s_off = np.zeros(total)
    tau = config.delay.sample(rng, total) + config.slow_light_offset
    as_off = s_off + tau

    ch_s, ch_as = config.channels["S"], config.channels["AS"]
    s_keep = rng.random(total) < ch_s.efficiency
    as_keep = rng.random(total) < ch_as.efficiency

    chans, offs, wins = [], [], []

    def add(offsets, win_idx, base_channel):
        code = base_channel + _route(rng, offsets.size, config.split)
        chans.append(code)
        offs.append(offsets)
        wins.append(win_idx)

    add(s_off[s_keep], pair_window[s_keep], 0)
    add(as_off[as_keep], pair_window[as_keep], 2)

    for base, ch in ((0, ch_s), (2, ch_as)):
        rate = ch.rate(config.pump_power)
        if rate > 0:
            k = rng.poisson(rate * sched.window_length, size=n_win)
            idx = np.repeat(np.arange(n_win), k)
            add(rng.random(idx.size) * sched.window_length, idx, base)

    channel = np.concatenate(chans)
    off_ps = np.floor(np.concatenate(offs) * PS).astype(np.int64)
    win_idx = np.concatenate(wins)
    # detectors are gated to the SFWM window
    inside = (off_ps >= 0) & (off_ps < w_ps)
    channel, off_ps, win_idx = channel[inside], off_ps[inside], win_idx[inside]
    time_ps = start[win_idx] + off_ps
    window = windows[win_idx]

    order = np.lexsort((channel, time_ps))
    channel, time_ps, window = channel[order], time_ps[order], window[order]
    if config.dead_time > 0:
        dead_ps = round(config.dead_time * PS)
        keep = np.ones(channel.size, dtype=bool)
        for code in range(len(CHANNELS)):
            sel = np.flatnonzero(channel == code)
            keep[sel] = _dead_time_filter(time_ps[sel], dead_ps)
        channel, time_ps, window = channel[keep], time_ps[keep], window[keep]
    return channel, time_ps, window


def generate_stream(config: SourceConfig, cycles=None, executor=None) -> TagStream:
    """Simulate detected tags for ``config.n_cycles`` cycles (or a subset).

    Each cycle draws from its own substream, so results do not depend on
    ``executor`` (any object with a ``map`` method) or on the cycle subset order.
    """
    cycles = range(config.n_cycles) if cycles is None else list(cycles)
    _, scale, selected = od_schedule(config)
    mapper = executor.map if executor is not None else map
    parts = list(mapper(lambda c: (c, _generate_cycle(config, c, scale, selected)), cycles))
    parts.sort(key=lambda item: item[0])
    sel_idx = None if config.od_range is None else np.flatnonzero(selected)
    if not parts:
        empty = TagStream.empty(config.schedule, config.n_cycles)
        empty.selected_windows = sel_idx
        return empty
    channel = np.concatenate([p[1][0] for p in parts])
    time_ps = np.concatenate([p[1][1] for p in parts])
    window = np.concatenate([p[1][2] for p in parts])
    cycle = np.concatenate([np.full(p[1][0].size, p[0], dtype=np.int32) for p in parts])
    # a subset of cycles keeps its original cycle ids but counts only its own windows
    n_cycles = len(parts)
    return TagStream(channel, time_ps, window, cycle, config.schedule, n_cycles, sel_idx)
