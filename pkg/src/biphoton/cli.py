"""Command-line entry point: ``biphoton <subcommand> ...``.

Every subcommand writes its outputs into ``--out`` (a directory) together
with a ``*.json`` sidecar echoing the configuration that produced them.
Outputs depend only on the configuration and the seed.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from . import __version__
from .analysis import (
    RateCorrections,
    auto_correlation,
    cauchy_schwarz,
    cross_correlation,
    heralded_autocorrelation,
    rates_and_gsb,
)
from .errors import BiphotonError
from .montecarlo import SourceConfig, TagStream, duty_cycle, generate_stream, od_schedule
from .noise_model import NoiseModelParams, fit_alpha, gsb_at_g2
from .pipeline import (
    DEFAULT_SPECTRUM,
    GRID_EFFICIENCY,
    GRID_NOISE_RATES,
    GRID_PAIR_RATES,
    closed_loop_cell,
    closest_cell,
    spectrum_summary,
    waveform_delay,
)
from .spectrum import SfwmParams
from .zeeman import MODES, SimConfig, run_ensemble

log = logging.getLogger("biphoton")

# target peak cross-correlation for the single-cell recipes (fig2, fig3)
FIG2_TARGET_G2 = 19.7


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _read_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise BiphotonError(f"{path}: expected a JSON object")
    return doc


def _write_json(path: Path, doc: dict) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n")


def _jsonable(x):
    if isinstance(x, (np.floating, np.integer)):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, complex):
        return [x.real, x.imag]
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _write_table(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    keys = list(rows[0])
    lines = [",".join(keys)]
    for row in rows:
        lines.append(",".join(_fmt(row[k]) for k in keys))
    path.write_text("\n".join(lines) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _out_dir(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _executor(threads: int):
    return ThreadPoolExecutor(max_workers=threads) if threads > 1 else nullcontext(None)


def _spectrum_params(args) -> tuple[SfwmParams, dict]:
    doc = dict(DEFAULT_SPECTRUM)
    doc.update(_read_json(getattr(args, "spectrum_config", None) or getattr(args, "config", None)))
    for key in ("od", "omega_c_gamma", "gamma12_gamma", "detuning_gamma_d2", "pump_power_nw"):
        value = getattr(args, key, None)
        if value is not None:
            doc[key] = value
    return SfwmParams.from_dict(doc), doc


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_spectrum(args) -> int:
    params, doc = _spectrum_params(args)
    spectrum, waveform, summary = spectrum_summary(params)
    out = _out_dir(args.out)
    delta_mhz = spectrum.delta / (2 * np.pi) / 1e6
    inten = spectrum.intensity
    np.savetxt(out / "spectrum.csv", np.column_stack([delta_mhz, inten, inten / inten.max()]), delimiter=",",
               header="delta_mhz,intensity,normalized", comments="", fmt="%.10g")
    keep = (waveform.tau >= -50e-9) & (waveform.tau <= 400e-9)
    np.savetxt(out / "waveform.csv",
               np.column_stack([waveform.tau[keep] * 1e9, waveform.psi2[keep], waveform.normalized()[keep]]),
               delimiter=",", header="tau_ns,psi2,normalized", comments="", fmt="%.10g")
    row = {"od": doc["od"], "omega_c_gamma": doc.get("omega_c_gamma", float("nan"))}
    row.update(summary.as_dict())
    _write_table(out / "summary.csv", [row])
    _write_json(out / "spectrum.json", {"config": doc, "summary": summary.as_dict()})
    print(f"spectral FWHM {summary.fwhm_mhz:.3f} MHz (x 2pi), characteristic time "
          f"{summary.characteristic_time_ns:.2f} ns")
    return 0


def cmd_simulate_zeeman(args) -> int:
    doc = _read_json(args.config)
    for key in ("trajectories", "seed", "duration", "z_nodes"):
        value = getattr(args, key)
        if value is not None:
            doc[key] = value
    config = SimConfig.from_dict(doc)
    out = _out_dir(args.out)
    with _executor(args.threads) as pool:
        result = run_ensemble(config, executor=pool, keep_trajectories=True)
    header = ["t"] + [f"abs2_{m}" for m in MODES] + [f"arg_{m}" for m in MODES]
    for i, traj in enumerate(result.trajectories):
        data = np.column_stack([traj.t, np.abs(traj.output) ** 2, np.angle(traj.output)])
        np.savetxt(out / f"trajectory_{i:03d}.csv", data, delimiter=",", header=",".join(header), comments="",
                   fmt="%.10g")
    summary = result.summary()
    _write_json(out / "summary.json", {
        "config": config.to_dict(),
        "summary": summary,
        "extinction_s_db": result.extinction_s,
        "extinction_as_db": result.extinction_as,
        "gain_s": result.gain_s,
        "gain_as": result.gain_as,
    })
    print(f"S vs pump {summary['extinction_s_db_mean']:.2f} dB, AS vs control "
          f"{summary['extinction_as_db_mean']:.2f} dB over {summary['trajectories']} trajectories")
    return 0


def _source_config(args) -> tuple[SourceConfig, dict]:
    doc = _read_json(args.config)
    spec = doc.pop("delay_from_spectrum", None)
    if spec is not None and "delay" in doc:
        raise BiphotonError("give either 'delay' or 'delay_from_spectrum', not both")
    for key, attr in (("seed", "seed"), ("n_cycles", "cycles"), ("pair_rate", "pair_rate")):
        value = getattr(args, attr, None)
        if value is not None:
            doc[key] = value
    config = SourceConfig.from_dict(doc)
    if spec is not None:
        params = SfwmParams.from_dict({**DEFAULT_SPECTRUM, **spec})
        config = config.replace(delay=waveform_delay(params))
    return config, config.to_dict()


def cmd_generate_tags(args) -> int:
    config, doc = _source_config(args)
    out = _out_dir(args.out)
    with _executor(args.threads) as pool:
        tags = generate_stream(config, executor=pool)
    tags.to_csv(out / "tags.csv")
    _write_json(out / "source.json", {"config": doc, "n_windows": tags.n_windows, "counts": tags.counts()})
    print(f"{len(tags)} tags in {tags.n_windows} windows")
    return 0


def cmd_analyze(args) -> int:
    source = SourceConfig.from_dict(_read_json(args.source)["config"]) if args.source else SourceConfig()
    if args.od_range is not None:
        source = source.replace(od_range=tuple(args.od_range))
    n_cycles = source.n_cycles if args.source else None
    tags = TagStream.from_csv(args.tags, schedule=source.schedule, n_cycles=n_cycles)
    _, _, selected = od_schedule(source)
    if source.od_range is not None:
        tags = tags.select(selected[tags.window])
        tags.selected_windows = np.flatnonzero(selected)
    gate = tuple(args.gate_ps) if args.gate_ps else _default_gate(source)
    out = _out_dir(args.out)

    report: dict = {"config": {"source": source.to_dict(), "bin_ps": args.bin_ps, "span_ps": args.span_ps,
                               "gate_ps": list(gate), "od_range": args.od_range,
                               "bandwidth_mhz": args.bandwidth_mhz}}
    cross = cross_correlation(tags, args.bin_ps, args.span_ps)
    cross.to_csv(out / "cross.csv")
    g, e, d = cross.peak()
    report["cross_peak"] = {"g2": g, "error": e, "delay_ps": d}
    autos = {}
    for ch in ("S", "AS"):
        try:
            h = auto_correlation(tags, ch, args.bin_ps, args.span_ps)
            h.to_csv(out / f"auto_{ch}.csv")
            autos[ch] = h.value_at(0)
        except BiphotonError as exc:
            log.warning("auto-correlation of %s unavailable: %s", ch, exc)
    report["auto_zero"] = {k: {"g2": v[0], "error": v[1]} for k, v in autos.items()}
    if len(autos) == 2 and all(v[0] > 0 for v in autos.values()):
        r, r_err = cauchy_schwarz(g, autos["S"][0], autos["AS"][0], e, autos["S"][1], autos["AS"][1])
        report["cauchy_schwarz"] = {"R": r, "error": r_err}
    else:
        log.warning("Cauchy-Schwarz ratio unavailable: zero or missing autocorrelation")
    try:
        her = heralded_autocorrelation(tags, gate)
        np.savetxt(out / "heralded.csv", np.column_stack([her.n, her.counts]), delimiter=",", header="n,counts",
                   comments="", fmt="%d")
        report["heralded"] = {"g2_zero": her.g2_zero, "error": her.g2_zero_err, "heralded": her.heralded}
    except BiphotonError as exc:
        log.warning("heralded autocorrelation unavailable: %s", exc)
    if args.bandwidth_mhz is not None:
        capture = source.delay.bin_probability(gate[0] * 1e-12, gate[1] * 1e-12) if args.source else 1.0
        corr = RateCorrections(source.channels["S"].efficiency, source.channels["AS"].efficiency,
                               args.bandwidth_mhz, gate, duty_cycle(source, selected), capture_fraction=capture)
        report["rates"] = rates_and_gsb(tags, corr).as_dict()
    _write_json(out / "report.json", report)
    print(f"peak g2 {g:.3f} +- {e:.3f} at {d / 1000:.1f} ns")
    return 0


def _default_gate(source: SourceConfig) -> tuple[int, int]:
    if source.delay.tau.size > 1:
        lo, hi = source.delay.fwhm_gate()
        return int(round(lo * 1e12)), int(round(hi * 1e12))
    return 0, 48_000


def cmd_fit_noise(args) -> int:
    data = np.genfromtxt(args.data, delimiter=",", names=True)
    for col in ("gsb", "g2", "power_nw"):
        if col not in (data.dtype.names or ()):
            raise BiphotonError(f"{args.data}: missing column {col!r} (need gsb,g2,power_nw)")
    params = NoiseModelParams(tau_c=args.tau_c_ns * 1e-9)
    fit = fit_alpha(data["gsb"], data["g2"], data["power_nw"] * 1e-9, params)
    fitted = NoiseModelParams(fit.alpha, params.tau_c, args.gsbp_per_nw * 1e9 if args.gsbp_per_nw else None)
    crossing = gsb_at_g2(args.target_g2, fitted)
    out = _out_dir(args.out)
    _write_json(out / "fit.json", {
        "config": {"data": str(args.data), "tau_c_ns": args.tau_c_ns, "gsbp_per_nw": args.gsbp_per_nw,
                   "target_g2": args.target_g2},
        "alpha": fit.alpha, "alpha_err": fit.alpha_err, "n_points": fit.n_points, "cost": fit.cost,
        "gsb_at_target": crossing,
    })
    print(f"alpha = {fit.alpha:.3f} +- {fit.alpha_err:.3f}; g2 = {args.target_g2} at GSB {crossing:.4g}")
    return 0


def cmd_reproduce(args) -> int:
    params, spec = _spectrum_params(args)
    _, _, summary = spectrum_summary(params)
    delay = waveform_delay(params)
    gate = _default_gate(SourceConfig(delay=delay))
    out = _out_dir(args.out)
    config = {"figure": args.figure, "spectrum": spec, "cycles": args.cycles, "seed": args.seed,
              "efficiency": GRID_EFFICIENCY, "gate_ps": list(gate)}
    with _executor(args.threads) as pool:
        if args.figure in ("fig2", "fig3"):
            r, rn = closest_cell(delay, FIG2_TARGET_G2)
            cell = closed_loop_cell(delay, r, rn, GRID_EFFICIENCY, args.cycles, args.seed, herald_gate_ps=gate,
                                    executor=pool)
            config.update(pair_rate=r, noise_rate=rn)
            if args.figure == "fig2":
                cell.histogram.to_csv(out / "fig2_histogram.csv")
            else:
                her = cell.heralded
                base = her.fit[0] + her.fit[1] * her.n
                np.savetxt(out / "fig3_heralded.csv", np.column_stack([her.n, her.counts, base]), delimiter=",",
                           header="n,counts,baseline", comments="", fmt=["%d", "%d", "%.10g"])
            rows = [cell.row()]
        else:
            rows = []
            for i, rate in enumerate(GRID_PAIR_RATES):
                cell = closed_loop_cell(delay, rate, GRID_NOISE_RATES[1], GRID_EFFICIENCY, args.cycles,
                                        args.seed + i, executor=pool)
                row = {"gsb": rate / summary.fwhm_mhz}
                row.update(cell.row())
                rows.append(row)
    _write_table(out / f"{args.figure}_table.csv", rows)
    _write_json(out / f"{args.figure}.json", {"config": config, "rows": rows, "spectrum": summary.as_dict()})
    for row in rows:
        print(", ".join(f"{k}={_fmt(v)}" for k, v in row.items()))
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _spectrum_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--od", type=float, help="resonant optical depth of the AS transition")
    p.add_argument("--omega-c-gamma", type=float, help="control Rabi frequency in Gamma_D1")
    p.add_argument("--gamma12-gamma", type=float, help="ground-state decoherence in Gamma_D1")
    p.add_argument("--detuning-gamma-d2", type=float, help="pump detuning in Gamma_D2")
    p.add_argument("--pump-power-nw", type=float, help="pump power in nW")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="biphoton", description="SFWM biphoton source modelling and analysis.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--threads", type=int, default=1, help="worker threads for independent tasks")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    p = sub.add_parser("spectrum", help="biphoton spectrum and waveform")
    p.add_argument("--config", help="JSON with SFWM parameters")
    _spectrum_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("simulate-zeeman", help="stochastic Zeeman-resolved SFWM simulation")
    p.add_argument("--config", help="JSON with simulation settings")
    p.add_argument("--trajectories", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--duration", type=float, help="simulated time in 1/Gamma_D1")
    p.add_argument("--z-nodes", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate_zeeman)

    p = sub.add_parser("generate-tags", help="Monte Carlo time-tag stream")
    p.add_argument("--config", help="JSON with source settings (may hold 'delay_from_spectrum')")
    p.add_argument("--seed", type=int)
    p.add_argument("--cycles", type=int)
    p.add_argument("--pair-rate", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate_tags)

    p = sub.add_parser("analyze", help="correlation analysis of a tag stream")
    p.add_argument("--tags", required=True, help="CSV with channel,time_ps,window,cycle")
    p.add_argument("--source", help="source.json written by generate-tags")
    p.add_argument("--bin-ps", type=int, default=4000)
    p.add_argument("--span-ps", type=int, default=400_000)
    p.add_argument("--gate-ps", type=int, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--od-range", type=float, nargs=2, metavar=("LO", "HI"))
    p.add_argument("--bandwidth-mhz", type=float)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("fit-noise", help="fit the noise-model scaling factor")
    p.add_argument("--data", required=True, help="CSV with gsb,g2,power_nw columns")
    p.add_argument("--tau-c-ns", type=float, default=24.0)
    p.add_argument("--gsbp-per-nw", type=float, help="GSBP (pairs/s/MHz/nW) for the crossing search")
    p.add_argument("--target-g2", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fit_noise)

    p = sub.add_parser("reproduce", help="closed-loop reproduction recipes")
    p.add_argument("figure", choices=("fig2", "fig3", "fig4c"))
    p.add_argument("--cycles", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    _spectrum_flags(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s: %(message)s")
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    if args.threads < 1:
        print("error: --threads must be at least 1", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except (BiphotonError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
