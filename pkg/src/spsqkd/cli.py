"""Command-line front end: ``spsqkd <command> [options]``.

Every command writes its tables (csv) and summaries (JSON) into ``--out``
(default: ``$SPSQKD_OUTDIR`` or ``./spsqkd-out``) together with a
``metadata.json`` recording the resolved configuration, the seed and the
library versions.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import correlation as corr
from . import filteropt as fo
from . import keyrate as kr
from . import polarimetry as pol
from . import simulator as sim
from .errors import QkdError, ValidationError
from .timetag import ChannelId, PulseClock, read_stream, write_stream

OUTDIR_ENV = "SPSQKD_OUTDIR"
DEFAULT_OUTDIR = "spsqkd-out"
COMMANDS = ("simulate", "g2", "qber", "keyrate", "optimize", "benchmark", "monitor")


# --------------------------------------------------------------------------
# output helpers


def _jsonable(v):
    if isinstance(v, dict):
        return {str(k): _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return None if math.isnan(v) else v
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, ChannelId):
        return v.name
    return v


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(["" if isinstance(x, float) and math.isnan(x) else (repr(x) if isinstance(x, float) else x) for x in row])
    path.write_text(buf.getvalue())


def _versions() -> dict:
    return {"spsqkd": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _outdir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTDIR_ENV) or DEFAULT_OUTDIR)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _metadata(out: Path, command: str, config: dict, seed=None) -> None:
    _write_json(out / "metadata.json", {"command": command, "config": config, "seed": seed, "versions": _versions()})


# --------------------------------------------------------------------------
# parameter resolution


def _qkd_params(args) -> kr.QkdParams:
    p = kr.preset(args.preset)
    over = {}
    for name in ("mu", "g2", "p_dc", "e_detector", "eta_bob", "f_ec", "clock", "q", "sift_factor"):
        v = getattr(args, name, None)
        if v is not None:
            over[name] = v
    if getattr(args, "g2_from", None):
        over["g2"] = float(json.loads(Path(args.g2_from).read_text())["value"])
    if getattr(args, "qber_from", None):
        summary = json.loads(Path(args.qber_from).read_text())
        over["e_detector"] = float(summary["qber_" + args.qber_mode])
    if getattr(args, "clickrate_from", None):
        summary = json.loads(Path(args.clickrate_from).read_text())
        dark = summary["dark_rate_total_hz"] if args.subtract_darks else 0.0
        clock = over.get("clock", p.clock)
        eta = over.get("eta_bob", p.eta_bob)
        over["mu"] = kr.mu_from_clickrate(summary["click_rate_hz"], clock, eta, dark)
    p = p.replace(**over) if over else p
    if getattr(args, "eom", None):
        loss, dq = {"best": kr.EOM_BEST, "worst": kr.EOM_WORST}[args.eom]
        p = kr.apply_eom_scenario(p, loss, dq)
    return p


def _add_qkd_flags(sp):
    g = sp.add_argument_group("key-rate parameters")
    g.add_argument("--preset", default="this-work", choices=sorted(kr.PRESETS))
    g.add_argument("--mu", type=float)
    g.add_argument("--g2", type=float)
    g.add_argument("--p-dc", dest="p_dc", type=float, help="dark-count probability per pulse, all detectors")
    g.add_argument("--e-detector", dest="e_detector", type=float)
    g.add_argument("--eta-bob", dest="eta_bob", type=float)
    g.add_argument("--f-ec", dest="f_ec", type=float)
    g.add_argument("--clock", type=float, help="Hz")
    g.add_argument("--q", type=float, help="state preparation quality")
    g.add_argument("--sift-factor", dest="sift_factor", type=float)


def _source_params(args) -> sim.SourceParams:
    if args.config:
        params = sim.load_source_config(args.config)
    elif args.preset == "poissonian":
        params = sim.poissonian(args.mu if args.mu is not None else 0.1)
    else:
        kw = {}
        if args.mu is not None:
            kw["mu"] = args.mu
        if args.g2 is not None:
            kw["g2"] = args.g2
        params = sim.reference_scenario(**kw)
    over = {}
    for name in ("rho", "dark_rate", "lifetime", "channel_loss", "e_optical", "eta_bob"):
        v = getattr(args, name)
        if v is not None:
            over[name] = v
    if args.rate is not None:
        over["clock"] = PulseClock(args.rate)
    return params.replace(**over) if over else params


def _streams(paths):
    return [read_stream(p) for p in paths]


# --------------------------------------------------------------------------
# commands


def cmd_simulate(args) -> int:
    params = _source_params(args)
    states = [ChannelId.parse(c) for c in args.states]
    out = _outdir(args)
    ext = "csv" if args.format == "csv" else "ttg"
    seeds = np.random.SeedSequence(args.seed).generate_state(len(states))
    truth = {}
    files = []
    for s, seed in zip(states, seeds):
        stream = sim.simulate_run(params, s, args.pulses, int(seed))
        path = out / f"run_{s.name}.{ext}"
        write_stream(path, stream, args.format)
        files.append(path.name)
        gt = sim.true_statistics(params, s)
        truth[s.name] = {**gt.__dict__, "n_tags": len(stream)}
    _write_json(out / "ground_truth.json", truth)
    cfg = sim.source_to_config(params)
    cfg.update(states=args.states, pulses=args.pulses, format=args.format, files=files)
    _metadata(out, "simulate", cfg, args.seed)
    print(f"wrote {len(files)} run(s) to {out}")
    return 0


def cmd_g2(args) -> int:
    streams = _streams(args.streams)
    out = _outdir(args)
    hist = None
    for s in streams:
        h = corr.g2_histogram(s, args.bin_width, args.side_peaks)
        hist = h if hist is None else hist + h
    val = corr.integrated_g2(hist)
    _write_csv(out / "g2_histogram.csv", ["delay_ps", "coincidences"], zip(hist.delays.tolist(), hist.coincidences.tolist()))
    summary = {
        "value": val.value,
        "stderr": val.stderr,
        "center_counts": val.center_counts,
        "mean_side_counts": val.mean_side_counts,
        "peak_areas": hist.peak_areas().tolist(),
        "bin_width_ps": args.bin_width,
        "n_side_peaks": args.side_peaks,
    }
    _write_json(out / "g2.json", summary)
    _metadata(out, "g2", {"streams": args.streams, "bin_width": args.bin_width, "n_side_peaks": args.side_peaks})
    print(f"g2(0) = {val.value:.4f} +/- {val.stderr:.4f}")
    return 0


def _parse_window(text: str) -> pol.FilterWindow:
    try:
        dt, tc = (int(x) for x in text.split(":"))
    except ValueError:
        raise ValidationError(f"bad window {text!r}, expected WIDTH_PS:CENTER_PS") from None
    return pol.FilterWindow(dt, tc)


def cmd_qber(args) -> int:
    runs = pol.as_runs(_streams(args.streams))
    out = _outdir(args)
    index = pol.PhaseIndex(runs)
    window = _parse_window(args.window) if args.window else None
    matrix = pol.build_matrix(runs, window, index)
    stats = pol.qber_stats(matrix)
    names = [c.name for c in ChannelId]
    _write_csv(out / "polarization_matrix.csv", ["input_state", *[f"{n}_hz" for n in names]],
               ([s.name, *map(float, matrix.rates[s])] for s in ChannelId))
    summary = {f"qber_{s.name}": stats.qber[s] for s in ChannelId}
    summary.update(
        qber_average=stats.average,
        qber_worst=stats.qber_for("worst"),
        click_rate_hz=float(np.mean(matrix.rates.sum(axis=1))),
        dark_rate_total_hz=args.dark_rate,
        acquisition_s=matrix.acquisition.tolist(),
        window=None if window is None else {"dt_ps": window.width, "tc_ps": window.center},
    )
    if window is not None:
        ws = pol.window_stats(runs, window, args.dark_rate, index)
        summary.update(sifted_fraction=ws.stats.sifted_fraction, signal_fraction=ws.signal_fraction,
                       signal_qber_worst=ws.signal_worst, p_dc_window=ws.p_dc)
    _write_json(out / "qber.json", summary)
    _metadata(out, "qber", {"streams": args.streams, "window": args.window, "dark_rate": args.dark_rate})
    print(f"QBER worst {stats.worst:.4%}, average {stats.average:.4%}")
    return 0


def _params_dict(p: kr.QkdParams) -> dict:
    return dict(p.__dict__)


def cmd_keyrate(args) -> int:
    params = _qkd_params(args)
    losses = kr.parse_loss_range(args.loss)
    out = _outdir(args)
    curve = kr.rate_loss_curve(params, losses)
    _write_csv(
        out / "rate_loss.csv",
        ["loss_db", "p_click", "p_m", "A", "qber", "s_sift_per_s", "s_inf_per_s", "s_inf_per_pulse"],
        ([r.loss_db, r.p_click, r.p_m, r.A, r.qber, r.s_sift, r.s_inf, r.s_inf_per_pulse] for r in curve.points),
    )
    summary = {"params": _params_dict(params)}
    if args.tolerable:
        summary["tolerable_loss_db"] = kr.tolerable_loss(params)
        print(f"tolerable loss: {summary['tolerable_loss_db']:.2f} dB")
    _write_json(out / "keyrate.json", summary)
    _metadata(out, "keyrate", {"params": _params_dict(params), "loss": args.loss, "eom": args.eom})
    return 0


def _parse_grid(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.lower().split("x"))
    except ValueError:
        raise ValidationError(f"bad grid {text!r}, expected N_DTxN_TC") from None
    return a, b


def cmd_optimize(args) -> int:
    runs = pol.as_runs(_streams(args.streams))
    params = _qkd_params(args)
    n_dt, n_tc = _parse_grid(args.grid)
    period = next(iter(runs.values())).clock.period
    grid = fo.GridSpec(n_dt, n_tc, (min(args.min_dt, period), period))
    losses = kr.parse_loss_range(args.loss)
    out = _outdir(args)
    table = fo.WindowTable(runs, params, grid)
    res = fo.optimized_rate_loss(runs, params, losses, table=table)
    (out / "optimized_rate_loss.csv").write_text(res.to_csv())
    summary = {"receiver_filter": res.summary()}
    for L in args.heatmap_loss:
        hm = table.heatmap(L)
        tag = f"{L:g}dB"
        (out / f"heatmap_{tag}.csv").write_text(hm.to_csv())
        (out / f"heatmap_{tag}.json").write_text(hm.to_json() + "\n")
    if args.g2_filter:
        g2map = fo.g2_heatmap(runs, grid)
        (out / "g2_heatmap.csv").write_text(g2map.to_csv())
        (out / "g2_heatmap.json").write_text(g2map.to_json() + "\n")
        cells = fo.g2_filtered_cells(table, g2map, args.alice_loss)
        res2 = fo.optimized_rate_loss(runs, params, losses, table=table, cells=cells)
        (out / "g2_filtered_rate_loss.csv").write_text(res2.to_csv())
        summary["g2_filter"] = {**res2.summary(), "alice_loss_db": args.alice_loss}
    _write_json(out / "optimization.json", summary)
    _metadata(out, "optimize", {"streams": args.streams, "params": _params_dict(params), "loss": args.loss,
                                "grid": grid.to_dict(period), "g2_filter": args.g2_filter, "alice_loss": args.alice_loss})
    print(f"cutoff {res.unoptimized_cutoff:.2f} dB -> {res.optimized_cutoff:.2f} dB (gain {res.gain_db:.2f} dB)")
    return 0


def cmd_benchmark(args) -> int:
    names = list(kr.BENCHMARK_PRESETS) if args.presets == "all" else [n.strip() for n in args.presets.split(",")]
    losses = kr.parse_loss_range(args.loss)
    out = _outdir(args)
    summary = {}
    for name in names:
        p = kr.preset(name)
        if args.f_ec is not None:
            p = p.replace(f_ec=args.f_ec)
        curve = kr.rate_loss_curve(p, losses)
        _write_csv(out / f"benchmark_{name}.csv", ["loss_db", "s_inf_per_pulse", "s_inf_per_s"],
                   ([r.loss_db, r.s_inf_per_pulse, r.s_inf] for r in curve.points))
        summary[name] = {"tolerable_loss_db": kr.tolerable_loss(p), "params": _params_dict(p)}
        print(f"{name:16s} tolerable loss {summary[name]['tolerable_loss_db']:6.2f} dB")
    _write_json(out / "benchmark.json", summary)
    _metadata(out, "benchmark", {"presets": names, "loss": args.loss, "f_ec": args.f_ec})
    return 0


def cmd_monitor(args) -> int:
    stream = read_stream(args.stream)
    out = _outdir(args)
    series = corr.monitor_blocks(stream, args.block, args.reference, args.bin_width, args.side_peaks)
    _write_csv(out / "monitor.csv", ["start_s", "click_rate_hz", "qber", "g2", "g2_stderr"],
               zip(series.starts.tolist(), series.click_rate.tolist(), series.qber.tolist(),
                   series.g2_values().tolist(), series.g2_stderrs().tolist()))
    _write_json(out / "monitor.json", {"block_s": args.block, "dropped_partial": series.dropped_partial, **series.summary})
    _metadata(out, "monitor", {"stream": args.stream, "block": args.block, "reference": args.reference,
                               "bin_width": args.bin_width, "n_side_peaks": args.side_peaks})
    print(f"{series.summary['n_blocks']} blocks, g2 relative spread {series.summary['g2_relative_spread']:.3f}")
    return 0


# --------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError(f"must be a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError(f"must be positive, got {v}")
    return v


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _states(text: str) -> str:
    up = text.upper()
    if not up or any(c not in "HVDA" for c in up) or len(set(up)) != len(up):
        raise argparse.ArgumentTypeError(f"states must be distinct letters from HVDA, got {text!r}")
    return up


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spsqkd", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, help):
        sp = sub.add_parser(name, help=help, description=help)
        sp.add_argument("--out", help=f"output directory (default ${OUTDIR_ENV} or ./{DEFAULT_OUTDIR})")
        return sp

    sp = add("simulate", "simulate time-tag streams, one per input state")
    sp.add_argument("--config", help="JSON source config (schema 1)")
    sp.add_argument("--preset", choices=("reference", "poissonian"), default="reference")
    sp.add_argument("--pulses", type=_positive_int, required=True)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--states", type=_states, default="HVDA")
    sp.add_argument("--format", choices=("binary-v1", "csv"), default="binary-v1")
    sp.add_argument("--mu", type=float)
    sp.add_argument("--g2", type=float)
    sp.add_argument("--rho", type=float)
    sp.add_argument("--dark-rate", dest="dark_rate", type=float, help="Hz per detector")
    sp.add_argument("--lifetime", type=float, help="ps")
    sp.add_argument("--channel-loss", dest="channel_loss", type=float, help="dB")
    sp.add_argument("--e-optical", dest="e_optical", type=float)
    sp.add_argument("--eta-bob", dest="eta_bob", type=float)
    sp.add_argument("--rate", type=float, help="repetition rate, Hz")
    sp.set_defaults(func=cmd_simulate)

    sp = add("g2", "integrated g2(0) from cross-channel coincidences")
    sp.add_argument("streams", nargs="+")
    sp.add_argument("--bin-width", dest="bin_width", type=int, default=1000, help="ps")
    sp.add_argument("--side-peaks", dest="side_peaks", type=int, default=corr.DEFAULT_SIDE_PEAKS)
    sp.set_defaults(func=cmd_g2)

    sp = add("qber", "polarization matrix and QBER from four labelled runs")
    sp.add_argument("streams", nargs=4)
    sp.add_argument("--window", help="WIDTH_PS:CENTER_PS temporal acceptance window")
    sp.add_argument("--dark-rate", dest="dark_rate", type=float, default=0.0, help="total Hz, all detectors")
    sp.set_defaults(func=cmd_qber)

    sp = add("keyrate", "GLLP key rate versus loss")
    _add_qkd_flags(sp)
    sp.add_argument("--loss", default="0:30:0.25", help="start:stop:step in dB")
    sp.add_argument("--tolerable", action="store_true", help="solve for the tolerable loss")
    sp.add_argument("--eom", choices=("best", "worst"), help="dynamic state preparation scenario")
    sp.add_argument("--g2-from", dest="g2_from", help="g2.json from the g2 command")
    sp.add_argument("--qber-from", dest="qber_from", help="qber.json from the qber command")
    sp.add_argument("--qber-mode", dest="qber_mode", default="worst", choices=("worst", "average", "H", "V", "D", "A"))
    sp.add_argument("--clickrate-from", dest="clickrate_from", help="qber.json; derive mu from its click rate")
    sp.add_argument("--subtract-darks", dest="subtract_darks", action="store_true")
    sp.set_defaults(func=cmd_keyrate)

    sp = add("optimize", "2D temporal-filter optimization")
    sp.add_argument("streams", nargs=4)
    _add_qkd_flags(sp)
    sp.add_argument("--loss", default="0:30:1")
    sp.add_argument("--grid", default="50x50", help="N_DTxN_TC")
    sp.add_argument("--min-dt", dest="min_dt", type=int, default=fo.MIN_WINDOW, help="ps")
    sp.add_argument("--heatmap-loss", dest="heatmap_loss", type=_float_list, default=[], help="comma-separated dB")
    sp.add_argument("--g2-filter", dest="g2_filter", action="store_true", help="also evaluate Alice-side g2 filtering")
    sp.add_argument("--alice-loss", dest="alice_loss", type=float, default=3.0, help="modulator insertion loss, dB")
    sp.set_defaults(func=cmd_optimize)

    sp = add("benchmark", "rate-loss curves for the literature presets")
    sp.add_argument("--presets", default="all", help="'all' or comma-separated names")
    sp.add_argument("--loss", default="0:30:0.25")
    sp.add_argument("--f-ec", dest="f_ec", type=float)
    sp.set_defaults(func=cmd_benchmark)

    sp = add("monitor", "block-wise click rate, QBER and g2")
    sp.add_argument("stream")
    sp.add_argument("--block", type=_positive_float, default=10.0, help="s")
    sp.add_argument("--reference", help="input state for the QBER (default: stream label)")
    sp.add_argument("--bin-width", dest="bin_width", type=int, default=1000)
    sp.add_argument("--side-peaks", dest="side_peaks", type=int, default=corr.DEFAULT_SIDE_PEAKS)
    sp.set_defaults(func=cmd_monitor)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except QkdError as exc:
        print(f"spsqkd {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"spsqkd {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
