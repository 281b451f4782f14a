"""``qlink`` command-line workbench.

Exit codes: 0 success, 2 configuration or precondition error, 3 input-data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from qlink import coincidence as co
from qlink import decoy, phase, polarization as pol
from qlink.calibration import CalibrationError, calibrate, gaussian_prior, skr_model
from qlink.config import ConfigError, ExperimentConfig, _defaults, load_config
from qlink.timetags import TagFileError, TagFileWriter, read_tags

log = logging.getLogger("qlink")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class InputDataError(RuntimeError):
    pass


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _seed(args, cfg: ExperimentConfig | None) -> int:
    seed = args.seed if args.seed is not None else (cfg.seed if cfg else None)
    if seed is None:
        raise ConfigError("this command is randomized: pass --seed or set [run] seed")
    if seed < 0:
        raise ConfigError("seed must be non-negative")
    return seed


def _jobs(args, cfg: ExperimentConfig | None) -> int:
    return args.jobs if args.jobs is not None else (cfg.n_jobs if cfg else 1)


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _g(x) -> float | None:
    """JSON-friendly float rounded to 12 significant digits."""
    if x is None:
        return None
    x = float(x)
    if not math.isfinite(x):
        return str(x)
    return float(format(x, ".12g"))


# --- key rate ---------------------------------------------------------------------

def cmd_skr(args, cfg: ExperimentConfig) -> int:
    cfg.require("protocol")
    params, ch, det = cfg.protocol(), cfg.channel(), cfg.detector()
    length = ch.length
    eta = decoy.link_eta(ch, length, det, cfg.receiver_efficiency)
    r = decoy.secret_key_rate(params, eta)
    curve = decoy.SkrCurve(np.array([length]), [r], params.clock_rate)
    out = _out_dir(args)
    with open(out / "skr.csv", "w", newline="") as fh:
        curve.to_csv(fh)
    sweep = cfg.sections.get("sweep", _defaults("sweep"))
    ranking = decoy.optimize_flux(sweep["flux_candidates"], params, eta)
    with open(out / "flux.csv", "w", newline="") as fh:
        fh.write("mu_signal,mu_decoy,skr_bits_per_clock\n")
        for m, n, rate in ranking.table:
            fh.write(f"{m:.12g},{n:.12g},{rate:.12g}\n")
    print(f"length_km       {length:g}")
    print(f"eta             {eta:.6e}")
    print(f"Y0              {params.y0:.6e}")
    print(f"Q_mu, E_mu      {r.signal.gain:.6e}, {r.signal.qber:.6f}")
    print(f"Q_nu, E_nu      {r.decoy.gain:.6e}, {r.decoy.qber:.6f}")
    print(f"Y1_lower        {r.y1_lower:.6e}")
    print(f"e1_upper        {r.e1_upper:.6f}" + (" (unbounded)" if r.e1_unbounded else ""))
    print(f"Q1              {r.q1:.6e}")
    print(f"SKR             {r.rate:.6e} bit/clock, {r.rate * params.clock_rate:.6e} bit/s")
    print(f"best flux pair  {ranking.best[0]:g}/{ranking.best[1]:g}")
    return EXIT_OK


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    cfg.require("protocol")
    sweep = cfg.sections.get("sweep", _defaults("sweep"))
    l_min = args.lmin if args.lmin is not None else sweep["l_min"]
    l_max = args.lmax if args.lmax is not None else sweep["l_max"]
    step = args.step if args.step is not None else sweep["step"]
    if l_min < 0 or l_min > l_max or step <= 0:
        raise ConfigError(f"invalid sweep range: l_min={l_min}, l_max={l_max}, step={step}")
    curve = decoy.sweep_distance(cfg.protocol(), cfg.channel(), cfg.detector(), l_min, l_max, step,
                                 cfg.receiver_efficiency, n_jobs=_jobs(args, cfg))
    out = _out_dir(args)
    with open(out / "fig5.csv", "w", newline="") as fh:
        curve.to_csv(fh)
    zc = curve.zero_crossing
    print(f"zero crossing: {'none' if zc is None else f'{zc:.1f} km'}")
    return EXIT_OK


def cmd_calibrate(args, cfg: ExperimentConfig) -> int:
    cfg.require("protocol", "calibrate")
    c = cfg.section("calibrate")
    targets = {}
    if c["target_skr"] is not None:
        targets["skr"] = c["target_skr"]
    if c["target_zero_crossing"] is not None:
        targets["zero_crossing"] = c["target_zero_crossing"]
    p = cfg.section("protocol")
    start = {"e_opt": p["e_opt"], "background_rate": p["background_rate"],
             "receiver_efficiency": p["receiver_efficiency"]}
    unknown = set(c["free"]) - set(start)
    if unknown:
        raise ConfigError(f"[calibrate] free: unknown parameter(s) {sorted(unknown)}")
    bounds = {name: c[f"bound_{name}"] for name in c["free"]}
    limits = {"e_opt": (0.0, 0.5), "background_rate": (0.0, math.inf), "receiver_efficiency": (0.0, 1.0)}
    for name, (lo, hi) in bounds.items():
        if lo < limits[name][0] or hi > limits[name][1]:
            raise ConfigError(f"bounds for {name} leave the physical range {limits[name]}")
    evaluate = skr_model(cfg.protocol(), cfg.channel(), cfg.detector(), p["n_detectors"],
                         c["target_length"])
    prior = None
    if "e_opt" in bounds and c["prior_weight"] > 0:
        prior = gaussian_prior("e_opt", c["prior_e_opt"], c["prior_weight"])
    result = calibrate(evaluate, targets, bounds, start, prior)

    calibrated = ExperimentConfig({k: dict(v) for k, v in cfg.sections.items()}, cfg.source)
    calibrated.sections["protocol"].update(result.values)
    comments = [
        "calibrated by `qlink calibrate`",
        f"source: {Path(cfg.source).name if cfg.source else '<string>'}",
        "free: " + ", ".join(f"{n} in [{lo:g}, {hi:g}]" for n, (lo, hi) in bounds.items()),
    ] + [f"target {k} = {v:.12g}, model {result.predictions[k]:.12g}, "
         f"relative residual {result.residuals[k]:+.3e}" for k, v in targets.items()]
    out = _out_dir(args)
    (out / "calibrated.ini").write_text(calibrated.to_ini(comments))
    _write_json(out / "calibration.json", {
        "values": {k: _g(v) for k, v in result.values.items()},
        "predictions": {k: _g(v) for k, v in result.predictions.items()},
        "residuals": {k: _g(v) for k, v in result.residuals.items()},
        "objective": _g(result.objective),
    })
    for k in targets:
        print(f"{k:14s} target {targets[k]:.6g}  model {result.predictions[k]:.6g}  "
              f"residual {result.residuals[k]:+.2%}")
    for k, v in result.values.items():
        print(f"{k:20s} {v:.6g}")
    return EXIT_OK


# --- coincidences -----------------------------------------------------------------

def _coinc_settings(args, cfg: ExperimentConfig | None) -> dict:
    c = dict(cfg.sections["coincidence"]) if cfg and "coincidence" in cfg else _defaults("coincidence")
    if args.bin_width is not None:
        c["bin_width_ps"] = args.bin_width
    if getattr(args, "duration", None) is not None:
        c["duration"] = args.duration
    if c["bin_width_ps"] <= 0:
        raise ConfigError("bin width must be positive")
    return c


def _car_report(hist: co.DelayHistogram, c: dict) -> dict:
    window = c["window_ps"]
    peak = co.locate_peak(hist, window)
    signal = (peak - window / 2, window)
    sides = co.side_windows(peak, window, hist.lo, hist.hi, c["guard_ps"])
    res = co.car(hist, signal, sides)
    singles = {str(k): _g(v / hist.duration) if hist.duration else None for k, v in hist.singles.items()}
    return {
        "peak_delay_ps": _g(peak),
        "signal_window_ps": [_g(signal[0]), _g(window)],
        "accidental_windows": len(sides),
        "coincidences": res.coincidences,
        "accidentals": _g(res.accidentals),
        "accidentals_analytic": _g(res.analytic_accidentals),
        "car": _g(res.car),
        "car_uncertainty": _g(res.uncertainty),
        "car_infinite": res.infinite,
        "duration_s": _g(hist.duration),
        "singles_hz": singles,
    }


def _report_car(report: dict) -> None:
    print(f"peak delay   {report['peak_delay_ps'] / 1000:.3f} ns")
    print(f"coincidences {report['coincidences']}  accidentals {report['accidentals']:.1f} "
          f"(analytic {report['accidentals_analytic']:.1f})")
    print(f"CAR          {report['car']} +/- {report['car_uncertainty']}")


def cmd_coinc_sim(args, cfg: ExperimentConfig) -> int:
    cfg.require("pairs")
    c = _coinc_settings(args, cfg)
    if c["duration"] <= 0 or c["chunk"] <= 0:
        raise ConfigError("duration and chunk must be positive")
    params = cfg.pair_source()
    seed = _seed(args, cfg)
    counter = co.CoincidenceCounter(params.channel_s, params.channel_i, c["bin_width_ps"],
                                    c["range_lo_ps"], c["range_hi_ps"], n_jobs=_jobs(args, cfg))
    out = _out_dir(args)
    writer = None if args.no_tags else TagFileWriter(out / "tags.qtt")
    try:
        for chunk in co.simulate_pairs_chunked(params, c["duration"], seed, c["chunk"]):
            counter.partial_fit(chunk)
            if writer:
                writer.write(chunk)
    finally:
        if writer:
            writer.close()
    hist = counter.histogram_
    hist.to_csv(out / "histogram.csv")
    report = _car_report(hist, c)
    report["model"] = {
        "pair_rate": _g(params.pair_rate), "eta_s": _g(params.eta_s), "eta_i": _g(params.eta_i),
        "car_expected": _g(1 + params.true_coincidence_rate * co.capture_fraction(params, c["window_ps"])
                           / co.accidental_rate(params.singles_s, params.singles_i, c["window_ps"] * 1e-12)),
    }
    _write_json(out / "car.json", report)
    _report_car(report)
    return EXIT_OK


def cmd_coinc_analyze(args, cfg: ExperimentConfig | None) -> int:
    if not args.tags:
        raise ConfigError("--tags is required")
    c = _coinc_settings(args, cfg)
    try:
        stream = read_tags(args.tags, args.duration)
    except FileNotFoundError as exc:
        raise InputDataError(str(exc)) from exc
    for ch in (args.ch_a, args.ch_b):
        if ch not in stream.channels:
            raise InputDataError(f"channel {ch} not present in {args.tags}")
    hist = co.delay_histogram(stream, args.ch_a, args.ch_b, c["bin_width_ps"],
                              (c["range_lo_ps"], c["range_hi_ps"]), n_jobs=_jobs(args, cfg))
    out = _out_dir(args)
    hist.to_csv(out / "histogram.csv")
    report = _car_report(hist, c)
    _write_json(out / "car.json", report)
    _report_car(report)
    return EXIT_OK


# --- phase ------------------------------------------------------------------------

def _phase_outputs(series: phase.PhaseSeries, p: dict, out: Path) -> list[phase.Tone]:
    seg = min(p["segment_length"], len(series))
    psd = phase.estimate_psd(series, seg)
    phase.write_psd_csv(psd, out / "psd.csv")
    tones = phase.detect_tones(psd, p["threshold"])
    tones.sort(key=lambda t: -t.power)
    _write_json(out / "tones.json", {
        "resolution_hz": _g(psd.resolution),
        "segments": psd.n_segments,
        "variance_rad2": _g(psd.input_variance),
        "psd_integral_rad2": _g(psd.integral()),
        "tones": [{"frequency_hz": _g(t.frequency), "power_rad2": _g(t.power),
                   "peak_density": _g(t.peak_density)} for t in tones],
    })
    for t in tones[:10]:
        print(f"tone {t.frequency:10.3f} Hz  power {t.power:.4g} rad^2")
    if tones:
        print(f"dominant tone: {tones[0].frequency:.3f} Hz")
    return tones


def cmd_phase_sim(args, cfg: ExperimentConfig) -> int:
    cfg.require("phase")
    p = dict(cfg.section("phase"))
    if args.duration is not None:
        p["duration"] = args.duration
    if p["duration"] <= 0 or p["sample_rate"] <= 0 or p["segment_length"] < 2:
        raise ConfigError("duration, sample_rate and segment_length must be positive")
    seed = _seed(args, cfg)
    ss_phase, ss_det = np.random.SeedSequence(seed).spawn(2)
    series = phase.synthesize_phase_noise(cfg.phase_spec(), p["duration"], p["sample_rate"],
                                          np.random.PCG64(ss_phase).random_raw())
    out = _out_dir(args)
    if args.trace:
        trace = phase.intensity_trace_from_phase(series, p["power"], p["visibility"],
                                                 p["detector_noise"],
                                                 np.random.PCG64(ss_det).random_raw())
        phase.write_trace_csv(trace, out / "trace.csv")
    _phase_outputs(series, p, out)
    return EXIT_OK


def cmd_phase_analyze(args, cfg: ExperimentConfig | None) -> int:
    if not args.trace:
        raise ConfigError("--trace is required")
    p = dict(cfg.sections["phase"]) if cfg and "phase" in cfg else _defaults("phase")
    try:
        trace = phase.read_trace_csv(args.trace)
    except (OSError, ValueError) as exc:
        raise InputDataError(f"{args.trace}: {exc}") from exc
    series = phase.extract_phase(trace, p["visibility"])
    _phase_outputs(series, p, _out_dir(args))
    return EXIT_OK


# --- polarization -----------------------------------------------------------------

def cmd_pol_drift(args, cfg: ExperimentConfig) -> int:
    cfg.require("drift")
    d = dict(cfg.section("drift"))
    if args.duration is not None:
        d["duration"] = args.duration
    if d["dt"] <= 0 or d["duration"] < 0:
        raise ConfigError("dt must be positive and duration non-negative")
    if not 0 <= d["base_error"] <= 0.5:
        raise ConfigError("base_error must lie in [0, 0.5]")
    seed = _seed(args, cfg)
    timeline = pol.simulate_drift(cfg.drift_process(), pol.state_at_angle(d["initial_angle"]),
                                  d["duration"], d["dt"], seed)
    out = _out_dir(args)
    timeline.to_csv(out / "drift.csv", pol.H, d["base_error"])
    q = timeline.qber(pol.H, d["base_error"])
    band = q[timeline.times < d["band_window"]]
    report = {"band_window_s": _g(d["band_window"]), "qber_min": _g(band.min()),
              "qber_max": _g(band.max()), "qber_std": _g(band.std())}
    for k, (t_ev, mag) in enumerate(sorted(d["step_events"])):
        before, after = q[timeline.times < t_ev], q[timeline.times >= t_ev]
        jump = after.mean() - before.mean() if after.size and before.size else None
        report[f"event_{k}"] = {"time_s": _g(t_ev), "magnitude_rad": _g(mag),
                                "qber_mean_after": _g(after.mean()) if after.size else None,
                                "jump": _g(jump), "jump_over_std": _g(abs(jump) / before.std())
                                if jump is not None and before.std() > 0 else None}
    _write_json(out / "drift.json", report)
    print(f"QBER over first {d['band_window'] / 3600:g} h: {band.min():.2%} .. {band.max():.2%}")
    for k in range(len(d["step_events"])):
        ev = report[f"event_{k}"]
        if ev["qber_mean_after"] is not None:
            print(f"after event at {ev['time_s']:g} s: mean QBER {ev['qber_mean_after']:.2%}")
    return EXIT_OK


def cmd_pol_align(args, cfg: ExperimentConfig) -> int:
    cfg.require("align")
    a = cfg.section("align")
    if a["tolerance"] <= 0 or a["budget"] < 1 or a["trials"] < 1 or a["quantization"] <= 0:
        raise ConfigError("tolerance, budget, trials and quantization must be positive")
    seed = _seed(args, cfg)
    results = pol.alignment_trials(a["trials"], seed, a["quantization"], a["tolerance"], a["budget"],
                                   a["initial_step"], n_jobs=_jobs(args, cfg))
    out = _out_dir(args)
    results[0].to_csv(out / "align.csv")
    base = a["base_error"]
    qbers = [base + (1 - 2 * base) * r.base_qber for r in results]
    with open(out / "align_trials.csv", "w", newline="") as fh:
        fh.write("trial,converged,evaluations,distance_rad,extinction_db,base_qber\n")
        for i, (r, qb) in enumerate(zip(results, qbers)):
            fh.write(f"{i},{int(r.converged)},{r.evaluations},{r.distance:.12g},"
                     f"{r.extinction_db:.12g},{qb:.12g}\n")
    rate = float(np.mean([r.converged for r in results]))
    report = {"trials": len(results), "convergence_rate": _g(rate),
              "mean_evaluations": _g(np.mean([r.evaluations for r in results])),
              "mean_base_qber": _g(np.mean(qbers))}
    _write_json(out / "align.json", report)
    print(f"converged {rate:.1%} of {len(results)} trials, mean base QBER {np.mean(qbers):.2%}")
    return EXIT_OK


# --- entry point ------------------------------------------------------------------

COMMANDS = {
    "skr": (cmd_skr, "single-point key rate at the configured length"),
    "sweep": (cmd_sweep, "key rate versus length and its zero crossing"),
    "calibrate": (cmd_calibrate, "fit free parameters to key-rate targets"),
    "coinc-sim": (cmd_coinc_sim, "simulate a pair-source tag stream and its CAR"),
    "coinc-analyze": (cmd_coinc_analyze, "delay histogram and CAR of a tag file"),
    "phase-sim": (cmd_phase_sim, "synthesize phase noise and report its spectrum"),
    "phase-analyze": (cmd_phase_analyze, "spectrum and tones of a recorded intensity trace"),
    "pol-drift": (cmd_pol_drift, "polarization drift timeline and QBER"),
    "pol-align": (cmd_pol_align, "batch of seeded EPC alignment trials"),
}
CONFIG_OPTIONAL = {"coinc-analyze", "phase-analyze"}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="qlink", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=name not in CONFIG_OPTIONAL)
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=".")
        p.add_argument("--jobs", type=int, help="internal parallelism (joblib n_jobs)")
        if name == "sweep":
            p.add_argument("--lmin", type=float)
            p.add_argument("--lmax", type=float)
            p.add_argument("--step", type=float)
        if name in ("coinc-sim", "coinc-analyze", "phase-sim", "pol-drift"):
            p.add_argument("--duration", type=float, help="seconds")
        if name in ("coinc-sim", "coinc-analyze"):
            p.add_argument("--bin-width", type=int, help="histogram bin width in ps")
        if name == "coinc-sim":
            p.add_argument("--no-tags", action="store_true", help="skip writing tags.qtt")
        if name == "coinc-analyze":
            p.add_argument("--tags", help="binary (QTT1) or CSV tag file")
            p.add_argument("--ch-a", type=int, default=0)
            p.add_argument("--ch-b", type=int, default=1)
        if name == "phase-sim":
            p.add_argument("--trace", action="store_true", help="also write trace.csv")
        if name == "phase-analyze":
            p.add_argument("--trace", help="trace CSV (time_s,det_a,det_b)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    func = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config) if args.config else None
        return func(args, cfg)
    except (ConfigError, CalibrationError) as exc:
        print(f"qlink: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TagFileError, InputDataError) as exc:
        print(f"qlink: input error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"qlink: precondition failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
