"""Experiment configuration: strict INI sections mapped onto the model parameter types.

Every section and key is declared in ``SCHEMA``; anything else is rejected.
Lists are comma separated, pairs are written ``a:b``.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from qlink.channel import ChannelParams, DetectorParams
from qlink.coincidence import PairSourceParams, calibrate_pair_source, capture_fraction
from qlink.decoy import ProtocolParams, background_yield
from qlink.phase import PhaseNoiseSpec
from qlink.polarization import DriftProcess


class ConfigError(ValueError):
    """Invalid or incomplete configuration."""


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _pairs(text: str) -> tuple[tuple[float, float], ...]:
    out = []
    for item in text.split(","):
        if not item.strip():
            continue
        a, sep, b = item.partition(":")
        if not sep:
            raise ValueError(f"expected 'a:b', got {item.strip()!r}")
        out.append((float(a), float(b)))
    return tuple(out)


def _bounds(text: str) -> tuple[float, float]:
    v = _floats(text)
    if len(v) != 2:
        raise ValueError("bounds need exactly two values")
    return v


# section -> key -> (parser, default); a default of None marks a required key
SCHEMA: dict[str, dict[str, tuple]] = {
    "run": {
        "seed": (int, None),
        "n_jobs": (int, 1),
    },
    "channel": {
        "length": (float, 224.0),
        "attenuation": (float, 0.17),
        "extra_insertion_loss": (float, 0.0),
        "dispersion_coeff": (float, 17.0),
    },
    "detector": {
        "efficiency": (float, 0.93),
        "dark_rate": (float, 70.0),
        "jitter_sigma": (float, 50.0),
    },
    "protocol": {
        "mu_signal": (float, 0.6),
        "mu_decoy": (float, 0.5),
        "clock_rate": (float, 1e9),
        "sifting": (float, 0.5),
        "ec_efficiency": (float, 1.16),
        "e_opt": (float, 0.016),
        "e0": (float, 0.5),
        "background_rate": (float, 0.0),
        "n_detectors": (int, 2),
        "receiver_efficiency": (float, 1.0),
    },
    "sweep": {
        "l_min": (float, 0.0),
        "l_max": (float, 300.0),
        "step": (float, 1.0),
        "flux_candidates": (_floats, (0.4, 0.5, 0.6, 1.0)),
    },
    "pairs": {
        "singles_s": (float, None),
        "singles_i": (float, None),
        "background_s": (float, None),
        "background_i": (float, None),
        "car": (float, None),
        "offset_ps": (float, 113_000.0),
        "bandwidth_s": (float, 1.39),
        "bandwidth_i": (float, 1.39),
        "jitter_ps": (float, 50.0),
    },
    "coincidence": {
        "duration": (float, 43_200.0),
        "chunk": (float, 3600.0),
        "bin_width_ps": (int, 100),
        "range_lo_ps": (int, 0),
        "range_hi_ps": (int, 250_000),
        "window_ps": (float, 12_000.0),
        "guard_ps": (float, 24_000.0),
    },
    "phase": {
        "low_level": (float, 1e-4),
        "rolloff_exponent": (float, 2.0),
        "corner_low": (float, 10.0),
        "corner_high": (float, 1000.0),
        "floor_density": (float, 5e-8),
        "tones": (_pairs, ((100.0, 1.4), (125.0, 0.35))),
        "offset": (float, math.pi / 2),
        "duration": (float, 96.0),
        "sample_rate": (float, 2e6),
        "segment_length": (int, 1 << 20),
        "threshold": (float, 10.0),
        "visibility": (float, 1.0),
        "power": (float, 1.0),
        "detector_noise": (float, 0.0),
    },
    "drift": {
        "diffusion_rate": (float, 1e-7),
        "step_events": (_pairs, ()),
        "initial_angle": (float, 0.348),
        "base_error": (float, 0.016),
        "duration": (float, 14 * 3600.0),
        "dt": (float, 10.0),
        "band_window": (float, 9 * 3600.0),
    },
    "align": {
        "quantization": (float, 0.01),
        "tolerance": (float, 0.05),
        "budget": (int, 500),
        "trials": (int, 100),
        "initial_step": (float, 0.5),
        "base_error": (float, 0.0),
    },
    "calibrate": {
        "target_skr": (float, None),
        "target_length": (float, 224.0),
        "target_zero_crossing": (float, None),
        "bound_e_opt": (_bounds, (0.005, 0.05)),
        "bound_background_rate": (_bounds, (90.0, 2200.0)),
        "bound_receiver_efficiency": (_bounds, (0.05, 1.0)),
        "free": (lambda s: tuple(v.strip() for v in s.split(",") if v.strip()),
                 ("e_opt", "background_rate", "receiver_efficiency")),
        "prior_e_opt": (float, 0.016),
        "prior_weight": (float, 1e-4),
    },
}

# keys whose absence is allowed even though they have no default
OPTIONAL = {("calibrate", "target_skr"), ("calibrate", "target_zero_crossing"), ("run", "seed")}


@dataclass
class ExperimentConfig:
    sections: dict[str, dict] = field(default_factory=dict)
    source: str | None = None

    def __contains__(self, name: str) -> bool:
        return name in self.sections

    def section(self, name: str) -> dict:
        if name not in self.sections:
            raise ConfigError(f"missing section [{name}]")
        return self.sections[name]

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.sections]
        if missing:
            raise ConfigError("missing section(s): " + ", ".join(f"[{n}]" for n in missing))

    @property
    def seed(self) -> int | None:
        return self.sections.get("run", {}).get("seed")

    @property
    def n_jobs(self) -> int:
        return self.sections.get("run", {}).get("n_jobs", 1)

    # --- builders ---------------------------------------------------------------

    def channel(self) -> ChannelParams:
        return _build(ChannelParams, self.sections.get("channel", _defaults("channel")))

    def detector(self) -> DetectorParams:
        return _build(DetectorParams, self.sections.get("detector", _defaults("detector")))

    def protocol(self) -> ProtocolParams:
        p = dict(self.section("protocol"))
        bg, nd = p.pop("background_rate"), p.pop("n_detectors")
        p.pop("receiver_efficiency")
        try:
            y0 = background_yield(bg, p["clock_rate"], nd)
        except ValueError as exc:
            raise ConfigError(f"[protocol]: {exc}") from exc
        return _build(ProtocolParams, dict(p, y0=y0))

    @property
    def receiver_efficiency(self) -> float:
        return self.section("protocol")["receiver_efficiency"]

    def pair_source(self) -> PairSourceParams:
        p = self.section("pairs")
        c = self.sections.get("coincidence", _defaults("coincidence"))
        ch = self.channel()
        shape = dict(
            offset=p["offset_ps"],
            broadening_s=ch.dispersion_coeff * ch.length * p["bandwidth_s"],
            broadening_i=ch.dispersion_coeff * ch.length * p["bandwidth_i"],
            jitter=p["jitter_ps"],
        )
        try:
            cap = capture_fraction(PairSourceParams(1.0, 1.0, 1.0, **shape), c["window_ps"])
            return calibrate_pair_source(p["singles_s"], p["singles_i"], p["background_s"],
                                         p["background_i"], p["car"], c["window_ps"] * 1e-12,
                                         capture=cap, **shape)
        except ValueError as exc:
            raise ConfigError(f"[pairs]: {exc}") from exc

    def phase_spec(self) -> PhaseNoiseSpec:
        p = self.section("phase")
        keys = ("low_level", "rolloff_exponent", "corner_low", "corner_high", "floor_density", "tones",
                "offset")
        return _build(PhaseNoiseSpec, {k: p[k] for k in keys})

    def drift_process(self) -> DriftProcess:
        p = self.section("drift")
        return _build(DriftProcess, {"diffusion_rate": p["diffusion_rate"],
                                     "step_events": p["step_events"]})

    # --- serialization ----------------------------------------------------------

    def to_ini(self, comments: list[str] = ()) -> str:
        lines = [f"# {c}" for c in comments]
        for name in SCHEMA:
            if name not in self.sections:
                continue
            if lines:
                lines.append("")
            lines.append(f"[{name}]")
            for key, value in self.sections[name].items():
                if value is None:
                    continue
                lines.append(f"{key} = {_render(value)}")
        return "\n".join(lines) + "\n"


def _render(value) -> str:
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ", ".join(f"{_render(a)}:{_render(b)}" for a, b in value)
        return ", ".join(_render(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults(name: str) -> dict:
    return {k: d for k, (_, d) in SCHEMA[name].items()}


def _build(cls, kwargs):
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def parse_config(text: str, source: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       comment_prefixes=("#", ";"))
    parser.optionxform = str  # keep keys case-sensitive so typos are not silently folded
    try:
        parser.read_string(text, source=source or "<config>")
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {}
    for name in parser.sections():
        if name not in SCHEMA:
            raise ConfigError(f"unknown section [{name}]")
        schema = SCHEMA[name]
        values = {}
        for key, raw in parser.items(name):
            if key not in schema:
                raise ConfigError(f"unknown key {key!r} in [{name}]")
            conv = schema[key][0]
            try:
                values[key] = conv(raw)
            except ValueError as exc:
                raise ConfigError(f"[{name}] {key}: {exc}") from exc
            if isinstance(values[key], float) and not math.isfinite(values[key]):
                raise ConfigError(f"[{name}] {key}: value must be finite")
        for key, (_, default) in schema.items():
            if key in values:
                continue
            if default is None and (name, key) not in OPTIONAL:
                raise ConfigError(f"missing key {key!r} in [{name}]")
            values[key] = default
        sections[name] = values
    return ExperimentConfig(sections, source)


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
