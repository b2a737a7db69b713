"""Strict JSON run configuration.

A config file is a JSON object.  Unknown or duplicate keys are errors, and
every error message names the offending field path (``qd.gamma``,
``lasers[1].rabi``).  :func:`canonical` renders a fully populated config that
parses back to an identical :class:`RunConfig`.

Top-level keys::

    experiment  one of EXPERIMENTS (may also come from the command line)
    seed        64-bit unsigned integer
    threads     worker threads (optional)
    qd          tau [ns] | gamma [MHz], gyro_electron, gyro_hole [MHz/mT],
                dnsp_splitting, spin_dephasing_rate, spectral_wander_sigma [MHz]
    b_ext       {bx, by, bz} [mT]
    lasers      list of {rabi [MHz] | rabi_gamma [units of gamma], detuning,
                frequency_offset [MHz], polarization, phase [rad] | phase_profile}
    ensemble    {sigma [mT], n_samples, mean [mT, 3 values]}
    <experiment> block of experiment parameters, see EXPERIMENT_DEFAULTS
"""

from dataclasses import dataclass, field
import json
import math

import numpy as np

from .model import (DEFAULT_RABI_FRACTION, POL_H, POL_SIGMA_MINUS, POL_SIGMA_PLUS, POL_V,
                    LaserDrive, MagneticField, ModelError, PhaseProfile, QdParameters,
                    SystemConfig)
from .nuclear import OhEnsembleSpec

EXPERIMENTS = ("g2", "cpt-map", "cpt-visibility", "phase-jump", "transient-scan", "steady-state")
FORMATS = ("csv", "json")

_POLARIZATIONS = {"H": POL_H, "V": POL_V, "sigma+": POL_SIGMA_PLUS, "sigma-": POL_SIGMA_MINUS}


class ConfigError(ValueError):
    """Invalid configuration; ``path`` names the field."""

    def __init__(self, path, message, line=None):
        self.path = path
        self.line = line
        where = f" (line {line})" if line else ""
        super().__init__(f"{path}{where}: {message}" if path else f"{message}{where}")


# Experiment parameter defaults.  Grids are {"start", "stop", "num"} objects or
# explicit lists; a null grid means "+-1.5 absorption linewidths, 41 points".
EXPERIMENT_DEFAULTS = {
    "g2": {"detunings": None, "detunings_unit": "MHz", "tau_max_ns": 2000.0, "tau_step_ns": 1.0,
           "post_selection_window": None, "per_sample_normalization": False,
           "fit_start_ns": None},
    "cpt-map": {"grid1": None, "grid2": None, "n_harmonics": 6, "method": "harmonic"},
    "cpt-visibility": {"fields": [0.0, 9.0, 18.4, 30.0], "grid1": None, "grid2": None,
                       "n_harmonics": 6},
    "phase-jump": {"dphi": math.pi, "fall_time_ns": 2.0, "prepare_us": 2.0,
                   "timeline": {"start": -25.0, "stop": 200.0, "step": 0.25}, "dt_max_us": 1e-3},
    "transient-scan": {"dphis": None, "readout_delay_ns": 2.0, "fall_time_ns": 2.0,
                       "prepare_us": 2.0, "background": True, "dt_max_us": 1e-3},
    "steady-state": {"detunings": None},
}

_QD_KEYS = ("tau", "gamma", "gyro_electron", "gyro_hole", "dnsp_splitting",
            "spin_dephasing_rate", "spectral_wander_sigma")
_LASER_KEYS = ("rabi", "rabi_gamma", "detuning", "frequency_offset", "polarization", "phase",
               "phase_profile")
_TOP_KEYS = ("experiment", "seed", "threads", "qd", "b_ext", "lasers", "ensemble") + EXPERIMENTS


@dataclass(frozen=True)
class RunConfig:
    experiment: str
    seed: int
    system: SystemConfig
    ensemble: OhEnsembleSpec
    params: dict = field(default_factory=dict)
    threads: int = 1
    formats: tuple = ("csv",)

    def __eq__(self, other):
        return isinstance(other, RunConfig) and canonical(self) == canonical(other)

    __hash__ = None


def _pairs_hook(pairs):
    out = {}
    for k, v in pairs:
        if k in out:
            raise ConfigError(k, "duplicate key")
        out[k] = v
    return out


def _line_of(text, key):
    """Best-effort line number of the first occurrence of ``"key"`` in the source."""
    if text is None:
        return None
    pos = text.find(f'"{key}"')
    return text.count("\n", 0, pos) + 1 if pos >= 0 else None


class _Ctx:
    def __init__(self, text):
        self.text = text

    def fail(self, path, message):
        leaf = path.split(".")[-1].split("[")[0] if path else ""
        raise ConfigError(path, message, _line_of(self.text, leaf) if leaf else None)

    def obj(self, value, path, allowed):
        if not isinstance(value, dict):
            self.fail(path, "must be an object")
        for k in value:
            if k not in allowed:
                self.fail(f"{path}.{k}" if path else k, "unknown key")
        return value

    def number(self, value, path, minimum=None, positive=False):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(path, "must be a number")
        value = float(value)
        if not math.isfinite(value):
            self.fail(path, "must be finite")
        if positive and value <= 0:
            self.fail(path, "must be positive")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}")
        return value

    def integer(self, value, path, minimum=None):
        if isinstance(value, bool) or not isinstance(value, int):
            self.fail(path, "must be an integer")
        if minimum is not None and value < minimum:
            self.fail(path, f"must be >= {minimum}")
        return value

    def numbers(self, value, path, **kw):
        if not isinstance(value, list) or not value:
            self.fail(path, "must be a non-empty list of numbers")
        return [self.number(v, f"{path}[{i}]", **kw) for i, v in enumerate(value)]


def _parse_qd(ctx, block):
    block = ctx.obj(block or {}, "qd", _QD_KEYS)
    kw = {}
    if "tau" in block and "gamma" in block:
        ctx.fail("qd.gamma", "give either tau or gamma, not both")
    if "tau" in block:
        kw["radiative_lifetime_tau"] = ctx.number(block["tau"], "qd.tau", positive=True)
    if "gamma" in block:
        g = ctx.number(block["gamma"], "qd.gamma", positive=True)
        kw["radiative_lifetime_tau"] = 1.0 / (2 * math.pi * g * 1e-3)
    for k in ("gyro_electron", "gyro_hole"):
        if k in block:
            kw[k] = ctx.number(block[k], f"qd.{k}")
    for k in ("dnsp_splitting", "spin_dephasing_rate", "spectral_wander_sigma"):
        if k in block:
            kw[k] = ctx.number(block[k], f"qd.{k}", minimum=0.0)
    return QdParameters(**kw)


def _parse_field(ctx, block):
    block = ctx.obj(block or {}, "b_ext", ("bx", "by", "bz"))
    return MagneticField(*(ctx.number(block.get(k, 0.0), f"b_ext.{k}") for k in ("bx", "by", "bz")))


def _parse_polarization(ctx, value, path):
    if isinstance(value, str):
        if value not in _POLARIZATIONS:
            ctx.fail(path, f"unknown polarization {value!r} (use {', '.join(_POLARIZATIONS)} "
                           "or [[re, im], [re, im]])")
        return _POLARIZATIONS[value]
    if (not isinstance(value, list) or len(value) != 2
            or not all(isinstance(c, list) and len(c) == 2 for c in value)):
        ctx.fail(path, "must be a name or [[re, im], [re, im]]")
    cp, cm = (complex(ctx.number(c[0], f"{path}[{i}][0]"), ctx.number(c[1], f"{path}[{i}][1]"))
              for i, c in enumerate(value))
    if abs(abs(cp) ** 2 + abs(cm) ** 2 - 1.0) > 1e-12:
        ctx.fail(path, "must be normalized")
    return cp, cm


def _parse_laser(ctx, block, path, qd, default):
    block = ctx.obj(block, path, _LASER_KEYS)
    if "rabi" in block and "rabi_gamma" in block:
        ctx.fail(f"{path}.rabi", "give either rabi or rabi_gamma, not both")
    rabi = default.rabi
    if "rabi" in block:
        rabi = ctx.number(block["rabi"], f"{path}.rabi", minimum=0.0)
    elif "rabi_gamma" in block:
        rabi = qd.rabi(ctx.number(block["rabi_gamma"], f"{path}.rabi_gamma", minimum=0.0))
    pol = default.polarization
    if "polarization" in block:
        pol = _parse_polarization(ctx, block["polarization"], f"{path}.polarization")
    profile = default.phase_profile
    if "phase" in block and "phase_profile" in block:
        ctx.fail(f"{path}.phase", "give either phase or phase_profile, not both")
    if "phase" in block:
        profile = PhaseProfile.constant(ctx.number(block["phase"], f"{path}.phase"))
    if "phase_profile" in block:
        pp = ctx.obj(block["phase_profile"], f"{path}.phase_profile", ("times", "phases"))
        try:
            profile = PhaseProfile(
                tuple(ctx.numbers(pp.get("times"), f"{path}.phase_profile.times")),
                tuple(ctx.numbers(pp.get("phases"), f"{path}.phase_profile.phases")))
        except ModelError as exc:
            ctx.fail(f"{path}.phase_profile", str(exc))
    return LaserDrive(
        rabi=rabi,
        detuning=ctx.number(block.get("detuning", default.detuning), f"{path}.detuning"),
        polarization=pol,
        phase_profile=profile,
        frequency_offset=ctx.number(block.get("frequency_offset", default.frequency_offset),
                                    f"{path}.frequency_offset"),
    )


def default_lasers(experiment, qd):
    from .experiments import phase_jump_config
    rabi = qd.rabi(DEFAULT_RABI_FRACTION)
    if experiment in ("g2", "steady-state"):
        return (LaserDrive(rabi=rabi, polarization=POL_H),)
    if experiment in ("phase-jump", "transient-scan"):
        return phase_jump_config(qd).lasers
    return (LaserDrive(rabi=rabi, polarization=POL_H), LaserDrive(rabi=rabi, polarization=POL_V))


def _grid_spec(ctx, value, path):
    if value is None:
        return None
    if isinstance(value, list):
        return ctx.numbers(value, path)
    g = ctx.obj(value, path, ("start", "stop", "num"))
    for k in ("start", "stop", "num"):
        if k not in g:
            ctx.fail(f"{path}.{k}", "missing")
    start = ctx.number(g["start"], f"{path}.start")
    stop = ctx.number(g["stop"], f"{path}.stop")
    num = ctx.integer(g["num"], f"{path}.num", minimum=2)
    if stop <= start:
        ctx.fail(f"{path}.stop", "must exceed start")
    return {"start": start, "stop": stop, "num": num}


def _parse_params(ctx, experiment, block):
    defaults = EXPERIMENT_DEFAULTS[experiment]
    block = ctx.obj(block or {}, experiment, tuple(defaults))
    out = {}
    for k, dflt in defaults.items():
        v = block.get(k, dflt)
        path = f"{experiment}.{k}"
        if k in ("grid1", "grid2"):
            out[k] = _grid_spec(ctx, v, path)
        elif k == "timeline":
            t = ctx.obj(v, path, ("start", "stop", "step"))
            out[k] = {"start": ctx.number(t.get("start", -25.0), f"{path}.start"),
                      "stop": ctx.number(t.get("stop", 200.0), f"{path}.stop"),
                      "step": ctx.number(t.get("step", 0.25), f"{path}.step", positive=True)}
            if out[k]["stop"] <= out[k]["start"]:
                ctx.fail(f"{path}.stop", "must exceed start")
        elif k in ("detunings", "dphis", "fields"):
            out[k] = None if v is None else ctx.numbers(v, path)
        elif k in ("per_sample_normalization", "background"):
            if not isinstance(v, bool):
                ctx.fail(path, "must be true or false")
            out[k] = v
        elif k == "method":
            if v not in ("harmonic", "integrate"):
                ctx.fail(path, "must be 'harmonic' or 'integrate'")
            out[k] = v
        elif k == "detunings_unit":
            if v not in ("MHz", "absorption_linewidth"):
                ctx.fail(path, "must be 'MHz' or 'absorption_linewidth'")
            out[k] = v
        elif k == "n_harmonics":
            out[k] = ctx.integer(v, path, minimum=1)
        elif k in ("post_selection_window", "fit_start_ns"):
            out[k] = None if v is None else ctx.number(v, path, positive=True)
        elif k in ("fall_time_ns", "dt_max_us", "tau_step_ns", "tau_max_ns"):
            out[k] = ctx.number(v, path, positive=True)
        elif k in ("prepare_us", "readout_delay_ns"):
            out[k] = ctx.number(v, path, minimum=0.0)
        else:
            out[k] = ctx.number(v, path)
    if experiment in ("g2", "steady-state") and out["detunings"] is None:
        ctx.fail(f"{experiment}.detunings", "missing")
    return out


def parse_config(text, experiment=None, seed=None, threads=None, formats=None):
    """Parse a JSON document into a :class:`RunConfig`.

    ``experiment``, ``seed``, ``threads`` and ``formats`` override (or
    supply) the corresponding fields, as the command line does.
    """
    ctx = _Ctx(text)
    try:
        doc = json.loads(text, object_pairs_hook=_pairs_hook,
                         parse_constant=lambda c: ctx.fail("", f"{c} is not allowed"))
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"malformed JSON: {exc.msg} at column {exc.colno}", exc.lineno)
    except ConfigError as exc:
        raise ConfigError(exc.path, str(exc).split(": ", 1)[-1], _line_of(text, exc.path))
    return build_config(doc, ctx, experiment, seed, threads, formats)


def build_config(doc, ctx=None, experiment=None, seed=None, threads=None, formats=None):
    ctx = ctx or _Ctx(None)
    doc = ctx.obj(doc, "", _TOP_KEYS)
    exp = doc.get("experiment")
    if experiment is not None:
        if exp is not None and exp != experiment:
            ctx.fail("experiment", f"config is for {exp!r} but {experiment!r} was requested")
        exp = experiment
    if exp not in EXPERIMENTS:
        ctx.fail("experiment", f"must be one of {', '.join(EXPERIMENTS)}")
    for other in EXPERIMENTS:
        if other != exp and other in doc:
            ctx.fail(other, f"parameter block does not belong to experiment {exp!r}")
    if seed is None:
        if "seed" not in doc:
            ctx.fail("seed", "missing")
        seed = ctx.integer(doc["seed"], "seed", minimum=0)
    if seed >= 2**64:
        ctx.fail("seed", "must fit in 64 bits")
    if threads is None:
        threads = ctx.integer(doc.get("threads", 1), "threads", minimum=1)
    qd = _parse_qd(ctx, doc.get("qd"))
    b_ext = _parse_field(ctx, doc.get("b_ext"))
    defaults = default_lasers(exp, qd)
    if "lasers" in doc:
        lasers_doc = doc["lasers"]
        if not isinstance(lasers_doc, list) or not 1 <= len(lasers_doc) <= 2:
            ctx.fail("lasers", "must be a list of one or two lasers")
        lasers = tuple(_parse_laser(ctx, l, f"lasers[{i}]", qd,
                                    defaults[min(i, len(defaults) - 1)])
                       for i, l in enumerate(lasers_doc))
    else:
        lasers = defaults
    if exp in ("cpt-map", "cpt-visibility", "phase-jump", "transient-scan") and len(lasers) != 2:
        ctx.fail("lasers", f"experiment {exp!r} needs two lasers")
    if exp == "g2" and len(lasers) != 1:
        ctx.fail("lasers", "the g2 experiment uses one laser")
    ens = ctx.obj(doc.get("ensemble") or {}, "ensemble", ("sigma", "n_samples", "mean"))
    sigma = ctx.number(ens.get("sigma", 18.0), "ensemble.sigma", minimum=0.0)
    n_samples = ctx.integer(ens.get("n_samples", 128), "ensemble.n_samples", minimum=1)
    mean = ens.get("mean", [0.0, 0.0, 0.0])
    mean = ctx.numbers(mean, "ensemble.mean")
    if len(mean) != 3:
        ctx.fail("ensemble.mean", "must have three components")
    try:
        system = SystemConfig(qd=qd, b_ext=b_ext, lasers=lasers, oh_dispersion_sigma=sigma)
        ensemble = OhEnsembleSpec(sigma=sigma, n_samples=n_samples, seed=seed, mean=tuple(mean))
    except (ModelError, ValueError) as exc:
        raise ConfigError("", str(exc))
    params = _parse_params(ctx, exp, doc.get(exp))
    if formats is None:
        formats = ("csv",)
    formats = tuple(formats)
    for f in formats:
        if f not in FORMATS:
            raise ConfigError("format", f"unknown output format {f!r}")
    return RunConfig(exp, int(seed), system, ensemble, params, int(threads), formats)


def _pol_json(pol):
    return [[c.real, c.imag] for c in pol]


def snapshot(cfg):
    """Fully populated config as a plain dict (round-trips through :func:`build_config`)."""
    qd = cfg.system.qd
    lasers = []
    for l in cfg.system.lasers:
        lasers.append({
            "rabi": l.rabi, "detuning": l.detuning, "frequency_offset": l.frequency_offset,
            "polarization": _pol_json(l.polarization),
            "phase_profile": {"times": list(l.phase_profile.times),
                              "phases": list(l.phase_profile.phases)},
        })
    return {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "threads": cfg.threads,
        "qd": {"tau": qd.radiative_lifetime_tau, "gyro_electron": qd.gyro_electron,
               "gyro_hole": qd.gyro_hole, "dnsp_splitting": qd.dnsp_splitting,
               "spin_dephasing_rate": qd.spin_dephasing_rate,
               "spectral_wander_sigma": qd.spectral_wander_sigma},
        "b_ext": {"bx": cfg.system.b_ext.bx, "by": cfg.system.b_ext.by, "bz": cfg.system.b_ext.bz},
        "lasers": lasers,
        "ensemble": {"sigma": cfg.ensemble.sigma, "n_samples": cfg.ensemble.n_samples,
                     "mean": list(cfg.ensemble.mean)},
        cfg.experiment: cfg.params,
    }


def canonical(cfg):
    """Canonical JSON text of a config (sorted keys, two-space indent, LF)."""
    return json.dumps(snapshot(cfg), sort_keys=True, indent=2, allow_nan=False) + "\n"


def resolve_grid(spec, qd):
    """Detuning grid (MHz) from a grid spec; ``None`` gives +-1.5 absorption linewidths, 41 points."""
    if spec is None:
        half = 1.5 * qd.absorption_linewidth
        return np.linspace(-half, half, 41)
    if isinstance(spec, dict):
        return np.linspace(spec["start"], spec["stop"], spec["num"])
    return np.asarray(spec, dtype=float)


def resolve_timeline(spec):
    n = int(round((spec["stop"] - spec["start"]) / spec["step"]))
    return spec["start"] + spec["step"] * np.arange(n + 1)
