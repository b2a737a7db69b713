"""``darkstate-sim``: run one experiment from a JSON config and write tables.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O
failure.  On failure a JSON error object is printed to stderr (and written
to ``error.json`` in the output directory when possible).
"""

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import experiments as ex
from .config import EXPERIMENTS, ConfigError, canonical, parse_config, resolve_grid, \
    resolve_timeline, snapshot
from .dynamics import INVARIANTS, NumericalError
from .model import ModelError
from .nuclear import EmptySelectionError
from .qcore import LinAlgError

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


def build_id():
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for p in sorted(Path(__file__).parent.glob("*.py")):
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def format_value(v):
    """Shortest round-trip text for a table cell."""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (str, np.str_)):
        return str(v)
    return repr(float(v))


def table_csv(result):
    """CSV text (header row, LF line endings, RFC 4180 quoting)."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n", quoting=csv.QUOTE_MINIMAL)
    cols = result.columns
    names = list(cols)
    w.writerow(names)
    arrays = [np.atleast_1d(np.asarray(cols[n])) for n in names]
    for row in zip(*arrays):
        w.writerow([format_value(v) for v in row])
    return buf.getvalue()


def _json_safe(v):
    if isinstance(v, dict):
        return {str(k): _json_safe(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_json_safe(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_json_safe(x) for x in v.tolist()]
    if isinstance(v, (np.bool_, bool)):
        return bool(v)
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (float, np.floating)):
        f = float(v)
        return f if math.isfinite(f) else None
    return v


def table_json(result):
    doc = {"name": result.name, "columns": {k: _json_safe(np.asarray(v)) for k, v in
                                            result.columns.items()},
           "metadata": _json_safe(result.metadata)}
    return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def run_experiment(cfg):
    """Dispatch a :class:`RunConfig`; returns the list of result tables."""
    p = cfg.params
    sys_cfg = cfg.system
    spec = cfg.ensemble
    qd = sys_cfg.qd
    threads = cfg.threads
    if cfg.experiment == "g2":
        dets = np.asarray(p["detunings"], dtype=float)
        if p["detunings_unit"] == "absorption_linewidth":
            dets = dets * qd.absorption_linewidth
        taus = ex.default_taus(p["tau_max_ns"], p["tau_step_ns"])
        return list(ex.run_g2_experiment(sys_cfg, spec, dets, taus, threads,
                                         p["post_selection_window"],
                                         p["per_sample_normalization"],
                                         fit_start=p["fit_start_ns"]))
    if cfg.experiment == "steady-state":
        return [ex.run_steady_state(sys_cfg, spec, p["detunings"], threads)]
    if cfg.experiment == "cpt-map":
        g1 = resolve_grid(p["grid1"], qd)
        g2 = resolve_grid(p["grid2"], qd)
        m = ex.run_cpt_map(sys_cfg, spec, g1, g2, threads, p["n_harmonics"], p["method"])
        cut = ex.cpt_linecut_and_visibility(m, qd.absorption_linewidth)
        m.metadata["visibility"] = cut.metadata["visibility"]
        m.metadata["visibility_std_error"] = cut.metadata["visibility_std_error"]
        return [m, cut]
    if cfg.experiment == "cpt-visibility":
        g1 = resolve_grid(p["grid1"], qd)
        g2 = resolve_grid(p["grid2"], qd)
        table, _ = ex.run_visibility_vs_field(sys_cfg, spec, p["fields"], g1, g2, threads,
                                              p["n_harmonics"])
        return [table]
    if cfg.experiment == "phase-jump":
        return [ex.run_phase_jump(sys_cfg, spec, p["dphi"], p["fall_time_ns"],
                                  resolve_timeline(p["timeline"]), p["prepare_us"],
                                  p["dt_max_us"], threads)]
    if cfg.experiment == "transient-scan":
        dphis = p["dphis"] if p["dphis"] is not None else list(np.arange(9) * math.pi / 4)
        table, _ = ex.run_transient_scan(sys_cfg, spec, dphis, p["readout_delay_ns"],
                                         p["fall_time_ns"], p["prepare_us"], p["dt_max_us"],
                                         threads, p["background"])
        return [table]
    raise ConfigError("experiment", f"unknown experiment {cfg.experiment!r}")


def write_outputs(results, cfg, out_dir, wall_time):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    written = []
    for r in results:
        if "csv" in cfg.formats:
            path = out / f"{r.name}.csv"
            path.write_bytes(table_csv(r).encode("utf-8"))
            written.append(path.name)
        if "json" in cfg.formats:
            path = out / f"{r.name}.json"
            path.write_bytes(table_json(r).encode("utf-8"))
            written.append(path.name)
    meta = {
        "experiment": cfg.experiment,
        "seed": cfg.seed,
        "build_id": build_id(),
        "wall_time_s": wall_time,
        "threads": cfg.threads,
        "config": snapshot(cfg),
        "tables": {r.name: _json_safe(r.metadata) for r in results},
        "files": written,
    }
    kernels = sum(int(r.metadata.get("kernel_evaluations", 0)) for r in results
                  if r.name != "cpt_linecut" and r.name != "g2_curve")
    meta["kernel_evaluations"] = kernels
    meta["invariants"] = INVARIANTS.snapshot()
    (out / "meta.json").write_bytes((json.dumps(_json_safe(meta), sort_keys=True, indent=2)
                                     + "\n").encode("utf-8"))
    (out / "config.json").write_bytes(canonical(cfg).encode("utf-8"))
    return written


def _error(code, kind, message, out_dir=None):
    doc = {"error": kind, "message": message, "exit_code": code}
    text = json.dumps(doc, sort_keys=True)
    print(text, file=sys.stderr)
    if out_dir is not None:
        try:
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            (Path(out_dir) / "error.json").write_text(text + "\n", encoding="utf-8")
        except OSError:
            pass
    return code


def _parser():
    ap = argparse.ArgumentParser(prog="darkstate-sim",
                                 description="Quantum-dot dark-state experiment simulator")
    ap.add_argument("experiment", choices=EXPERIMENTS)
    ap.add_argument("--config", required=True, help="JSON configuration file")
    ap.add_argument("--out", required=True, help="output directory")
    ap.add_argument("--seed", type=int, default=None, help="override the config seed")
    ap.add_argument("--threads", type=int, default=None,
                    help="worker threads (default: config value, else available cores)")
    ap.add_argument("--format", default="csv", help="comma-separated subset of csv,json")
    return ap


def main(argv=None):
    try:
        args = _parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    formats = tuple(f.strip() for f in args.format.split(",") if f.strip())
    try:
        text = Path(args.config).read_text(encoding="utf-8")
    except OSError as exc:
        return _error(EXIT_IO, "io", f"cannot read config: {exc}")
    try:
        if args.seed is not None and args.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        if args.threads is not None and args.threads < 1:
            raise ConfigError("threads", "must be >= 1")
        threads = args.threads
        if threads is None and '"threads"' not in text:
            threads = os.cpu_count() or 1
        cfg = parse_config(text, args.experiment, args.seed, threads, formats)
    except (ConfigError, ModelError) as exc:
        return _error(EXIT_CONFIG, "config", str(exc), args.out)
    t0 = time.perf_counter()
    INVARIANTS.reset()
    try:
        results = run_experiment(cfg)
    except (NumericalError, LinAlgError, EmptySelectionError, np.linalg.LinAlgError) as exc:
        return _error(EXIT_NUMERICAL, "numerical", str(exc), args.out)
    except (ConfigError, ModelError, ex.GeometryError) as exc:
        return _error(EXIT_CONFIG, "config", str(exc), args.out)
    wall = time.perf_counter() - t0
    try:
        write_outputs(results, cfg, args.out, wall)
    except OSError as exc:
        return _error(EXIT_IO, "io", str(exc))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
