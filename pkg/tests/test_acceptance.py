"""Acceptance suite: one test per numbered criterion.

Every test records a PASS/FAIL line (repeated in the terminal summary) and
then asserts the criterion at its stated tolerance.  Criteria the model
cannot meet fail here on purpose; see the decision log for the analysis.

The whole module takes roughly a quarter of an hour on one core.
"""

import json
import math
import time
from dataclasses import replace

import numpy as np
import pytest

from darkstate import dynamics as dyn, qcore
from darkstate.cli import main, table_csv
from darkstate.experiments import (cpt_linecut_and_visibility, dominant_transition_detuning,
                                   map_fluorescence, phase_jump_config, run_cpt_map,
                                   run_g2_experiment, run_phase_jump, run_transient_scan,
                                   run_visibility_vs_field)
from darkstate.model import (POL_H, POL_SIGMA_PLUS, POL_V, LaserDrive, MagneticField,
                             QdParameters, SystemConfig, collapse_operators,
                             mixed_ground_state, pure_state)
from darkstate.nuclear import OhEnsembleSpec
from darkstate.observables import g2
from conftest import record_acceptance

pytestmark = pytest.mark.slow

QD = QdParameters()
GAMMA = QD.linewidth_gamma
GAMMA_ABS = QD.absorption_linewidth
TAU_NS = QD.radiative_lifetime_tau
TWO_PI = 2 * math.pi

# CSV bytes of each criterion's run at one thread, for the determinism check
CSV = {}
# worst invariants over every run in this module
INVARIANT_LOG = []


@pytest.fixture(autouse=True)
def _track_invariants():
    dyn.INVARIANTS.reset()
    yield
    INVARIANT_LOG.append(dyn.INVARIANTS.snapshot())


def _csv(tables):
    return b"".join(table_csv(t).encode() for t in tables)


# ------------------------------------------------------------------ 1

def cycling_config():
    """sigma+ drive on the |up_z> <-> up-trion transition of a z field, laser on resonance."""
    field = MagneticField(0.0, 0.0, 5.0)
    laser = LaserDrive(rabi=QD.rabi(0.224), polarization=POL_SIGMA_PLUS)
    cfg = SystemConfig(qd=QD, b_ext=field, lasers=(laser,), oh_dispersion_sigma=0.0)
    offset = dominant_transition_detuning(cfg, MagneticField())
    return cfg.with_lasers(replace(laser, detuning=-offset))


def run_c1(threads=1):
    cfg = cycling_config()
    l = dyn.LindbladGenerator.from_config(cfg, MagneticField()).at(0.0)
    # spin-z is conserved, so the stationary state depends on where it starts
    rho = qcore.devec(dyn.stationary_projector(l) @ qcore.vec(pure_state(0)))
    dyn._invariant_stats(qcore.vec(rho))
    return float(np.real(rho[2, 2] + rho[3, 3]))


def test_c1_two_level_steady_state():
    t0 = time.perf_counter()
    pop = run_c1()
    runtime = time.perf_counter() - t0
    om = TWO_PI * QD.rabi(0.224)
    gam = 1e3 / TAU_NS
    exact = (om**2 / 4) / (om**2 / 2 + gam**2 / 4)
    CSV[1] = repr(pop).encode()
    ok = abs(pop - exact) <= 1e-4 and abs(pop - 0.0456) <= 1e-4 and runtime < 1.0
    record_acceptance(1, "two-level steady state", ok,
                      f"excited {pop:.6f}, formula {exact:.6f}, runtime {runtime:.3f} s")
    assert abs(pop - exact) <= 1e-4
    assert abs(exact - 0.0456) <= 1e-4
    assert runtime < 1.0


# ------------------------------------------------------------------ 3

IDEAL_FIELD_MT = 1000.0


def ideal_lambda_config(rabi_fraction=0.1):
    s = QD.gyro_electron * IDEAL_FIELD_MT
    lasers = (LaserDrive(rabi=QD.rabi(rabi_fraction), polarization=POL_SIGMA_PLUS,
                         frequency_offset=-s / 2),
              LaserDrive(rabi=QD.rabi(rabi_fraction), polarization=POL_SIGMA_PLUS,
                         frequency_offset=s / 2))
    spec = OhEnsembleSpec(sigma=0.0, n_samples=1, mean=(IDEAL_FIELD_MT, 0.0, 0.0))
    return SystemConfig(qd=QD, lasers=lasers, oh_dispersion_sigma=0.0), spec


def run_c3(threads=1):
    cfg, spec = ideal_lambda_config()
    oh = MagneticField(*spec.mean)
    pop = map_fluorescence(cfg, oh, [0.0], [0.0])[0] / QD.decay_rate
    grid = np.linspace(-1.5, 1.5, 41) * GAMMA_ABS
    m = run_cpt_map(cfg, spec, grid, grid, threads)
    cut = cpt_linecut_and_visibility(m, GAMMA_ABS)
    return pop, cut.metadata["visibility"], [m, cut]


def test_c3_cpt_null():
    pop, vis, tables = run_c3()
    CSV[3] = _csv(tables)
    ok = pop <= 1e-6 and vis >= 0.98
    record_acceptance(3, "CPT null in an ideal Lambda", ok,
                      f"excited population {pop:.2e}, visibility {vis:.5f}")
    assert pop <= 1e-6
    assert vis >= 0.98


# ------------------------------------------------------------------ 4

def antibunching_configs():
    """Five single-realization configurations with a well-defined Lambda:
    in-plane field 3-10 mT, Rabi 0.8-1.5 Gamma, laser within 0.4 Gamma of the
    bare transition."""
    rng = np.random.default_rng(2024)
    out = []
    for _ in range(5):
        b_perp = rng.uniform(3.0, 10.0)
        angle = rng.uniform(0, TWO_PI)
        field = MagneticField(b_perp * math.cos(angle), b_perp * math.sin(angle),
                              rng.uniform(-1.0, 1.0))
        laser = LaserDrive(rabi=QD.rabi(rng.uniform(0.8, 1.5)),
                           detuning=rng.uniform(-0.4, 0.4) * GAMMA, polarization=POL_H)
        out.append((SystemConfig(qd=QD, lasers=(laser,), oh_dispersion_sigma=0.0), field))
    return out


def run_c4(threads=1):
    values = []
    for cfg, field in antibunching_configs():
        l = dyn.LindbladGenerator.from_config(cfg, field).at(0.0)
        rho = dyn.steady_state(l)
        curve = g2(l, rho, np.array([0.0, 40 * TAU_NS]), collapse_operators(cfg, field))
        values.append(curve.values)
    return np.array(values)


def test_c4_antibunching():
    vals = run_c4()
    CSV[4] = vals.tobytes()
    zero_exact = bool(np.all(vals[:, 0] == 0.0))
    dev = float(np.max(np.abs(vals[:, 1] - 1.0)))
    ok = zero_exact and dev <= 1e-3
    record_acceptance(4, "antibunching", ok,
                      f"g2(0) = {vals[:, 0].tolist()}, max |g2(40 tau) - 1| = {dev:.2e}")
    assert zero_exact
    assert dev <= 1e-3


# ------------------------------------------------------------------ 5

BUNCHING_DETUNINGS = np.array([0.0, 0.25, 0.5, 0.75, 1.0]) * GAMMA_ABS


def run_c5(threads=1, n_samples=512):
    cfg = SystemConfig(qd=QD, lasers=(LaserDrive(rabi=QD.rabi(0.224), polarization=POL_H),))
    spec = OhEnsembleSpec(sigma=18.0, n_samples=n_samples, seed=5)
    return run_g2_experiment(cfg, spec, BUNCHING_DETUNINGS, threads=threads)


def test_c5_bunching_trend():
    t0 = time.perf_counter()
    curves, summary = run_c5()
    runtime = time.perf_counter() - t0
    CSV[5] = _csv([curves, summary])
    a = summary.column("bunching_amplitude")
    se = summary.column("bunching_amplitude_std_error")
    steps = [a[i + 1] - a[i] > math.hypot(se[i], se[i + 1]) for i in range(a.size - 1)]
    ok = all(steps) and runtime < 600
    record_acceptance(5, "bunching grows with detuning", ok,
                      "amplitudes " + ", ".join(f"{x:.3f}+-{e:.3f}" for x, e in zip(a, se))
                      + f" at {[0, 0.25, 0.5, 0.75, 1.0]} Gamma_abs; runtime {runtime:.1f} s")
    assert runtime < 600
    assert all(steps), "bunching amplitude is not strictly increasing"


# ------------------------------------------------------------------ 6, 7, 8

CPT_SEED = 1
CPT_SAMPLES = 128


def cpt_config(bz=0.0, dephasing=0.0):
    qd = replace(QD, dnsp_splitting=400.0, spin_dephasing_rate=dephasing)
    r = qd.rabi(0.224)
    return SystemConfig(qd=qd, b_ext=MagneticField(0.0, 0.0, bz),
                        lasers=(LaserDrive(rabi=r, polarization=POL_H),
                                LaserDrive(rabi=r, polarization=POL_V)))


def cpt_cli_config(n_samples=CPT_SAMPLES):
    return {"experiment": "cpt-map", "seed": CPT_SEED,
            "qd": {"dnsp_splitting": 400.0},
            "b_ext": {"bx": 0.0, "by": 0.0, "bz": 0.0},
            "ensemble": {"sigma": 18.0, "n_samples": n_samples},
            "cpt-map": {"grid1": None, "grid2": None}}


def run_cli(tmp, doc, threads, name):
    cfg = tmp / f"{name}.json"
    cfg.write_text(json.dumps(doc))
    out = tmp / name
    # the CLI resets the invariant log and reports its own in meta.json
    INVARIANT_LOG.append(dyn.INVARIANTS.snapshot())
    code = main(["cpt-map", "--config", str(cfg), "--out", str(out), "--threads", str(threads)])
    if code == 0:
        INVARIANT_LOG.append(json.loads((out / "meta.json").read_text())["invariants"])
    return code, out


@pytest.fixture(scope="module")
def zero_field_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("cpt")
    code, out = run_cli(tmp, cpt_cli_config(), 1, "zero_field")
    return code, out, tmp


def test_c6_cpt_dip(zero_field_run):
    code, out, _ = zero_field_run
    assert code == 0
    meta = json.loads((out / "meta.json").read_text())
    CSV[6] = (out / "cpt_map.csv").read_bytes() + (out / "cpt_linecut.csv").read_bytes()
    cut = np.loadtxt(out / "cpt_linecut.csv", delimiter=",", skiprows=1)
    centre = int(np.argmin(np.abs(cut[:, 0])))
    f = cut[:, 2]
    local_min = f[centre] < f[centre - 1] and f[centre] < f[centre + 1]
    vis = meta["tables"]["cpt_map"]["visibility"]
    runtime = meta["wall_time_s"]
    n_eval = meta["kernel_evaluations"]
    ok = local_min and vis > 0.05 and runtime < 600 and n_eval == 41 * 41 * CPT_SAMPLES
    record_acceptance(6, "CPT dip at zero field", ok,
                      f"visibility {vis:.4f}+-{meta['tables']['cpt_map']['visibility_std_error']:.4f}, "
                      f"local minimum {local_min}, {n_eval} kernel evaluations, "
                      f"runtime {runtime:.1f} s")
    assert cut[centre, 0] == 0.0 and cut[centre, 1] == 0.0
    assert local_min
    assert vis > 0.05
    assert n_eval == 41 * 41 * CPT_SAMPLES
    assert runtime < 600


FIELDS = [9.0, 18.4, 30.0]


def run_c7(threads=1, n_samples=CPT_SAMPLES):
    spec = OhEnsembleSpec(sigma=18.0, n_samples=n_samples, seed=CPT_SEED)
    grid = np.linspace(-1.5, 1.5, 41) * GAMMA_ABS
    table, _ = run_visibility_vs_field(cpt_config(), spec, FIELDS, grid, grid, threads)
    return table


def test_c7_field_breakdown(zero_field_run):
    _, out, _ = zero_field_run
    zero = json.loads((out / "meta.json").read_text())["tables"]["cpt_map"]
    table = run_c7()
    CSV[7] = _csv([table])
    vis = np.concatenate([[zero["visibility"]], table.column("visibility")])
    err = np.concatenate([[zero["visibility_std_error"]], table.column("visibility_std_error")])
    ratio = vis[2] / vis[0]
    monotone = all(vis[i + 1] <= vis[i] + math.hypot(err[i], err[i + 1])
                   for i in range(vis.size - 1))
    ok = ratio < 0.3 and monotone
    record_acceptance(7, "CPT dip disappears in a Faraday field", ok,
                      "visibility " + ", ".join(f"{v:.4f}+-{e:.4f}" for v, e in zip(vis, err))
                      + f" at 0, 9, 18.4, 30 mT; ratio at 18.4 mT {ratio:.3f}")
    assert monotone
    assert ratio < 0.3


def run_c8(threads=1, n_samples=CPT_SAMPLES):
    rate = 10 * QD.rabi(0.224) ** 2 / GAMMA
    spec = OhEnsembleSpec(sigma=18.0, n_samples=n_samples, seed=CPT_SEED)
    grid = np.linspace(-1.5, 1.5, 41) * GAMMA_ABS
    m = run_cpt_map(cpt_config(dephasing=rate), spec, grid, grid, threads)
    return rate, m, cpt_linecut_and_visibility(m, GAMMA_ABS)


def test_c8_dephasing_kills_dip(zero_field_run):
    _, out, _ = zero_field_run
    coherent = json.loads((out / "meta.json").read_text())["tables"]["cpt_map"]["visibility"]
    rate, m, cut = run_c8()
    CSV[8] = _csv([m, cut])
    vis = cut.metadata["visibility"]
    ok = vis < 0.1 * coherent
    record_acceptance(8, "spin dephasing removes the dip", ok,
                      f"visibility {vis:.4f} at {rate:.1f} MHz dephasing vs {coherent:.4f} "
                      f"coherent (ratio {vis / coherent:.3f})")
    assert vis < 0.1 * coherent


# ------------------------------------------------------------------ 9

# Laser 2 sits 80 MHz below laser 1; with the opposite sign the pi ramp
# raises the fluorescence instead of dipping (see the decision log).
OFFSET_SIGN = -1
JUMP_SAMPLES = 128


def run_c9(threads=1, n_samples=JUMP_SAMPLES):
    cfg = phase_jump_config(offset_sign=OFFSET_SIGN)
    spec = OhEnsembleSpec(sigma=18.0, n_samples=n_samples, seed=9)
    return [run_phase_jump(cfg, spec, dphi, threads=threads) for dphi in (math.pi, 0.0)]


def excess_over_periodic_baseline(res, period_ns):
    """Fluorescence minus its value whole beat periods earlier, before the jump."""
    t = res.column("time_ns")
    f = res.column("fluorescence_MHz")
    se = res.column("fluorescence_std_error_MHz")
    step = t[1] - t[0]
    k = np.floor(t / period_ns) + 1
    src = np.round((t - k * period_ns - t[0]) / step).astype(int)
    return t, f - f[src], np.hypot(se, se[src])


def test_c9_phase_jump_shape():
    runs = run_c9()
    CSV[9] = _csv(runs)
    period = 1e3 / 80.0
    fall = runs[0].metadata["fall_time_ns"]
    res = {}
    for name, r in zip(("pi", "zero"), runs):
        t, ex, se = excess_over_periodic_baseline(r, period)
        ramp = (t >= 0) & (t <= fall)
        window = (t > fall) & (t <= fall + period)
        i = int(np.argmin(np.where(ramp, ex, np.inf)))
        z = ex[window] / se[window]
        res[name] = {"dip": ex[i], "dip_t": t[i], "dip_z": ex[i] / se[i],
                     "z": z.max(), "peak": ex[window].max()}
    pi, zero = res["pi"], res["zero"]
    dip = pi["dip"] < 0 and pi["dip"] < zero["dip"]
    transient = pi["z"] >= 3
    absent = zero["z"] < 3 and zero["dip_z"] > -3
    ok = dip and transient and absent
    record_acceptance(9, "phase-jump dip and transient", ok,
                      f"dip {pi['dip']:.3f} MHz at {pi['dip_t']:.2f} ns, transient "
                      f"{pi['peak']:.3f} MHz = {pi['z']:.2f} SE; without a jump "
                      f"{zero['z']:.2e} SE")
    assert dip
    assert transient
    assert absent


# ------------------------------------------------------------------ 10

DPHIS = np.arange(9) * math.pi / 4


def run_c10_ideal(threads=1):
    cfg, spec = ideal_lambda_config()
    return run_transient_scan(cfg, spec, DPHIS, fall_time=0.2, threads=threads,
                              fit_p0=[1.0, 0.0, 0.0])


def run_c10_paper(threads=1, n_samples=JUMP_SAMPLES):
    cfg = phase_jump_config(offset_sign=OFFSET_SIGN)
    spec = OhEnsembleSpec(sigma=18.0, n_samples=n_samples, seed=1)
    return run_transient_scan(cfg, spec, DPHIS, threads=threads)


def _sin2_summary(fit):
    a, phi0 = fit.params["A"], fit.params["phi0"]
    peak = (math.pi - 2 * phi0) % TWO_PI
    return a, phi0, fit.residual_norm / a, peak


def test_c10_sinusoidal_control():
    t0 = time.perf_counter()
    table_i, fit_i = run_c10_ideal()
    table_p, fit_p = run_c10_paper()
    runtime = time.perf_counter() - t0
    CSV[10] = _csv([table_i, table_p])
    a_i, phi_i, res_i, _ = _sin2_summary(fit_i)
    amp = table_i.column("amplitude")
    periodic = abs(amp[0] - amp[-1]) <= 1e-3 * a_i
    ideal_ok = res_i < 0.01 and abs(phi_i) < 0.05 and periodic
    a_p, phi_p, res_p, peak = _sin2_summary(fit_p)
    paper_ok = res_p < 0.1 and 0.8 * math.pi <= peak <= 1.2 * math.pi
    ok = ideal_ok and paper_ok and runtime < 900
    record_acceptance(10, "sinusoidal phase control", ok,
                      f"ideal: residual/A {res_i:.2e}, phi0 {phi_i:.4f}, |a(0)-a(2pi)|/A "
                      f"{abs(amp[0] - amp[-1]) / a_i:.2e}; ensemble: residual/A {res_p:.3f}, "
                      f"maximum at {peak / math.pi:.3f} pi; runtime {runtime:.0f} s")
    assert ideal_ok
    assert 0.8 * math.pi <= peak <= 1.2 * math.pi
    assert res_p < 0.1
    assert runtime < 900


# ------------------------------------------------------------------ 11

# Criteria 7-10 are rerun with fewer samples: the chunk layout, and hence the
# reduction order, is the same at any sample count.
REDUCED = 16


def test_c11_determinism(zero_field_run):
    _, out, tmp = zero_field_run
    checks = {}
    checks[1] = repr(run_c1(3)).encode() == CSV[1]
    checks[3] = _csv(run_c3(3)[2]) == CSV[3]
    checks[4] = run_c4(3).tobytes() == CSV[4]
    checks[5] = _csv(run_c5(3)) == CSV[5]
    code, again = run_cli(tmp, cpt_cli_config(), 2, "zero_field_threads2")
    checks[6] = code == 0 and all((again / n).read_bytes() == (out / n).read_bytes()
                                  for n in ("cpt_map.csv", "cpt_linecut.csv"))
    checks[7] = _csv([run_c7(1, REDUCED)]) == _csv([run_c7(3, REDUCED)])
    checks[8] = _csv(run_c8(1, REDUCED)[1:]) == _csv(run_c8(3, REDUCED)[1:])
    checks[9] = _csv(run_c9(1, REDUCED)) == _csv(run_c9(3, REDUCED))
    checks[10] = (_csv([run_c10_ideal(3)[0]]) + _csv([run_c10_paper(1, REDUCED)[0]])
                  == _csv([run_c10_ideal(1)[0]]) + _csv([run_c10_paper(3, REDUCED)[0]]))
    ok = all(checks.values())
    record_acceptance(11, "determinism across thread counts", ok,
                      "identical CSV bytes for criteria "
                      + ", ".join(str(k) for k, v in checks.items() if v)
                      + ("" if ok else "; differing: "
                         + ", ".join(str(k) for k, v in checks.items() if not v)))
    assert ok


# ------------------------------------------------------------------ 2

def rk4_error_ratio():
    l1 = LaserDrive(rabi=QD.rabi(1.0), polarization=POL_H)
    l2 = LaserDrive(rabi=QD.rabi(0.7), polarization=POL_H, frequency_offset=150.0)
    gen = dyn.LindbladGenerator.from_config(SystemConfig(qd=QD, lasers=(l1, l2)),
                                            MagneticField(10, 5, -3))
    y0 = qcore.vec(mixed_ground_state())
    t_end = 0.004

    def run(n):
        y, h = y0, t_end / n
        for k in range(n):
            y = dyn.rk4_step(gen, k * h, y, h)
        return y

    ref = run(1024)
    return float(np.linalg.norm(run(16) - ref) / np.linalg.norm(run(32) - ref))


def test_c2_conservation():
    """Runs last so that it sees the invariants of every other criterion."""
    ratio = rk4_error_ratio()
    logs = [s for s in INVARIANT_LOG if s["states_checked"]]
    drift = max(s["max_trace_drift"] for s in logs)
    herm = max(s["max_hermiticity"] for s in logs)
    lam = min(s["min_eigenvalue"] for s in logs)
    n = sum(s["states_checked"] for s in logs)
    ok = drift <= 1e-9 and herm <= 1e-10 and lam >= -1e-8 and abs(ratio - 16) <= 4
    record_acceptance(2, "conservation and RK4 order", ok,
                      f"{n} states: trace drift {drift:.2e}, Hermiticity {herm:.2e}, "
                      f"min eigenvalue {lam:.2e}; RK4 error ratio {ratio:.2f}")
    assert len(logs) >= 9
    assert drift <= 1e-9
    assert herm <= 1e-10
    assert lam >= -1e-8
    assert abs(ratio - 16) <= 4
