"""Numerical experiments: photon bunching, two-laser absorption maps and
phase-jump control of the dark state.

Every experiment averages a per-realization kernel over an Overhauser
ensemble.  Samples are processed in fixed chunks (:func:`nuclear.chunked_map`)
and partial sums are merged in chunk order, so outputs do not depend on the
number of worker threads.  Standard errors of nonlinear summaries (fit
amplitudes, visibilities, normalized transients) use a delete-one-chunk
jackknife over those same chunks.
"""

from dataclasses import dataclass, field, replace
import math
import time
import warnings

import numpy as np

from . import qcore
from .dynamics import (commutator_superop, stationary_projector, harmonic_steady_state,
                       lindblad_superop, matrix_power, propagator, rk4_step,
                       hermitize_vec, steady_state_batch, trion_population,
                       LindbladGenerator, quasi_steady_fluorescence, _check_invariants)
from .fitting import fit_least_squares
from .model import (TWO_PI, POL_H, POL_V, LaserDrive, MagneticField, PhaseProfile,
                    SystemConfig, collapse_operators, drive_terms, ground_hamiltonian,
                    mixed_ground_state, static_hamiltonian)
from .nuclear import (EmptySelectionError, chunked_map, sample_oh_array,
                      wander_convolve)
from .observables import bunching_amplitude, G2Curve, intensity_correlation

# Omega_sat^2 = Gamma^2 / 2 (angular), i.e. Omega_sat = Gamma / sqrt(2) in MHz.
SATURATION_RABI_SQ_OVER_GAMMA_SQ = 0.5
PHASE_JUMP_FIELD_MT = 8.4
PHASE_JUMP_OFFSET_MHZ = 80.0
DEFAULT_HARMONICS = 6


class GeometryError(ValueError):
    """The detuning grid cannot provide the requested cut."""


@dataclass
class ExperimentResult:
    """One output table.

    ``axes`` and ``values`` map unit-suffixed column names to equal-length
    1-D arrays; ``metadata`` carries scalars describing the run.
    """

    name: str
    axes: dict
    values: dict
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        cols = {**self.axes, **self.values}
        lengths = {len(np.atleast_1d(v)) for v in cols.values()}
        if len(lengths) > 1:
            raise ValueError(f"columns of {self.name} differ in length: {sorted(lengths)}")
        if not self.metadata:
            self.metadata = {"experiment": self.name}

    @property
    def columns(self):
        return {**self.axes, **self.values}

    def column(self, name):
        return np.asarray(self.columns[name])

    def __len__(self):
        cols = self.columns
        return len(next(iter(cols.values()))) if cols else 0


def _jackknife(stat, parts):
    """Delete-one-part jackknife standard error of ``stat(sum of parts)``."""
    parts = np.asarray(parts, dtype=float)
    k = parts.shape[0]
    if k < 2:
        return np.zeros_like(np.asarray(stat(parts.sum(0)), dtype=float))
    total = parts.sum(0)
    reps = np.array([stat(total - p) for p in parts])
    return np.sqrt((k - 1) / k * np.sum((reps - reps.mean(0)) ** 2, axis=0))


def _oh_fields(spec, idx):
    return [MagneticField.from_array(b) for b in sample_oh_array(spec, idx)]


# ---------------------------------------------------------------- photon bunching

def dominant_transition_detuning(cfg, oh):
    """Detuning (MHz) of laser 1 from the brightest optical transition.

    Transition strengths are the squared dipole matrix elements between the
    field-quantized ground states and the z-quantized trions, weighted by a
    Lorentzian of the radiative linewidth.
    """
    qd = cfg.qd
    laser = cfg.lasers[0]
    h_g = ground_hamiltonian(qd, cfg.b_ext + oh)[:2, :2] / TWO_PI
    e_g, vecs = np.linalg.eigh(h_g)
    zh = 0.5 * qd.gyro_hole * cfg.b_ext.bz
    e_t = (zh, -zh)
    coupling = laser.coupling()[2:, :2]
    best, best_w = 0.0, -1.0
    for ti in range(2):
        for gi in range(2):
            strength = abs(coupling[ti] @ vecs[:, gi]) ** 2
            det = laser.total_detuning - (e_t[ti] - e_g[gi])
            w = strength / (det**2 + (qd.linewidth_gamma / 2) ** 2)
            if w > best_w:
                best, best_w = det, w
    return best


def detuning_filter(cfg, window):
    """Post-selection: accept realizations whose dominant transition lies within ``window`` MHz."""
    def accept(oh):
        return abs(dominant_transition_detuning(cfg, oh)) <= window
    return accept


def default_taus(t_max_ns=2000.0, step_ns=1.0):
    return np.arange(0.0, t_max_ns + 0.5 * step_ns, step_ns)


def _stationary(l, emit, cops):
    """Stationary state and long-delay correlation ``G(inf)`` of one generator.

    Normally ``G(inf) = I^2``.  When a conserved quantity leaves the
    stationary manifold degenerate (e.g. a cycling transition), the state is
    the one reached from the mixed ground state and ``G(inf)`` follows from
    projecting the post-emission state onto the manifold.
    """
    try:
        return _ss(l[None])[0], None
    except np.linalg.LinAlgError:
        pass
    proj = stationary_projector(l)
    rho = qcore.devec(proj @ qcore.vec(mixed_ground_state()))
    rho_c = sum(c @ rho @ c.conj().T for c in cops)
    after = qcore.devec(proj @ qcore.vec(rho_c))
    return rho, float(np.real(np.trace(emit @ after)))


def _stationary_vecs(ls):
    """Batched stationary states; degenerate members start from the mixed ground state."""
    try:
        return steady_state_batch(ls)
    except np.linalg.LinAlgError:
        y0 = qcore.vec(mixed_ground_state())
        return np.stack([stationary_projector(l) @ y0 for l in ls])


def _g2_chunk(cfg, spec, taus, idx, window):
    """``(G, I, G_inf)`` for the accepted realizations of one index chunk."""
    fields = _oh_fields(spec, idx)
    if window is not None:
        keep = detuning_filter(cfg, window)
        fields = [b for b in fields if keep(b)]
    if not fields:
        return None
    ls = np.stack([LindbladGenerator.from_config(cfg, b).at(0.0) for b in fields])
    cops_all = [collapse_operators(cfg, b) for b in fields]
    emit = sum(c.conj().T @ c for c in cops_all[0][:2])
    try:
        states = _ss(ls)
        g_inf = [None] * len(fields)
    except np.linalg.LinAlgError:
        pairs = [_stationary(l, emit, c) for l, c in zip(ls, cops_all)]
        states = np.stack([p[0] for p in pairs])
        g_inf = [p[1] for p in pairs]
    if len({len(c) for c in cops_all}) == 1 and all(
            len(c) == 2 for c in cops_all):
        g, rate = intensity_correlation(ls, states, taus, cops_all[0])
    else:
        # dephasing operators depend on the realization; handle one by one
        out = [intensity_correlation(l[None], r[None], taus, c)
               for l, r, c in zip(ls, states, cops_all)]
        g = np.concatenate([o[0] for o in out], axis=1)
        rate = np.concatenate([o[1] for o in out])
    g_inf = np.array([rate[i] ** 2 if v is None else v for i, v in enumerate(g_inf)])
    return g, rate, g_inf


def _ss(ls):
    return qcore.devec(steady_state_batch(ls))


def run_g2_experiment(cfg, spec, detunings, taus=None, threads=1, post_selection_window=None,
                      per_sample_normalization=False, tau_c0=None, fit_start=None):
    """Ensemble photon autocorrelation versus single-laser detuning.

    For each detuning the ensemble curve is ``<G_i(tau)> / <G_i(inf)>``, which
    is ``<G_i(tau)> / <I_i^2>`` whenever the stationary state is unique: the
    curve is normalized to its long-delay limit.  With
    ``per_sample_normalization`` each realization is normalized first and the
    curves are averaged.  Returns ``(curves, summary)`` tables.
    """
    if len(cfg.lasers) != 1:
        raise ValueError("the g2 experiment uses a single laser")
    t_start = time.perf_counter()
    taus = default_taus() if taus is None else np.asarray(taus, dtype=float)
    tau_rad = cfg.qd.radiative_lifetime_tau
    curve_cols = {"detuning_MHz": [], "tau_ns": [], "g2": []}
    summ = {k: [] for k in ("detuning_MHz", "bunching_amplitude", "bunching_amplitude_std_error",
                            "timescale_ns", "timescale_std_error_ns", "mean_rate_MHz",
                            "n_effective", "fit_converged")}
    for det in detunings:
        laser = replace(cfg.lasers[0], detuning=float(det))
        c = cfg.with_lasers(laser)
        parts = chunked_map(lambda idx: _g2_chunk(c, spec, taus, idx, post_selection_window),
                            spec.n_samples, threads)
        parts = [p for p in parts if p is not None]
        if not parts:
            raise EmptySelectionError(f"no realization accepted at detuning {det} MHz")
        n_eff = int(sum(p[1].size for p in parts))
        nt = taus.size
        if per_sample_normalization:
            sums = np.array([np.concatenate([(p[0] / p[2]).sum(1), [p[1].sum(), p[1].size]])
                             for p in parts])

            def stat(s):
                return s[:nt] / s[nt + 1]
        else:
            sums = np.array([np.concatenate([p[0].sum(1), [p[2].sum(), p[1].sum(),
                                                          p[1].size]]) for p in parts])

            def stat(s):
                return s[:nt] / s[nt]
        total = sums.sum(0)
        g2 = stat(total)
        curve = G2Curve(taus, g2)
        amp, tc, rep = bunching_amplitude(curve, tau_rad, tau_c0, fit_start=fit_start)

        def amp_stat(s):
            return np.array(bunching_amplitude(G2Curve(taus, stat(s)), tau_rad, tc,
                                               fit_start=fit_start)[:2])

        jk = _jackknife(amp_stat, sums) if len(parts) > 1 else np.zeros(2)
        fit_err = (rep.std_errors["amplitude"], rep.std_errors["tau_c"]) if rep else (0.0, 0.0)
        mean_rate = total[-2] / total[-1] if not per_sample_normalization else total[nt] / total[nt + 1]
        curve_cols["detuning_MHz"].append(np.full(nt, float(det)))
        curve_cols["tau_ns"].append(taus)
        curve_cols["g2"].append(g2)
        summ["detuning_MHz"].append(float(det))
        summ["bunching_amplitude"].append(float(amp))
        summ["bunching_amplitude_std_error"].append(float(math.hypot(fit_err[0], jk[0])))
        summ["timescale_ns"].append(float(tc))
        summ["timescale_std_error_ns"].append(float(math.hypot(fit_err[1], jk[1])))
        summ["mean_rate_MHz"].append(float(mean_rate))
        summ["n_effective"].append(n_eff)
        summ["fit_converged"].append(int(rep.converged) if rep else 1)
    meta = {"experiment": "g2", "n_samples": spec.n_samples,
            "normalization": "per-sample" if per_sample_normalization else "ensemble",
            "kernel_evaluations": len(detunings) * spec.n_samples,
            "wall_time_s": time.perf_counter() - t_start}
    curves = ExperimentResult("g2_curve", {k: np.concatenate(curve_cols[k]) for k in
                                           ("detuning_MHz", "tau_ns")},
                              {"g2": np.concatenate(curve_cols["g2"])}, dict(meta))
    summary = ExperimentResult("g2_summary", {"detuning_MHz": np.array(summ["detuning_MHz"])},
                               {k: np.array(v) for k, v in summ.items() if k != "detuning_MHz"},
                               dict(meta))
    return curves, summary


# ---------------------------------------------------------------- two-laser maps

def _uniform_step(grid, name):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size < 2:
        raise GeometryError(f"{name} needs at least two points")
    d = np.diff(grid)
    if np.any(d <= 0) or np.max(np.abs(d - d[0])) > 1e-9 * max(1.0, abs(d[0])):
        raise GeometryError(f"{name} must be uniform and increasing")
    return float(d[0])


def map_pieces(cfg, oh):
    """Decompose the two-laser generator for detuning sweeps.

    Returns ``(l_ref, d_l1, lp, lm, beat_ref)`` such that for laser
    detunings ``(d1, d2)`` (MHz) the generator is
    ``L(t) = l_ref + d1*d_l1 + exp(-i nu t) lp + exp(i nu t) lm`` with
    ``nu = beat_ref + 2 pi (d2 - d1)``.
    """
    if len(cfg.lasers) != 2:
        raise ValueError("two lasers required")
    l1, l2 = cfg.lasers
    if not (l1.phase_profile.is_constant and l2.phase_profile.is_constant):
        raise ValueError("absorption maps need constant laser phases")
    ref = cfg.with_lasers(replace(l1, detuning=0.0), replace(l2, detuning=0.0))
    cops = collapse_operators(ref, oh)
    (x1, _, p1), (x2, beat, p2) = drive_terms(ref)
    e1 = np.exp(-1j * p1(0.0))
    e2 = np.exp(-1j * p2(0.0))
    h0 = static_hamiltonian(ref, oh) + e1 * x1 + np.conj(e1) * x1.conj().T
    l_ref = lindblad_superop(h0, cops)
    proj = np.zeros((4, 4), dtype=complex)
    proj[2, 2] = proj[3, 3] = 1.0
    d_l1 = commutator_superop(-TWO_PI * proj)
    return l_ref, d_l1, e2 * commutator_superop(x2), np.conj(e2) * commutator_superop(x2.conj().T), beat


def map_fluorescence(cfg, oh, d1, d2, n_harmonics=DEFAULT_HARMONICS):
    """Time-averaged fluorescence (MHz) of one realization at detuning pairs.

    Uses the periodic steady state of the beat-note generator (harmonic
    expansion, matrix continued fractions); equal laser frequencies fall back
    to the static steady state.
    """
    d1 = np.asarray(d1, dtype=float).ravel()
    d2 = np.asarray(d2, dtype=float).ravel()
    l_ref, d_l1, lp, lm, beat = map_pieces(cfg, oh)
    l0 = l_ref[None] + d1[:, None, None] * d_l1[None]
    nu = beat + TWO_PI * (d2 - d1)
    out = np.zeros(d1.size)
    static = np.abs(nu) < 1e-9
    if np.any(~static):
        rho, _, _ = harmonic_steady_state(l0[~static], lp, lm, nu[~static], n_harmonics)
        out[~static] = trion_population(rho)
    if np.any(static):
        out[static] = trion_population(steady_state_batch(l0[static] + lp + lm))
    return cfg.qd.decay_rate * out


def map_fluorescence_integrated(cfg, ohs, d1, d2, settle=2.0, dt_max=1e-3):
    """Reference path: direct RK4 settle-and-average for each detuning pair.

    All realizations in ``ohs`` share the drive timing and are integrated
    together.  Returns an array ``(len(ohs), n_pairs)``.
    """
    out = []
    for a, b in zip(np.ravel(d1), np.ravel(d2)):
        l1, l2 = cfg.lasers
        c = cfg.with_lasers(replace(l1, detuning=float(a)), replace(l2, detuning=float(b)))
        gen = LindbladGenerator.stack([LindbladGenerator.from_config(c, oh) for oh in ohs])
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            out.append(np.atleast_1d(quasi_steady_fluorescence(gen, settle=settle, dt_max=dt_max)))
    return np.stack(out, axis=1)


def run_cpt_map(cfg, spec, grid1, grid2, threads=1, n_harmonics=DEFAULT_HARMONICS,
                method="harmonic", keep_parts=True):
    """Ensemble two-laser absorption map over ``(delta1, delta2)``.

    Columns: ``delta1_MHz``, ``delta2_MHz``, raw and wander-convolved
    fluorescence with standard errors.  The result carries the per-chunk
    partial sums (``parts``) for jackknife errors of derived quantities.
    """
    t_start = time.perf_counter()
    g1 = np.asarray(grid1, dtype=float)
    g2 = np.asarray(grid2, dtype=float)
    s1 = _uniform_step(g1, "grid1")
    s2 = _uniform_step(g2, "grid2")
    d1, d2 = np.meshgrid(g1, g2, indexing="ij")
    shape = d1.shape

    def chunk(idx):
        fields = _oh_fields(spec, idx)
        if method == "harmonic":
            vals = np.stack([map_fluorescence(cfg, b, d1, d2, n_harmonics) for b in fields])
        elif method == "integrate":
            vals = map_fluorescence_integrated(cfg, fields, d1, d2)
        else:
            raise ValueError(f"unknown method {method!r}")
        return np.stack([vals.sum(0), (vals**2).sum(0), np.full(vals.shape[1], len(fields))])

    parts = np.array(chunked_map(chunk, spec.n_samples, threads))
    total = parts.sum(0)
    n = total[2]
    mean = total[0] / n
    var = np.maximum(total[1] / n - mean**2, 0.0) * n / np.maximum(n - 1, 1)
    err = np.sqrt(var / n)
    sigma_w = cfg.qd.spectral_wander_sigma
    conv_warn = False
    if sigma_w > 0:
        if abs(s1 - s2) > 1e-9 * s1:
            raise GeometryError("wander convolution needs equal grid spacing")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            conv = wander_convolve(mean.reshape(shape), s1, sigma_w).ravel()
            conv_err = wander_convolve(err.reshape(shape), s1, sigma_w).ravel()
        conv_warn = bool(caught)
    else:
        conv, conv_err = mean, err
    meta = {"experiment": "cpt-map", "n_samples": spec.n_samples, "grid_shape": list(shape),
            "kernel_evaluations": int(d1.size * spec.n_samples), "method": method,
            "n_harmonics": n_harmonics, "wander_sigma_MHz": sigma_w,
            "wander_warning": conv_warn, "grid_step_MHz": [s1, s2],
            "wall_time_s": time.perf_counter() - t_start}
    res = ExperimentResult(
        "cpt_map",
        {"delta1_MHz": d1.ravel(), "delta2_MHz": d2.ravel()},
        {"fluorescence_raw_MHz": mean, "fluorescence_raw_std_error_MHz": err,
         "fluorescence_MHz": conv, "fluorescence_std_error_MHz": conv_err},
        meta,
    )
    if keep_parts:
        res.parts = parts
        res.grid = (g1, g2)
    return res


def _antidiagonal(g1, g2):
    """Index pairs ``(i, j)`` with ``g2[j]`` nearest to ``-g1[i]``."""
    s2 = g2[1] - g2[0]
    pairs = []
    for i, a in enumerate(g1):
        j = int(np.argmin(np.abs(g2 + a)))
        if abs(g2[j] + a) <= 0.5 * s2 + 1e-9:
            pairs.append((i, j))
    return pairs


def visibility_from_map(m, g1, g2, linewidth_abs):
    """``(visibility, linecut pairs, linecut values)`` of a 2-D map."""
    pairs = _antidiagonal(g1, g2)
    zero = [(i, j) for i, j in pairs if abs(g1[i]) <= 1e-9 * max(1.0, abs(g1).max())
            and abs(g2[j]) <= 1e-9 * max(1.0, abs(g2).max())]
    if not zero:
        raise GeometryError("grid has no node at delta1 = delta2 = 0")
    cut = np.array([m[i, j] for i, j in pairs])
    x = np.array([g1[i] for i, _ in pairs])
    ref = (np.abs(x) >= 0.3 * linewidth_abs - 1e-9) & (np.abs(x) <= 0.5 * linewidth_abs + 1e-9)
    if not np.any(ref):
        raise GeometryError("linecut has no nodes in the reference shoulders")
    s_ref = cut[ref].mean()
    s_tpr = m[zero[0]]
    vis = 0.0 if s_ref == 0 else (s_ref - s_tpr) / s_ref
    return float(vis), pairs, cut


def cpt_linecut_and_visibility(map_result, linewidth_abs, convolved=True):
    """Antidiagonal linecut (nearest grid nodes) and CPT visibility.

    Visibility is ``(S_ref - S_tpr) / S_ref`` with ``S_tpr`` the value at
    ``delta1 = delta2 = 0`` and ``S_ref`` the mean of the linecut where
    ``|delta1|`` lies in ``[0.3, 0.5] * linewidth_abs``.
    """
    g1, g2 = map_result.grid if hasattr(map_result, "grid") else _grid_from_columns(map_result)
    shape = (g1.size, g2.size)
    key = "fluorescence_MHz" if convolved else "fluorescence_raw_MHz"
    m = map_result.column(key).reshape(shape)
    vis, pairs, cut = visibility_from_map(m, g1, g2, linewidth_abs)
    err = 0.0
    parts = getattr(map_result, "parts", None)
    sigma_w = map_result.metadata.get("wander_sigma_MHz", 0.0)
    step = g1[1] - g1[0]
    if parts is not None and len(parts) > 1:
        def stat(s):
            mm = (s[0] / s[2]).reshape(shape)
            if convolved and sigma_w > 0:
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    mm = wander_convolve(mm, step, sigma_w)
            return visibility_from_map(mm, g1, g2, linewidth_abs)[0]
        err = float(_jackknife(stat, parts))
    meta = dict(map_result.metadata)
    meta.update({"experiment": "cpt-linecut", "visibility": vis, "visibility_std_error": err,
                 "reference_window_MHz": [0.3 * linewidth_abs, 0.5 * linewidth_abs]})
    return ExperimentResult(
        "cpt_linecut",
        {"delta1_MHz": np.array([g1[i] for i, _ in pairs]),
         "delta2_MHz": np.array([g2[j] for _, j in pairs])},
        {"fluorescence_MHz": cut},
        meta,
    )


def _grid_from_columns(res):
    g1 = np.unique(res.column("delta1_MHz"))
    g2 = np.unique(res.column("delta2_MHz"))
    return g1, g2


def run_visibility_vs_field(cfg, spec, fields, grid1, grid2, threads=1,
                            n_harmonics=DEFAULT_HARMONICS):
    """CPT visibility versus a Faraday (z) field; returns the table and the maps."""
    t_start = time.perf_counter()
    vis, errs, maps = [], [], []
    for bz in fields:
        c = replace(cfg, b_ext=MagneticField(cfg.b_ext.bx, cfg.b_ext.by, float(bz)))
        mres = run_cpt_map(c, spec, grid1, grid2, threads, n_harmonics)
        cut = cpt_linecut_and_visibility(mres, cfg.qd.absorption_linewidth)
        vis.append(cut.metadata["visibility"])
        errs.append(cut.metadata["visibility_std_error"])
        maps.append(mres)
    meta = {"experiment": "cpt-visibility", "n_samples": spec.n_samples,
            "kernel_evaluations": int(len(fields) * len(grid1) * len(grid2) * spec.n_samples),
            "wall_time_s": time.perf_counter() - t_start}
    table = ExperimentResult("cpt_visibility", {"b_z_mT": np.asarray(fields, dtype=float)},
                             {"visibility": np.array(vis), "visibility_std_error": np.array(errs)},
                             meta)
    return table, maps


# ---------------------------------------------------------------- phase jumps

def saturation_rabi(qd):
    """Rabi amplitude (MHz) at saturation, Omega_sat^2 = Gamma^2 / 2."""
    return qd.linewidth_gamma * math.sqrt(SATURATION_RABI_SQ_OVER_GAMMA_SQ)


def phase_jump_rabis(qd, power_fraction=0.2, ratio=4.0):
    """``(Omega_1, Omega_2)`` with ``Omega_1^2 = ratio * Omega_2^2`` and a
    total of ``power_fraction`` saturation powers."""
    total = power_fraction * saturation_rabi(qd) ** 2
    o2 = math.sqrt(total / (1.0 + ratio))
    return math.sqrt(ratio) * o2, o2


def phase_jump_config(qd=None, offset_sign=1, detuning=0.0, field_mt=PHASE_JUMP_FIELD_MT,
                      polarizations=(POL_H, POL_V), oh_dispersion_sigma=18.0):
    """Two-laser configuration of the time-domain experiment.

    Laser 2 is offset from laser 1 by ``offset_sign * 80`` MHz; the field is
    along z.
    """
    from .model import QdParameters
    qd = QdParameters() if qd is None else qd
    o1, o2 = phase_jump_rabis(qd)
    return SystemConfig(
        qd=qd, b_ext=MagneticField(0.0, 0.0, field_mt),
        lasers=(LaserDrive(rabi=o1, detuning=detuning, polarization=polarizations[0]),
                LaserDrive(rabi=o2, detuning=detuning, polarization=polarizations[1],
                           frequency_offset=offset_sign * PHASE_JUMP_OFFSET_MHZ)),
        oh_dispersion_sigma=oh_dispersion_sigma)


def _beat_period(cfg):
    beats = [abs(b) for _, b, _ in drive_terms(cfg) if b != 0.0]
    return TWO_PI / min(beats) if beats else None


def _prepared_states(cfg, fields, prepare, dt_max):
    """Stroboscopic state after ``prepare`` us from the mixed ground state.

    The generator before the jump is periodic in the beat period; the
    transfer matrix over one period (RK4) is raised to the required power.
    Returns the stacked generator (with constant phases) and the states.
    """
    c0 = cfg.with_lasers(*(replace(l, phase_profile=PhaseProfile.constant(l.phase_profile(0.0)))
                           for l in cfg.lasers))
    gen = LindbladGenerator.stack([LindbladGenerator.from_config(c0, b) for b in fields])
    period = _beat_period(c0)
    y0 = np.broadcast_to(qcore.vec(mixed_ground_state()), gen.batch_shape + (16,)).copy()
    if period is None:
        period = min(prepare, 0.0125)
    n_periods = max(1, int(round(prepare / period)))
    mono = propagator(gen, 0.0, period, dt_max)
    y = np.einsum("...ij,...j->...i", matrix_power(mono, n_periods), y0)
    y = hermitize_vec(y)
    _check_invariants(y, n_periods * period)
    return y, n_periods * period


def _integrate_window(gen, y, t0, times, dt_max):
    """RK4 from ``t0`` recording fluorescence at ``times`` (us, ascending)."""
    dt = gen.step_size(dt_max)
    out = []
    t = t0
    for target in times:
        gap = target - t
        if gap > 1e-15:
            n = max(1, math.ceil(gap / dt - 1e-9))
            h = gap / n
            for _ in range(n):
                y = rk4_step(gen, t, y, h)
                y = hermitize_vec(y)
                t += h
            t = target
        out.append(gen.fluorescence(y))
    _check_invariants(y, t)
    return np.array(out), y


def _ramp_cfg(cfg, t_jump, dphi, fall_time_us):
    l1 = cfg.lasers[0]
    p0 = float(l1.phase_profile(0.0))
    if dphi == 0:
        prof = PhaseProfile.constant(p0)
    else:
        prof = PhaseProfile.ramp(t_jump, fall_time_us, -dphi, p0)
    return cfg.with_lasers(replace(l1, phase_profile=prof), *cfg.lasers[1:])


def _phase_jump_traces(cfg, spec, dphis, times_rel, fall_time_us, prepare, dt_max, threads):
    """Per-chunk fluorescence sums for every ``dphi`` at ``t_jump + times_rel``.

    Returns an array ``(n_chunks, n_dphi + 1, n_times)``; the last row along
    axis 1 holds the sample counts.
    """
    times_rel = np.asarray(times_rel, dtype=float)

    def chunk(idx):
        fields = _oh_fields(spec, idx)
        y0, t_prep = _prepared_states(cfg, fields, prepare, dt_max)
        # the jump happens a whole number of beat periods after preparation so
        # that the recorded pre-jump baseline lies on the periodic orbit
        period = _beat_period(cfg) or 0.0
        lead = max(0.0, -float(times_rel.min()))
        back = math.ceil(lead / period - 1e-9) * period if period else lead
        t_jump = t_prep + back
        rows = []
        for dphi in dphis:
            c = _ramp_cfg(cfg, t_jump, float(dphi), fall_time_us)
            gen = LindbladGenerator.stack([LindbladGenerator.from_config(c, b) for b in fields])
            f, _ = _integrate_window(gen, y0, t_prep, t_jump + times_rel, dt_max)
            rows.append(f.sum(axis=-1))
        rows.append(np.full(times_rel.size, float(len(fields))))
        return np.array(rows)

    return np.array(chunked_map(chunk, spec.n_samples, threads))


def default_timeline(fall_time_ns=2.0):
    """Delays (ns) around the jump: 25 ns before to 200 ns after, 0.25 ns steps."""
    return np.arange(-25.0, 200.0 + 1e-9, 0.25)


def run_phase_jump(cfg, spec, dphi, fall_time=2.0, timeline=None, prepare=2.0, dt_max=1e-3,
                   threads=1):
    """Fluorescence around a phase ramp on laser 1 (times in ns relative to ramp start).

    Each realization is pumped for ``prepare`` us (stroboscopic monodromy of
    the beat period), then the phase of laser 1 ramps linearly by
    ``-dphi`` over ``fall_time`` ns.
    """
    if len(cfg.lasers) != 2:
        raise ValueError("the phase-jump experiment uses two lasers")
    t_start = time.perf_counter()
    timeline = default_timeline(fall_time) if timeline is None else np.asarray(timeline, float)
    parts = _phase_jump_traces(cfg, spec, [dphi], timeline * 1e-3, fall_time * 1e-3, prepare,
                               dt_max, threads)
    sums = parts[:, 0, :]
    counts = parts[:, 1, :]
    n = counts.sum(0)
    mean = sums.sum(0) / n
    if parts.shape[0] > 1:
        err = _jackknife(lambda s: s[0] / s[1], np.stack([sums, counts], axis=1))
    else:
        err = np.zeros_like(mean)
    rate = -dphi / (fall_time * 1e-3) if dphi != 0 else 0.0
    in_ramp = (timeline >= 0) & (timeline < fall_time)
    delta_eff = np.where(in_ramp, rate / TWO_PI, 0.0)
    meta = {"experiment": "phase-jump", "dphi_rad": float(dphi), "fall_time_ns": fall_time,
            "prepare_us": prepare, "n_samples": spec.n_samples,
            "kernel_evaluations": int(spec.n_samples),
            "wall_time_s": time.perf_counter() - t_start}
    return ExperimentResult(
        "phase_jump",
        {"time_ns": timeline},
        {"fluorescence_MHz": mean, "fluorescence_std_error_MHz": err,
         "delta_eff_MHz": delta_eff},
        meta,
    )


def sin2_model(x, p):
    return p[0] * np.sin(x / 2 + p[1]) ** 2 + p[2]


def _transient_amplitudes(parts, base_idx, read_idx):
    """Normalized transient per dphi from summed traces: (F_read - F_base) / F_base."""
    def stat(s):
        n = s[-1, 0]
        base = s[:-1, base_idx].mean(axis=1) / n
        read = s[:-1, read_idx] / n
        return (read - base) / base
    return stat


def run_transient_scan(cfg, spec, dphis, readout_delay=2.0, fall_time=2.0, prepare=2.0,
                       dt_max=1e-3, threads=1, background=True, fit_p0=None,
                       n_baseline_periods=4):
    """Transient amplitude versus phase step, with a one-laser background run.

    The amplitude is the fluorescence ``readout_delay`` ns after the end of the
    ramp relative to the pre-jump baseline (taken at the same beat phase, whole beat
    periods before the jump),
    minus the same quantity with laser 2 switched off.  The scan is fitted
    with ``A sin^2(dphi/2 + phi0) + c``.
    """
    t_start = time.perf_counter()
    dphis = np.asarray(dphis, dtype=float)
    period_ns = (_beat_period(cfg) or 0.0125) * 1e3
    read_t = fall_time + readout_delay
    # baseline at the same beat phase as the readout, whole periods before the jump
    k0 = math.floor(read_t / period_ns) + 1
    base_t = read_t - period_ns * np.arange(k0 + n_baseline_periods - 1, k0 - 1, -1)
    times = np.concatenate([base_t, [read_t]])
    base_idx = np.arange(base_t.size)
    read_idx = base_t.size

    def scan(c):
        parts = _phase_jump_traces(c, spec, dphis, times * 1e-3, fall_time * 1e-3, prepare,
                                   dt_max, threads)
        stat = _transient_amplitudes(parts, base_idx, read_idx)
        total = parts.sum(0)
        return stat(total), (_jackknife(stat, parts) if parts.shape[0] > 1
                             else np.zeros(dphis.size))

    amp2, err2 = scan(cfg)
    if background:
        l2 = replace(cfg.lasers[1], rabi=0.0)
        amp1, err1 = scan(cfg.with_lasers(cfg.lasers[0], l2))
    else:
        amp1, err1 = np.zeros_like(amp2), np.zeros_like(amp2)
    amp = amp2 - amp1
    err = np.hypot(err2, err1)
    if fit_p0 is None:
        fit_p0 = [float(np.ptp(amp)) or 1.0, 0.0, float(np.min(amp))]
    fit = fit_least_squares(sin2_model, dphis, amp, fit_p0, names=["A", "phi0", "c"])
    a, phi0 = fit.params["A"], fit.params["phi0"]
    if a < 0:
        # same curve with A > 0
        a, phi0 = -a, phi0 + math.pi / 2
        fit.params["c"] = fit.params["c"] - a
    phi0 = (phi0 + math.pi / 2) % math.pi - math.pi / 2
    fit.params["A"], fit.params["phi0"] = a, phi0
    meta = {"experiment": "transient-scan", "readout_delay_ns": readout_delay,
            "fall_time_ns": fall_time, "n_samples": spec.n_samples,
            "fit_A": a, "fit_phi0_rad": phi0, "fit_c": fit.params["c"],
            "fit_A_std_error": fit.std_errors["A"],
            "fit_phi0_std_error": fit.std_errors["phi0"],
            "fit_residual_norm": fit.residual_norm, "fit_converged": fit.converged,
            "kernel_evaluations": int(spec.n_samples * (2 if background else 1)),
            "wall_time_s": time.perf_counter() - t_start}
    table = ExperimentResult(
        "transient_scan",
        {"dphi_rad": dphis},
        {"amplitude": amp, "amplitude_std_error": err, "two_laser_amplitude": amp2,
         "background_amplitude": amp1, "fit": sin2_model(dphis, [a, phi0, fit.params["c"]])},
        meta,
    )
    return table, fit


# ---------------------------------------------------------------- absorption line

def run_steady_state(cfg, spec, detunings, threads=1):
    """Ensemble single-laser absorption (steady-state fluorescence) versus detuning."""
    t_start = time.perf_counter()
    detunings = np.asarray(detunings, dtype=float)

    def chunk(idx):
        fields = _oh_fields(spec, idx)
        rows = []
        for det in detunings:
            c = cfg.with_lasers(replace(cfg.lasers[0], detuning=float(det)), *cfg.lasers[1:])
            gens = [LindbladGenerator.from_config(c, b) for b in fields]
            if any(g.time_dependent for g in gens):
                raise ValueError("steady-state experiment needs a time-independent drive")
            ls = np.stack([g.static for g in gens])
            rows.append(cfg.qd.decay_rate * trion_population(_stationary_vecs(ls)))
        f = np.array(rows)
        return np.stack([f.sum(1), (f**2).sum(1), np.full(detunings.size, f.shape[1])])

    total = np.array(chunked_map(chunk, spec.n_samples, threads)).sum(0)
    n = total[2]
    mean = total[0] / n
    var = np.maximum(total[1] / n - mean**2, 0.0) * n / np.maximum(n - 1, 1)
    meta = {"experiment": "steady-state", "n_samples": spec.n_samples,
            "kernel_evaluations": int(detunings.size * spec.n_samples),
            "wall_time_s": time.perf_counter() - t_start}
    return ExperimentResult("steady_state", {"detuning_MHz": detunings},
                            {"fluorescence_MHz": mean,
                             "fluorescence_std_error_MHz": np.sqrt(var / n)}, meta)
