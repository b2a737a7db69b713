"""Lindblad master-equation engine.

Superoperators act on column-stacked density matrices (see :mod:`qcore`).
All generators may carry a leading batch dimension: a batch of ``B``
independent systems that share the same time dependence (drive beat
frequencies and phase profiles) is integrated in one vectorized pass.
"""

from dataclasses import dataclass, field
import math
import threading
import warnings

import numpy as np

from . import qcore
from .model import (TRION, collapse_operators, drive_terms, mixed_ground_state,
                    static_hamiltonian)

DIM = qcore.HILBERT_DIM
LDIM = qcore.LIOUVILLE_DIM

STEP_SAFETY = 0.05
INVARIANT_ABORT = 1e-6

_EYE4 = np.eye(DIM)


class NumericalError(RuntimeError):
    """Integration failure or invariant violation beyond tolerance."""


class NonUniqueSteadyStateError(NumericalError):
    pass


class InvariantLog:
    """Worst trace drift, anti-Hermitian part and eigenvalue seen since ``reset``.

    Fed by every checked trajectory sample and every batched steady state.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self.reset()

    def reset(self):
        with self._lock:
            self.trace_drift = 0.0
            self.hermiticity = 0.0
            self.min_eigenvalue = math.inf
            self.n_states = 0

    def record(self, drift, herm, lam, n=1):
        with self._lock:
            self.trace_drift = max(self.trace_drift, drift)
            self.hermiticity = max(self.hermiticity, herm)
            self.min_eigenvalue = min(self.min_eigenvalue, lam)
            self.n_states += n

    def snapshot(self):
        with self._lock:
            return {"max_trace_drift": self.trace_drift, "max_hermiticity": self.hermiticity,
                    "min_eigenvalue": self.min_eigenvalue if self.n_states else None,
                    "states_checked": self.n_states}


INVARIANTS = InvariantLog()


def _invariant_stats(y):
    rho = qcore.devec(y)
    drift = float(np.max(np.abs(np.trace(rho, axis1=-2, axis2=-1) - 1.0)))
    herm = float(np.max(np.abs(rho - np.swapaxes(rho.conj(), -1, -2))))
    # eigenvalues of the Hermitian part; the anti-Hermitian part is reported separately
    lam = float(np.min(np.linalg.eigvalsh(0.5 * (rho + np.swapaxes(rho.conj(), -1, -2)))))
    INVARIANTS.record(drift, herm, lam, int(np.prod(rho.shape[:-2], dtype=int)))
    return drift, herm, lam


def commutator_superop(h):
    """``rho -> -i [h, rho]`` (batched over leading dims)."""
    h = np.asarray(h, dtype=complex)
    eye = np.broadcast_to(_EYE4, h.shape)
    return -1j * (_bkron(eye, h) - _bkron(np.swapaxes(h, -1, -2), eye))


def dissipator(c):
    """``rho -> c rho c^dag - {c^dag c, rho}/2``."""
    c = np.asarray(c, dtype=complex)
    cdc = np.swapaxes(c.conj(), -1, -2) @ c
    eye = np.broadcast_to(_EYE4, c.shape)
    return _bkron(c.conj(), c) - 0.5 * (_bkron(eye, cdc) + _bkron(np.swapaxes(cdc, -1, -2), eye))


def _bkron(a, b):
    """Kronecker product over the last two axes with broadcasting."""
    if a.ndim == 2 and b.ndim == 2:
        return np.kron(a, b)
    n, m = a.shape[-2:]
    p, q = b.shape[-2:]
    out = a[..., :, None, :, None] * b[..., None, :, None, :]
    return out.reshape(out.shape[:-4] + (n * p, m * q))


def lindblad_superop(h, collapse_ops=()):
    l = commutator_superop(h)
    for c in collapse_ops:
        l = l + dissipator(c)
    return l


@dataclass
class DriveTerm:
    """Oscillating piece ``exp(-i theta(t)) A + exp(+i theta(t)) B`` of L(t),

    with ``theta(t) = beat * t + profile(t)``.
    """

    a: np.ndarray
    b: np.ndarray
    beat: float
    profile: object = None

    def theta(self, t):
        th = self.beat * t
        if self.profile is not None:
            th = th + self.profile(t)
        return th

    @property
    def static(self):
        return self.beat == 0.0 and (self.profile is None or self.profile.is_constant)


@dataclass
class LindbladGenerator:
    """Time-dependent Lindblad generator.

    ``static`` is the time-independent superoperator (Hamiltonian part and
    all dissipators); ``drives`` the oscillating pieces.  Alternatively a
    generator can be built from an arbitrary ``hamiltonian_fn`` through
    :meth:`from_hamiltonian`; that path is slower but fully general.
    """

    static: np.ndarray
    drives: list = field(default_factory=list)
    collapse_ops: list = field(default_factory=list)
    hamiltonian_fn: object = None
    decay_rate: float = 1.0
    generic: bool = False

    @classmethod
    def from_config(cls, cfg, oh):
        """Generator of the four-level model for one Overhauser realization."""
        cops = collapse_operators(cfg, oh)
        static = lindblad_superop(static_hamiltonian(cfg, oh), cops)
        drives = []
        for x, beat, profile in drive_terms(cfg):
            a = commutator_superop(x)
            b = commutator_superop(x.conj().T)
            if beat == 0.0 and profile.is_constant:
                ph = np.exp(-1j * profile(0.0))
                static = static + ph * a + np.conj(ph) * b
            else:
                drives.append(DriveTerm(a, b, beat, profile))

        def hfn(t, _cfg=cfg, _oh=oh):
            from .model import build_hamiltonian
            return build_hamiltonian(_cfg, _oh, t)

        return cls(static, drives, cops, hfn, cfg.qd.decay_rate)

    @classmethod
    def from_hamiltonian(cls, hamiltonian, collapse_ops=(), decay_rate=1.0):
        """Generator from a static matrix or a callable ``t -> H``."""
        cops = [np.asarray(c, dtype=complex) for c in collapse_ops]
        if callable(hamiltonian):
            diss = sum((dissipator(c) for c in cops), np.zeros((LDIM, LDIM), complex))
            return cls(diss, [], cops, hamiltonian, decay_rate, generic=True)
        h = np.asarray(hamiltonian, dtype=complex)
        return cls(lindblad_superop(h, cops), [], cops, lambda t: h, decay_rate)

    @classmethod
    def stack(cls, gens):
        """Batch generators that share their time dependence."""
        first = gens[0]
        drives = []
        for k, d in enumerate(first.drives):
            for g in gens[1:]:
                if g.drives[k].beat != d.beat or g.drives[k].profile != d.profile:
                    raise ValueError("stacked generators must share drive timing")
            drives.append(DriveTerm(np.stack([g.drives[k].a for g in gens]),
                                    np.stack([g.drives[k].b for g in gens]),
                                    d.beat, d.profile))
        if any(g.generic for g in gens):
            raise ValueError("generic Hamiltonian generators cannot be stacked")
        return cls(np.stack([g.static for g in gens]), drives, [], None,
                   first.decay_rate)

    @property
    def time_dependent(self):
        return bool(self.drives) or self.generic

    @property
    def batch_shape(self):
        return self.static.shape[:-2]

    def at(self, t):
        """Superoperator L(t)."""
        if self.generic:
            return self.static + commutator_superop(self.hamiltonian_fn(t))
        l = self.static
        for d in self.drives:
            ph = np.exp(-1j * d.theta(t))
            l = l + ph * d.a + np.conj(ph) * d.b
        return l

    def scale(self):
        """Upper bound on ||L(t)||_2 used for the step-size rule."""
        s = np.max(np.linalg.norm(self.static, ord=2, axis=(-2, -1)))
        for d in self.drives:
            s += np.max(np.linalg.norm(d.a, ord=2, axis=(-2, -1)))
            s += np.max(np.linalg.norm(d.b, ord=2, axis=(-2, -1)))
        if self.generic:
            s += 2 * np.linalg.norm(self.hamiltonian_fn(0.0), ord=2)
        return float(s)

    def step_size(self, dt_max):
        scale = self.scale()
        return dt_max if scale == 0.0 else min(dt_max, STEP_SAFETY / scale)

    def fluorescence(self, rho_vec):
        """Photon emission rate (MHz) from vectorized states."""
        return self.decay_rate * trion_population(rho_vec)


def liouvillian_at(gen, t=0.0):
    return gen.at(t)


_TRION_IDX = [i + DIM * i for i in TRION]


def trion_population(rho_vec):
    rho_vec = np.asarray(rho_vec)
    return np.real(rho_vec[..., _TRION_IDX[0]] + rho_vec[..., _TRION_IDX[1]])


def _apply(l, y):
    # l: (..., 16, 16); y: (..., 16) or (..., 16, k)
    if y.ndim == l.ndim - 1:
        return np.einsum("...ij,...j->...i", l, y)
    return l @ y


def rk4_step(gen, t, y, dt):
    """One classical RK4 step of dy/dt = L(t) y."""
    if not gen.time_dependent:
        l = gen.static
        k1 = _apply(l, y)
        k2 = _apply(l, y + 0.5 * dt * k1)
        k3 = _apply(l, y + 0.5 * dt * k2)
        k4 = _apply(l, y + dt * k3)
    else:
        lm = gen.at(t + 0.5 * dt)
        k1 = _apply(gen.at(t), y)
        k2 = _apply(lm, y + 0.5 * dt * k1)
        k3 = _apply(lm, y + 0.5 * dt * k2)
        k4 = _apply(gen.at(t + dt), y + dt * k3)
    return y + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_matrix(l, dt):
    """Exact one-step RK4 propagator for a constant generator ``l``."""
    eye = np.broadcast_to(np.eye(l.shape[-1], dtype=complex), l.shape)
    a = dt * l
    a2 = a @ a
    return eye + a + a2 / 2 + a2 @ a / 6 + a2 @ a2 / 24


def hermitize_vec(y):
    rho = qcore.devec(y)
    rho = 0.5 * (rho + np.swapaxes(rho.conj(), -1, -2))
    return qcore.vec(rho)


@dataclass
class Trajectory:
    """Sampled solution: ``times`` (us), ``states`` (..., n, 4, 4), ``fluorescence`` (MHz)."""

    times: np.ndarray
    states: np.ndarray
    fluorescence: np.ndarray
    max_trace_drift: float = 0.0
    max_hermiticity: float = 0.0
    min_eigenvalue: float = 0.0


def _check_invariants(y, where):
    if not np.all(np.isfinite(y)):
        raise NumericalError(f"non-finite state at {where}")
    drift, herm, lam = _invariant_stats(y)
    if drift > INVARIANT_ABORT or lam < -INVARIANT_ABORT or not np.all(np.isfinite(y)):
        raise NumericalError(
            f"density-matrix invariant violated at {where}: trace drift {drift:.3e}, "
            f"min eigenvalue {lam:.3e}"
        )
    return drift, herm, lam


def evolve(gen, rho0, t_end, dt_max, sample_every=None, t0=0.0, hermitize=True):
    """Integrate the master equation with fixed-step RK4.

    The step is ``min(dt_max, 0.05 / ||L||)``, shrunk so that it divides
    ``sample_every`` exactly.  States are re-Hermitized after every step and
    recorded every ``sample_every`` (default: every step) from ``t0`` to
    ``t_end`` inclusive.  ``rho0`` may carry a batch dimension matching the
    generator.
    """
    if not t_end > t0:
        raise ValueError("t_end must exceed the start time")
    if not dt_max > 0:
        raise ValueError("dt_max must be positive")
    dt = gen.step_size(dt_max)
    if dt < 1e-15 * max(1.0, abs(t_end)):
        raise NumericalError("step size underflow")
    if sample_every is None:
        # largest step <= dt that lands exactly on t_end
        sample_every = (t_end - t0) / math.ceil((t_end - t0) / dt - 1e-9)
    n_sub = max(1, math.ceil(sample_every / dt - 1e-9))
    dt = sample_every / n_sub
    n_samples = int(round((t_end - t0) / sample_every))
    if abs(n_samples * sample_every - (t_end - t0)) > 1e-9 * max(1.0, t_end):
        n_samples = math.floor((t_end - t0) / sample_every)

    y = qcore.vec(np.asarray(rho0, dtype=complex))
    times = t0 + sample_every * np.arange(n_samples + 1)
    states = [y]
    drift, herm, lam = _check_invariants(y, t0)
    stats = [drift, herm, lam]
    t = t0
    for k in range(1, n_samples + 1):
        for _ in range(n_sub):
            y = rk4_step(gen, t, y, dt)
            if hermitize:
                y = hermitize_vec(y)
            t += dt
        t = t0 + k * sample_every
        drift, herm, lam = _check_invariants(y, t)
        stats = [max(stats[0], drift), max(stats[1], herm), min(stats[2], lam)]
        states.append(y)
    states = np.stack(states, axis=-2)
    return Trajectory(times, qcore.devec(states), gen.fluorescence(states), *stats)


def propagator(gen, t0, t1, dt_max):
    """RK4 transfer matrix from ``t0`` to ``t1`` (batched like the generator).

    Equivalent to stepping every basis vector through :func:`evolve` with the
    same step rule, without re-Hermitization.
    """
    dt0 = gen.step_size(dt_max)
    n = max(1, math.ceil((t1 - t0) / dt0 - 1e-9))
    dt = (t1 - t0) / n
    eye = np.broadcast_to(np.eye(LDIM, dtype=complex), gen.batch_shape + (LDIM, LDIM))
    if not gen.time_dependent:
        return np.linalg.matrix_power(rk4_matrix(gen.static, dt), n) if gen.static.ndim == 2 \
            else _batched_power(rk4_matrix(gen.static, dt), n)
    p = eye.copy()
    t = t0
    for k in range(n):
        p = rk4_step(gen, t, p, dt)
        t = t0 + (k + 1) * dt
    return p


def _batched_power(m, n):
    result = np.broadcast_to(np.eye(m.shape[-1], dtype=m.dtype), m.shape).copy()
    base = m
    while n:
        if n & 1:
            result = base @ result
        n >>= 1
        if n:
            base = base @ base
    return result


def matrix_power(m, n):
    return _batched_power(np.asarray(m), int(n))


def _replace_trace_row(l):
    m = np.array(l, dtype=complex, copy=True)
    m[..., 0, :] = qcore.trace_row()
    return m


def steady_state(l, uniqueness_tol=1e-11):
    """Stationary density matrix of a time-independent Liouvillian.

    Solves ``L vec(rho) = 0`` with the first (redundant) row replaced by the
    trace condition.  A kernel of dimension above one is reported as
    :class:`NonUniqueSteadyStateError`.
    """
    l = np.asarray(l, dtype=complex)
    sv = np.linalg.svd(l, compute_uv=False)
    norm = sv[0] if sv[0] > 0 else 1.0
    if sv[-2] < uniqueness_tol * norm:
        raise NonUniqueSteadyStateError(
            f"stationary manifold is degenerate (second smallest singular value "
            f"{sv[-2]:.3e} relative to {norm:.3e})"
        )
    rhs = np.zeros(LDIM, dtype=complex)
    rhs[0] = 1.0
    x = qcore.solve_linear(_replace_trace_row(l), rhs)
    rho = qcore.devec(x)
    rho = 0.5 * (rho + rho.conj().T)
    resid = np.linalg.norm(l @ qcore.vec(rho))
    if resid > 1e-8 * max(1.0, norm * 1e-3):
        raise NumericalError(f"steady-state residual {resid:.3e} too large")
    bad = qcore.check_density_matrix(rho)
    if bad:
        raise NumericalError("steady state violates invariants: " + ", ".join(bad))
    _invariant_stats(qcore.vec(rho))
    return rho


def stationary_projector(l, tol=1e-9):
    """Projector onto the kernel of ``l`` along its range, ``lim exp(L t)``.

    Meaningful when the stationary manifold is degenerate: ``P @ vec(rho0)``
    is the state reached from ``rho0``.  Eigenvalues with
    ``|lambda| <= tol * ||L||`` count as zero.
    """
    l = np.asarray(l, dtype=complex)
    w, v = np.linalg.eig(l)
    keep = np.abs(w) <= tol * np.linalg.norm(l, 2)
    if not np.any(keep):
        raise NumericalError("generator has no stationary state")
    vinv = np.linalg.inv(v)
    return v[:, keep] @ vinv[keep, :]


def steady_state_batch(l):
    """Batched steady states (no uniqueness diagnostics), as vectors."""
    l = np.asarray(l, dtype=complex)
    rhs = np.zeros(l.shape[:-1], dtype=complex)
    rhs[..., 0] = 1.0
    x = np.linalg.solve(_replace_trace_row(l), rhs[..., None])[..., 0]
    if np.all(np.isfinite(x)):
        _invariant_stats(x)
    return x


def harmonic_steady_state(l0, lp, lm, nu, n_harmonics):
    """Periodic steady state of ``L(t) = L0 + exp(-i nu t) Lp + exp(i nu t) Lm``.

    Writes ``rho(t) = sum_n rho_n exp(-i n nu t)`` and solves the truncated
    (|n| <= n_harmonics) block-tridiagonal system by matrix continued
    fractions.  Batched over leading dimensions; ``nu`` broadcasts against
    the batch.  Returns ``(rho_0, s_1, t_1)`` where ``rho_1 = s_1 rho_0`` and
    ``rho_-1 = t_1 rho_0``; ``rho_0`` is the time-averaged state (vectorized).
    """
    l0 = np.asarray(l0, dtype=complex)
    lp = np.broadcast_to(lp, l0.shape)
    lm = np.broadcast_to(lm, l0.shape)
    nu = np.asarray(nu, dtype=float)[..., None, None]
    eye = np.eye(LDIM)
    s = np.zeros_like(l0)
    t = np.zeros_like(l0)
    for n in range(n_harmonics, 0, -1):
        s = -np.linalg.solve(l0 + 1j * n * nu * eye + lm @ s, lp)
        t = -np.linalg.solve(l0 - 1j * n * nu * eye + lp @ t, lm)
    eff = l0 + lm @ s + lp @ t
    rho0 = steady_state_batch(eff)
    return rho0, s, t


def periodic_state_at(rho0, s_mats, t_mats, nu, time):
    """Reconstruct rho(time) from continued-fraction matrices (all harmonics).

    ``s_mats``/``t_mats`` are the lists returned by
    :func:`harmonic_coefficients`.
    """
    out = rho0.copy()
    up = rho0
    down = rho0
    for k, (sm, tm) in enumerate(zip(s_mats, t_mats), start=1):
        up = _apply(sm, up)
        down = _apply(tm, down)
        out = out + up * np.exp(-1j * k * nu * time) + down * np.exp(1j * k * nu * time)
    return out


def harmonic_coefficients(l0, lp, lm, nu, n_harmonics):
    """Like :func:`harmonic_steady_state` but keeps every ``S_n``/``T_n``."""
    l0 = np.asarray(l0, dtype=complex)
    lp = np.broadcast_to(lp, l0.shape)
    lm = np.broadcast_to(lm, l0.shape)
    nuv = np.asarray(nu, dtype=float)[..., None, None]
    eye = np.eye(LDIM)
    s = np.zeros_like(l0)
    t = np.zeros_like(l0)
    s_list, t_list = [], []
    for n in range(n_harmonics, 0, -1):
        s = -np.linalg.solve(l0 + 1j * n * nuv * eye + lm @ s, lp)
        t = -np.linalg.solve(l0 - 1j * n * nuv * eye + lp @ t, lm)
        s_list.append(s)
        t_list.append(t)
    s_list.reverse()
    t_list.reverse()
    rho0 = steady_state_batch(l0 + lm @ s_list[0] + lp @ t_list[0])
    return rho0, s_list, t_list


class QuasiSteady(float):
    """Float fluorescence value carrying convergence diagnostics."""

    def __new__(cls, value, converged=True, window=0.0):
        obj = float.__new__(cls, value)
        obj.converged = converged
        obj.window = window
        return obj


def quasi_steady_fluorescence(gen, settle=2.0, average_window=None, dt_max=1e-3,
                              rho0=None):
    """Time-averaged fluorescence after a settling period (direct integration).

    Starts from the maximally mixed ground state, evolves for ``settle`` us,
    then averages over ``average_window`` (default: five beat periods, at
    least 0.05 us).  If the two half-window averages differ by more than 2%
    the window is doubled, at most four times; an unconverged result has
    ``converged == False`` and triggers a warning.
    """
    if settle < 0 or (average_window is not None and average_window <= 0):
        raise ValueError("settle must be >= 0 and average_window > 0")
    beats = [abs(d.beat) for d in gen.drives if d.beat != 0.0]
    if average_window is None:
        average_window = max(5 * 2 * math.pi / min(beats), 0.05) if beats else 0.05
    y = qcore.vec(mixed_ground_state() if rho0 is None else np.asarray(rho0, complex))
    if np.ndim(gen.static) == 3:
        y = np.broadcast_to(y, gen.batch_shape + (LDIM,)).copy()
    dt = gen.step_size(dt_max)
    t = 0.0
    if settle > 0:
        n = math.ceil(settle / dt - 1e-9)
        h = settle / n
        for _ in range(n):
            y = rk4_step(gen, t, y, h)
            y = hermitize_vec(y)
            t += h
        t = settle

    def average(y, t, window):
        n = max(2, math.ceil(window / dt - 1e-9))
        h = window / n
        vals = [gen.fluorescence(y)]
        for _ in range(n):
            y = rk4_step(gen, t, y, h)
            y = hermitize_vec(y)
            t += h
            vals.append(gen.fluorescence(y))
        vals = np.array(vals)
        half = n // 2
        first = np.trapezoid(vals[:half + 1], dx=h, axis=0) / (half * h)
        second = np.trapezoid(vals[half:], dx=h, axis=0) / ((n - half) * h)
        total = np.trapezoid(vals, dx=h, axis=0) / window
        return y, t, total, first, second

    window = average_window
    converged = False
    for attempt in range(5):
        y, t, total, first, second = average(y, t, window)
        ref = np.maximum(np.abs(total), 1e-12)
        if np.all(np.abs(first - second) <= 0.02 * ref) or np.all(np.abs(total) < 1e-9):
            converged = True
            break
        if attempt < 4:
            window *= 2
    if not converged:
        warnings.warn("quasi-steady fluorescence did not converge", RuntimeWarning)
    if np.ndim(total):
        return total
    return QuasiSteady(float(total), converged, window)
