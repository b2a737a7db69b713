"""Observables: fluorescence, photon correlations and dressed-state algebra."""

from dataclasses import dataclass
import math

import numpy as np

from . import qcore
from .dynamics import NumericalError, STEP_SAFETY, matrix_power, rk4_matrix, trion_population
from .fitting import fit_least_squares
from .model import SIGMA_X, SIGMA_Y, SIGMA_Z


class UndefinedLambdaError(ValueError):
    """Both Rabi matrix elements vanish, so no dark state is defined."""


def fluorescence_rate(rho, tau):
    """Photon emission rate in MHz: trion population times 1/tau (tau in ns)."""
    rho = np.asarray(rho)
    return float(np.real(rho[2, 2] + rho[3, 3])) / (tau * 1e-3)


@dataclass
class G2Curve:
    """Normalized intensity autocorrelation sampled at ``taus`` (ns)."""

    taus: np.ndarray
    values: np.ndarray
    normalization: str = "long-delay"


def _emitted(cops):
    return sum(c.conj().T @ c for c in cops)


def intensity_correlation(l, rho_ss, taus, collapse_ops, dt_max=1e-3):
    """Unnormalized ``G(tau)`` and mean rate ``I`` by quantum regression.

    ``l`` and ``rho_ss`` (4x4) may carry a common leading batch dimension.
    ``taus`` in ns, ascending from zero or above.  Each delay interval is
    propagated with the fixed-step RK4 propagator of the constant generator,
    step ``<= min(dt_max, 0.05/||L||)``.
    Returns ``(G, I)`` with ``G`` shaped ``(len(taus),) + batch``.
    """
    l = np.asarray(l, dtype=complex)
    rho_ss = np.asarray(rho_ss, dtype=complex)
    taus = np.asarray(taus, dtype=float)
    if taus.ndim != 1 or np.any(np.diff(taus) < 0) or np.any(taus < 0):
        raise ValueError("taus must be ascending and non-negative")
    resid = np.linalg.norm(np.einsum("...ij,...j->...i", l, qcore.vec(rho_ss)), axis=-1)
    if np.any(resid > 1e-6):
        raise NumericalError(f"state is not stationary (||L rho|| = {np.max(resid):.3e})")
    emit = _emitted(collapse_ops)
    rate = np.real(np.einsum("ij,...ji->...", emit, rho_ss))
    rho_c = sum(c @ rho_ss @ c.conj().T for c in collapse_ops)
    y = qcore.vec(rho_c)
    obs = qcore.vec(emit.T)  # Tr(E rho) = vec(E^T) . vec(rho)
    h_max = min(dt_max, STEP_SAFETY / float(np.max(np.linalg.norm(l, ord=2, axis=(-2, -1)))))
    out = np.empty((taus.size,) + rate.shape)
    cache = {}
    t_prev = 0.0
    for k, tau in enumerate(taus * 1e-3):
        gap = tau - t_prev
        if gap > 0:
            n = max(1, math.ceil(gap / h_max - 1e-9))
            key = round(gap / n, 15), n
            if key not in cache:
                cache[key] = matrix_power(rk4_matrix(l, gap / n), n)
            y = np.einsum("...ij,...j->...i", cache[key], y)
        out[k] = np.real(y @ obs)
        t_prev = tau
    return out, rate


def g2(l, rho_ss, taus, collapse_ops, dt_max=1e-3):
    """g2(tau) = G(tau) / I^2 for one stationary configuration."""
    gt, rate = intensity_correlation(l, rho_ss, taus, collapse_ops, dt_max)
    if np.any(rate <= 0):
        raise NumericalError("no emission in the stationary state; g2 undefined")
    return G2Curve(np.asarray(taus, float), gt / rate**2)


def exp_bunching(x, p):
    return p[0] * np.exp(-x / p[1]) + 1.0


def bunching_amplitude(curve, tau_rad, tau_c0=None, sigma=None, fit_start=None):
    """Fit ``a exp(-tau/tau_c) + 1`` for delays beyond ``fit_start`` (ns,
    default ``5 * tau_rad``).

    Returns ``(a, tau_c, report)``.  A flat curve gives ``a = 0``.  Under
    weak drive the antibunching recovery (rate about 1/(2 tau_rad)) still
    leaves a few percent at ``5 tau_rad``; a later ``fit_start`` excludes it.
    """
    taus = np.asarray(curve.taus, float)
    vals = np.asarray(curve.values, float)
    m = taus > (5 * tau_rad if fit_start is None else fit_start)
    if m.sum() < 3:
        raise ValueError("curve does not extend beyond the antibunching dip")
    x, y = taus[m], vals[m]
    if np.allclose(y, 1.0, rtol=0, atol=1e-14):
        return 0.0, float("nan"), None
    a0 = y[0] - 1.0
    if tau_c0 is None:
        # first delay where the excess fell to 1/e of its start
        below = np.nonzero(np.abs(y - 1.0) < abs(a0) / math.e)[0]
        tau_c0 = (x[below[0]] - x[0]) if below.size and below[0] > 0 else (x[-1] - x[0]) / 3
        tau_c0 = max(tau_c0, x[1] - x[0])
    a0 = a0 * math.exp(x[0] / tau_c0)
    rep = fit_least_squares(exp_bunching, x, y, [a0, tau_c0], names=["amplitude", "tau_c"],
                            sigma=None if sigma is None else np.asarray(sigma)[m])
    return rep.params["amplitude"], rep.params["tau_c"], rep


@dataclass(frozen=True)
class DarkStatePair:
    """Dark and bright ground superpositions on the (|up_n>, |down_n>) basis."""

    dark: np.ndarray
    bright: np.ndarray
    alpha: float
    beta: float
    phi: float
    omega_up: complex = 1.0
    omega_down: complex = 1.0


def dark_state(omega_up, omega_down):
    """Dark state ``omega_down|up> - omega_up|down>`` (normalized) and its complement.

    ``omega_up``/``omega_down`` are the drive matrix elements coupling
    ``|up_n>``/``|down_n>`` to the shared trion, so
    ``omega_up*dark[0] + omega_down*dark[1] == 0``.
    """
    wu, wd = complex(omega_up), complex(omega_down)
    norm = math.hypot(abs(wu), abs(wd))
    if norm == 0.0:
        raise UndefinedLambdaError("both Rabi matrix elements are zero")
    dark = np.array([wd, -wu]) / norm
    bright = np.array([wu.conjugate(), wd.conjugate()]) / norm
    phi = math.atan2((wd / wu).imag, (wd / wu).real) if wu != 0 else 0.0
    return DarkStatePair(dark, bright, abs(wu), abs(wd), phi, wu, wd)


def bright_population_after_phase_jump(pair, dphi):
    """Population of the new bright state after the relative phase jumps by ``dphi``."""
    new = dark_state(pair.omega_up, pair.omega_down * np.exp(1j * dphi))
    return float(abs(np.vdot(new.bright, pair.dark)) ** 2)


def bloch_vector(ground_block):
    """``(x, y, z, purity)`` of the renormalized 2x2 ground block."""
    m = np.asarray(ground_block, dtype=complex)
    if m.shape != (2, 2):
        raise ValueError("ground block must be 2x2")
    tr = float(np.real(np.trace(m)))
    if tr < 1e-9:
        raise ValueError("ground population too small for a Bloch vector")
    r = m / tr
    comps = [float(np.real(np.trace(r @ s))) for s in (SIGMA_X, SIGMA_Y, SIGMA_Z)]
    purity = float(np.real(np.trace(r @ r)))
    return (*comps, purity)


def ground_block_in_basis(rho, up, down):
    """Ground 2x2 block of ``rho`` re-expressed on the basis (up, down)."""
    u = np.stack([up, down], axis=1)
    return u.conj().T @ np.asarray(rho)[:2, :2] @ u


def fluorescence_from_vec(rho_vec, decay_rate):
    return decay_rate * trion_population(rho_vec)
