"""Four-level quantum-dot model: electron ground doublet + heavy-hole trions.

Basis ordering (fixed for the whole package)::

    0  |up_z>     electron ground state, spin up along the growth axis z
    1  |down_z>   electron ground state, spin down along z
    2  |T_up>     trion, heavy hole up   (sigma+ partner of |up_z>)
    3  |T_down>   trion, heavy hole down (sigma- partner of |down_z>)

Units: time in microseconds, user-facing rates and frequencies in MHz
(ordinary frequency), the radiative lifetime in ns.  Hamiltonians and
Liouvillians are angular (rad/us); every MHz value is multiplied by 2*pi
exactly once, at construction.
"""

from dataclasses import dataclass, field, replace
import math

import numpy as np

TWO_PI = 2.0 * math.pi

GROUND = (0, 1)
TRION = (2, 3)

# Calibration: 18 mT of Overhauser field <-> 0.42 * Gamma_abs,
# Gamma_abs = 2.23 * 216 MHz  =>  202.3 MHz / 18 mT.
DEFAULT_GYRO_ELECTRON = 11.24
DEFAULT_GYRO_HOLE = 6.0
DEFAULT_TAU_NS = 0.737
ABSORPTION_LINEWIDTH_FACTOR = 2.23
DEFAULT_OH_SIGMA = 18.0
DEFAULT_RABI_FRACTION = 0.224

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

POL_SIGMA_PLUS = (1.0 + 0j, 0j)
POL_SIGMA_MINUS = (0j, 1.0 + 0j)
POL_H = (1 / math.sqrt(2) + 0j, 1 / math.sqrt(2) + 0j)
POL_V = (1j / math.sqrt(2), -1j / math.sqrt(2))


class ModelError(ValueError):
    pass


class DegenerateAxisError(ModelError):
    """Quantization axis undefined because the total field vanishes."""


@dataclass(frozen=True)
class MagneticField:
    """Lab-frame magnetic field in mT; z is the growth axis."""

    bx: float = 0.0
    by: float = 0.0
    bz: float = 0.0

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.bx, self.by, self.bz)):
            raise ModelError(f"non-finite field component in {self}")

    def as_array(self):
        return np.array([self.bx, self.by, self.bz], dtype=float)

    def magnitude(self):
        return math.sqrt(self.bx**2 + self.by**2 + self.bz**2)

    def __add__(self, other):
        return MagneticField(self.bx + other.bx, self.by + other.by, self.bz + other.bz)

    @classmethod
    def from_array(cls, a):
        return cls(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class QdParameters:
    """Quantum-dot constants.

    ``radiative_lifetime_tau`` is in ns; every other field is in MHz (or MHz/mT
    for the gyromagnetic ratios).
    """

    radiative_lifetime_tau: float = DEFAULT_TAU_NS
    gyro_electron: float = DEFAULT_GYRO_ELECTRON
    gyro_hole: float = DEFAULT_GYRO_HOLE
    dnsp_splitting: float = 0.0
    spin_dephasing_rate: float = 0.0
    spectral_wander_sigma: float = 0.0

    def __post_init__(self):
        if not (self.radiative_lifetime_tau > 0 and math.isfinite(self.radiative_lifetime_tau)):
            raise ModelError("radiative_lifetime_tau must be positive")
        for name in ("dnsp_splitting", "spin_dephasing_rate", "spectral_wander_sigma"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ModelError(f"{name} must be a finite non-negative number, got {v}")
        for name in ("gyro_electron", "gyro_hole"):
            if not math.isfinite(getattr(self, name)):
                raise ModelError(f"{name} must be finite")

    @property
    def linewidth_gamma(self):
        """Radiative linewidth 1/(2 pi tau) in MHz (about 216 MHz by default)."""
        return 1.0 / (TWO_PI * self.radiative_lifetime_tau * 1e-3)

    @property
    def decay_rate(self):
        """Trion population decay rate 1/tau in 1/us (angular units)."""
        return 1.0 / (self.radiative_lifetime_tau * 1e-3)

    @property
    def absorption_linewidth(self):
        return ABSORPTION_LINEWIDTH_FACTOR * self.linewidth_gamma

    def rabi(self, fraction=DEFAULT_RABI_FRACTION):
        """Rabi amplitude in MHz for ``fraction`` times the linewidth."""
        return fraction * self.linewidth_gamma


@dataclass(frozen=True)
class PhaseProfile:
    """Continuous piecewise-linear laser phase (rad) versus time (us).

    Held constant before the first and after the last breakpoint.
    """

    times: tuple = ()
    phases: tuple = ()

    def __post_init__(self):
        t = tuple(float(x) for x in self.times)
        p = tuple(float(x) for x in self.phases)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "phases", p)
        if len(t) != len(p):
            raise ModelError("phase profile needs one phase per breakpoint")
        if any(b <= a for a, b in zip(t, t[1:])):
            raise ModelError("phase profile breakpoints must be strictly increasing")
        if not all(math.isfinite(x) for x in t + p):
            raise ModelError("phase profile must be finite")

    @classmethod
    def constant(cls, phase=0.0):
        return cls((0.0,), (float(phase),))

    @classmethod
    def ramp(cls, t_start, duration, delta_phase, phase0=0.0):
        """Linear ramp by ``delta_phase`` over ``duration`` starting at ``t_start``."""
        if duration <= 0:
            raise ModelError("ramp duration must be positive")
        return cls((t_start, t_start + duration), (phase0, phase0 + delta_phase))

    @property
    def is_constant(self):
        return len(set(self.phases)) <= 1

    def __call__(self, t):
        if not self.times:
            return np.zeros_like(np.asarray(t, dtype=float)) if np.ndim(t) else 0.0
        return np.interp(t, self.times, self.phases)

    def rate(self, t):
        """d(phase)/dt in rad/us (right-continuous at breakpoints)."""
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for (t0, p0), (t1, p1) in zip(zip(self.times, self.phases),
                                      zip(self.times[1:], self.phases[1:])):
            out = np.where((t >= t0) & (t < t1), (p1 - p0) / (t1 - t0), out)
        return out if out.ndim else float(out)


@dataclass(frozen=True)
class LaserDrive:
    """One laser.

    ``rabi`` and ``detuning`` are in MHz.  The laser frequency is
    ``omega_0 + detuning + frequency_offset`` where ``omega_0`` is the
    zero-field transition energy; ``frequency_offset`` holds fixed shifts
    such as the 80 MHz compensation of the phase-jump experiment.
    ``polarization`` is ``(c_plus, c_minus)`` on the (sigma+, sigma-) basis.
    """

    rabi: float = 0.0
    detuning: float = 0.0
    polarization: tuple = POL_H
    phase_profile: PhaseProfile = field(default_factory=PhaseProfile.constant)
    frequency_offset: float = 0.0

    def __post_init__(self):
        cp, cm = (complex(c) for c in self.polarization)
        object.__setattr__(self, "polarization", (cp, cm))
        if abs(abs(cp) ** 2 + abs(cm) ** 2 - 1.0) > 1e-12:
            raise ModelError("polarization must be normalized")
        if not (self.rabi >= 0 and math.isfinite(self.rabi)):
            raise ModelError("rabi must be a finite non-negative number")
        if not math.isfinite(self.detuning) or not math.isfinite(self.frequency_offset):
            raise ModelError("detuning must be finite")

    @property
    def total_detuning(self):
        return self.detuning + self.frequency_offset

    def coupling(self):
        """Raising operator ``c+ d+^dag + c- d-^dag`` (dimensionless)."""
        cp, cm = self.polarization
        x = np.zeros((4, 4), dtype=complex)
        x[2, 0] = cp
        x[3, 1] = cm
        return x


@dataclass(frozen=True)
class SystemConfig:
    qd: QdParameters = field(default_factory=QdParameters)
    b_ext: MagneticField = field(default_factory=MagneticField)
    lasers: tuple = (LaserDrive(),)
    oh_dispersion_sigma: float = DEFAULT_OH_SIGMA

    def __post_init__(self):
        object.__setattr__(self, "lasers", tuple(self.lasers))
        if not 1 <= len(self.lasers) <= 2:
            raise ModelError("one or two lasers are supported")
        if not (self.oh_dispersion_sigma >= 0 and math.isfinite(self.oh_dispersion_sigma)):
            raise ModelError("oh_dispersion_sigma must be non-negative")

    def with_lasers(self, *lasers):
        return replace(self, lasers=tuple(lasers))

    def with_qd(self, **changes):
        return replace(self, qd=replace(self.qd, **changes))


def quantization_axis(b_total):
    """Unit vector along ``b_total``; ``None`` for an exactly zero field."""
    b = b_total.as_array() if isinstance(b_total, MagneticField) else np.asarray(b_total, float)
    mag = float(np.linalg.norm(b))
    if mag == 0.0:
        return None
    return b / mag


def _fix_phase(v):
    for c in v:
        if abs(c) > 1e-12:
            return v * (abs(c) / c)
    return v


def ground_basis(b_total):
    """Eigenvectors (|up_n>, |down_n>) of n.sigma, expressed on the z basis.

    The global phase of each vector makes its first nonzero component real
    and positive.
    """
    n = quantization_axis(b_total)
    if n is None:
        raise DegenerateAxisError("zero total field: quantization axis undefined")
    theta = math.acos(max(-1.0, min(1.0, n[2])))
    phi = math.atan2(n[1], n[0])
    c, s = math.cos(theta / 2), math.sin(theta / 2)
    up = np.array([c, np.exp(1j * phi) * s], dtype=complex)
    down = np.array([s, -np.exp(1j * phi) * c], dtype=complex)
    return _fix_phase(up), _fix_phase(down)


def ground_basis_or_z(b_total):
    """:func:`ground_basis`, falling back to the z basis at zero field."""
    try:
        return ground_basis(b_total)
    except DegenerateAxisError:
        return np.array([1, 0], dtype=complex), np.array([0, 1], dtype=complex)


def ground_splitting(qd, b_total):
    """Ground-state splitting in MHz: Zeeman part plus the empirical DNSP part."""
    mag = b_total.magnitude() if isinstance(b_total, MagneticField) else float(np.linalg.norm(b_total))
    return qd.gyro_electron * mag + qd.dnsp_splitting


def dipole_operators():
    """Lowering operators ``(d_plus, d_minus)``.

    ``d_plus = |up_z><T_up|`` (sigma+), ``d_minus = |down_z><T_down|`` (sigma-).
    """
    dp = np.zeros((4, 4), dtype=complex)
    dm = np.zeros((4, 4), dtype=complex)
    dp[0, 2] = 1.0
    dm[1, 3] = 1.0
    return dp, dm


def embed_ground(m2):
    out = np.zeros((4, 4), dtype=complex)
    out[:2, :2] = m2
    return out


def ground_hamiltonian(qd, b_total):
    """Static ground-block Hamiltonian (rad/us), embedded in 4x4."""
    b = b_total.as_array()
    n = quantization_axis(b)
    if n is None:
        n = np.array([0.0, 0.0, 1.0])
    h2 = 0.5 * TWO_PI * (
        qd.gyro_electron * (b[0] * SIGMA_X + b[1] * SIGMA_Y + b[2] * SIGMA_Z)
        + qd.dnsp_splitting * (n[0] * SIGMA_X + n[1] * SIGMA_Y + n[2] * SIGMA_Z)
    )
    return embed_ground(h2)


def trion_hamiltonian(qd, b_ext, frame_detuning):
    """Trion block in the frame rotating at the reference laser (rad/us)."""
    h = np.zeros((4, 4), dtype=complex)
    zh = 0.5 * qd.gyro_hole * b_ext.bz
    h[2, 2] = TWO_PI * (-frame_detuning + zh)
    h[3, 3] = TWO_PI * (-frame_detuning - zh)
    return h


def static_hamiltonian(cfg, oh):
    """Time-independent part: ground Zeeman/DNSP plus trion energies.

    The frame rotates at laser 1's frequency.
    """
    b_total = cfg.b_ext + oh
    return ground_hamiltonian(cfg.qd, b_total) + trion_hamiltonian(
        cfg.qd, cfg.b_ext, cfg.lasers[0].total_detuning
    )


def drive_terms(cfg):
    """Per-laser ``(X, beat, profile)``.

    ``X`` is the angular raising part ``(2 pi Omega / 2)(c+ d+^dag + c- d-^dag)``,
    ``beat`` the angular frequency offset from laser 1 and ``profile`` the
    phase profile; the laser's contribution to H(t) is
    ``exp(-i(beat t + phi(t))) X + h.c.``.
    """
    ref = cfg.lasers[0].total_detuning
    out = []
    for laser in cfg.lasers:
        x = 0.5 * TWO_PI * laser.rabi * laser.coupling()
        beat = TWO_PI * (laser.total_detuning - ref)
        out.append((x, beat, laser.phase_profile))
    return out


def build_hamiltonian(cfg, oh, t=0.0):
    """Rotating-frame Hamiltonian H(t) in rad/us (t in us)."""
    h = static_hamiltonian(cfg, oh)
    for x, beat, profile in drive_terms(cfg):
        ph = np.exp(-1j * (beat * t + profile(t)))
        h = h + ph * x + np.conj(ph) * x.conj().T
    return h


def collapse_operators(cfg, oh=None):
    """Jump operators (rates folded in, 1/us).

    Two radiative channels ``sqrt(1/tau) d+-``; when the spin dephasing rate
    is positive, a pure-dephasing operator along the quantization axis.
    """
    qd = cfg.qd
    dp, dm = dipole_operators()
    g = math.sqrt(qd.decay_rate)
    ops = [g * dp, g * dm]
    if qd.spin_dephasing_rate > 0:
        b_total = cfg.b_ext + (oh if oh is not None else MagneticField())
        up, down = ground_basis_or_z(b_total)
        sz_n = np.outer(up, up.conj()) - np.outer(down, down.conj())
        ops.append(math.sqrt(TWO_PI * qd.spin_dephasing_rate) / math.sqrt(2) * embed_ground(sz_n))
    return ops


def pure_state(index):
    rho = np.zeros((4, 4), dtype=complex)
    rho[index, index] = 1.0
    return rho


def mixed_ground_state():
    rho = np.zeros((4, 4), dtype=complex)
    rho[0, 0] = rho[1, 1] = 0.5
    return rho
