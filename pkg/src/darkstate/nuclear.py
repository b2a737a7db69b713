"""Quasi-static Overhauser-field ensembles.

Samples are drawn with a counter-based generator (Threefry-2x32 with 20
rounds, Salmon et al., SC'11) so that field ``index`` depends only on
``(seed, index)``.  Parallel workers can therefore evaluate any subset of
the ensemble in any order and still reproduce a serial run bit for bit.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
import math
import warnings

import numpy as np

from .model import MagneticField

_MASK32 = np.uint64(0xFFFFFFFF)
_ROTATIONS = (13, 15, 26, 6, 17, 29, 16, 24)
_PARITY = 0x1BD11BDA

DEFAULT_CHUNK = 16


class EmptySelectionError(ValueError):
    """Every ensemble sample was rejected by the post-selection filter."""


def _rotl(x, r):
    return ((x << np.uint64(r)) | (x >> np.uint64(32 - r))) & _MASK32


def threefry2x32(key, counter, rounds=20):
    """Threefry-2x32 block function.

    ``key`` is a pair of 32-bit words, ``counter`` a pair of arrays (or
    scalars) of 32-bit words.  Returns the two output words as ``uint32``
    arrays.
    """
    k0 = np.uint64(int(key[0]) & 0xFFFFFFFF)
    k1 = np.uint64(int(key[1]) & 0xFFFFFFFF)
    ks = (k0, k1, np.uint64(_PARITY) ^ k0 ^ k1)
    x0 = (np.asarray(counter[0], dtype=np.uint64) & _MASK32) + ks[0]
    x1 = (np.asarray(counter[1], dtype=np.uint64) & _MASK32) + ks[1]
    x0 &= _MASK32
    x1 &= _MASK32
    for i in range(rounds):
        x0 = (x0 + x1) & _MASK32
        x1 = _rotl(x1, _ROTATIONS[i % 8]) ^ x0
        if i % 4 == 3:
            s = i // 4 + 1
            x0 = (x0 + ks[s % 3]) & _MASK32
            x1 = (x1 + ks[(s + 1) % 3] + np.uint64(s)) & _MASK32
    return x0.astype(np.uint32), x1.astype(np.uint32)


def _seed_key(seed):
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError("seed must be a 64-bit unsigned integer")
    return seed & 0xFFFFFFFF, seed >> 32


def uniforms(seed, index, stream):
    """53-bit uniform deviates in [0, 1) for counter ``(index, stream)``."""
    index = np.asarray(index, dtype=np.uint64)
    a, b = threefry2x32(_seed_key(seed), (index, np.full(index.shape, stream, np.uint64)))
    hi = (a >> np.uint32(5)).astype(np.float64)
    lo = (b >> np.uint32(6)).astype(np.float64)
    return (hi * 67108864.0 + lo) / 9007199254740992.0


def standard_normals(seed, index):
    """Three standard normal deviates per index (Box-Muller on counters 0..3)."""
    u = [uniforms(seed, index, j) for j in range(4)]
    r1 = np.sqrt(-2.0 * np.log1p(-u[0]))
    r2 = np.sqrt(-2.0 * np.log1p(-u[2]))
    return np.stack([r1 * np.cos(2 * np.pi * u[1]),
                     r1 * np.sin(2 * np.pi * u[1]),
                     r2 * np.cos(2 * np.pi * u[3])], axis=-1)


@dataclass(frozen=True)
class OhEnsembleSpec:
    """Isotropic Gaussian Overhauser ensemble: ``sigma`` (mT) per component.

    ``mean`` is a fixed field (mT) added to every sample; with ``sigma = 0``
    it pins a single deterministic realization (e.g. an ideal in-plane field).
    """

    sigma: float = 18.0
    n_samples: int = 128
    seed: int = 0
    mean: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        object.__setattr__(self, "mean", tuple(float(m) for m in self.mean))
        if len(self.mean) != 3 or not all(math.isfinite(m) for m in self.mean):
            raise ValueError("mean must be three finite components")
        if not (math.isfinite(self.sigma) and self.sigma >= 0):
            raise ValueError("sigma must be finite and >= 0")
        if int(self.n_samples) != self.n_samples or self.n_samples < 1:
            raise ValueError("n_samples must be a positive integer")
        _seed_key(self.seed)


@dataclass(frozen=True)
class EnsembleEstimate:
    mean: float
    std_error: float
    n_effective: int


def sample_oh_array(spec, indices):
    """Fields for several indices as an ``(n, 3)`` array in mT."""
    indices = np.asarray(indices, dtype=np.int64)
    if np.any(indices < 0) or np.any(indices >= spec.n_samples):
        raise IndexError("sample index out of range")
    mean = np.array(spec.mean)
    if spec.sigma == 0:
        return np.broadcast_to(mean, indices.shape + (3,)).copy()
    return mean + spec.sigma * standard_normals(spec.seed, indices)


def sample_oh(spec, index):
    return MagneticField.from_array(sample_oh_array(spec, [index])[0])


def chunked_map(fn, n, threads=1, chunk=DEFAULT_CHUNK):
    """Evaluate ``fn(indices)`` over fixed-size index chunks.

    Chunk boundaries do not depend on ``threads``; results are returned in
    index order, so any reduction over them is thread-count independent.
    """
    chunks = [np.arange(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads <= 1 or len(chunks) == 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, chunks))


def summarize(values, axis=0):
    """Mean and standard error along ``axis`` (standard error 0 for one sample)."""
    values = np.asarray(values, dtype=float)
    n = values.shape[axis]
    mean = np.mean(values, axis=axis)
    if n < 2:
        return mean, np.zeros_like(mean)
    return mean, np.std(values, axis=axis, ddof=1) / math.sqrt(n)


def ensemble_average(kernel, spec, filter=None, threads=1):
    """Monte Carlo average of a scalar ``kernel(MagneticField)``.

    ``filter`` (optional) post-selects samples; rejected samples do not
    count towards ``n_effective``.
    """
    def run(idx):
        out = []
        for i in idx:
            oh = sample_oh(spec, int(i))
            if filter is not None and not filter(oh):
                out.append(np.nan)
            else:
                out.append(float(kernel(oh)))
        return out

    vals = np.array([v for part in chunked_map(run, spec.n_samples, threads) for v in part])
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        raise EmptySelectionError("post-selection rejected every sample")
    mean, err = summarize(vals)
    return EnsembleEstimate(float(mean), float(err), int(vals.size))


class WanderWarning(UserWarning):
    pass


def wander_kernel(step, sigma_w):
    """Normalized Gaussian weights on shifts ``k*step``, truncated at 4 sigma."""
    if sigma_w == 0:
        return np.array([0]), np.array([1.0])
    kmax = int(math.floor(4 * sigma_w / step + 1e-9))
    k = np.arange(-kmax, kmax + 1)
    w = np.exp(-0.5 * (k * step / sigma_w) ** 2)
    return k, w / w.sum()


def wander_convolve(grid, step, sigma_w):
    """Gaussian smoothing along the common-shift diagonal of a square-step map.

    ``grid[i, j]`` is the value at ``(delta1_i, delta2_j)``; both axes must
    share the spacing ``step`` (MHz).  Near the edges the truncated kernel is
    renormalized over the in-range nodes.  Emits :class:`WanderWarning` when
    ``sigma_w`` exceeds a quarter of the grid extent.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 2:
        raise ValueError("wander_convolve expects a 2-D map")
    if not step > 0 or sigma_w < 0:
        raise ValueError("step must be positive and sigma_w >= 0")
    extent = step * (min(grid.shape) - 1)
    if sigma_w > extent / 4:
        warnings.warn(f"wander sigma {sigma_w} exceeds a quarter of the grid extent",
                      WanderWarning)
    if sigma_w == 0:
        return grid.copy()
    shifts, weights = wander_kernel(step, sigma_w)
    n1, n2 = grid.shape
    acc = np.zeros_like(grid)
    norm = np.zeros_like(grid)
    for k, w in zip(shifts, weights):
        i0, i1 = max(0, -k), min(n1, n1 - k)
        j0, j1 = max(0, -k), min(n2, n2 - k)
        if i1 <= i0 or j1 <= j0:
            continue
        acc[i0:i1, j0:j1] += w * grid[i0 + k:i1 + k, j0 + k:j1 + k]
        norm[i0:i1, j0:j1] += w
    return acc / norm
