"""Levenberg-Marquardt least squares with finite-difference Jacobians."""

from dataclasses import dataclass, field

import numpy as np

REL_STEP = 1e-6


@dataclass
class FitReport:
    """Result of :func:`fit_least_squares`.

    ``params`` and ``std_errors`` map parameter names to values; ``cov`` is
    the full covariance estimate in parameter order.
    """

    params: dict
    std_errors: dict
    residual_norm: float
    converged: bool
    iterations: int
    gradient_norm: float = 0.0
    cov: np.ndarray = field(default=None, repr=False)

    def __getitem__(self, name):
        return self.params[name]

    def values(self):
        return np.array(list(self.params.values()))


def _jacobian(model, x, p):
    cols = []
    for j in range(p.size):
        h = REL_STEP * abs(p[j]) if p[j] != 0 else REL_STEP
        up = p.copy()
        dn = p.copy()
        up[j] += h
        dn[j] -= h
        cols.append((np.asarray(model(x, up), float) - np.asarray(model(x, dn), float)) / (2 * h))
    return np.stack(cols, axis=1)


def _damped_solve(jtj, g, lam):
    d = np.diag(jtj).copy()
    floor = 1e-12 * max(d.max(initial=0.0), 1e-300)
    d = np.maximum(d, floor)
    a = jtj + lam * np.diag(d)
    try:
        return np.linalg.solve(a, -g), a
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(a, -g, rcond=None)[0], a


def fit_least_squares(model, x, y, p0, tol=1e-10, max_iter=200, names=None, sigma=None):
    """Minimize ``sum(((model(x, p) - y) / sigma)**2)`` over ``p``.

    Damped Gauss-Newton with Marquardt scaling; the Jacobian uses central
    differences with relative step 1e-6 per parameter.  Iteration stops when
    an accepted step changes the residual sum of squares by less than
    ``tol`` relative, or after ``max_iter`` iterations (``converged=False``,
    best parameters so far).  Standard errors come from the inverse of the
    damped normal matrix at the solution, scaled by the reduced chi-square.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    p = np.array(p0, dtype=float)
    if names is None:
        names = [f"p{i}" for i in range(p.size)]
    if len(names) != p.size:
        raise ValueError("one name per parameter required")
    if y.size < p.size + 1:
        raise ValueError("need more data points than parameters")
    w = np.ones_like(y) if sigma is None else 1.0 / np.asarray(sigma, dtype=float)

    def resid(q):
        return (np.asarray(model(x, q), dtype=float) - y) * w

    r = resid(p)
    ssr = float(r @ r)
    if not np.isfinite(ssr):
        raise ValueError("model is not finite at the initial parameters")
    scale = float(y @ y * (w @ w) / y.size) if y.size else 1.0
    lam = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        jac = _jacobian(lambda xx, q: model(xx, q) * w, x, p)
        jtj = jac.T @ jac
        g = jac.T @ r
        if ssr <= 1e-28 * max(scale, 1e-300) * y.size:
            converged = True
            break
        accepted = False
        while lam < 1e16:
            step, _ = _damped_solve(jtj, g, lam)
            trial = p + step
            with np.errstate(over="ignore", invalid="ignore"):
                # an overflowing trial is simply rejected below
                rt = resid(trial)
                ssr_t = float(rt @ rt)
            if np.isfinite(ssr_t) and ssr_t <= ssr:
                accepted = True
                break
            lam *= 10.0
        if not accepted:
            # no downhill step at any damping: stationary to working precision
            converged = True
            break
        change = (ssr - ssr_t) / max(ssr, 1e-300)
        p, r, ssr = trial, rt, ssr_t
        lam = max(lam / 10.0, 1e-12)
        if change < tol:
            converged = True
            break

    jac = _jacobian(lambda xx, q: model(xx, q) * w, x, p)
    jtj = jac.T @ jac
    _, a = _damped_solve(jtj, jac.T @ r, lam if lam > 1e-12 else 0.0)
    dof = max(y.size - p.size, 1)
    chi2 = ssr / dof if sigma is None else 1.0
    try:
        cov = np.linalg.inv(a) * chi2
    except np.linalg.LinAlgError:
        cov = np.linalg.pinv(a) * chi2
    err = np.sqrt(np.abs(np.diag(cov)))
    return FitReport(
        params=dict(zip(names, map(float, p))),
        std_errors=dict(zip(names, map(float, err))),
        residual_norm=float(np.sqrt(ssr)),
        converged=converged,
        iterations=it,
        gradient_norm=float(np.linalg.norm(jac.T @ r)),
        cov=cov,
    )
