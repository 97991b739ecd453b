"""Weighted Levenberg-Marquardt fit of a 1-D Gaussian with constant offset."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitError

PARAM_NAMES = ("amplitude", "center", "sigma", "offset")


@dataclass(frozen=True)
class GaussianFitResult:
    """Parameters of ``A * exp(-(x - x0)**2 / (2 * sigma**2)) + B``."""

    amplitude: float
    center: float
    sigma: float
    offset: float
    errors: dict = field(default_factory=dict)
    residual_norm: float = 0.0
    iterations: int = 0

    def __call__(self, x):
        return gaussian(np.asarray(x, dtype=float), self.amplitude, self.center, self.sigma, self.offset)

    def to_dict(self) -> dict:
        return {
            "amplitude": self.amplitude,
            "center": self.center,
            "sigma": self.sigma,
            "offset": self.offset,
            "errors": dict(self.errors),
            "residual_norm": self.residual_norm,
            "iterations": self.iterations,
        }


def gaussian(x, amplitude, center, sigma, offset=0.0):
    return amplitude * np.exp(-((x - center) ** 2) / (2.0 * sigma**2)) + offset


def _jacobian(x, p, free):
    a, x0, s, _ = p
    e = np.exp(-((x - x0) ** 2) / (2.0 * s**2))
    cols = [e, a * e * (x - x0) / s**2, a * e * (x - x0) ** 2 / s**3, np.ones_like(x)]
    return np.stack([cols[j] for j in free], axis=1)


def _initial_guesses(x, y, w, offset):
    """Starting points from weighted moments and from the half-maximum width.

    Moments follow the bulk of the (weighted) data; the half-maximum guess
    copes with wide noisy baselines.  Both can be fooled, so the fit is
    started from each.
    """
    b = float(np.min(y)) if offset is None else float(offset)
    h = y - b
    a = float(np.max(h))
    if not a > 0:
        raise FitError("degenerate data: no peak above offset", {"amplitude_guess": a})
    out = []
    wh = np.clip(h, 0, None) * w
    if wh.sum() > 0:
        x0 = float((wh * x).sum() / wh.sum())
        var = float((wh * (x - x0) ** 2).sum() / wh.sum())
        amp = float(np.interp(x0, x, h)) if np.all(np.diff(x) > 0) else a
        if var > 0:
            out.append(np.array([amp if amp > 0 else a, x0, np.sqrt(var), b]))
    top = h >= 0.5 * a
    fwhm = float(np.ptp(x[top]))
    if fwhm == 0 and np.unique(x).size > 1:
        fwhm = float(np.min(np.diff(np.unique(x))))
    if fwhm > 0:
        x0 = float((h[top] * x[top]).sum() / h[top].sum())
        out.append(np.array([a, x0, fwhm / 2.3548200450309493, b]))
    if not out:
        raise FitError("degenerate data: zero width", {"width_guess": fwhm})
    return out


def _levenberg_marquardt(x, y, sw, p0, free, max_iter, rtol):
    def residual(params):
        return sw * (gaussian(x, *params) - y)

    p = p0.copy()
    r = residual(p)
    cost = float(r @ r)
    mu = 1e-3
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        J = _jacobian(x, p, free) * sw[:, None]
        g = J.T @ r
        H = J.T @ J
        step = np.zeros(len(free))
        trial, r_trial, c_trial = p, r, cost
        while True:
            A = H + mu * np.diag(np.diag(H) + 1e-300)
            try:
                step = np.linalg.solve(A, -g)
            except np.linalg.LinAlgError:
                mu *= 10.0
                if mu > 1e20:
                    break
                continue
            trial = p.copy()
            trial[free] += step
            r_trial = residual(trial)
            c_trial = float(r_trial @ r_trial)
            if np.isfinite(c_trial) and c_trial <= cost:
                break
            mu *= 4.0
            if mu > 1e20:
                break
        rel = np.linalg.norm(step) / max(np.linalg.norm(p[free]), 1e-300)
        if mu > 1e20:
            converged = rel < 1e-6
            break
        p, r, cost = trial, r_trial, c_trial
        mu = max(mu / 3.0, 1e-12)
        if rel < rtol:
            converged = True
            break
    return p, cost, it, converged


def gaussian_fit_1d(
    xs,
    ys,
    weights=None,
    *,
    offset=None,
    max_iter: int = 200,
    rtol: float = 1e-10,
) -> GaussianFitResult:
    """Least-squares Gaussian fit.

    ``weights`` are inverse variances (default 1).  Pass ``offset`` to hold
    the background fixed.  Levenberg-Marquardt runs from each initial guess
    until the relative parameter step drops below ``rtol``; the converged
    solution with the lowest cost wins.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.shape != y.shape or w.shape != x.shape:
        raise ValueError("xs, ys and weights must have equal shapes")
    ok = np.isfinite(x) & np.isfinite(y) & np.isfinite(w) & (w > 0)
    x, y, w = x[ok], y[ok], w[ok]
    free = [0, 1, 2] if offset is not None else [0, 1, 2, 3]
    if x.size < 5 or x.size < len(free) + 1:
        raise FitError("need at least 5 usable points", {"points": int(x.size)})
    if np.ptp(y) == 0:
        raise FitError("constant data", {"value": float(y[0])})

    span = float(np.ptp(x))
    sw = np.sqrt(w)
    best = None
    diag = {}
    for p0 in _initial_guesses(x, y, w, offset):
        p, cost, it, converged = _levenberg_marquardt(x, y, sw, p0, free, max_iter, rtol)
        sigma = abs(p[2])
        ok = converged and np.isfinite(p).all() and 1e-6 * span < sigma < 1e3 * max(span, 1e-300)
        if ok and (best is None or cost < best[1]):
            best = (p, cost, it)
        diag.setdefault("starts", []).append(
            {"start": p0.tolist(), "params": p.tolist(), "cost": cost, "iterations": it, "converged": converged}
        )
    if best is None:
        if not any(d["converged"] for d in diag["starts"]):
            raise FitError("fit did not converge", diag)
        raise FitError("fitted width degenerate", diag)
    p, cost, it = best
    sigma = abs(p[2])

    J = _jacobian(x, p, free) * sw[:, None]
    dof = max(x.size - len(free), 1)
    try:
        cov = np.linalg.inv(J.T @ J) * (cost / dof)
    except np.linalg.LinAlgError as exc:
        raise FitError("singular fit covariance", diag) from exc
    errs = dict.fromkeys(PARAM_NAMES, 0.0)
    for j, idx in enumerate(free):
        errs[PARAM_NAMES[idx]] = float(np.sqrt(max(cov[j, j], 0.0)))
    return GaussianFitResult(
        amplitude=float(p[0]),
        center=float(p[1]),
        sigma=float(sigma),
        offset=float(p[3]),
        errors=errs,
        residual_norm=float(np.sqrt(cost)),
        iterations=it,
    )
