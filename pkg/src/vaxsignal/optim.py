"""Box-projected BFGS with backtracking line search."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np


@dataclass
class OptimResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    gradient_norm: float
    n_iter: int
    n_fev: int
    converged: bool
    message: str
    fun_init: float


def _projected(g, x, lower, upper, fixed):
    """Gradient with components zeroed where a bound or a fixed value blocks descent."""
    blocked = fixed | ((x <= lower) & (g > 0)) | ((x >= upper) & (g < 0))
    return np.where(blocked, 0.0, g), ~blocked


def minimize_bfgs(
    fun_and_grad: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    lower=None,
    upper=None,
    fixed=None,
    gtol: float = 1e-8,
    max_iter: int = 500,
    c1: float = 1e-4,
    shrink: float = 0.5,
    max_backtracks: int = 60,
) -> OptimResult:
    """Minimize a smooth function inside a box.

    The inverse Hessian approximation only acts on the free coordinates.
    A step is accepted on the sufficient-decrease condition or, once the
    objective has flattened to rounding noise, when the projected gradient
    shrinks without the objective rising beyond that noise.
    Non-finite objective values make the line search backtrack.
    """
    x = np.array(x0, dtype=float)
    n = x.size
    lower = np.full(n, -np.inf) if lower is None else np.asarray(lower, dtype=float)
    upper = np.full(n, np.inf) if upper is None else np.asarray(upper, dtype=float)
    fixed = np.zeros(n, dtype=bool) if fixed is None else np.asarray(fixed, dtype=bool)
    x = np.clip(x, lower, upper)

    f, g = fun_and_grad(x)
    n_fev = 1
    f_init = f
    if not np.isfinite(f):
        return OptimResult(x, f, g, np.inf, 0, n_fev, False, "non-finite objective at start", f_init)

    H = np.eye(n)
    fresh = True
    pg, free = _projected(g, x, lower, upper, fixed)
    gnorm = float(np.max(np.abs(pg))) if n else 0.0
    k = 0
    message = "maximum iterations reached"
    converged = gnorm <= gtol
    if converged:
        message = "gradient tolerance met"

    while not converged and k < max_iter:
        if free.all():
            d = -(H @ g)
            if not float(g @ d) < 0:
                H = np.eye(n)
                fresh = True
                d = -g
        else:
            idx = np.flatnonzero(free)
            d = np.zeros(n)
            d[idx] = -H[np.ix_(idx, idx)] @ g[idx]
            if not float(g[idx] @ d[idx]) < 0:
                H = np.eye(n)
                fresh = True
                d[idx] = -g[idx]

        noise = 1e-12 * (1.0 + abs(f))
        t = 1.0
        accepted = False
        for _ in range(max_backtracks):
            xt = np.clip(x + t * d, lower, upper)
            ft, gt = fun_and_grad(xt)
            n_fev += 1
            if np.isfinite(ft):
                if ft <= f + c1 * float(g @ (xt - x)):
                    accepted = True
                    break
                if ft <= f + noise:
                    pgt, _ = _projected(gt, xt, lower, upper, fixed)
                    if np.max(np.abs(pgt)) < gnorm:
                        accepted = True
                        break
            t *= shrink
        if not accepted:
            if not fresh:
                H = np.eye(n)
                fresh = True
                continue
            message = "line search failed"
            break

        s = xt - x
        yv = gt - g
        sy = float(s @ yv)
        if sy > 1e-12 * float(np.sqrt((s @ s) * (yv @ yv))) and sy > 0:
            if fresh:
                H = np.eye(n) * (sy / float(yv @ yv))
            rho = 1.0 / sy
            Hy = H @ yv
            sc = s[:, None]
            H = H + ((sy + yv @ Hy) * rho * rho) * (sc * s) - rho * (Hy[:, None] * s + sc * Hy)
            fresh = False

        x, f, g = xt, ft, gt
        k += 1
        pg, free = _projected(g, x, lower, upper, fixed)
        gnorm = float(np.max(np.abs(pg)))
        if gnorm <= gtol:
            converged = True
            message = "gradient tolerance met"

    return OptimResult(x, f, g, gnorm, k, n_fev, converged, message, f_init)
