"""Zero-inflated negative-binomial kernel and per-group maximum likelihood.

The count component is NB with shape ``r`` and mean ``M * mu``, i.e. the
Poisson rate multiplier follows Gamma(shape r, scale mu / r). Counts may be
fractional (weighted reports); ``y!`` is generalized to ``Gamma(y + 1)`` and
only ``y == 0`` exactly is treated as a zero.

Group parameters live on an unconstrained scale
``theta = (alpha_1..alpha_I, phi_1..phi_I, log r)`` with
``p_i = logistic(alpha_i)`` and ``mu_i = exp(phi_i)``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import digamma, expit, gammaln, log_expit, logit

from .optim import minimize_bfgs

# Above this shape the rising-factorial terms use a Stirling series;
# the truncation error there is below 1e-17.
_STIRLING_R = 100.0


def _stirling_tail(x):
    x2 = x * x
    return 1.0 / (12.0 * x) - 1.0 / (360.0 * x * x2) + 1.0 / (1260.0 * x * x2 * x2)


def _stirling_tail_deriv(x):
    x2 = x * x
    return -1.0 / (12.0 * x2) + 1.0 / (120.0 * x2 * x2) - 1.0 / (252.0 * x2 * x2 * x2)


def _log_rising_rel(r, y):
    """``lgamma(r + y) - lgamma(r) - y log r``; accurate for very large r."""
    if r >= _STIRLING_R:
        return (r + y - 0.5) * np.log1p(y / r) - y + _stirling_tail(r + y) - _stirling_tail(r)
    return gammaln(r + y) - gammaln(r) - y * math.log(r)


def _log_rising_rel_dr(r, y):
    """Derivative of :func:`_log_rising_rel` with respect to r."""
    if r >= _STIRLING_R:
        return (
            np.log1p(y / r)
            - y / r
            + 0.5 * y / (r * (r + y))
            + _stirling_tail_deriv(r + y)
            - _stirling_tail_deriv(r)
        )
    return digamma(r + y) - digamma(r) - y / r


def nb_log_pmf(y, r, m):
    """Log NB(y | shape r, mean m) for y >= 0, m > 0 (vectorized in y, m)."""
    y = np.asarray(y, dtype=float)
    m = np.asarray(m, dtype=float)
    return (
        _log_rising_rel(r, y)
        - gammaln(y + 1.0)
        + np.where(y > 0, y * np.log(np.where(y > 0, m, 1.0)), 0.0)
        - (r + y) * np.log1p(m / r)
    )


@dataclass(frozen=True)
class ZinbParams:
    """Natural-scale parameters. ``p`` and ``mu`` may be per-vaccine arrays."""

    p: float | np.ndarray
    mu: float | np.ndarray
    r: float

    def __post_init__(self):
        p = np.asarray(self.p, dtype=float)
        mu = np.asarray(self.mu, dtype=float)
        if not (np.all(np.isfinite(p)) and np.all(np.isfinite(mu)) and np.isfinite(self.r)):
            raise ValueError("ZINB parameters must be finite")
        if np.any(p < 0) or np.any(p > 1):
            raise ValueError("p must lie in [0, 1]")
        if np.any(mu <= 0) or self.r <= 0:
            raise ValueError("mu and r must be positive")

    def for_vaccine(self, i: int) -> "ZinbParams":
        return ZinbParams(float(np.asarray(self.p)[i]), float(np.asarray(self.mu)[i]), self.r)


def zinb_log_pmf(y, params: ZinbParams, M):
    """Log ZINB probability of a (possibly fractional) count ``y`` at offset ``M``."""
    y = np.asarray(y, dtype=float)
    M = np.asarray(M, dtype=float)
    if not (np.all(np.isfinite(y)) and np.all(np.isfinite(M))):
        raise ValueError("non-finite input")
    if np.any(y < 0) or np.any(M <= 0):
        raise ValueError("need y >= 0 and M > 0")
    p = np.asarray(params.p, dtype=float)
    r = float(params.r)
    m = M * np.asarray(params.mu, dtype=float)
    with np.errstate(divide="ignore"):
        log_p = np.log(p)
        log_1mp = np.log1p(-p)
    log_nb = nb_log_pmf(y, r, m)
    zero = np.logaddexp(log_p, log_1mp + log_nb)
    out = np.where(y == 0, zero, log_1mp + log_nb)
    return out[()] if out.ndim == 0 else out


@dataclass(frozen=True)
class GroupDesign:
    """Stacked cells of one AE group: counts, offsets and vaccine index per entry."""

    y: np.ndarray
    M: np.ndarray
    vaccine_index: np.ndarray
    n_vaccines: int

    def __post_init__(self):
        y = np.asarray(self.y, dtype=float)
        M = np.asarray(self.M, dtype=float)
        vi = np.asarray(self.vaccine_index, dtype=np.intp)
        if not (y.ndim == M.ndim == vi.ndim == 1 and len(y) == len(M) == len(vi)):
            raise ValueError("y, M and vaccine_index must be 1-D of equal length")
        if not (np.all(np.isfinite(y)) and np.all(np.isfinite(M))):
            raise ValueError("non-finite counts or offsets")
        if np.any(y < 0):
            raise ValueError("negative count")
        if np.any(M <= 0):
            raise ValueError("entries with M <= 0 must be excluded before fitting")
        if len(vi) and (vi.min() < 0 or vi.max() >= self.n_vaccines):
            raise ValueError("vaccine_index out of range")
        counts = np.bincount(vi, minlength=self.n_vaccines)
        if np.any(counts == 0):
            raise ValueError("every vaccine needs at least one entry")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "M", M)
        object.__setattr__(self, "vaccine_index", vi)
        # constants reused by every likelihood evaluation
        zero = y == 0
        log_M = np.log(M)
        object.__setattr__(self, "_zero_idx", np.flatnonzero(zero))
        object.__setattr__(self, "_pos_idx", np.flatnonzero(~zero))
        object.__setattr__(self, "_vi_zero", vi[zero])
        object.__setattr__(self, "_vi_pos", vi[~zero])
        object.__setattr__(self, "_log_M_zero", log_M[zero])
        object.__setattr__(self, "_log_M_pos", log_M[~zero])
        object.__setattr__(self, "_y_pos", y[~zero])
        object.__setattr__(self, "_lgamma_y1_pos", gammaln(y[~zero] + 1.0))
        object.__setattr__(self, "_n_per_vaccine", counts.astype(float))

    @property
    def n_entries(self) -> int:
        return len(self.y)

    @property
    def entries_per_vaccine(self) -> np.ndarray:
        return np.bincount(self.vaccine_index, minlength=self.n_vaccines)


@dataclass(frozen=True)
class FitConfig:
    grad_tol: float = 1e-8
    max_iter: int = 500
    alpha_clamp: float = 10.0
    phi_clamp: float = 15.0
    log_r_bounds: tuple[float, float] = (-10.0, 20.0)

    def __post_init__(self):
        if self.grad_tol <= 0 or self.max_iter < 1:
            raise ValueError("grad_tol must be positive and max_iter >= 1")
        if self.alpha_clamp <= 0 or self.phi_clamp <= 0:
            raise ValueError("clamps must be positive")
        lo, hi = self.log_r_bounds
        if not lo < hi:
            raise ValueError("log_r_bounds must be increasing")

    def bounds(self, n_vaccines: int):
        a, f = self.alpha_clamp, self.phi_clamp
        lower = np.r_[np.full(n_vaccines, -a), np.full(n_vaccines, -f), self.log_r_bounds[0]]
        upper = np.r_[np.full(n_vaccines, a), np.full(n_vaccines, f), self.log_r_bounds[1]]
        return lower, upper


@dataclass
class GroupFit:
    params: ZinbParams
    loglik: float
    converged: bool
    iterations: int
    gradient_norm: float
    boundary_flags: list[list[str]]
    r_at_bound: bool = False
    initial_loglik: float = float("nan")
    theta: np.ndarray = field(default=None, repr=False)
    message: str = ""

    @property
    def s(self) -> np.ndarray:
        """Group-level relative reporting rate per vaccine."""
        return (1.0 - np.asarray(self.params.p)) * np.asarray(self.params.mu)

    def to_dict(self) -> dict:
        return {
            "p": np.asarray(self.params.p, dtype=float).tolist(),
            "mu": np.asarray(self.params.mu, dtype=float).tolist(),
            "r": float(self.params.r),
            "s": self.s.tolist(),
            "loglik": float(self.loglik),
            "initial_loglik": float(self.initial_loglik),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "gradient_norm": float(self.gradient_norm),
            "boundary_flags": [list(f) for f in self.boundary_flags],
            "r_at_bound": bool(self.r_at_bound),
            "message": self.message,
        }


def _unpack(theta, n_vaccines):
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (2 * n_vaccines + 1,):
        raise ValueError(f"theta must have length {2 * n_vaccines + 1}")
    return theta[:n_vaccines], theta[n_vaccines : 2 * n_vaccines], float(theta[-1])


def _terms(theta, design: GroupDesign, want_grad: bool):
    """Per-entry log-likelihood (zero cells first, then positive) and its gradient."""
    I = design.n_vaccines
    alpha, phi, log_r = _unpack(theta, I)
    if not math.isfinite(float(np.sum(theta))):
        return None
    r = math.exp(log_r)
    zi, pi = design._zero_idx, design._pos_idx
    vz, vp = design._vi_zero, design._vi_pos
    y = design._y_pos

    # zero cells: log(p + (1-p) NB(0))
    az = alpha[vz]
    mz = np.exp(design._log_M_zero + phi[vz])
    log1p_z = np.log1p(mz / r)
    L0 = -r * log1p_z
    log_pz = log_expit(az)
    ll_zero = np.logaddexp(log_pz, log_pz - az + L0)

    # positive cells: log(1-p) + log NB(y)
    ap = alpha[vp]
    log_mp = design._log_M_pos + phi[vp]
    mp = np.exp(log_mp)
    log1p_p = np.log1p(mp / r)
    ll_pos = (
        log_expit(-ap)
        + _log_rising_rel(r, y)
        - design._lgamma_y1_pos
        + y * log_mp
        - (r + y) * log1p_p
    )
    ll = np.concatenate((ll_zero, ll_pos))
    if not want_grad:
        return ll, None

    # posterior probability that a zero is structural
    q = expit(az - L0)
    keep = 1.0 - q
    rm_z = mz / (r + mz)
    rm_p = mp / (r + mp)
    grad = np.empty(2 * I + 1)
    grad[:I] = np.bincount(vz, weights=q, minlength=I) - design._n_per_vaccine * expit(alpha)
    grad[I : 2 * I] = np.bincount(vz, weights=-keep * r * rm_z, minlength=I) + np.bincount(
        vp, weights=y - (r + y) * rm_p, minlength=I
    )
    d_zero = keep * (rm_z - log1p_z)
    d_pos = _log_rising_rel_dr(r, y) - log1p_p + (r + y) * rm_p / r
    grad[-1] = r * (d_zero.sum() + d_pos.sum())
    return ll, grad


def group_negloglik(theta, design: GroupDesign) -> float:
    """Negative log-likelihood of a group; ``inf`` if anything is non-finite.

    Terms are summed with ``math.fsum`` so the value does not depend on
    entry order.
    """
    with np.errstate(all="ignore"):
        res = _terms(theta, design, want_grad=False)
    if res is None:
        return math.inf
    ll = res[0]
    if not math.isfinite(float(np.sum(ll))):
        return math.inf
    return -math.fsum(ll)


def group_negloglik_grad(theta, design: GroupDesign) -> np.ndarray:
    with np.errstate(all="ignore"):
        res = _terms(theta, design, want_grad=True)
    if res is None or not np.all(np.isfinite(res[1])):
        return np.full(2 * design.n_vaccines + 1, np.nan)
    return -res[1]


def _value_and_grad(theta, design):
    with np.errstate(all="ignore"):
        res = _terms(theta, design, want_grad=True)
    if res is None:
        return math.inf, np.full(len(theta), np.nan)
    ll, grad = res
    if not (math.isfinite(float(np.sum(ll))) and math.isfinite(float(np.sum(grad)))):
        return math.inf, np.full(len(theta), np.nan)
    return -math.fsum(ll), -grad


def initial_theta(design: GroupDesign, config: FitConfig = FitConfig()):
    """Moment-style starting values and the mask of vaccines with all-zero cells."""
    I = design.n_vaccines
    vi = design.vaccine_index
    n = design.entries_per_vaccine
    zeros = np.bincount(vi, weights=(design.y == 0).astype(float), minlength=I)
    frac0 = np.clip(zeros / n, 0.05, 0.95)
    pos = design.y > 0
    sum_y = np.bincount(vi, weights=np.where(pos, design.y, 0.0), minlength=I)
    sum_M = np.bincount(vi, weights=np.where(pos, design.M, 0.0), minlength=I)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(sum_M > 0, sum_y / sum_M, 0.0)
    phi0 = np.log(np.maximum(ratio, 0.01))
    all_zero = zeros == n
    alpha0 = logit(frac0)
    alpha0[all_zero] = config.alpha_clamp
    theta0 = np.r_[alpha0, np.clip(phi0, -config.phi_clamp, config.phi_clamp), 0.0]
    return theta0, all_zero


def fit_group(design: GroupDesign, config: FitConfig = FitConfig()) -> GroupFit:
    """Maximum-likelihood ZINB fit for one AE group.

    Vaccines whose cells are all zero have p pinned at the upper clamp and
    mu at its starting value. Non-convergence is reported, not raised.
    """
    I = design.n_vaccines
    theta0, all_zero = initial_theta(design, config)
    lower, upper = config.bounds(I)
    fixed = np.r_[all_zero, all_zero, False]

    res = minimize_bfgs(
        lambda t: _value_and_grad(t, design),
        theta0,
        lower=lower,
        upper=upper,
        fixed=fixed,
        gtol=config.grad_tol,
        max_iter=config.max_iter,
    )
    theta = res.x
    alpha, phi, log_r = _unpack(theta, I)
    few = design.entries_per_vaccine < 2
    flags: list[list[str]] = []
    for i in range(I):
        f = []
        if all_zero[i]:
            f.append("all_zero")
        if few[i]:
            f.append("underdetermined")
        if not all_zero[i]:
            if abs(alpha[i]) >= config.alpha_clamp:
                f.append("p_at_bound")
            if abs(phi[i]) >= config.phi_clamp:
                f.append("mu_at_bound")
        flags.append(f)
    lo, hi = config.log_r_bounds
    params = ZinbParams(expit(alpha), np.exp(phi), math.exp(log_r))
    return GroupFit(
        params=params,
        loglik=-res.fun,
        converged=res.converged,
        iterations=res.n_iter,
        gradient_norm=res.gradient_norm,
        boundary_flags=flags,
        r_at_bound=bool(log_r <= lo or log_r >= hi),
        initial_loglik=-res.fun_init,
        theta=theta,
        message=res.message,
    )
