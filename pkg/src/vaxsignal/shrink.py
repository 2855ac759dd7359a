"""Empirical-Bayes estimates built on a fitted group.

The prior for an AE's rate multiplier is a point mass at zero (weight p)
mixed with Gamma(shape r, scale mu / r). Given a fitted group the posterior
is available in closed form; :func:`posterior_lambda_quadrature_oracle`
recomputes the posterior mean by direct numerical integration and is meant
for verification only.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize
from scipy.special import expit

from .zinb import ZinbParams


class UndefinedWeightsError(ValueError):
    """Sample mean equals prior mean, so the shrinkage weights are not identified."""


class QuadratureError(RuntimeError):
    pass


@dataclass(frozen=True)
class GroupSignal:
    vaccine: str
    group: str
    s: float


@dataclass(frozen=True)
class AePosterior:
    vaccine: str
    ae: str
    y: float
    M: float
    pi_hat: float
    lambda_hat: float


def group_rr(params: ZinbParams):
    """Expected observed/expected ratio of the group, ``(1 - p) * mu``."""
    return (1.0 - np.asarray(params.p, dtype=float)) * np.asarray(params.mu, dtype=float)


def _log_nb_zero(params: ZinbParams, M):
    # log (r / (r + M mu))^r without forming the ratio
    r = float(params.r)
    return -r * np.log1p(np.asarray(M, dtype=float) * np.asarray(params.mu, dtype=float) / r)


def _zero_log_odds(params: ZinbParams, M):
    p = np.asarray(params.p, dtype=float)
    with np.errstate(divide="ignore"):
        return np.log(p) - np.log1p(-p) - _log_nb_zero(params, M)


def posterior_zero_weight(params: ZinbParams, M):
    """Posterior probability that an observed zero is a structural zero."""
    out = expit(_zero_log_odds(params, M))
    return out[()] if np.ndim(out) == 0 else out


def posterior_lambda_mean(y, params: ZinbParams, M):
    y = np.asarray(y, dtype=float)
    M = np.asarray(M, dtype=float)
    mu = np.asarray(params.mu, dtype=float)
    r = float(params.r)
    shrunk = mu / (r + M * mu)
    # 1 - pi_hat without cancellation
    keep = expit(-_zero_log_odds(params, M))
    out = np.where(y > 0, shrunk * (r + y), keep * shrunk * r)
    return out[()] if out.ndim == 0 else out


def posterior_weights(y: float, params: ZinbParams, M: float) -> tuple[float, float]:
    """Weights ``(w1, w2)`` with ``lambda_hat = w1 * y/M + w2 * (1-p) mu``.

    For y = 0 ``w1`` has the closed form ``1 - (1-pi_hat)/(1-p) * r/(r+M mu)``.
    For y > 0 it is solved from the decomposition itself.
    """
    p, mu, r = float(params.p), float(params.mu), float(params.r)
    sample_mean = y / M
    prior_mean = (1.0 - p) * mu
    if sample_mean == prior_mean:
        raise UndefinedWeightsError("sample mean equals prior mean")
    if y == 0:
        pi_hat = float(posterior_zero_weight(params, M))
        w1 = 1.0 - (1.0 - pi_hat) / (1.0 - p) * r / (r + M * mu)
    else:
        lam = float(posterior_lambda_mean(y, params, M))
        w1 = (lam - prior_mean) / (sample_mean - prior_mean)
    return w1, 1.0 - w1


def _gamma_moment(y, params: ZinbParams, M, k, rtol):
    """``int_0^inf lam^k f(y|lam) g(lam) dlam`` scaled by ``exp(-shift)``; returns (value, shift).

    Integrated on the log-rate scale, where the integrand is smooth and
    decays on both sides.
    """
    r, mu = float(params.r), float(params.mu)
    # Gamma(shape r, scale mu/r) log density pieces
    rate = r / mu
    log_norm = r * math.log(rate) - math.lgamma(r)
    log_fact = math.lgamma(y + 1.0)
    log_M = math.log(M)

    def log_integrand(u):
        lam = math.exp(u)
        log_lik = -M * lam + (y * (log_M + u) if y > 0 else 0.0) - log_fact
        log_prior = log_norm + (r - 1.0) * u - rate * lam
        return (k + 1) * u + log_lik + log_prior

    opt = optimize.minimize_scalar(lambda u: -log_integrand(u), bracket=(-1.0, 1.0))
    u_star = float(opt.x)
    shift = log_integrand(u_star)

    def integrand(u):
        return math.exp(log_integrand(u) - shift)

    # walk out until the integrand is below e^-80 of its peak
    edges = []
    for direction in (-1.0, 1.0):
        step = 1.0
        while log_integrand(u_star + direction * step) - shift > -80.0:
            step *= 2.0
            if step > 1e4:
                raise QuadratureError("integrand does not decay")
        edges.append(u_star + direction * step)

    total = 0.0
    for lo, hi in ((edges[0], u_star), (u_star, edges[1])):
        val, err = integrate.quad(integrand, lo, hi, epsabs=0.0, epsrel=rtol, limit=500)
        if not np.isfinite(val) or err > 10.0 * rtol * abs(val):
            raise QuadratureError(f"quadrature did not converge (estimate {val}, error {err})")
        total += val
    return total, shift


def posterior_lambda_quadrature_oracle(y: float, params: ZinbParams, M: float, rtol: float = 1e-10):
    """Posterior mean of the rate multiplier by numerical integration."""
    p = float(params.p)
    if y == 0 and p >= 1.0:
        return 0.0
    num, s_num = _gamma_moment(y, params, M, 1, rtol)
    den, s_den = _gamma_moment(y, params, M, 0, rtol)
    # point mass at zero: contributes p * f(y | 0) to the evidence only
    point = p if y == 0 else 0.0
    log_cont = math.log1p(-p) if p < 1 else -math.inf
    log_num = log_cont + s_num + math.log(num)
    log_den_cont = log_cont + s_den + math.log(den)
    log_den = np.logaddexp(math.log(point) if point > 0 else -math.inf, log_den_cont)
    return math.exp(log_num - log_den)
