"""Real-argument special functions used by the CIR closed forms.

Covers log-Gamma, Gamma, the modified Bessel function I_nu, the ratio
I_nu / I_{nu-1}, Kummer's 1F1 and Gauss's 2F1 on the parameter ranges the
CIR benchmark needs. Everything is vectorized over the real argument.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class SpecFunDomainError(ValueError):
    pass


class SpecFunConvergenceError(ArithmeticError):
    pass


@dataclass(frozen=True)
class SpecFunResult:
    """Function value, possibly returned as its natural log.

    ``log_scaled`` is True when ``value`` holds ``log f`` because ``f`` itself
    would overflow.
    """

    value: np.ndarray | float
    log_scaled: bool = False

    def exp(self):
        return np.exp(self.value) if self.log_scaled else self.value


# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = (
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
)
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


def _lanczos_log_gamma(x):
    # valid for x >= 0.5
    x = x - 1.0
    acc = np.full_like(x, _LANCZOS_COEF[0])
    for k in range(1, 9):
        acc = acc + _LANCZOS_COEF[k] / (x + k)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * np.log(t) - t + np.log(acc)


def log_gamma(x):
    """ln Gamma(x) for x > 0."""
    arr = np.asarray(x, dtype=float)
    if np.any(~(arr > 0)):
        raise SpecFunDomainError("log_gamma requires x > 0")
    out = np.empty_like(arr)
    small = arr < 0.5
    if np.any(small):
        xs = arr[small]
        # reflection: Gamma(x) Gamma(1-x) = pi / sin(pi x), sin(pi x) > 0 on (0, 1/2)
        out[small] = math.log(math.pi) - np.log(np.sin(math.pi * xs)) - _lanczos_log_gamma(1.0 - xs)
    big = ~small
    if np.any(big):
        out[big] = _lanczos_log_gamma(arr[big])
    return out if out.ndim else float(out)


def gamma(x):
    """Gamma(x) for x > 0."""
    return np.exp(log_gamma(x))


def _rgamma_scalar(x: float) -> float:
    """1 / Gamma(x) for any real x, zero at the poles."""
    if x > 0:
        return math.exp(-log_gamma(x))
    if x == math.floor(x):
        return 0.0
    # 1/Gamma(x) = sin(pi x) Gamma(1-x) / pi
    return math.sin(math.pi * x) * math.exp(log_gamma(1.0 - x)) / math.pi


_BESSEL_SERIES_MAX = 30.0


def _bessel_i_log_series(nu: float, x: np.ndarray) -> np.ndarray:
    """log I_nu(x) by the power series, rescaled by its largest term.

    Only used where every term is positive (nu > -1, x > 0).
    """
    half = 0.5 * x
    log_half = np.log(half)
    # index of the largest term: term ratio (x/2)^2 / ((k+1)(k+1+nu)) crosses 1
    kmax = int(np.ceil(np.max(x))) + 60
    k = np.arange(kmax + 1, dtype=float)[:, None]
    log_terms = (2.0 * k + nu) * log_half[None, :] - log_gamma(k + 1.0)[:, :] - log_gamma(k + nu + 1.0)
    peak = np.max(log_terms, axis=0)
    return peak + np.log(np.sum(np.exp(log_terms - peak), axis=0))


def _bessel_i_series(nu: float, x: np.ndarray) -> np.ndarray:
    if nu == -1.0:
        nu = 1.0  # I_{-1} = I_1
    half = 0.5 * x
    q = half * half
    term = half**nu * _rgamma_scalar(nu + 1.0)
    out = term.copy()
    for k in range(1, 400):
        term = term * q / (k * (k + nu))
        out = out + term
        if np.all(np.abs(term) <= 1e-17 * np.abs(out)):
            return out
    raise SpecFunConvergenceError("Bessel I series did not converge")


def _bessel_i_log_hankel(nu: float, x: np.ndarray) -> np.ndarray | None:
    """Large-x asymptotic expansion, returns None if it cannot reach 1e-15."""
    mu = 4.0 * nu * nu
    total = np.ones_like(x)
    term = np.ones_like(x)
    for k in range(1, 60):
        new = -term * (mu - (2 * k - 1) ** 2) / (k * 8.0 * x)
        if np.any(np.abs(new) > np.abs(term)) and k > 1:
            return None
        term = new
        total = total + term
        if np.all(np.abs(term) < 1e-16 * np.abs(total)):
            return x - 0.5 * np.log(2.0 * math.pi * x) + np.log(total)
    return None


def bessel_i(nu: float, x) -> SpecFunResult:
    """Modified Bessel function of the first kind I_nu(x), nu >= -1, x >= 0.

    Up to x = 30 the value is returned directly from the power series. Beyond
    that the result is log-scaled: ``value`` holds ``log I_nu(x)``.
    """
    if nu < -1:
        raise SpecFunDomainError("bessel_i requires nu >= -1")
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise SpecFunDomainError("bessel_i requires finite x >= 0")
    scalar = np.ndim(x) == 0
    if np.all(arr <= _BESSEL_SERIES_MAX):
        out = np.zeros_like(arr)
        pos = arr > 0
        out[pos] = _bessel_i_series(nu, arr[pos])
        if np.any(~pos):
            out[~pos] = 1.0 if nu == 0 else 0.0
        return SpecFunResult(float(out[0]) if scalar else out, False)
    if nu == -1.0:
        nu = 1.0
    if np.any(arr == 0):
        raise SpecFunDomainError("log-scaled branch cannot represent I_nu(0) = 0")
    logv = np.empty_like(arr)
    hankel_ok = arr >= max(_BESSEL_SERIES_MAX, 2.0 * nu * nu)
    if np.any(hankel_ok):
        h = _bessel_i_log_hankel(nu, arr[hankel_ok])
        if h is None:
            hankel_ok[:] = False
        else:
            logv[hankel_ok] = h
    rest = ~hankel_ok
    if np.any(rest):
        if nu <= -1.0:
            raise SpecFunDomainError("log series requires nu > -1")
        logv[rest] = _bessel_i_log_series(nu, arr[rest])
    return SpecFunResult(float(logv[0]) if scalar else logv, True)


def bessel_i_ratio(nu: float, x, max_terms: int = 500, tol: float = 1e-15):
    """I_nu(x) / I_{nu-1}(x) by Perron's continued fraction, nu > 0, x >= 0.

    The fraction converges for every x and never forms I_nu itself, so it is
    overflow-free for large arguments. Evaluated with the modified Lentz
    scheme, vectorized over x.
    """
    if nu <= 0:
        raise SpecFunDomainError("bessel_i_ratio requires nu > 0")
    arr = np.asarray(x, dtype=float)
    if np.any(arr < 0) or np.any(~np.isfinite(arr)):
        raise SpecFunDomainError("bessel_i_ratio requires finite x >= 0")
    xs = np.atleast_1d(arr).astype(float)
    tiny = 1e-300
    # tail T = a1/(b1 + a2/(b2 + ...)), a_k = -(2nu + 2k - 1) x, b_k = 2nu + k + 2x
    f = np.full_like(xs, tiny)
    c = f.copy()
    d = np.zeros_like(xs)
    done = np.zeros(xs.shape, dtype=bool)
    for k in range(1, max_terms + 1):
        a = -(2.0 * nu + 2.0 * k - 1.0) * xs
        b = 2.0 * nu + k + 2.0 * xs
        d = b + a * d
        d = np.where(np.abs(d) < tiny, tiny, d)
        c = b + a / c
        c = np.where(np.abs(c) < tiny, tiny, c)
        d = 1.0 / d
        delta = c * d
        f = np.where(done, f, f * delta)
        done |= np.abs(delta - 1.0) < tol
        if np.all(done):
            break
    else:
        if not np.all(done | (xs == 0)):
            raise SpecFunConvergenceError("Perron continued fraction did not converge")
    out = xs / (2.0 * nu + xs + f)
    out = np.where(xs == 0, 0.0, out)
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(arr.shape)


def _hyp1f1_series(a: float, b: float, z: np.ndarray, max_terms: int, tol: float) -> np.ndarray:
    term = np.ones_like(z)
    out = np.ones_like(z)
    for k in range(max_terms):
        term = term * (a + k) / (b + k) * z / (k + 1)
        out = out + term
        if np.all(np.abs(term) <= tol * np.abs(out)):
            return out
        if np.all(term == 0):
            return out
    raise SpecFunConvergenceError("1F1 series did not converge")


def _valid_lower_param(b: float) -> bool:
    return not (b <= 0 and b == math.floor(b))


def hyp1f1(a: float, b: float, z, max_terms: int = 5000, tol: float = 1e-16):
    """Kummer's confluent hypergeometric function 1F1(a; b; z).

    For z < 0 the Kummer transform 1F1(a;b;z) = e^z 1F1(b-a;b;-z) turns the
    alternating series into a positive one; terminating series (a a
    nonpositive integer) are summed directly.
    """
    if not _valid_lower_param(b):
        raise SpecFunDomainError("1F1 requires b not a nonpositive integer")
    arr = np.atleast_1d(np.asarray(z, dtype=float))
    out = np.empty_like(arr)
    terminating = a <= 0 and a == math.floor(a)
    neg = (arr < 0) & (not terminating)
    if np.any(neg):
        zn = arr[neg]
        out[neg] = np.exp(zn) * _hyp1f1_series(b - a, b, -zn, max_terms, tol)
    if np.any(~neg):
        out[~neg] = _hyp1f1_series(a, b, arr[~neg], max_terms, tol)
    return float(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


def hyp2f1(a: float, b: float, c: float, z, max_terms: int = 10_000, tol: float = 1e-16):
    """Gauss hypergeometric function 2F1(a, b; c; z) for z in [0, 1)."""
    if not _valid_lower_param(c):
        raise SpecFunDomainError("2F1 requires c not a nonpositive integer")
    arr = np.atleast_1d(np.asarray(z, dtype=float))
    if np.any(arr < 0) or np.any(arr >= 1):
        raise SpecFunDomainError("2F1 is implemented for z in [0, 1)")
    term = np.ones_like(arr)
    out = np.ones_like(arr)
    for k in range(max_terms):
        term = term * (a + k) * (b + k) / ((c + k) * (k + 1)) * arr
        out = out + term
        if np.all(np.abs(term) <= tol * np.abs(out)):
            break
    else:
        raise SpecFunConvergenceError("2F1 series stalled (z too close to 1)")
    return float(out[0]) if np.ndim(z) == 0 else out.reshape(np.shape(z))


def log_bessel_i(nu: float, x):
    """log I_nu(x) elementwise for x > 0, mixing direct and log-scaled branches."""
    arr = np.atleast_1d(np.asarray(x, dtype=float))
    if np.any(arr <= 0):
        raise SpecFunDomainError("log_bessel_i requires x > 0")
    out = np.empty_like(arr)
    small = arr <= _BESSEL_SERIES_MAX
    if np.any(small):
        out[small] = np.log(bessel_i(nu, arr[small]).value)
    if np.any(~small):
        out[~small] = bessel_i(nu, arr[~small]).value
    return float(out[0]) if np.ndim(x) == 0 else out.reshape(np.shape(x))
