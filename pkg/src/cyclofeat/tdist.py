"""Student-t distribution via the regularized incomplete beta function."""

from __future__ import annotations

import math

_FPMIN = 1e-300
_EPS = 1e-16
_MAX_ITER = 100_000


def _betacf(a: float, b: float, x: float) -> float:
    # modified Lentz evaluation of the continued fraction for I_x(a, b)
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float, y: float | None = None) -> float:
    """
    Regularized incomplete beta function I_x(a, b) for a, b > 0.

    ``y`` may supply ``1 - x`` when the caller can form it without
    cancellation; near x = 1 that keeps the complementary branch accurate.
    """
    if a <= 0 or b <= 0:
        raise ValueError("betainc_reg needs a, b > 0")
    if not 0.0 <= x <= 1.0:
        raise ValueError("betainc_reg needs 0 <= x <= 1")
    if y is None:
        y = 1.0 - x
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    # the fraction converges fastest on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, y) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for T ~ Student-t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isnan(t):
        return 1.0
    if math.isinf(t):
        return 0.0
    t2 = t * t
    # both x and 1 - x are formed directly so neither suffers cancellation
    return betainc_reg(0.5 * df, 0.5, df / (df + t2), t2 / (df + t2))


def t_cdf(t: float, df: float) -> float:
    """Student-t cumulative distribution function."""
    if math.isnan(t):
        return math.nan
    half_tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half_tail if t >= 0 else half_tail
