"""Paired-samples t-test with a self-contained Student-t CDF.

The two-sided p-value of ``t`` with ``df`` degrees of freedom is the
regularized incomplete beta ``I_x(df/2, 1/2)`` at ``x = df / (df + t^2)``.
``I_x(a, b)`` is evaluated with the modified Lentz continued fraction,
using the symmetry ``I_x(a, b) = 1 - I_{1-x}(b, a)`` when
``x > (a + 1) / (a + b + 2)`` so the fraction converges quickly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

_FPMIN = 1e-300
_EPS = 1e-15
_MAX_ITER = 500


class DegenerateTestError(ValueError):
    pass


def _betacf(a: float, b: float, x: float) -> float:
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


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x in (0.0, 1.0):
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_pvalue(t: float, df: float) -> float:
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    df: int
    mean_difference: float
    exact_tie: bool = False


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> TTestResult:
    """Two-sided paired-samples t-test of ``a - b``."""
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    d = [float(x) - float(y) for x, y in zip(a, b)]
    if all(v == d[0] for v in d):
        if d[0] == 0.0:
            return TTestResult(t=0.0, p=1.0, df=n - 1, mean_difference=0.0, exact_tie=True)
        raise DegenerateTestError(f"degenerate: constant difference {d[0]}")
    mean = math.fsum(d) / n
    var = math.fsum((v - mean) ** 2 for v in d) / (n - 1)
    se = math.sqrt(var / n)
    t = mean / se
    return TTestResult(t=t, p=t_two_sided_pvalue(t, n - 1), df=n - 1, mean_difference=mean)
