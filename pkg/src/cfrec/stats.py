"""Paired significance tests for comparing explanation methods."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import ContractError

EXACT_LIMIT = 25


@dataclass(frozen=True)
class TestResult:
    statistic: float
    p_value: float
    mode: str
    degenerate: bool = False
    n: int = 0


def mcnemar(paired) -> TestResult:
    """Two-sided McNemar test on paired successes ``(a_ok, b_ok)``.

    Exact binomial when the discordant count is below 25, otherwise
    chi-square with continuity correction on one degree of freedom.
    """
    paired = [(bool(a), bool(b)) for a, b in paired]
    if not paired:
        raise ContractError("mcnemar needs at least one pair")
    b = sum(1 for x, y in paired if x and not y)
    c = sum(1 for x, y in paired if y and not x)
    return mcnemar_counts(b, c, n=len(paired))


def mcnemar_counts(b: int, c: int, n: int | None = None) -> TestResult:
    if b < 0 or c < 0:
        raise ContractError("discordant counts must be non-negative")
    m = b + c
    n = m if n is None else n
    if m == 0:
        return TestResult(0.0, 1.0, "exact", degenerate=True, n=n)
    if m < EXACT_LIMIT:
        p = stats.binomtest(min(b, c), m, 0.5).pvalue
        return TestResult(float(min(b, c)), float(min(1.0, p)), "exact", n=n)
    chi2 = (abs(b - c) - 1) ** 2 / m
    return TestResult(float(chi2), float(stats.chi2.sf(chi2, 1)), "chi2", n=n)


def paired_t_test(a, b) -> TestResult:
    """One-sided paired t-test of ``mean(a - b) < 0``.

    With zero variance in the differences the result is flagged degenerate
    and ``p`` is 0 when every difference is negative, 1 otherwise.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("paired samples must be 1-d and equally long")
    if len(a) < 2:
        raise ContractError("paired t-test needs at least two pairs")
    d = a - b
    sd = d.std(ddof=1)
    if sd == 0:
        mean = float(d.mean())
        t = -np.inf if mean < 0 else (np.inf if mean > 0 else 0.0)
        return TestResult(float(t), 0.0 if mean < 0 else 1.0, "t", degenerate=True, n=len(d))
    t = d.mean() / (sd / np.sqrt(len(d)))
    return TestResult(float(t), float(stats.t.cdf(t, len(d) - 1)), "t", n=len(d))
