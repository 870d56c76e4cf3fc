"""Welch's unequal-variance t-test and significance markers."""
from __future__ import annotations

import math

import numpy as np
from scipy.special import stdtr

from .errors import InputError


def welch_t(sample_a, sample_b, alternative="two-sided"):
    """p-value of Welch's t-test with Welch–Satterthwaite degrees of freedom.

    ``alternative="greater"`` tests mean(a) > mean(b). When both samples have
    zero variance the p-value is taken at its limit: 1 for equal means, 0 otherwise.
    """
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.ndim != 1 or b.ndim != 1 or len(a) < 2 or len(b) < 2:
        raise InputError("welch_t needs two 1-D samples with at least 2 values each")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise InputError("welch_t samples must be finite")
    if alternative not in ("two-sided", "greater", "less"):
        raise InputError(f"unknown alternative {alternative!r}")
    na, nb = len(a), len(b)
    ma, mb = float(a.mean()), float(b.mean())
    qa, qb = float(a.var(ddof=1)) / na, float(b.var(ddof=1)) / nb
    se2 = qa + qb
    diff = ma - mb
    if se2 == 0.0:
        if diff == 0.0:
            return 1.0
        if alternative == "two-sided":
            return 0.0
        return 0.0 if (diff > 0) == (alternative == "greater") else 1.0
    t = diff / math.sqrt(se2)
    df = se2 * se2 / (qa * qa / (na - 1) + qb * qb / (nb - 1))
    if alternative == "greater":
        return float(stdtr(df, -t))
    if alternative == "less":
        return float(stdtr(df, t))
    return float(min(1.0, 2.0 * stdtr(df, -abs(t))))


def stars(p):
    if p < 0.01:
        return "**"
    if p < 0.05:
        return "*"
    return ""
