"""Small Monte Carlo helpers: DKW bands, survival fits, standard errors."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import FitRejected


def dkw_epsilon(n: int, level: float = 0.05) -> float:
    """Half-width of the two-sided DKW band for an empirical CDF of ``n`` samples."""
    return math.sqrt(math.log(2.0 / level) / (2.0 * n))


def empirical_survival(samples, t) -> np.ndarray:
    """P(X > t) from samples, vectorized in ``t``."""
    s = np.sort(np.asarray(samples, dtype=float))
    return 1.0 - np.searchsorted(s, np.asarray(t, dtype=float), side="right") / len(s)


def mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(x.mean()), float(x.std(ddof=1) / math.sqrt(len(x))) if len(x) > 1 else math.inf


@dataclass
class CouplingFit:
    alpha: float
    gamma: float
    r2: float
    eps: float
    t_end: float
    n: int


def fit_exponential_tail(samples, level: float = 0.05, band_factor: float = 10.0,
                         s_hi: float = 0.5, min_r2: float = 0.98, alpha_cap: float = 10.0) -> CouplingFit:
    """Constants with ``P(T > t) <= alpha * exp(-gamma t)`` on the resolved sample range.

    gamma is the log-survival slope where the survival lies between
    ``band_factor`` DKW half-widths and ``s_hi``.  alpha is then the smallest
    value >= 1 that keeps the upper DKW envelope below the exponential on
    [0, t_end].  Here t_end is the last time the survival is still resolved.
    Fits with R^2 below ``min_r2`` are rejected as non-exponential.
    """
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    if n < 1000:
        raise FitRejected(f"need at least 1000 samples, got {n}")
    eps = dkw_epsilon(n, level)
    s_lo = band_factor * eps
    surv_at = 1.0 - np.arange(1, n + 1) / n
    win = (surv_at >= s_lo) & (surv_at <= s_hi)
    if win.sum() < 20 or np.ptp(x[win]) <= 0:
        raise FitRejected("survival curve has no exponential range to fit")
    t_lo, t_end = x[win][0], x[win][-1]
    grid = np.linspace(t_lo, t_end, 60)
    s = empirical_survival(x, grid)
    keep = s > 0
    g, ls = grid[keep], np.log(s[keep])
    slope, icpt = np.polyfit(g, ls, 1)
    pred = slope * g + icpt
    ss_tot = float(np.sum((ls - ls.mean()) ** 2))
    r2 = 1.0 - float(np.sum((ls - pred) ** 2)) / ss_tot if ss_tot > 0 else 0.0
    gamma = -slope
    if r2 < min_r2 or gamma <= 0:
        raise FitRejected(f"tail is not exponential (R^2={r2:.4f}, slope={slope:.4g})")
    tt = np.concatenate([[0.0], x[x <= t_end]])
    upper = np.minimum(1.0, empirical_survival(x, tt) + eps)
    alpha = max(1.0, float(np.max(upper * np.exp(gamma * tt))))
    if alpha > alpha_cap:
        raise FitRejected(f"alpha={alpha:.3g} exceeds cap {alpha_cap}")
    return CouplingFit(alpha, float(gamma), r2, eps, float(t_end), n)


def verify_survival_bound(samples, alpha: float, gamma: float, level: float = 0.05,
                          grid: int = 200) -> tuple[bool, float]:
    """Check ``P(X > t) <= alpha exp(-gamma t)`` within the DKW band; return (ok, worst excess)."""
    x = np.asarray(samples, dtype=float)
    eps = dkw_epsilon(len(x), level)
    ts = np.linspace(0.0, float(np.max(x)), grid)
    excess = empirical_survival(x, ts) - eps - alpha * np.exp(-gamma * ts)
    worst = float(np.max(excess))
    return worst <= 0.0, worst
