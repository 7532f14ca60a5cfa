"""Nonparametric survival estimation.

Implements the product-limit estimator with Greenwood variance and
log-log confidence bands, the k-sample log-rank test, median follow-up
by reverse Kaplan-Meier, and early-mortality bucket tables with Wilson
score intervals. Tied deaths and censorings at the same time are
resolved deaths-first, so a subject censored at t is still at risk for
the deaths at t.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import AnalysisError, DataError, MedianNotReachedError

Z95 = float(stats.norm.ppf(0.975))


@dataclass(frozen=True)
class SurvivalCurve:
    """A fitted product-limit curve.

    Attributes
    ----------
    times : ndarray
        Ascending distinct event (death) times, in days.
    survival : ndarray
        S(t) just after each event time; non-increasing, within [0, 1].
    at_risk : ndarray
        Number at risk just before each event time.
    events : ndarray
        Number of deaths at each event time.
    variance : ndarray
        Greenwood variance of S(t) at each event time.
    n : int
        Subjects at time zero.
    max_time : float
        Largest observed time, event or censoring; estimates beyond it
        are extrapolations and get flagged as truncated.
    ci_method : str
        Transform used for confidence limits ("log-log").
    """

    times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    events: np.ndarray
    variance: np.ndarray
    n: int
    max_time: float
    ci_method: str = "log-log"


@dataclass(frozen=True)
class KMEstimate:
    estimate: float
    ci_low: float
    ci_high: float
    truncated: bool = False


@dataclass(frozen=True)
class LogRankResult:
    chi_square: float
    dof: int
    p_value: float


@dataclass(frozen=True)
class BucketStat:
    """Death fraction within one (start, stop] day window of one group."""

    start: float
    stop: float
    deaths: int
    denominator: int
    fraction: float
    ci_low: float
    ci_high: float


def _as_time_event(times, events) -> tuple[np.ndarray, np.ndarray]:
    t = np.asarray(times, dtype=float)
    e = np.asarray(events, dtype=bool)
    if t.ndim != 1 or t.shape != e.shape:
        raise DataError("times and events must be 1-d and the same length")
    if t.size == 0:
        raise DataError("empty input")
    if not np.all(np.isfinite(t)) or np.any(t <= 0):
        raise DataError("times must be finite and > 0")
    return t, e


def kaplan_meier(times, events) -> SurvivalCurve:
    """Fit the product-limit estimator.

    Parameters
    ----------
    times : array-like
        Follow-up in days, all > 0.
    events : array-like
        True where the subject died at ``times``, False where censored.

    Returns
    -------
    SurvivalCurve
        Steps at distinct death times only. A fully censored input
        yields an empty step set, i.e. the constant curve S = 1.

    Notes
    -----
    The variance is Greenwood's formula
    ``S(t)^2 * sum d_j / (n_j (n_j - d_j))`` accumulated over event
    times up to t; when the curve reaches zero the variance is clamped
    to zero.
    """
    t, e = _as_time_event(times, events)
    order = np.argsort(t, kind="stable")
    t, e = t[order], e[order]
    n_total = t.size

    event_times, deaths = np.unique(t[e], return_counts=True)
    # Risk set counts just before each event time; deaths at tied times
    # precede censorings, so ties remain in the risk set.
    at_risk = n_total - np.searchsorted(t, event_times, side="left")

    with np.errstate(divide="ignore", invalid="ignore"):
        frac = 1.0 - deaths / at_risk
        survival = np.cumprod(frac)
        green_terms = np.where(
            at_risk > deaths,
            deaths / (at_risk * (at_risk - deaths).astype(float)),
            np.inf,
        )
        variance = survival**2 * np.cumsum(green_terms)
    variance = np.where(survival <= 0.0, 0.0, variance)

    for arr in (event_times, survival, at_risk, deaths, variance):
        arr.flags.writeable = False
    return SurvivalCurve(
        times=event_times,
        survival=survival,
        at_risk=at_risk,
        events=deaths,
        variance=variance,
        n=n_total,
        max_time=float(t[-1]),
    )


def km_estimate_at(curve: SurvivalCurve, t: float) -> KMEstimate:
    """Evaluate the right-continuous step curve at time ``t``.

    The 95% interval uses the log-log transform: with
    theta = log(-log S), the limits are ``S ** exp(±z * se_theta)``,
    which stay inside [0, 1] by construction. Degenerate values S = 1
    and S = 0 get the point interval. Querying past the last observed
    time returns the final value flagged as truncated.
    """
    if t < 0:
        raise DataError(f"negative time {t}")
    idx = int(np.searchsorted(curve.times, t, side="right")) - 1
    if idx < 0:
        return KMEstimate(1.0, 1.0, 1.0, truncated=False)
    s = float(curve.survival[idx])
    var = float(curve.variance[idx])
    truncated = t > curve.max_time
    if s >= 1.0:
        return KMEstimate(1.0, 1.0, 1.0, truncated)
    if s <= 0.0:
        return KMEstimate(0.0, 0.0, 0.0, truncated)
    se_theta = np.sqrt(var) / (s * abs(np.log(s)))
    ci_low = s ** np.exp(Z95 * se_theta)
    ci_high = s ** np.exp(-Z95 * se_theta)
    return KMEstimate(s, float(ci_low), float(ci_high), truncated)


def reverse_km_median_followup(times, events) -> float:
    """Median follow-up by the reverse Kaplan-Meier method.

    The censoring indicator is flipped, so censorings become the events
    of interest, and the median of the resulting curve is the smallest
    time at which it drops to 0.5 or below. Raises
    MedianNotReachedError when the flipped curve never does.
    """
    t, e = _as_time_event(times, events)
    flipped = kaplan_meier(t, ~e)
    below = np.nonzero(flipped.survival <= 0.5)[0]
    if below.size == 0:
        raise MedianNotReachedError("reverse KM curve never reaches 0.5")
    return float(flipped.times[below[0]])


def log_rank(groups) -> LogRankResult:
    """k-sample log-rank test.

    Parameters
    ----------
    groups : sequence of (times, events) pairs
        One pair per group, each as for :func:`kaplan_meier`.

    Returns
    -------
    LogRankResult
        Chi-square statistic with k-1 degrees of freedom and its
        p-value. Identical groups give statistic 0 and p = 1.

    Notes
    -----
    Uses the hypergeometric variance of the observed-minus-expected
    death counts at each distinct event time; time points where the
    pooled risk set has a single subject contribute no variance.
    """
    if len(groups) < 2:
        raise DataError("log-rank needs at least two groups")
    parsed = [_as_time_event(t, e) for t, e in groups]
    k = len(parsed)

    t_all = np.concatenate([t for t, _ in parsed])
    e_all = np.concatenate([e for _, e in parsed])
    event_times = np.unique(t_all[e_all])

    n_ij = np.empty((k, event_times.size))
    d_ij = np.zeros((k, event_times.size))
    for i, (ti, ei) in enumerate(parsed):
        n_ij[i] = ti.size - np.searchsorted(np.sort(ti), event_times, side="left")
        death_times, counts = np.unique(ti[ei], return_counts=True)
        d_ij[i, np.searchsorted(event_times, death_times)] = counts

    n_j = n_ij.sum(axis=0)
    d_j = d_ij.sum(axis=0)
    observed = d_ij.sum(axis=1)
    expected = (n_ij * (d_j / n_j)).sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(n_j > 1, d_j * (n_j - d_j) / (n_j - 1.0), 0.0)
    p = n_ij / n_j
    cov = np.diag((scale * p).sum(axis=1)) - (scale * p) @ p.T

    diff = (observed - expected)[: k - 1]
    v = cov[: k - 1, : k - 1]
    if not np.any(diff):
        chi = 0.0
    else:
        try:
            chi = float(diff @ np.linalg.solve(v, diff))
        except np.linalg.LinAlgError:
            chi = float(diff @ np.linalg.pinv(v) @ diff)
    dof = k - 1
    return LogRankResult(chi, dof, float(stats.chi2.sf(chi, dof)))


def wilson_interval(successes: int, n: int, z: float = Z95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        return (float("nan"), float("nan"))
    p = successes / n
    denom = 1.0 + z**2 / n
    center = (p + z**2 / (2 * n)) / denom
    half = z * np.sqrt(p * (1 - p) / n + z**2 / (4 * n**2)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def early_mortality_table(
    times, events, groups, thresholds=(30, 60, 90)
) -> dict[str, tuple[BucketStat, ...]]:
    """Death fractions within day windows, per group.

    For each group label and each window (prev, cut], the fraction is
    deaths inside the window over the subjects whose status at the
    window's end is known: anyone censored before the end of the window
    leaves that window's denominator and the denominators of all later
    windows. Each fraction carries a Wilson 95% interval. Windows with
    an empty denominator report fraction NaN.
    """
    t, e = _as_time_event(times, events)
    labels = np.asarray(groups, dtype=object)
    if labels.shape != t.shape:
        raise DataError("groups must align with times")
    cuts = [float(c) for c in thresholds]
    if sorted(cuts) != cuts or len(set(cuts)) != len(cuts) or cuts[0] <= 0:
        raise DataError("thresholds must be positive and strictly increasing")

    table: dict[str, tuple[BucketStat, ...]] = {}
    for label in dict.fromkeys(labels):  # first-seen order
        mask = labels == label
        gt, ge = t[mask], e[mask]
        stats_out = []
        lo = 0.0
        for hi in cuts:
            dead = int(np.sum(ge & (gt > lo) & (gt <= hi)))
            known = int(np.sum(ge | (gt >= hi)))
            if known > 0:
                frac = dead / known
                ci_low, ci_high = wilson_interval(dead, known)
            else:
                frac = float("nan")
                ci_low = ci_high = float("nan")
            stats_out.append(BucketStat(lo, hi, dead, known, frac, ci_low, ci_high))
            lo = hi
        table[str(label)] = tuple(stats_out)
    return table


def curve_to_csv(curve: SurvivalCurve) -> str:
    """Render a curve as ``time,survival,ci_low,ci_high,at_risk,events``."""
    out = io.StringIO()
    out.write("time,survival,ci_low,ci_high,at_risk,events\n")
    for i, u in enumerate(curve.times):
        est = km_estimate_at(curve, float(u))
        out.write(
            f"{float(u)!r},{float(curve.survival[i])!r},{est.ci_low!r},"
            f"{est.ci_high!r},{int(curve.at_risk[i])},{int(curve.events[i])}\n"
        )
    return out.getvalue()
