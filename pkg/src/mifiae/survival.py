"""Survival evaluation: Harrell's C-index, Kaplan-Meier, k-sample log-rank
and exhaustive two-cutoff risk stratification."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

GROUP_NAMES = ("low", "mid", "high")


class NoComparablePairsError(ValueError):
    pass


class InfeasibleStratificationError(ValueError):
    pass


def _check_inputs(times, events, *others):
    times = np.asarray(times, dtype=np.float64)
    events = np.asarray(events)
    if times.ndim != 1 or events.shape != times.shape:
        raise ValueError(f"times {times.shape} and events {events.shape} must be equal-length vectors")
    for o in others:
        if np.shape(o) != times.shape:
            raise ValueError(f"length mismatch: {np.shape(o)} vs {times.shape}")
    if not np.isin(events, (0, 1)).all():
        raise ValueError("events must be 0/1")
    return times, events.astype(bool)


# ---------------------------------------------------------------------------
# Concordance
# ---------------------------------------------------------------------------

def concordance_counts(risks, times, events) -> tuple[int, int]:
    """Return (2 * concordant + tied, 2 * comparable) over Harrell pairs."""
    risks = np.asarray(risks, dtype=np.float64)
    times, events = _check_inputs(times, events, risks)
    ti, tj = times[:, None], times[None, :]
    ei, ej = events[:, None], events[None, :]
    comparable = ei & ((ti < tj) | ((ti == tj) & ~ej))
    ri, rj = risks[:, None], risks[None, :]
    conc = comparable & (ri > rj)
    ties = comparable & (ri == rj)
    return int(2 * conc.sum() + ties.sum()), int(2 * comparable.sum())


def concordance_index(risks, times, events) -> float:
    """Harrell's C: share of comparable pairs where the earlier failure has the
    higher risk.  A pair (i, j) is usable when i had the event and either
    T_i < T_j, or T_i == T_j and j was censored.  Tied risks score one half.
    """
    num, den = concordance_counts(risks, times, events)
    if den == 0:
        raise NoComparablePairsError("no comparable pairs")
    return num / den


# ---------------------------------------------------------------------------
# Kaplan-Meier
# ---------------------------------------------------------------------------

@dataclass
class SurvivalCurve:
    event_times: np.ndarray
    survival: np.ndarray
    at_risk: np.ndarray
    n_events: np.ndarray

    def __call__(self, t) -> np.ndarray | float:
        """Step-function value S(t), right-continuous."""
        idx = np.searchsorted(self.event_times, t, side="right")
        vals = np.concatenate([[1.0], self.survival])[idx]
        return float(vals) if np.ndim(vals) == 0 else vals

    def median(self) -> float:
        below = np.flatnonzero(self.survival <= 0.5)
        return float(self.event_times[below[0]]) if below.size else math.inf


def kaplan_meier(times, events) -> SurvivalCurve:
    times, events = _check_inputs(times, events)
    if times.size == 0:
        raise ValueError("kaplan_meier: empty input")
    uniq = np.unique(times[events])
    at_risk = (times[None, :] >= uniq[:, None]).sum(axis=1)
    d = ((times[None, :] == uniq[:, None]) & events[None, :]).sum(axis=1)
    surv = np.cumprod(1.0 - d / at_risk)
    return SurvivalCurve(uniq, surv, at_risk.astype(np.int64), d.astype(np.int64))


# ---------------------------------------------------------------------------
# Chi-square tail via the regularised incomplete gamma function
# ---------------------------------------------------------------------------

def _gamma_series(a: float, x: float) -> float:
    """Lower regularised P(a, x) by its power series (x < a + 1)."""
    term = total = 1.0 / a
    ap = a
    for _ in range(10_000):
        ap += 1.0
        term *= x / ap
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + a * math.log(x) - math.lgamma(a))


def _gamma_cont_frac(a: float, x: float) -> float:
    """Upper regularised Q(a, x) by modified Lentz continued fraction (x >= a + 1)."""
    tiny = 1e-300
    b = x + 1.0 - a
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10_000):
        an = -i * (i - a)
        b += 2.0
        d = an * d + b
        d = tiny if abs(d) < tiny else d
        c = b + an / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + a * math.log(x) - math.lgamma(a))


def chi2_sf(x: float, df: int) -> float:
    """P(X > x) for X ~ chi-square(df)."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if x <= 0:
        return 1.0
    a, z = df / 2.0, x / 2.0
    if z < a + 1.0:
        return max(0.0, 1.0 - _gamma_series(a, z))
    return _gamma_cont_frac(a, z)


# ---------------------------------------------------------------------------
# Log-rank
# ---------------------------------------------------------------------------

def logrank_from_labels(times, events, labels, n_groups: int) -> float:
    """k-sample log-rank chi-square for integer ``labels`` in [0, n_groups)."""
    times, events = _check_inputs(times, events)
    labels = np.asarray(labels, dtype=np.int64)
    uniq = np.unique(times[events])
    if uniq.size == 0:
        raise ValueError("logrank: no events")
    onehot = labels[:, None] == np.arange(n_groups)[None, :]
    risk_mask = times[None, :] >= uniq[:, None]
    death_mask = (times[None, :] == uniq[:, None]) & events[None, :]
    n_gt = risk_mask.astype(np.float64) @ onehot
    d_gt = death_mask.astype(np.float64) @ onehot
    n_t = n_gt.sum(axis=1)
    d_t = d_gt.sum(axis=1)
    frac = n_gt / n_t[:, None]
    obs_minus_exp = (d_gt - d_t[:, None] * frac).sum(axis=0)
    with np.errstate(invalid="ignore", divide="ignore"):
        w = np.where(n_t > 1, d_t * (n_t - d_t) / (n_t - 1), 0.0)
    cov = np.diag((w[:, None] * frac).sum(axis=0)) - (w[:, None] * frac).T @ frac
    u = obs_minus_exp[:-1]
    v = cov[:-1, :-1]
    chi2 = float(u @ np.linalg.pinv(v) @ u)
    return max(chi2, 0.0)


def logrank_test(groups) -> tuple[float, float]:
    """Compare survival across ``groups``, a list of (times, events) pairs.

    Returns (chi-square statistic, p-value) with ``len(groups) - 1`` dof.
    """
    if len(groups) < 2:
        raise ValueError("logrank_test: need at least two groups")
    times, events, labels = [], [], []
    for g, (t, e) in enumerate(groups):
        t, e = _check_inputs(t, e)
        if t.size == 0:
            raise ValueError(f"logrank_test: group {g} is empty")
        times.append(t)
        events.append(e)
        labels.append(np.full(t.size, g))
    chi2 = logrank_from_labels(np.concatenate(times), np.concatenate(events),
                               np.concatenate(labels), len(groups))
    return chi2, chi2_sf(chi2, len(groups) - 1)


# ---------------------------------------------------------------------------
# X-tile style stratification
# ---------------------------------------------------------------------------

@dataclass
class RiskStratification:
    cutoffs: tuple[float, float]
    labels: np.ndarray
    logrank_chi2: float
    p_value: float
    group_sizes: tuple[int, int, int]

    @property
    def group_names(self) -> list[str]:
        return [GROUP_NAMES[i] for i in self.labels]


def assign_groups(risks, c1: float, c2: float) -> np.ndarray:
    """0 = low (risk < c1), 1 = mid, 2 = high (risk >= c2)."""
    risks = np.asarray(risks, dtype=np.float64)
    return (risks >= c1).astype(np.int64) + (risks >= c2).astype(np.int64)


def candidate_cutoffs(risks) -> np.ndarray:
    u = np.unique(np.asarray(risks, dtype=np.float64))
    return (u[:-1] + u[1:]) / 2.0


def xtile_cutoffs(risks, times, events, min_group_frac: float = 0.1) -> RiskStratification:
    """Two cutoffs maximising the three-group log-rank statistic.

    Candidates are midpoints between consecutive distinct risks; every
    group must hold at least ``min_group_frac * n`` patients.  Exact ties in
    the statistic go to the lexicographically smallest (c1, c2).
    """
    risks = np.asarray(risks, dtype=np.float64)
    times, events = _check_inputs(times, events, risks)
    n = risks.size
    floor = min_group_frac * n
    if n < 3 or n < 3 * floor:
        raise InfeasibleStratificationError(f"{n} patients cannot form 3 groups of >= {floor:g}")
    cuts = candidate_cutoffs(risks)
    below = np.array([(risks < c).sum() for c in cuts])
    best = None
    for i, c1 in enumerate(cuts):
        n_low = below[i]
        if n_low < floor:
            continue
        for j in range(i + 1, cuts.size):
            n_mid = below[j] - n_low
            n_high = n - below[j]
            if n_mid < floor:
                continue
            if n_high < floor:
                break
            labels = assign_groups(risks, c1, cuts[j])
            chi2 = logrank_from_labels(times, events, labels, 3)
            if best is None or chi2 > best[0]:
                best = (chi2, i, j)
    if best is None:
        raise InfeasibleStratificationError("no cutoff pair satisfies the minimum group size")
    chi2, i, j = best
    labels = assign_groups(risks, cuts[i], cuts[j])
    sizes = tuple(int((labels == g).sum()) for g in range(3))
    return RiskStratification((float(cuts[i]), float(cuts[j])), labels, chi2, chi2_sf(chi2, 2), sizes)
