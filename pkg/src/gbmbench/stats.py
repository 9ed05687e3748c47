"""Cohort statistics: paired Wilcoxon signed-rank test and mean/stderr
aggregation.

The exact path computes the full null distribution of W+ over the realized
rank vector (all 2^n sign assignments, evaluated by dynamic programming
over doubled ranks so mid-ranks stay integral). Zero differences are
dropped; ties get mid-ranks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .metrics import ALL_DEFINITIONS, RecurrenceDefinition, SubjectMetrics

EXACT_CUTOFF = 25
STANDARD_PLAN_NAME = "standard"


class Alternative(Enum):
    GREATER = "greater"
    TWO_SIDED = "two-sided"


class Method(Enum):
    EXACT = "exact"
    NORMAL_APPROX = "normal-approx"


@dataclass(frozen=True)
class WilcoxonResult:
    n_effective: int
    w_plus: float
    p_value: float
    method: Method


def _midranks(values: np.ndarray) -> np.ndarray:
    """Ranks of ``values`` with ties assigned the mean of their positions."""
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def signed_rank_distribution(ranks: Sequence[float]) -> np.ndarray:
    """Counts of sign assignments per value of 2*W+ over the given ranks.

    Index s of the returned array counts assignments with doubled rank sum
    s; the array sums to 2^n.
    """
    doubled = [int(round(2.0 * r)) for r in ranks]
    total = sum(doubled)
    counts = np.zeros(total + 1, dtype=np.uint64)
    counts[0] = 1
    for r in doubled:
        counts[r:] += counts[: counts.size - r].copy()
    return counts


def wilcoxon_signed_rank(
    model_vals: Sequence[float],
    standard_vals: Sequence[float],
    alternative: Alternative = Alternative.GREATER,
    exact_cutoff: int = EXACT_CUTOFF,
) -> WilcoxonResult:
    """Paired signed-rank test of model vs standard values.

    Differences are model - standard; zeros are dropped. With GREATER the
    p-value is P(W+ >= observed) under the sign-flip null; TWO_SIDED
    doubles the smaller tail and caps at 1. The exact distribution is used
    for up to ``exact_cutoff`` effective pairs, a continuity-corrected
    normal approximation with tie correction beyond.
    """
    m = np.asarray(model_vals, dtype=np.float64)
    s = np.asarray(standard_vals, dtype=np.float64)
    if m.shape != s.shape or m.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {m.shape} vs {s.shape}")
    if m.size < 1:
        raise ValueError("need at least one pair")
    d = m - s
    d = d[d != 0.0]
    n = int(d.size)
    if n == 0:
        # all pairs tied: no evidence either way (documented convention)
        return WilcoxonResult(0, 0.0, 1.0, Method.EXACT)
    ranks = _midranks(np.abs(d))
    w_plus = float(ranks[d > 0].sum())

    if n <= exact_cutoff:
        counts = signed_rank_distribution(ranks)
        w2 = int(round(2.0 * w_plus))
        denom = 2**n
        upper = int(counts[w2:].sum())
        if alternative is Alternative.GREATER:
            p = upper / denom
        else:
            lower = int(counts[: w2 + 1].sum())
            p = min(1.0, 2.0 * min(upper, lower) / denom)
        return WilcoxonResult(n, w_plus, p, Method.EXACT)

    mu = n * (n + 1) / 4.0
    tie_term = 0.0
    _, tie_counts = np.unique(np.abs(d), return_counts=True)
    for t in tie_counts:
        tie_term += (t**3 - t) / 48.0
    sigma = math.sqrt(n * (n + 1) * (2 * n + 1) / 24.0 - tie_term)
    z = (w_plus - mu - 0.5 * math.copysign(1.0, w_plus - mu)) / sigma
    if alternative is Alternative.GREATER:
        p = 0.5 * math.erfc(z / math.sqrt(2.0))
    else:
        p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(n, w_plus, p, Method.NORMAL_APPROX)


def mean_stderr(values: Sequence[float]) -> tuple:
    """Arithmetic mean and standard error (sample stdev / sqrt(n))."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size < 1:
        raise ValueError("need at least one value")
    mean = float(arr.mean())
    if arr.size == 1:
        return mean, 0.0
    return mean, float(arr.std(ddof=1) / math.sqrt(arr.size))


@dataclass(frozen=True)
class AggregateRow:
    """One cohort-table cell: coverage (percent) of one plan on one
    recurrence definition within one group."""

    dataset: str
    model: str
    recurrence_def: RecurrenceDefinition
    n: int
    mean: float
    stderr: float
    p_value: Optional[float]
    method: Optional[Method]


def plan_names(metrics: Sequence[SubjectMetrics]) -> list:
    """Deterministic plan order: standard first, then sorted model names."""
    names = set()
    for sm in metrics:
        names.update(name for name, _ in sm.coverage)
    ordered = []
    if STANDARD_PLAN_NAME in names:
        ordered.append(STANDARD_PLAN_NAME)
    ordered.extend(sorted(names - {STANDARD_PLAN_NAME}))
    return ordered


def aggregate(
    metrics: Sequence[SubjectMetrics],
    cohort_name: str,
    alternative: Alternative = Alternative.GREATER,
    exact_cutoff: int = EXACT_CUTOFF,
    definitions: Sequence[RecurrenceDefinition] = ALL_DEFINITIONS,
) -> list:
    """Rows of mean +/- stderr (percent) per (group, plan, definition).

    Groups are each dataset plus the combined cohort labeled
    ``cohort_name``; model rows carry a Wilcoxon p against the standard
    plan of the same group, standard rows carry none.
    """
    if not metrics:
        raise ValueError("no subject metrics to aggregate")
    datasets = sorted({sm.dataset for sm in metrics})
    groups = [(name, [sm for sm in metrics if sm.dataset == name]) for name in datasets]
    if datasets != [cohort_name]:
        groups.append((cohort_name, list(metrics)))
    names = plan_names(metrics)

    rows = []
    for group_name, members in groups:
        for model in names:
            for definition in definitions:
                values = [sm.coverage[(model, definition)] for sm in members]
                mean, stderr = mean_stderr(values)
                p_value = None
                method = None
                if model != STANDARD_PLAN_NAME and STANDARD_PLAN_NAME in names:
                    standard = [sm.coverage[(STANDARD_PLAN_NAME, definition)] for sm in members]
                    result = wilcoxon_signed_rank(values, standard, alternative, exact_cutoff)
                    p_value = result.p_value
                    method = result.method
                rows.append(
                    AggregateRow(
                        dataset=group_name,
                        model=model,
                        recurrence_def=definition,
                        n=len(members),
                        mean=100.0 * mean,
                        stderr=100.0 * stderr,
                        p_value=p_value,
                        method=method,
                    )
                )
    return rows
