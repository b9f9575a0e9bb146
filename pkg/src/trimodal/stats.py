"""Significance tests, effect sizes, intervals and stratified folds."""

from __future__ import annotations

import logging
import math
from typing import Dict, Hashable, List, Sequence, Tuple

import numpy as np
from scipy import stats as sps

from .errors import DataError

log = logging.getLogger(__name__)


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> Tuple[float, float]:
    """Two-sided paired t-test on ``a - b``. All-zero differences give (0, 1)."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise DataError(f"paired samples differ in length: {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise DataError("paired t-test needs at least 2 pairs")
    d = a - b
    if np.all(d == 0):
        return 0.0, 1.0
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0:
        return math.copysign(math.inf, mean), 0.0
    t = mean / (sd / math.sqrt(n))
    p = 2.0 * sps.t.sf(abs(t), df=n - 1)
    return float(t), float(min(p, 1.0))


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be >= 1")
    return min(1.0, p * m)


def cohens_d(a: Sequence[float], b: Sequence[float]) -> float:
    """Mean difference over the pooled standard deviation of two samples."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    na, nb = a.size, b.size
    if na < 2 or nb < 2:
        raise DataError("Cohen's d needs at least 2 values per sample")
    pooled = math.sqrt(((na - 1) * a.var(ddof=1) + (nb - 1) * b.var(ddof=1)) / (na + nb - 2))
    if pooled == 0:
        raise DataError("Cohen's d is undefined for zero pooled standard deviation")
    return float((a.mean() - b.mean()) / pooled)


def confidence_interval(values: Sequence[float], level: float = 0.95) -> Tuple[float, float]:
    """Student-t interval for the mean."""
    x = np.asarray(values, dtype=float)
    if x.size < 2:
        raise DataError("a confidence interval needs at least 2 values")
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    mean = float(x.mean())
    se = float(x.std(ddof=1)) / math.sqrt(x.size)
    half = float(sps.t.ppf(0.5 + level / 2, df=x.size - 1)) * se
    return mean - half, mean + half


def kfold_split(strata: Sequence[Hashable], k: int = 5, seed: int = 0) -> List[List[int]]:
    """Partition indices into ``k`` folds, stratified by label.

    Members of each stratum are shuffled and dealt round-robin; the dealing
    position carries over between strata so fold sizes also stay within one of
    each other. Strata smaller than ``k`` are logged as not strictly stratified.
    """
    n = len(strata)
    if k < 2:
        raise ValueError("k must be >= 2")
    if k > n:
        raise DataError(f"k={k} exceeds dataset size {n}")
    rng = np.random.Generator(np.random.PCG64(seed))
    groups: Dict[Hashable, List[int]] = {}
    for i, s in enumerate(strata):
        groups.setdefault(s, []).append(i)
    folds: List[List[int]] = [[] for _ in range(k)]
    cursor = 0
    for label in sorted(groups, key=repr):
        members = groups[label]
        if len(members) < k:
            log.warning("stratum %r has %d < k=%d members; not strictly stratified", label, len(members), k)
        for j in rng.permutation(len(members)):
            folds[cursor % k].append(members[j])
            cursor += 1
    return [sorted(f) for f in folds]
