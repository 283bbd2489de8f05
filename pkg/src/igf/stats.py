"""Distribution-free statistics used by the evaluation and experiment code."""

from __future__ import annotations

import itertools
import math

import numpy as np
from scipy.stats import rankdata

from .errors import InvalidConfigError

ALTERNATIVES = ("two-sided", "greater", "less")
STATISTICS = ("mean_diff", "median_diff")
# pooled sizes up to this are tested by full enumeration of the relabelings
EXACT_MAX_TOTAL = 12


def pearson_with_flag(x, y) -> tuple[float, bool]:
    """Pearson r and a degenerate flag; a constant input yields ``(0.0, True)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise InvalidConfigError("pearson needs two 1-d arrays of equal length")
    if x.size < 2:
        return 0.0, True
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        return 0.0, True
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r)), False


def pearson(x, y) -> float:
    return pearson_with_flag(x, y)[0]


def _stat(kind: str):
    if kind == "mean_diff":
        return lambda a, b: a.mean(axis=-1) - b.mean(axis=-1)
    if kind == "median_diff":
        return lambda a, b: np.median(a, axis=-1) - np.median(b, axis=-1)
    raise InvalidConfigError(f"unknown statistic {kind!r}; choose from {STATISTICS}")


def _tail_count(null: np.ndarray, observed: float, alternative: str) -> int:
    # small slack so relabelings that tie the observed value count as "as extreme"
    slack = 1e-12 * max(1.0, abs(observed))
    if alternative == "greater":
        return int(np.count_nonzero(null >= observed - slack))
    if alternative == "less":
        return int(np.count_nonzero(null <= observed + slack))
    return int(np.count_nonzero(np.abs(null) >= abs(observed) - slack))


def permutation_test(sample_a, sample_b, statistic: str = "mean_diff", n_perm: int = 10_000, rng_seed=0,
                     alternative: str = "two-sided") -> float:
    """Label-shuffling p-value for ``statistic(a) - statistic(b)``.

    ``alternative="greater"`` tests whether ``a`` tends to be larger than ``b``.
    When the pooled sample has at most 12 values every relabeling is
    enumerated and the p-value is exact; otherwise ``n_perm`` random
    relabelings are drawn and ``(1 + hits) / (1 + n_perm)`` is returned.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise InvalidConfigError("permutation_test needs non-empty samples")
    if n_perm < 1000:
        raise InvalidConfigError(f"n_perm must be >= 1000, got {n_perm}")
    if alternative not in ALTERNATIVES:
        raise InvalidConfigError(f"unknown alternative {alternative!r}; choose from {ALTERNATIVES}")
    stat = _stat(statistic)
    observed = float(stat(a, b))
    pooled = np.concatenate([a, b])
    n, na = pooled.size, a.size
    if n <= EXACT_MAX_TOTAL:
        combos = np.array(list(itertools.combinations(range(n), na)), dtype=np.int64)
        mask = np.zeros((len(combos), n), dtype=bool)
        mask[np.arange(len(combos))[:, None], combos] = True
        left = np.stack([pooled[m] for m in mask])
        right = np.stack([pooled[~m] for m in mask])
        null = stat(left, right)
        return _tail_count(null, observed, alternative) / len(combos)
    rng = np.random.default_rng(rng_seed)
    shuffled = rng.permuted(np.broadcast_to(pooled, (n_perm, n)), axis=1)
    null = stat(shuffled[:, :na], shuffled[:, na:])
    return (1 + _tail_count(null, observed, alternative)) / (1 + n_perm)


def correlation_test(x, y, n_perm: int = 10_000, rng_seed=0, alternative: str = "greater") -> tuple[float, float, bool]:
    """Pearson r with a permutation p-value (shuffling ``y``). Returns ``(r, p, degenerate)``."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    r, degenerate = pearson_with_flag(x, y)
    if degenerate:
        return 0.0, 1.0, True
    if n_perm < 1000:
        raise InvalidConfigError(f"n_perm must be >= 1000, got {n_perm}")
    rng = np.random.default_rng(rng_seed)
    dx = (x - x.mean()) / np.linalg.norm(x - x.mean())
    dy = (y - y.mean()) / np.linalg.norm(y - y.mean())
    shuffled = rng.permuted(np.broadcast_to(dy, (n_perm, dy.size)), axis=1)
    null = shuffled @ dx
    return r, (1 + _tail_count(null, r, alternative)) / (1 + n_perm), False


def auc(positive_scores, negative_scores) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count one half)."""
    pos = np.asarray(positive_scores, dtype=np.float64).ravel()
    neg = np.asarray(negative_scores, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise InvalidConfigError("AUC needs scores from both classes")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def sign_flip_test(sample, n_perm: int = 10_000, rng_seed=0, alternative: str = "greater") -> float:
    """One-sample test of mean 0 by random sign flips (exact when the sample has at most 12 values)."""
    x = np.asarray(sample, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidConfigError("sign_flip_test needs a non-empty sample")
    if n_perm < 1000:
        raise InvalidConfigError(f"n_perm must be >= 1000, got {n_perm}")
    if alternative not in ALTERNATIVES:
        raise InvalidConfigError(f"unknown alternative {alternative!r}; choose from {ALTERNATIVES}")
    observed = float(x.mean())
    if x.size <= EXACT_MAX_TOTAL:
        signs = np.array(list(itertools.product((1.0, -1.0), repeat=x.size)))
        null = (signs * x).mean(axis=1)
        return _tail_count(null, observed, alternative) / len(signs)
    rng = np.random.default_rng(rng_seed)
    signs = np.where(rng.random((n_perm, x.size)) < 0.5, -1.0, 1.0)
    null = (signs * x).mean(axis=1)
    return (1 + _tail_count(null, observed, alternative)) / (1 + n_perm)
