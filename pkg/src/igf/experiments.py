"""Seed pools and the analyses run over them.

Every function here is a pure function of its inputs and seeds. Report
assembly and file output live in :mod:`igf.suite`.
"""

from __future__ import annotations

import logging
from collections.abc import Mapping, Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Context, Corpus, generate_synthetic_contexts, sample_contexts, unigram_distribution
from .errors import InvalidConfigError, SeparationUndefinedError, TrainingDivergedError
from .filtration import (
    FinetuneConfig,
    RunRecord,
    ThresholdSchedule,
    iigf_finetune,
    igf_finetune,
    standard_finetune,
)
from .infogain import measure_many
from .learner import LearnerConfig, SecondaryLearner
from .model import OptimizerConfig, ParameterSnapshot
from .stats import auc, correlation_test, pearson, permutation_test, sign_flip_test

logger = logging.getLogger(__name__)

__all__ = [
    "PoolSetup", "SeedPool", "run_seed_pool", "best_of_k", "early_final_correlation",
    "SeparationReport", "corpus_separation_report", "AblationResult", "unigram_ablation",
    "select_tracked_sets", "TrackedResult", "tracked_context_eval", "MatchRow", "batches_to_match",
    "permutation_test", "pearson",
]


@dataclass(frozen=True)
class PoolSetup:
    """Everything a seed pool's runs share; only the seed varies."""

    method: str
    base: ParameterSnapshot
    stream: object
    test_set: tuple[Context, ...]
    finetune: FinetuneConfig
    learner: SecondaryLearner | None = None
    schedule: ThresholdSchedule | None = None
    # iigf only
    pool: tuple[Context, ...] = ()
    objective: tuple[Context, ...] = ()
    learner_config: LearnerConfig | None = None
    tracked_sets: Mapping[str, Sequence[Context]] | None = None

    def __post_init__(self):
        if self.method not in ("standard", "igf", "iigf"):
            raise InvalidConfigError(f"unknown method {self.method!r}")
        if self.method == "igf" and (self.learner is None or self.schedule is None):
            raise InvalidConfigError("igf pools need a learner and a schedule")
        if self.method == "iigf" and (self.schedule is None or self.learner_config is None or not self.pool):
            raise InvalidConfigError("iigf pools need a schedule, a learner config and a context pool")

    def describe(self) -> dict:
        return {"method": self.method, "schedule": None if self.schedule is None else self.schedule.describe()}


@dataclass
class SeedPool:
    method: dict
    records: list[RunRecord]
    n_seeds: int
    failed_seeds: list[int] = field(default_factory=list)
    final_snapshots: list[ParameterSnapshot] = field(default_factory=list, repr=False)

    @property
    def finals(self) -> np.ndarray:
        return np.array([r.final_perplexity for r in self.records])

    def mean_trajectory(self) -> list[tuple[int, float, float]]:
        """(batch, mean perplexity, standard error) over the successful runs."""
        batches = [b for b, _ in self.records[0].perplexity_trajectory]
        values = np.array([[p for _, p in r.perplexity_trajectory] for r in self.records])
        n = values.shape[0]
        se = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else np.zeros(values.shape[1])
        return [(b, float(m), float(s)) for b, m, s in zip(batches, values.mean(axis=0), se)]


def _run_one(args) -> tuple[int, ParameterSnapshot | None, RunRecord | None]:
    setup, seed = args
    torch.set_num_threads(1)
    cfg = FinetuneConfig(setup.finetune.batch_size, setup.finetune.n_batches, setup.finetune.optimizer,
                         setup.finetune.max_candidates_per_batch, setup.finetune.eval_every, seed)
    try:
        if setup.method == "standard":
            snap, rec = standard_finetune(setup.base, setup.stream, setup.test_set, cfg, setup.tracked_sets)
        elif setup.method == "igf":
            snap, rec = igf_finetune(setup.base, setup.learner, setup.stream, setup.test_set, setup.schedule, cfg,
                                     setup.tracked_sets)
        else:
            snap, rec = iigf_finetune(setup.base, setup.pool, setup.objective, setup.test_set, setup.schedule,
                                      setup.learner_config, cfg, tracked_sets=setup.tracked_sets)
    except TrainingDivergedError as err:
        logger.warning("%s run with seed %d diverged: %s", setup.method, seed, err)
        return seed, None, None
    return seed, snap, rec


def run_seed_pool(setup: PoolSetup, n_seeds: int, base_seed: int = 0, max_parallel: int = 1,
                  keep_snapshots: bool = False) -> SeedPool:
    """Runs with seeds ``base_seed .. base_seed + n_seeds - 1``; diverged runs are counted and dropped."""
    if n_seeds < 2:
        raise InvalidConfigError("a seed pool needs n_seeds >= 2")
    jobs = [(setup, base_seed + i) for i in range(n_seeds)]
    if max_parallel > 1:
        with ProcessPoolExecutor(max_workers=max_parallel) as ex:
            results = list(ex.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    pool = SeedPool(setup.describe(), [], n_seeds)
    for seed, snap, rec in results:
        if rec is None:
            pool.failed_seeds.append(seed)
            continue
        pool.records.append(rec)
        if keep_snapshots:
            pool.final_snapshots.append(snap)
    if not pool.records:
        raise TrainingDivergedError(f"every run of the {setup.method} pool diverged")
    return pool


def best_of_k(finals, ks: Sequence[int], n_resamples: int = 1000, rng_seed=0) -> dict[int, np.ndarray]:
    """Distribution of the best (lowest) final perplexity among k runs drawn without replacement."""
    finals = np.asarray(getattr(finals, "finals", finals), dtype=np.float64)
    n = finals.size
    if max(ks) > n or min(ks) < 1:
        raise InvalidConfigError(f"every k must lie in [1, {n}]")
    rng = np.random.default_rng(rng_seed)
    out = {}
    for k in ks:
        if k == n:
            out[k] = np.array([finals.min()])
        elif k == 1:
            out[k] = finals.copy()
        else:
            idx = np.argsort(rng.random((n_resamples, n)), axis=1)[:, :k]
            out[k] = finals[idx].min(axis=1)
    return out


def early_final_correlation(pool, n_perm: int = 10_000, rng_seed=0) -> tuple[float, float, bool]:
    """Pearson r (and one-sided permutation p) between batch-1 and final perplexity across a pool."""
    records = getattr(pool, "records", pool)
    early = [r.perplexity_at(1) for r in records]
    final = [r.final_perplexity for r in records]
    return correlation_test(early, final, n_perm=n_perm, rng_seed=rng_seed, alternative="greater")


@dataclass
class SeparationReport:
    positive_label: str
    thresholds: list[float]
    scores: dict[str, np.ndarray]
    fraction_above: dict[str, list[float]]
    auc: float
    histogram_edges: np.ndarray
    histograms: dict[str, np.ndarray]


def corpus_separation_report(learner: SecondaryLearner, contexts: Sequence[Context], thresholds: Sequence[float],
                             positive_label: str = "A", n_bins: int = 40) -> SeparationReport:
    """Per-corpus score distributions, pass fractions at each threshold and the rank AUC."""
    labels = np.array([c.source_label for c in contexts])
    present = sorted(set(labels.tolist()))
    if len(present) < 2 or positive_label not in present:
        raise SeparationUndefinedError(
            f"separation needs contexts from {positive_label!r} and at least one other corpus, got {present}"
        )
    q = learner.predict_many(contexts)
    scores = {lab: q[labels == lab] for lab in present}
    frac = {lab: [float(np.mean(s >= t)) for t in thresholds] for lab, s in scores.items()}
    a = auc(q[labels == positive_label], q[labels != positive_label])
    edges = np.linspace(q.min(), q.max(), n_bins + 1)
    hists = {lab: np.histogram(s, bins=edges)[0] for lab, s in scores.items()}
    return SeparationReport(positive_label, list(thresholds), scores, frac, a, edges, hists)


ABLATION_CONDITIONS = ("real", "unigram_sampled", "uniform_sampled")


@dataclass
class AblationResult:
    values: dict[str, np.ndarray]

    @property
    def means(self) -> dict[str, float]:
        return {k: float(v.mean()) for k, v in self.values.items()}

    @property
    def ratio(self) -> float:
        m = self.means
        return m["unigram_sampled"] / m["real"] if m["real"] != 0 else float("nan")

    def pairwise_p(self, n_perm: int = 10_000, rng_seed=0) -> dict[str, float]:
        v = self.values
        pairs = [("real", "unigram_sampled"), ("unigram_sampled", "uniform_sampled"), ("real", "uniform_sampled")]
        return {f"{a}>{b}": permutation_test(v[a], v[b], "mean_diff", n_perm, rng_seed, "greater") for a, b in pairs}

    def uniform_above_zero_p(self, n_perm: int = 10_000, rng_seed=0) -> float:
        return sign_flip_test(self.values["uniform_sampled"], n_perm, rng_seed, "greater")


def unigram_ablation(base: ParameterSnapshot, corpus: Corpus, objective: Sequence[Context], n: int,
                     optimizer_config: OptimizerConfig, rng_seed=0, n_workers: int = 1,
                     context_length: int | None = None) -> AblationResult:
    """IG of real windows vs i.i.d. contexts from the corpus unigram vs uniform-random contexts."""
    L = context_length or base.config.context_length
    seeds = np.random.SeedSequence(rng_seed).generate_state(3)
    conds = {
        "real": sample_contexts(corpus, n, L, rng_seed=int(seeds[0])),
        "unigram_sampled": generate_synthetic_contexts("unigram_sampled", unigram_distribution(corpus), n, L,
                                                       int(seeds[1]), corpus.source_label),
        "uniform_sampled": generate_synthetic_contexts("uniform_sampled", corpus.vocab_size, n, L, int(seeds[2]),
                                                       corpus.source_label),
    }
    values = {}
    for name, contexts in conds.items():
        v = np.array([np.nan if x is None else x for x in measure_many(base, contexts, objective, optimizer_config,
                                                                          n_workers)])
        values[name] = v[np.isfinite(v)]
        logger.info("ablation %s: mean IG %.5f over %d contexts", name, values[name].mean(), values[name].size)
    return AblationResult(values)


def select_tracked_sets(learner: SecondaryLearner, candidates: Sequence[Context], k: int, rng_seed=0,
                        high: float = 1.0, low: float = -1.0) -> dict[str, list[Context]]:
    """Up to ``k`` distinct contexts with score > ``high`` and up to ``k`` with score < ``low``."""
    unique = list({c.x: c for c in candidates}.values())
    order = np.random.default_rng(rng_seed).permutation(len(unique))
    unique = [unique[i] for i in order]
    q = learner.predict_many(unique)
    hi = [c for c, s in zip(unique, q) if s > high][:k]
    lo = [c for c, s in zip(unique, q) if s < low][:k]
    for name, got in (("high", hi), ("low", lo)):
        if len(got) < k:
            logger.warning("only %d tracked contexts in the %s class (wanted %d)", len(got), name, k)
    if not hi or not lo:
        raise InvalidConfigError("tracked-context evaluation needs at least one context in each class")
    return {"high": hi, "low": lo}


@dataclass
class TrackedResult:
    pool: SeedPool
    # per tracked context: loss (bits) under the base minus mean final loss over runs
    reductions: dict[str, np.ndarray]


def tracked_context_eval(setup: PoolSetup, tracked: Mapping[str, Sequence[Context]], n_seeds: int,
                         base_seed: int = 0, max_parallel: int = 1) -> TrackedResult:
    """Fine-tune while following the loss of each tracked set; per-context reductions at the end."""
    from dataclasses import replace

    setup = replace(setup, tracked_sets={k: list(v) for k, v in tracked.items()})
    pool = run_seed_pool(setup, n_seeds, base_seed, max_parallel, keep_snapshots=True)
    base_model = setup.base.model()
    reductions = {}
    for name, contexts in tracked.items():
        before = base_model.per_context_loss_bits(contexts)
        after = np.mean([s.model().per_context_loss_bits(contexts) for s in pool.final_snapshots], axis=0)
        reductions[name] = before - after
    return TrackedResult(pool, reductions)


@dataclass(frozen=True)
class MatchRow:
    standard_batch: int
    standard_perplexity: float
    igf_batch: int | None
    saving: float | None


def batches_to_match(igf_curve, standard_curve) -> tuple[list[MatchRow], bool]:
    """For each standard point, the first IGF batch with mean perplexity <= it.

    Curves are ``(batch, perplexity)`` sequences (pools are reduced to their
    mean trajectory). Returns the table and whether IGF's floor lies below
    standard's (an asymptote the standard curve never reaches).
    """
    igf_curve = _curve(igf_curve)
    standard_curve = _curve(standard_curve)
    rows = []
    for b, p in standard_curve:
        match = next((ib for ib, ip in igf_curve if ip <= p), None)
        saving = None if match is None or b == 0 else (b - match) / b
        rows.append(MatchRow(b, p, match, saving))
    floor_below = min(p for _, p in igf_curve) < min(p for _, p in standard_curve)
    return rows, floor_below


def _curve(c):
    if hasattr(c, "mean_trajectory"):
        return [(b, m) for b, m, _ in c.mean_trajectory()]
    return [(int(b), float(p)) for b, p, *_ in c]


def early_savings(rows: Sequence[MatchRow], upto: int) -> float | None:
    """Mean relative saving over standard batches ``1..upto`` that IGF matched."""
    vals = [r.saving for r in rows if 1 <= r.standard_batch <= upto and r.saving is not None]
    return float(np.mean(vals)) if vals else None
