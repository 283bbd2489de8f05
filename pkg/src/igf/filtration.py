"""Greedy filtration policy, threshold schedules and the fine-tuning loops.

A candidate context is backpropagated iff the secondary learner's score is at
least the current threshold (ties go to Backprop). ``standard_finetune`` and
``igf_finetune`` draw candidates from the stream in chunks of ``batch_size``
with the same generator, so a pass-through filter reproduces the standard run
step for step.
"""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
from collections import deque
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import Context, ContextSampler, Corpus, PoolSampler
from .errors import (
    InvalidConfigError,
    NonFiniteGradientError,
    StaleLearnerError,
    TrainingDivergedError,
)
from .infogain import build_ig_dataset, normalize_ig
from .learner import LearnerConfig, SecondaryLearner, lm_embeddings, train_learner
from .model import AdamState, OptimizerConfig, ParameterSnapshot, TinyCausalLM, adam_step

logger = logging.getLogger(__name__)

SCHEDULE_KINDS = ("constant", "shifting", "iterated")
# candidate cap per batch, as a multiple of batch_size, when none is configured
DEFAULT_CAP_FACTOR = 64


class Action(enum.Enum):
    BACKPROP = "backprop"
    SKIP = "skip"


@dataclass(frozen=True)
class ActionQ:
    q_backprop: float
    q_skip: float

    def __post_init__(self):
        if not (math.isfinite(self.q_backprop) and math.isfinite(self.q_skip)):
            raise InvalidConfigError("action values must be finite")

    def best(self) -> Action:
        return Action.BACKPROP if self.q_backprop >= self.q_skip else Action.SKIP


def decide(q_hat: float, t_skip: float) -> Action:
    """Greedy choice between backpropagating (value ``q_hat``) and skipping (value ``t_skip``)."""
    return ActionQ(float(q_hat), float(t_skip)).best()


@dataclass(frozen=True)
class ThresholdSchedule:
    kind: str = "constant"
    value: float = 0.0
    high: float = 1.0
    low: float = -1.0
    switch_batch: int = 10
    rebuild_every: int = 10
    rebuild_size: int = 100

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise InvalidConfigError(f"schedule kind must be one of {SCHEDULE_KINDS}, got {self.kind!r}")
        if self.kind == "shifting":
            if self.high < self.low:
                raise InvalidConfigError(f"shifting schedule needs high >= low, got {self.high} < {self.low}")
            if self.switch_batch < 0:
                raise InvalidConfigError("switch_batch must be >= 0")
        if self.kind == "iterated":
            if self.rebuild_every < 1:
                raise InvalidConfigError("iterated schedule needs rebuild_every (t) >= 1")
            if self.rebuild_size < 2:
                raise InvalidConfigError("iterated schedule needs rebuild_size (s) >= 2")

    @classmethod
    def constant(cls, value: float) -> "ThresholdSchedule":
        return cls("constant", value=value)

    @classmethod
    def shifting(cls, high: float, low: float, switch_batch: int) -> "ThresholdSchedule":
        return cls("shifting", high=high, low=low, switch_batch=switch_batch)

    @classmethod
    def iterated(cls, t_skip: float, t: int, s: int) -> "ThresholdSchedule":
        return cls("iterated", value=t_skip, rebuild_every=t, rebuild_size=s)

    def describe(self) -> dict:
        if self.kind == "shifting":
            return {"kind": "shifting", "high": self.high, "low": self.low, "switch_batch": self.switch_batch}
        if self.kind == "iterated":
            return {"kind": "iterated", "value": self.value, "rebuild_every": self.rebuild_every,
                    "rebuild_size": self.rebuild_size}
        return {"kind": "constant", "value": self.value}


def threshold_at(s: ThresholdSchedule, batch_index: int) -> float:
    if batch_index < 0:
        raise InvalidConfigError("batch_index must be >= 0")
    if s.kind == "shifting":
        return float(s.high if batch_index < s.switch_batch else s.low)
    return float(s.value)


@dataclass(frozen=True)
class FinetuneConfig:
    batch_size: int = 16
    n_batches: int = 60
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    max_candidates_per_batch: int | None = None
    eval_every: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidConfigError("batch_size must be >= 1")
        if self.n_batches < 0:
            raise InvalidConfigError("n_batches must be >= 0")
        if self.eval_every < 1:
            raise InvalidConfigError("eval_every must be >= 1")
        if self.max_candidates_per_batch is not None and self.max_candidates_per_batch < self.batch_size:
            raise InvalidConfigError("max_candidates_per_batch must be >= batch_size")

    @property
    def candidate_cap(self) -> int:
        return self.max_candidates_per_batch or DEFAULT_CAP_FACTOR * self.batch_size


@dataclass
class RunRecord:
    method: str
    schedule: dict | None
    seed: int
    perplexity_trajectory: list[tuple[int, float]] = field(default_factory=list)
    candidates_seen: int = 0
    candidates_accepted: int = 0
    final_perplexity: float = float("nan")
    # per optimizer step: (batch, threshold, accepted, seen)
    batch_log: list[tuple[int, float | None, int, int]] = field(default_factory=list)
    starvation_batches: list[int] = field(default_factory=list)
    rebuild_batches: list[int] = field(default_factory=list)
    tracked: dict[str, list[tuple[int, float]]] = field(default_factory=dict)

    def perplexity_at(self, batch: int) -> float:
        for b, p in self.perplexity_trajectory:
            if b == batch:
                return p
        raise KeyError(f"no evaluation recorded at batch {batch}")

    def to_json(self) -> dict:
        return {
            "method": self.method,
            "schedule": self.schedule,
            "seed": self.seed,
            "perplexity_trajectory": [list(t) for t in self.perplexity_trajectory],
            "candidates_seen": self.candidates_seen,
            "candidates_accepted": self.candidates_accepted,
            "final_perplexity": self.final_perplexity,
            "batch_log": [list(t) for t in self.batch_log],
            "starvation_batches": self.starvation_batches,
            "rebuild_batches": self.rebuild_batches,
            "tracked": {k: [list(t) for t in v] for k, v in self.tracked.items()},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "RunRecord":
        return cls(
            doc["method"], doc["schedule"], doc["seed"],
            [(int(b), float(p)) for b, p in doc["perplexity_trajectory"]],
            doc["candidates_seen"], doc["candidates_accepted"], doc["final_perplexity"],
            [(int(b), t, int(a), int(s)) for b, t, a, s in doc["batch_log"]],
            list(doc["starvation_batches"]), list(doc["rebuild_batches"]),
            {k: [(int(b), float(v)) for b, v in vals] for k, vals in doc.get("tracked", {}).items()},
        )

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, indent=1)

    def write_trajectory_csv(self, path) -> None:
        steps = {b: (t, a, s) for b, t, a, s in self.batch_log}
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["batch", "perplexity", "threshold", "accepted", "seen"])
            for b, p in self.perplexity_trajectory:
                t, a, s = steps.get(b, (None, 0, 0))
                w.writerow([b, repr(p), "" if t is None else repr(t), a, s])


class _Run:
    """Shared optimizer / evaluation scaffolding for all three methods."""

    def __init__(self, base: ParameterSnapshot, test_set, config: FinetuneConfig, record: RunRecord,
                 tracked_sets: Mapping[str, Sequence[Context]] | None):
        if not test_set:
            raise InvalidConfigError("test set must be non-empty")
        self.model = base.model()
        self.params = self.model.params
        self.state = base.adam_state()
        self.test_set = list(test_set)
        self.config = config
        self.record = record
        self.tracked_sets = {k: list(v) for k, v in (tracked_sets or {}).items()}
        for name in self.tracked_sets:
            record.tracked[name] = []

    def evaluate(self, batch: int) -> None:
        due = batch % self.config.eval_every == 0 or batch == self.config.n_batches
        if not due:
            return
        ppl = self.model.perplexity(self.test_set, self.params)
        self.record.perplexity_trajectory.append((batch, ppl))
        for name, contexts in self.tracked_sets.items():
            loss = float(self.model.per_context_loss_bits(contexts, self.params).mean())
            self.record.tracked[name].append((batch, loss))

    def step(self, batch: list[Context]) -> None:
        try:
            _, grad = self.model.backward(batch, self.params)
            params, state = adam_step(self.params, self.state, grad, self.config.optimizer)
        except NonFiniteGradientError as err:
            raise TrainingDivergedError(str(err)) from err
        if not bool(torch.isfinite(params).all()):
            raise TrainingDivergedError("parameters became non-finite after an optimizer step")
        self.params, self.state = params, state

    def finish(self) -> ParameterSnapshot:
        self.record.final_perplexity = self.record.perplexity_trajectory[-1][1]
        return ParameterSnapshot(self.model.config, self.params.numpy(), self.state.m.numpy(),
                                 self.state.v.numpy(), self.state.step)


def _as_sampler(stream, context_length: int):
    """Accept a sampler, a Corpus (uniform windows) or a list of contexts."""
    if hasattr(stream, "draw"):
        return stream
    if isinstance(stream, Corpus):
        return ContextSampler([stream], context_length=context_length)
    return PoolSampler(list(stream))


class _Filter:
    """Candidate buffer plus greedy acceptance against the current learner."""

    def __init__(self, sampler, rng, batch_size: int, cap: int):
        self.sampler = sampler
        self.rng = rng
        self.batch_size = batch_size
        self.cap = cap
        self.buffer: deque[tuple[Context, float]] = deque()
        self.learner: SecondaryLearner | None = None

    def set_learner(self, learner: SecondaryLearner) -> None:
        self.learner = learner
        if self.buffer:
            contexts = [c for c, _ in self.buffer]
            self.buffer = deque(zip(contexts, learner.predict_many(contexts).tolist()))

    def next_batch(self, t_skip: float) -> tuple[list[Context], int, bool]:
        accepted: list[Context] = []
        rejected: list[tuple[float, int, Context]] = []
        seen = 0
        while len(accepted) < self.batch_size:
            if seen >= self.cap:
                # starvation: top up with the best rejects, earliest first among equal scores
                rejected.sort(key=lambda r: (-r[0], r[1]))
                accepted.extend(c for _, _, c in rejected[: self.batch_size - len(accepted)])
                return accepted, seen, True
            if not self.buffer:
                chunk = self.sampler.draw(self.rng, self.batch_size)
                self.buffer.extend(zip(chunk, self.learner.predict_many(chunk).tolist()))
            ctx, q = self.buffer.popleft()
            seen += 1
            if decide(q, t_skip) is Action.BACKPROP:
                accepted.append(ctx)
            else:
                rejected.append((q, seen, ctx))
        return accepted, seen, False


def _check_learner(learner: SecondaryLearner, base: ParameterSnapshot) -> None:
    if learner.base_model_fingerprint and learner.base_model_fingerprint != base.fingerprint:
        raise StaleLearnerError(
            f"learner was trained on IG measured from base {learner.base_model_fingerprint}, "
            f"not from this base ({base.fingerprint})"
        )


def standard_finetune(base: ParameterSnapshot, stream, test_set: Sequence[Context], config: FinetuneConfig,
                      tracked_sets: Mapping[str, Sequence[Context]] | None = None
                      ) -> tuple[ParameterSnapshot, RunRecord]:
    """Batched Adam on uniformly drawn contexts; the unfiltered baseline."""
    sampler = _as_sampler(stream, base.config.context_length)
    rng = np.random.default_rng(config.rng_seed)
    record = RunRecord("standard", None, config.rng_seed)
    run = _Run(base, test_set, config, record, tracked_sets)
    run.evaluate(0)
    for i in range(config.n_batches):
        batch = sampler.draw(rng, config.batch_size)
        run.step(batch)
        record.candidates_seen += len(batch)
        record.candidates_accepted += len(batch)
        record.batch_log.append((i + 1, None, len(batch), len(batch)))
        run.evaluate(i + 1)
    return run.finish(), record


def igf_finetune(base: ParameterSnapshot, learner: SecondaryLearner, stream, test_set: Sequence[Context],
                 schedule: ThresholdSchedule, config: FinetuneConfig,
                 tracked_sets: Mapping[str, Sequence[Context]] | None = None
                 ) -> tuple[ParameterSnapshot, RunRecord]:
    """Fine-tune on candidates whose predicted IG clears the scheduled threshold."""
    _check_learner(learner, base)
    if schedule.kind == "iterated":
        raise InvalidConfigError("iterated schedules run through iigf_finetune")
    rng = np.random.default_rng(config.rng_seed)
    flt = _Filter(_as_sampler(stream, base.config.context_length), rng, config.batch_size, config.candidate_cap)
    flt.set_learner(learner)
    record = RunRecord("igf", schedule.describe(), config.rng_seed)
    run = _Run(base, test_set, config, record, tracked_sets)
    run.evaluate(0)
    for i in range(config.n_batches):
        _filtered_step(run, flt, threshold_at(schedule, i), i, record)
        run.evaluate(i + 1)
    return run.finish(), record


def _filtered_step(run: _Run, flt: _Filter, t_skip: float, i: int, record: RunRecord) -> None:
    batch, seen, starved = flt.next_batch(t_skip)
    if starved:
        record.starvation_batches.append(i)
        logger.warning("starvation at batch %d: %d candidates seen under threshold %.3f", i, seen, t_skip)
    run.step(batch)
    record.candidates_seen += seen
    record.candidates_accepted += len(batch)
    record.batch_log.append((i + 1, t_skip, len(batch), seen))


def rebuild_seed(seed: int, k: int) -> int:
    """Seed of the k-th learner rebuild inside an IIGF run."""
    return int(np.random.SeedSequence([seed, k]).generate_state(1)[0])


def iigf_finetune(base: ParameterSnapshot, pool: Sequence[Context], objective: Sequence[Context],
                  test_set: Sequence[Context], schedule: ThresholdSchedule, learner_config: LearnerConfig,
                  config: FinetuneConfig, n_workers: int = 1,
                  tracked_sets: Mapping[str, Sequence[Context]] | None = None
                  ) -> tuple[ParameterSnapshot, RunRecord]:
    """Iterated IGF: rebuild the IG dataset and learner from the current weights every ``t`` batches."""
    if schedule.kind != "iterated":
        raise InvalidConfigError("iigf_finetune needs an iterated schedule")
    pool = list(pool)
    rng = np.random.default_rng(config.rng_seed)
    flt = _Filter(PoolSampler(pool), rng, config.batch_size, config.candidate_cap)
    record = RunRecord("iigf", schedule.describe(), config.rng_seed)
    run = _Run(base, test_set, config, record, tracked_sets)
    run.evaluate(0)

    def rebuild(batch_index: int, k: int) -> None:
        current = ParameterSnapshot(base.config, run.params.numpy())
        seed = rebuild_seed(config.rng_seed, k)
        d = normalize_ig(build_ig_dataset(current, pool, objective, schedule.rebuild_size, config.optimizer,
                                          rng_seed=seed, n_workers=n_workers))
        flt.set_learner(train_learner(learner_config, d, seed, lm_embeddings(current), base.config.vocab_size))
        if k > 0:  # k == 0 is the initial learner, not a rebuild
            record.rebuild_batches.append(batch_index)
        logger.info("IIGF rebuild %d at batch %d (s=%d)", k, batch_index, len(d))

    for i in range(config.n_batches):
        if i % schedule.rebuild_every == 0:
            rebuild(i, i // schedule.rebuild_every)
        _filtered_step(run, flt, schedule.value, i, record)
        run.evaluate(i + 1)
    return run.finish(), record
