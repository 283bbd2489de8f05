"""Information gain of single contexts and the learner dataset built from it.

IG is reported reduction-positive: ``IG = ppl_before - ppl_after`` where
``ppl_after`` is the objective-set perplexity after one fresh-Adam step on the
single context. A positive value means the context helped.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Sequence
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .corpus import Context, fingerprint_contexts
from .errors import (
    DegenerateDatasetError,
    EmptyDatasetError,
    IncompatibleSnapshotError,
    InvalidConfigError,
    NonFiniteProbeError,
)
from .model import AdamState, OptimizerConfig, ParameterSnapshot, TinyCausalLM, adam_step

logger = logging.getLogger(__name__)

IGD_FORMAT = "igf-igd-v1"


@dataclass(frozen=True)
class IGSample:
    context: Context
    ig_raw: float
    ig_normalized: float | None = None


@dataclass(frozen=True)
class IGDataset:
    samples: tuple[IGSample, ...]
    objective_fingerprint: str
    base_model_fingerprint: str
    norm_mean: float | None = None
    norm_std: float | None = None
    ddof: int = 0
    discarded: int = 0

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def normalized(self) -> bool:
        return self.norm_std is not None and all(s.ig_normalized is not None for s in self.samples)

    @property
    def raw(self) -> np.ndarray:
        return np.array([s.ig_raw for s in self.samples], dtype=np.float64)

    @property
    def targets(self) -> np.ndarray:
        return np.array([s.ig_normalized for s in self.samples], dtype=np.float64)

    @property
    def contexts(self) -> list[Context]:
        return [s.context for s in self.samples]

    @property
    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.objective_fingerprint}:{self.base_model_fingerprint}".encode())
        for s in self.samples:
            h.update(np.asarray(s.context.x, dtype="<i8").tobytes())
            h.update(np.float64(s.ig_raw).tobytes())
        return h.hexdigest()[:16]

    def subset(self, indices) -> "IGDataset":
        return replace(self, samples=tuple(self.samples[i] for i in indices))

    def save(self, path) -> None:
        header = {
            "format": IGD_FORMAT,
            "n": len(self),
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "ddof": self.ddof,
            "objective_fingerprint": self.objective_fingerprint,
            "base_model_fingerprint": self.base_model_fingerprint,
            "discarded": self.discarded,
        }
        with open(path, "w") as fh:
            fh.write(json.dumps(header) + "\n")
            for s in self.samples:
                c = s.context
                rec = {"tokens": list(c.x), "ig_raw": s.ig_raw, "ig_normalized": s.ig_normalized,
                       "source_label": c.source_label, "origin": c.origin, "offset": c.offset, "source": c.source}
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def load(cls, path) -> "IGDataset":
        with open(path) as fh:
            header = json.loads(fh.readline())
            if header.get("format") != IGD_FORMAT:
                raise IncompatibleSnapshotError(f"{path}: not an IG dataset ({header.get('format')!r})")
            samples = []
            for line in fh:
                r = json.loads(line)
                ctx = Context(tuple(r["tokens"]), r["source_label"], r["origin"], r["offset"], r["source"])
                samples.append(IGSample(ctx, r["ig_raw"], r["ig_normalized"]))
        if len(samples) != header["n"]:
            raise IncompatibleSnapshotError(f"{path}: header says {header['n']} samples, found {len(samples)}")
        return cls(tuple(samples), header["objective_fingerprint"], header["base_model_fingerprint"],
                   header["norm_mean"], header["norm_std"], header["ddof"], header.get("discarded", 0))


class _Prober:
    """Reusable probe against one base snapshot and objective set."""

    def __init__(self, base: ParameterSnapshot, objective: Sequence[Context], optimizer_config: OptimizerConfig):
        if not objective:
            raise InvalidConfigError("objective set must be non-empty")
        self.model = base.model()
        self.base_params = self.model.params
        self.objective = list(objective)
        self.optimizer_config = optimizer_config
        self.before = self.model.perplexity(self.objective)

    def __call__(self, example: Context) -> float:
        loss, grad = self.model.backward([example], self.base_params)
        if not math.isfinite(loss):
            raise NonFiniteProbeError(f"probe loss is {loss}")
        # fresh optimizer state: IG depends only on (base, example, objective)
        probed, _ = adam_step(self.base_params, AdamState.zeros(grad.numel()), grad, self.optimizer_config)
        after = self.model.perplexity(self.objective, probed)
        ig = self.before - after
        if not math.isfinite(ig):
            raise NonFiniteProbeError(f"objective perplexity after the probe step is {after}")
        return ig


def information_gain(base: ParameterSnapshot, example: Context, objective: Sequence[Context],
                     optimizer_config: OptimizerConfig) -> float:
    """Objective-set perplexity reduction from one optimizer step on ``example``.

    Works on a private copy of ``base``; no caller-visible model is touched.
    """
    return _Prober(base, objective, optimizer_config)(example)


# log progress every this many probes within one worker
PROGRESS_EVERY = 1000


def _measure_chunk(args) -> list[float | None]:
    base, objective, optimizer_config, examples = args
    torch.set_num_threads(1)
    prober = _Prober(base, objective, optimizer_config)
    out: list[float | None] = []
    for i, ex in enumerate(examples):
        if i and i % PROGRESS_EVERY == 0:
            logger.info("IG probes: %d/%d", i, len(examples))
        try:
            out.append(prober(ex))
        except (NonFiniteProbeError, FloatingPointError) as err:
            logger.warning("discarding IG probe: %s", err)
            out.append(None)
    return out


def measure_many(base: ParameterSnapshot, examples: Sequence[Context], objective: Sequence[Context],
                 optimizer_config: OptimizerConfig, n_workers: int = 1) -> list[float | None]:
    """IG for each example (``None`` where the probe was non-finite), in input order."""
    examples = list(examples)
    if n_workers <= 1 or len(examples) < 2 * n_workers:
        return _measure_chunk((base, objective, optimizer_config, examples))
    bounds = np.linspace(0, len(examples), n_workers + 1).astype(int)
    jobs = [(base, list(objective), optimizer_config, examples[a:b]) for a, b in zip(bounds[:-1], bounds[1:])]
    with ProcessPoolExecutor(max_workers=n_workers) as pool:
        parts = list(pool.map(_measure_chunk, jobs))
    return [v for part in parts for v in part]


def build_ig_dataset(
    base: ParameterSnapshot,
    pool: Sequence[Context],
    objective: Sequence[Context],
    s: int,
    optimizer_config: OptimizerConfig,
    rng_seed=0,
    n_workers: int = 1,
) -> IGDataset:
    """Sample ``s`` contexts from ``pool`` with replacement and measure each one's IG."""
    if s < 2:
        raise InvalidConfigError("an IG dataset needs s >= 2 samples")
    if not pool:
        raise InvalidConfigError("context pool is empty")
    idx = np.random.default_rng(rng_seed).integers(0, len(pool), size=s)
    examples = [pool[i] for i in idx.tolist()]
    values = measure_many(base, examples, objective, optimizer_config, n_workers)
    samples = tuple(IGSample(c, v) for c, v in zip(examples, values) if v is not None)
    if not samples:
        raise EmptyDatasetError("every IG probe was non-finite")
    return IGDataset(samples, fingerprint_contexts(objective), base.fingerprint, discarded=s - len(samples))


def normalize_ig(d: IGDataset, ddof: int = 0) -> IGDataset:
    """Standardize ``ig_raw`` to zero mean and unit std (population std by default)."""
    raw = d.raw
    if raw.size < 2:
        raise DegenerateDatasetError("normalization needs at least 2 samples")
    mean = float(raw.mean())
    std = float(raw.std(ddof=ddof))
    if not std > 0:
        raise DegenerateDatasetError("IG values have zero variance")
    z = (raw - mean) / std
    samples = tuple(IGSample(s.context, s.ig_raw, float(v)) for s, v in zip(d.samples, z))
    return replace(d, samples=samples, norm_mean=mean, norm_std=std, ddof=ddof)


def split_dataset(d: IGDataset, heldout_size: int, rng_seed=0) -> tuple[IGDataset, IGDataset]:
    """Split into (train, heldout) so that no context appears on both sides."""
    keys = [s.context.x for s in d.samples]
    unique = list(dict.fromkeys(keys))
    if not 0 < heldout_size < len(unique):
        raise InvalidConfigError(f"heldout_size={heldout_size} must be in (0, {len(unique)})")
    order = np.random.default_rng(rng_seed).permutation(len(unique))
    held = {unique[i] for i in order[:heldout_size].tolist()}
    train_idx = [i for i, k in enumerate(keys) if k not in held]
    held_idx = [i for i, k in enumerate(keys) if k in held]
    return d.subset(train_idx), d.subset(held_idx)
