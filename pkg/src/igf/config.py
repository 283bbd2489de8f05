"""Experiment configuration: one JSON document, validated with pydantic.

Unknown keys are rejected everywhere. ``--set a.b.c=value`` overrides are
applied to the raw document before validation, with ``value`` parsed as JSON
when possible (so ``--set finetune.n_batches=30`` is an int).
"""

from __future__ import annotations

import copy
import json
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidConfigError
from .filtration import FinetuneConfig, ThresholdSchedule
from .learner import KINDS, LearnerConfig
from .model import ModelConfig, OptimizerConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSpec(_Section):
    grammar: Literal["general", "books", "reddit"]
    n_bytes: int = Field(gt=0)
    seed: int = 0


class CorpusSpec(_Section):
    path: str | None = None
    synthetic: SyntheticSpec | None = None
    label: str

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of path or synthetic")
        return self


class CorporaSection(_Section):
    general: CorpusSpec
    a: CorpusSpec
    b: CorpusSpec


class TokenizerSection(_Section):
    vocab_size: int = Field(default=1024, ge=256)


class ModelSection(_Section):
    context_length: int = Field(default=32, ge=2)
    d_model: int = Field(default=32, ge=1)
    n_layers: int = Field(default=2, ge=1)
    n_heads: int = Field(default=2, ge=1)
    ffn_mult: int = Field(default=4, ge=1)


class PretrainSection(_Section):
    steps: int = Field(default=2000, ge=0)
    learning_rate: float = Field(default=3e-3, gt=0)
    batch_size: int = Field(default=16, ge=1)


class OptimizerSection(_Section):
    learning_rate: float = Field(default=5e-5, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, gt=0)


class DataSection(_Section):
    heldout_fraction: float = Field(default=0.15, gt=0, lt=1)
    objective_size: int = Field(default=160, ge=1)
    test_size: int = Field(default=64, ge=1)
    mix_fraction_a: float = Field(default=0.75, ge=0, le=1)
    pool_size: int = Field(default=20000, ge=2)


class IGSection(_Section):
    dataset_size: int = Field(default=11000, ge=2)
    heldout_size: int = Field(default=1000, ge=1)
    n_workers: int = Field(default=1, ge=1)


class LearnerSection(_Section):
    kind: Literal["conv", "linear_onehot", "linear_embed", "token_average"] = "conv"
    kernel_width: int = Field(default=3, ge=1)
    conv_channels: int = Field(default=32, ge=1)
    hidden_dim: int = Field(default=32, ge=1)
    learning_rate: float = Field(default=1e-3, gt=0)
    epochs: int = Field(default=20, ge=1)
    batch_size: int = Field(default=32, ge=1)


class FinetuneSection(_Section):
    batch_size: int = Field(default=16, ge=1)
    n_batches: int = Field(default=60, ge=0)
    max_candidates_per_batch: int | None = None
    eval_every: int = Field(default=1, ge=1)


class ShiftingSection(_Section):
    high: float = 1.0
    low: float = -1.0
    switch_batch: int = Field(default=10, ge=0)


class SchedulesSection(_Section):
    shifting: ShiftingSection = ShiftingSection()
    constant: float = 0.75


class BestOfKSection(_Section):
    ks: list[int] = [1, 2, 5, 10, 20]
    n_resamples: int = Field(default=1000, ge=1)


class AblationSection(_Section):
    n: int = Field(default=300, ge=2)


class SeparationSection(_Section):
    thresholds: list[float] = [-1.0, -0.5, 0.0, 0.5, 0.75, 1.0]
    n_contexts: int = Field(default=2000, ge=2)


class LearnersSection(_Section):
    kinds: list[Literal["conv", "linear_onehot", "linear_embed", "token_average"]] = list(KINDS)
    sizes: list[int] = [1000, 2000, 5000, 10000]


class TrackedSection(_Section):
    k: int = Field(default=100, ge=1)
    n_seeds: int = Field(default=5, ge=2)


class IIGFSection(_Section):
    n_seeds: int = Field(default=5, ge=2)
    converge_batches: int = Field(default=300, ge=1)
    n_batches: int = Field(default=30, ge=1)
    rebuild_every: int = Field(default=10, ge=1)
    rebuild_size: int = Field(default=200, ge=2)
    t_skip: float = 0.0


class ExperimentsSection(_Section):
    n_seeds: int = Field(default=20, ge=2)
    n_perm: int = Field(default=10000, ge=1000)
    best_of_k: BestOfKSection = BestOfKSection()
    ablation: AblationSection = AblationSection()
    separation: SeparationSection = SeparationSection()
    learners: LearnersSection = LearnersSection()
    tracked: TrackedSection = TrackedSection()
    iigf: IIGFSection = IIGFSection()


class ExperimentConfig(_Section):
    seed: int = 0
    max_parallel_runs: int = Field(default=1, ge=1)
    corpora: CorporaSection
    tokenizer: TokenizerSection = TokenizerSection()
    model: ModelSection = ModelSection()
    pretrain: PretrainSection = PretrainSection()
    optimizer: OptimizerSection = OptimizerSection()
    data: DataSection = DataSection()
    ig: IGSection = IGSection()
    learner: LearnerSection = LearnerSection()
    finetune: FinetuneSection = FinetuneSection()
    schedules: SchedulesSection = SchedulesSection()
    experiments: ExperimentsSection = ExperimentsSection()
    # directory that relative corpus paths are resolved against (set by the loader)
    base_dir: str = "."

    @model_validator(mode="after")
    def _consistency(self):
        if self.model.d_model % self.model.n_heads:
            raise ValueError("model.d_model: must be divisible by model.n_heads")
        if self.learner.kernel_width > self.model.context_length:
            raise ValueError("learner.kernel_width: must be <= model.context_length")
        if self.ig.heldout_size >= self.ig.dataset_size:
            raise ValueError("ig.heldout_size: must be smaller than ig.dataset_size")
        n = self.experiments.n_seeds
        if max(self.experiments.best_of_k.ks) > n:
            raise ValueError("experiments.best_of_k.ks: may not exceed experiments.n_seeds")
        return self

    # conversions to the library's own config objects

    def model_config_for(self, vocab_size: int) -> ModelConfig:
        m = self.model
        return ModelConfig(vocab_size, m.context_length, m.d_model, m.n_layers, m.n_heads, m.ffn_mult, self.seed)

    @property
    def optimizer_config(self) -> OptimizerConfig:
        o = self.optimizer
        return OptimizerConfig(o.learning_rate, o.beta1, o.beta2, o.epsilon)

    def finetune_config(self, n_batches: int | None = None, rng_seed: int = 0) -> FinetuneConfig:
        f = self.finetune
        return FinetuneConfig(f.batch_size, f.n_batches if n_batches is None else n_batches, self.optimizer_config,
                              f.max_candidates_per_batch, f.eval_every, rng_seed)

    def learner_config(self, kind: str | None = None, kernel_width: int | None = None) -> LearnerConfig:
        s = self.learner
        return LearnerConfig(kind or s.kind, self.model.d_model, kernel_width or s.kernel_width, s.conv_channels,
                             s.hidden_dim, s.learning_rate, s.epochs, s.batch_size, self.model.context_length,
                             self.seed)

    @property
    def shifting_schedule(self) -> ThresholdSchedule:
        s = self.schedules.shifting
        return ThresholdSchedule.shifting(s.high, s.low, s.switch_batch)

    @property
    def constant_schedule(self) -> ThresholdSchedule:
        return ThresholdSchedule.constant(self.schedules.constant)

    @property
    def iterated_schedule(self) -> ThresholdSchedule:
        i = self.experiments.iigf
        return ThresholdSchedule.iterated(i.t_skip, i.rebuild_every, i.rebuild_size)

    def resolve_path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    def to_document(self) -> dict:
        """The resolved configuration without machine-specific fields."""
        doc = self.model_dump(mode="json")
        doc.pop("base_dir")
        return doc


def _set_path(doc: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = doc
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            node[k] = {}
        node = node[k]
    node[keys[-1]] = value


def parse_override(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise InvalidConfigError(f"override {item!r} is not of the form key=value", field_path=item)
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _format_errors(err: ValidationError) -> list[str]:
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"])
        msg = e["msg"].removeprefix("Value error, ")
        # cross-field checks name their field as "path: message"
        head, sep, tail = msg.partition(": ")
        if sep and " " not in head:
            loc, msg = ".".join(x for x in (loc, head) if x), tail
        out.append(f"{loc or '<root>'}: {msg}")
    return out


def build_config(doc: dict, overrides=(), base_dir: str | Path = ".") -> ExperimentConfig:
    doc = copy.deepcopy(doc)
    for item in overrides:
        key, value = parse_override(item)
        _set_path(doc, key, value)
    doc.setdefault("base_dir", str(base_dir))
    try:
        return ExperimentConfig.model_validate(doc)
    except ValidationError as err:
        problems = _format_errors(err)
        raise InvalidConfigError("invalid config: " + "; ".join(problems),
                                 field_path=problems[0].split(":")[0]) from None


def load_config(path, overrides=()) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise InvalidConfigError(f"config file {path} does not exist", field_path="--config")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise InvalidConfigError(f"{path}: not valid JSON ({err})", field_path="--config") from None
    return build_config(doc, overrides, path.resolve().parent)
