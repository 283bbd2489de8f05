"""Corpora, fixed-length contexts, and synthetic context generators."""

from __future__ import annotations

import hashlib
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorpusTooSmallError, InvalidConfigError, InvalidTokenError
from .tokenizer import Tokenizer

ORIGINS = ("real", "unigram_sampled", "uniform_sampled")
DEFAULT_CONTEXT_LENGTH = 32


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    source_label: str
    name: str
    vocab_size: int

    def __post_init__(self):
        tokens = np.asarray(self.tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab_size):
            raise InvalidTokenError(f"corpus {self.name!r} has ids outside [0, {self.vocab_size})")
        tokens.setflags(write=False)
        object.__setattr__(self, "tokens", tokens)

    def __len__(self) -> int:
        return int(self.tokens.size)

    def split(self, fraction: float) -> tuple["Corpus", "Corpus"]:
        """Cut into a head (``fraction`` of tokens) and a disjoint tail."""
        cut = int(round(len(self) * fraction))
        head = Corpus(self.tokens[:cut], self.source_label, f"{self.name}[:{cut}]", self.vocab_size)
        tail = Corpus(self.tokens[cut:], self.source_label, f"{self.name}[{cut}:]", self.vocab_size)
        return head, tail


@dataclass(frozen=True)
class Context:
    """One training / measurement window.

    ``offset`` is the window start inside the named source corpus (-1 for
    synthetic contexts); it makes windows comparable across splits.
    """

    x: tuple[int, ...]
    source_label: str
    origin: str = "real"
    offset: int = -1
    source: str = ""

    @property
    def key(self) -> tuple:
        return (self.source, self.source_label, self.origin, self.offset, self.x)


@dataclass(frozen=True)
class UnigramModel:
    probs: np.ndarray = field(repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1 or p.size == 0 or (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise InvalidConfigError("unigram probabilities must be non-negative and sum to 1")
        p.setflags(write=False)
        object.__setattr__(self, "probs", p)

    @property
    def vocab_size(self) -> int:
        return int(self.probs.size)


def load_corpus(path, tokenizer: Tokenizer, source_label: str, name: str | None = None) -> Corpus:
    raw = Path(path).read_bytes()
    return Corpus(tokenizer.encode(raw), source_label, name or Path(path).stem, tokenizer.vocab_size)


def _n_offsets(corpus: Corpus, context_length: int) -> int:
    # a window needs its successor token inside the corpus
    n = len(corpus) - context_length
    if n < 1:
        raise CorpusTooSmallError(
            f"corpus {corpus.name!r} has {len(corpus)} tokens; need at least {context_length + 1}"
        )
    return n


def _window(corpus: Corpus, offset: int, context_length: int) -> Context:
    x = tuple(corpus.tokens[offset : offset + context_length].tolist())
    return Context(x, corpus.source_label, "real", offset, corpus.name)


def sample_contexts(corpus: Corpus, n: int, context_length: int = DEFAULT_CONTEXT_LENGTH, rng_seed=0) -> list[Context]:
    """Draw ``n`` windows at uniform offsets, with replacement."""
    n_off = _n_offsets(corpus, context_length)
    offsets = np.random.default_rng(rng_seed).integers(0, n_off, size=n)
    return [_window(corpus, int(o), context_length) for o in offsets]


def build_mixed_corpus(
    a: Corpus, b: Corpus, fraction_a: float, n: int, context_length: int = DEFAULT_CONTEXT_LENGTH, rng_seed=0
) -> list[Context]:
    if not 0.0 <= fraction_a <= 1.0:
        raise InvalidConfigError(f"fraction_a must lie in [0, 1], got {fraction_a}")
    n_a = _n_offsets(a, context_length) if fraction_a > 0 else 0
    n_b = _n_offsets(b, context_length) if fraction_a < 1 else 0
    rng = np.random.default_rng(rng_seed)
    from_a = rng.random(n) < fraction_a
    offsets = rng.integers(0, np.where(from_a, n_a, n_b).clip(min=1))
    return [
        _window(a if pick else b, int(o), context_length) for pick, o in zip(from_a.tolist(), offsets.tolist())
    ]


class ContextSampler:
    """Infinite stream of windows drawn from weighted corpora (with replacement)."""

    def __init__(self, corpora: Sequence[Corpus], weights: Sequence[float] | None = None,
                 context_length: int = DEFAULT_CONTEXT_LENGTH):
        self.corpora = list(corpora)
        w = np.ones(len(self.corpora)) if weights is None else np.asarray(weights, dtype=np.float64)
        if w.shape != (len(self.corpora),) or (w < 0).any() or w.sum() <= 0:
            raise InvalidConfigError("sampler weights must be non-negative with a positive sum")
        self.weights = w / w.sum()
        self.context_length = context_length
        self._n_off = [_n_offsets(c, context_length) if wi > 0 else 0 for c, wi in zip(self.corpora, self.weights)]

    def draw(self, rng: np.random.Generator, n: int = 1) -> list[Context]:
        which = rng.choice(len(self.corpora), size=n, p=self.weights) if len(self.corpora) > 1 else np.zeros(n, int)
        out = []
        for i in which.tolist():
            o = int(rng.integers(0, self._n_off[i]))
            out.append(_window(self.corpora[i], o, self.context_length))
        return out


class PoolSampler:
    """Uniform draws with replacement from a fixed list of contexts."""

    def __init__(self, pool: Sequence[Context]):
        if not pool:
            raise CorpusTooSmallError("context pool is empty")
        self.pool = list(pool)

    def draw(self, rng: np.random.Generator, n: int = 1) -> list[Context]:
        return [self.pool[i] for i in rng.integers(0, len(self.pool), size=n).tolist()]


def unigram_distribution(corpus: Corpus) -> UnigramModel:
    if len(corpus) == 0:
        raise CorpusTooSmallError(f"corpus {corpus.name!r} is empty")
    counts = np.bincount(corpus.tokens, minlength=corpus.vocab_size).astype(np.float64)
    return UnigramModel(counts / counts.sum())


def generate_synthetic_contexts(
    mode: str,
    source: UnigramModel | int,
    n: int,
    context_length: int = DEFAULT_CONTEXT_LENGTH,
    rng_seed=0,
    source_label: str = "synthetic",
) -> list[Context]:
    """I.i.d. token sequences from a unigram model or uniform over a vocabulary."""
    rng = np.random.default_rng(rng_seed)
    if mode == "unigram_sampled":
        if not isinstance(source, UnigramModel):
            raise InvalidConfigError("unigram_sampled needs a UnigramModel")
        # inverse-CDF sampling keeps draws identical across numpy versions of choice()
        cdf = np.cumsum(source.probs)
        u = rng.random((n, context_length)) * cdf[-1]
        toks = np.minimum(np.searchsorted(cdf, u, side="right"), source.vocab_size - 1)
    elif mode == "uniform_sampled":
        vocab = source.vocab_size if isinstance(source, UnigramModel) else int(source)
        if vocab < 1:
            raise InvalidConfigError("vocabulary must be non-empty")
        toks = rng.integers(0, vocab, size=(n, context_length))
    else:
        raise InvalidConfigError(f"unknown synthetic mode {mode!r}")
    return [Context(tuple(row), source_label, mode) for row in toks.tolist()]


def split_objective_set(contexts: Sequence[Context], objective_size: int, rng_seed=0) -> tuple[list[Context], list[Context]]:
    """Split into (objective, finetune) with no window shared between the two.

    Duplicated windows are kept together on one side of the split.
    """
    unique = list(dict.fromkeys(c.key for c in contexts))
    if objective_size < 1:
        raise InvalidConfigError("objective set must be non-empty")
    if objective_size >= len(unique):
        raise InvalidConfigError(
            f"objective_size={objective_size} needs fewer than the {len(unique)} distinct contexts available"
        )
    order = np.random.default_rng(rng_seed).permutation(len(unique))
    chosen = {unique[i] for i in order[:objective_size].tolist()}
    objective: list[Context] = []
    seen: set = set()
    finetune: list[Context] = []
    for c in contexts:
        if c.key in chosen:
            if c.key not in seen:
                objective.append(c)
                seen.add(c.key)
        else:
            finetune.append(c)
    return objective, finetune


def contexts_to_array(contexts: Sequence[Context]) -> np.ndarray:
    return np.array([c.x for c in contexts], dtype=np.int64).reshape(len(contexts), -1)


def fingerprint_contexts(contexts: Sequence[Context]) -> str:
    h = hashlib.sha256()
    h.update(contexts_to_array(contexts).astype("<i8").tobytes())
    return h.hexdigest()[:16]
