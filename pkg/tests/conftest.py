"""Shared fixtures and the per-criterion pass/fail summary."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from igf import synthetic
from igf.corpus import Corpus, sample_contexts
from igf.model import ModelConfig, TinyCausalLM, snapshot
from igf.tokenizer import train_tokenizer

torch.set_num_threads(1)

_CRITERIA: dict[int, tuple[bool, str]] = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    _CRITERIA[number] = (bool(passed), detail)


@pytest.fixture
def criterion():
    """``criterion(n, passed, detail)`` records the outcome of acceptance criterion ``n``."""
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"CRITERION {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def tiny_text():
    return {
        "general": synthetic.generate("general", 20_000, 0).encode(),
        "books": synthetic.generate("books", 12_000, 1).encode(),
        "reddit": synthetic.generate("reddit", 8_000, 2).encode(),
    }


@pytest.fixture(scope="session")
def tiny_tokenizer(tiny_text):
    return train_tokenizer(tiny_text["general"], 300)


@pytest.fixture(scope="session")
def tiny_corpora(tiny_text, tiny_tokenizer):
    V = tiny_tokenizer.vocab_size
    return {
        "general": Corpus(tiny_tokenizer.encode(tiny_text["general"]), "G", "general", V),
        "a": Corpus(tiny_tokenizer.encode(tiny_text["books"]), "A", "books", V),
        "b": Corpus(tiny_tokenizer.encode(tiny_text["reddit"]), "B", "reddit", V),
    }


@pytest.fixture(scope="session")
def tiny_config(tiny_tokenizer):
    return ModelConfig(vocab_size=tiny_tokenizer.vocab_size, context_length=8, d_model=16, n_layers=1, n_heads=2,
                       ffn_mult=2, seed=0)


@pytest.fixture(scope="session")
def tiny_base(tiny_config):
    return snapshot(TinyCausalLM(tiny_config))


@pytest.fixture(scope="session")
def tiny_objective(tiny_corpora, tiny_config):
    return sample_contexts(tiny_corpora["a"], 6, tiny_config.context_length, rng_seed=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
