import numpy as np
import pytest

from igf.corpus import (
    Context,
    ContextSampler,
    Corpus,
    PoolSampler,
    build_mixed_corpus,
    contexts_to_array,
    fingerprint_contexts,
    generate_synthetic_contexts,
    sample_contexts,
    split_objective_set,
    unigram_distribution,
)
from igf.errors import CorpusTooSmallError, InvalidConfigError, InvalidTokenError


def test_corpus_rejects_out_of_range_ids():
    with pytest.raises(InvalidTokenError):
        Corpus(np.array([0, 5]), "A", "x", 5)


def test_split_is_disjoint_and_complete(tiny_corpora):
    a = tiny_corpora["a"]
    head, tail = a.split(0.85)
    assert len(head) + len(tail) == len(a)
    assert np.array_equal(np.concatenate([head.tokens, tail.tokens]), a.tokens)


def test_windows_have_requested_length_and_lie_in_corpus(tiny_corpora):
    a = tiny_corpora["a"]
    for c in sample_contexts(a, 50, 8, rng_seed=3):
        assert len(c.x) == 8
        assert tuple(a.tokens[c.offset : c.offset + 8].tolist()) == c.x
        # the successor of the last token exists
        assert c.offset + 8 < len(a)


def test_too_small_corpus():
    tiny = Corpus(np.arange(8), "A", "tiny", 10)
    with pytest.raises(CorpusTooSmallError):
        sample_contexts(tiny, 1, 8)


def test_sampling_is_seeded(tiny_corpora):
    a = tiny_corpora["a"]
    assert sample_contexts(a, 20, 8, rng_seed=5) == sample_contexts(a, 20, 8, rng_seed=5)
    assert sample_contexts(a, 20, 8, rng_seed=5) != sample_contexts(a, 20, 8, rng_seed=6)


def test_mixed_corpus_fraction(tiny_corpora):
    mixed = build_mixed_corpus(tiny_corpora["a"], tiny_corpora["b"], 0.75, 4000, 8, rng_seed=0)
    frac = np.mean([c.source_label == "A" for c in mixed])
    assert abs(frac - 0.75) < 0.03
    assert {c.source_label for c in build_mixed_corpus(tiny_corpora["a"], tiny_corpora["b"], 1.0, 50, 8)} == {"A"}
    with pytest.raises(InvalidConfigError):
        build_mixed_corpus(tiny_corpora["a"], tiny_corpora["b"], 1.5, 10, 8)


def test_context_sampler_weights(tiny_corpora, rng):
    s = ContextSampler([tiny_corpora["a"], tiny_corpora["b"]], [3, 1], 8)
    draws = s.draw(rng, 4000)
    assert abs(np.mean([c.source_label == "A" for c in draws]) - 0.75) < 0.03
    with pytest.raises(InvalidConfigError):
        ContextSampler([tiny_corpora["a"]], [-1.0], 8)


def test_pool_sampler_draws_from_pool(tiny_corpora, rng):
    pool = sample_contexts(tiny_corpora["a"], 10, 8)
    keys = {c.key for c in pool}
    assert all(c.key in keys for c in PoolSampler(pool).draw(rng, 100))
    with pytest.raises(CorpusTooSmallError):
        PoolSampler([])


def test_objective_split_has_no_shared_window(tiny_corpora):
    cands = sample_contexts(tiny_corpora["a"], 300, 8, rng_seed=2)
    cands = cands + cands[:40]  # duplicates must stay on one side
    objective, rest = split_objective_set(cands, 30, rng_seed=0)
    assert len(objective) == 30
    assert not ({c.key for c in objective} & {c.key for c in rest})
    assert len({c.key for c in objective}) == 30
    with pytest.raises(InvalidConfigError):
        split_objective_set(cands[:5], 5)


def test_unigram_distribution_matches_counts():
    c = Corpus(np.array([0, 0, 1, 2]), "A", "x", 4)
    assert np.allclose(unigram_distribution(c).probs, [0.5, 0.25, 0.25, 0.0])


def test_synthetic_contexts(tiny_corpora):
    uni = unigram_distribution(tiny_corpora["a"])
    xs = generate_synthetic_contexts("unigram_sampled", uni, 2000, 8, rng_seed=0)
    arr = contexts_to_array(xs)
    assert arr.shape == (2000, 8)
    # never emits a zero-probability token
    assert uni.probs[arr].min() > 0
    # empirical frequency of the most likely token tracks its probability
    top = int(np.argmax(uni.probs))
    assert abs(np.mean(arr == top) - uni.probs[top]) < 0.01
    u = contexts_to_array(generate_synthetic_contexts("uniform_sampled", 50, 1000, 8, rng_seed=1))
    assert u.min() >= 0 and u.max() < 50
    assert all(c.origin == "uniform_sampled" for c in generate_synthetic_contexts("uniform_sampled", 50, 3, 8))
    with pytest.raises(InvalidConfigError):
        generate_synthetic_contexts("bogus", 50, 3, 8)


def test_fingerprint_depends_on_content():
    a = [Context((1, 2, 3), "A")]
    b = [Context((1, 2, 4), "A")]
    assert fingerprint_contexts(a) == fingerprint_contexts(list(a))
    assert fingerprint_contexts(a) != fingerprint_contexts(b)
