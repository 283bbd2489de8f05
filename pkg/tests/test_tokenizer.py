import pytest
from hypothesis import given, settings, strategies as st

from igf.errors import IncompatibleSnapshotError, InvalidConfigError, InvalidTokenError
from igf.tokenizer import Tokenizer, train_tokenizer


def test_vocab_size_and_merge_count(tiny_tokenizer):
    assert tiny_tokenizer.vocab_size == 300
    assert len(tiny_tokenizer.merges) == 44


@settings(max_examples=60, deadline=None)
@given(st.binary(max_size=200))
def test_roundtrip_arbitrary_bytes(tiny_tokenizer, raw):
    assert tiny_tokenizer.decode(tiny_tokenizer.encode(raw)) == raw


def test_encoding_compresses_training_text(tiny_tokenizer, tiny_text):
    ids = tiny_tokenizer.encode(tiny_text["general"])
    assert ids.size < 0.8 * len(tiny_text["general"])
    assert ids.max() < tiny_tokenizer.vocab_size


def test_training_is_deterministic(tiny_text):
    a = train_tokenizer(tiny_text["general"][:5000], 280)
    b = train_tokenizer(tiny_text["general"][:5000], 280)
    assert a == b


def test_tie_break_prefers_lowest_pair():
    # "ab" and "cd" occur equally often; (97, 98) < (99, 100)
    tok = train_tokenizer(b"abcd" * 5, 257)
    assert tok.merges == ((97, 98),)


def test_save_load_roundtrip(tmp_path, tiny_tokenizer):
    path = tmp_path / "tok.json"
    tiny_tokenizer.save(path)
    assert Tokenizer.load(path) == tiny_tokenizer


def test_load_rejects_inconsistent_file(tmp_path, tiny_tokenizer):
    import json

    doc = tiny_tokenizer.to_json()
    doc["vocab_size"] += 1
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(doc))
    with pytest.raises(IncompatibleSnapshotError):
        Tokenizer.load(path)


def test_decode_rejects_unknown_ids(tiny_tokenizer):
    with pytest.raises(InvalidTokenError):
        tiny_tokenizer.decode([0, tiny_tokenizer.vocab_size])
    with pytest.raises(InvalidTokenError):
        tiny_tokenizer.decode([-1])


def test_vocab_below_byte_alphabet_rejected():
    with pytest.raises(InvalidConfigError):
        train_tokenizer(b"abc", 100)
