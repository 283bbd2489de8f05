"""Byte-level byte-pair encoding.

The base vocabulary is the 256 byte values. Training repeatedly merges the
most frequent adjacent pair (ties go to the lowest ``(left_id, right_id)``)
and encoding replays the merges in rank order, each one applied greedily
left to right over the whole sequence.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IncompatibleSnapshotError, InvalidConfigError, InvalidTokenError

logger = logging.getLogger(__name__)

FORMAT = "igf-tok-v1"
N_BYTES = 256


@dataclass(frozen=True)
class Tokenizer:
    merges: tuple[tuple[int, int], ...]
    vocab: tuple[bytes, ...]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @classmethod
    def from_merges(cls, merges) -> "Tokenizer":
        vocab = [bytes([b]) for b in range(N_BYTES)]
        clean = []
        for left, right in merges:
            left, right = int(left), int(right)
            if not (0 <= left < len(vocab) and 0 <= right < len(vocab)):
                raise InvalidTokenError(f"merge ({left}, {right}) references an unknown token")
            vocab.append(vocab[left] + vocab[right])
            clean.append((left, right))
        return cls(tuple(clean), tuple(vocab))

    def encode(self, raw: bytes | str) -> np.ndarray:
        if isinstance(raw, str):
            raw = raw.encode("utf-8")
        ids = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
        for rank, (left, right) in enumerate(self.merges):
            ids = _apply_merge(ids, left, right, N_BYTES + rank)
        return ids

    def decode(self, ids) -> bytes:
        ids = np.asarray(ids, dtype=np.int64).ravel()
        if ids.size and (ids.min() < 0 or ids.max() >= self.vocab_size):
            bad = ids[(ids < 0) | (ids >= self.vocab_size)][0]
            raise InvalidTokenError(f"token id {int(bad)} outside [0, {self.vocab_size})")
        return b"".join(self.vocab[i] for i in ids.tolist())

    def to_json(self) -> dict:
        as_text = [t.decode("latin-1") for t in self.vocab]
        return {
            "format": FORMAT,
            "vocab_size": self.vocab_size,
            "merges": [[as_text[l], as_text[r]] for l, r in self.merges],
            # token strings can collide (e.g. "a"+"bc" and "ab"+"c"); ids cannot
            "merge_ids": [[l, r] for l, r in self.merges],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Tokenizer":
        if doc.get("format") != FORMAT:
            raise IncompatibleSnapshotError(f"expected tokenizer format {FORMAT!r}, got {doc.get('format')!r}")
        if "merge_ids" in doc:
            tok = cls.from_merges(doc["merge_ids"])
        else:
            tok = cls.from_merges(_resolve_string_merges(doc["merges"]))
        if tok.vocab_size != doc["vocab_size"]:
            raise IncompatibleSnapshotError(
                f"vocab_size {doc['vocab_size']} disagrees with {len(tok.merges)} merges"
            )
        strings = [[l.encode("latin-1"), r.encode("latin-1")] for l, r in doc["merges"]]
        if strings != [[tok.vocab[l], tok.vocab[r]] for l, r in tok.merges]:
            raise IncompatibleSnapshotError("merge strings disagree with merge ids")
        return tok

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), ensure_ascii=True) + "\n")

    @classmethod
    def load(cls, path) -> "Tokenizer":
        return cls.from_json(json.loads(Path(path).read_text()))


def _resolve_string_merges(merges) -> list[tuple[int, int]]:
    lookup: dict[bytes, int] = {bytes([b]): b for b in range(N_BYTES)}
    ambiguous: set[bytes] = set()
    out = []
    for left, right in merges:
        lb, rb = left.encode("latin-1"), right.encode("latin-1")
        for tok in (lb, rb):
            if tok in ambiguous:
                raise IncompatibleSnapshotError(f"merge token {tok!r} is ambiguous without merge_ids")
            if tok not in lookup:
                raise InvalidTokenError(f"merge token {tok!r} is not defined before use")
        out.append((lookup[lb], lookup[rb]))
        new = lb + rb
        if new in lookup:
            ambiguous.add(new)
        else:
            lookup[new] = N_BYTES + len(out) - 1
    return out


def _apply_merge(ids: np.ndarray, left: int, right: int, new_id: int) -> np.ndarray:
    if ids.size < 2:
        return ids
    pos = np.flatnonzero((ids[:-1] == left) & (ids[1:] == right))
    if pos.size == 0:
        return ids
    if left == right:
        # runs like "aaaa" produce overlapping hits; keep every other one from the run start
        run_start = np.ones(pos.size, dtype=bool)
        run_start[1:] = pos[1:] != pos[:-1] + 1
        starts = np.flatnonzero(run_start)
        offset = np.arange(pos.size) - starts[np.cumsum(run_start) - 1]
        pos = pos[offset % 2 == 0]
    out = ids.copy()
    out[pos] = new_id
    keep = np.ones(ids.size, dtype=bool)
    keep[pos + 1] = False
    return out[keep]


def train_tokenizer(raw_text: bytes | str, vocab_size: int) -> Tokenizer:
    """Learn ``vocab_size - 256`` merges from ``raw_text``.

    Training stops early (with a warning) if the text collapses to a single
    token before the merge budget is spent.
    """
    if vocab_size < N_BYTES:
        raise InvalidConfigError(f"vocab_size must be >= {N_BYTES}, got {vocab_size}")
    if isinstance(raw_text, str):
        raw_text = raw_text.encode("utf-8")
    if not raw_text:
        raise InvalidConfigError("raw_text must be non-empty")
    ids = np.frombuffer(raw_text, dtype=np.uint8).astype(np.int64)
    merges: list[tuple[int, int]] = []
    for rank in range(vocab_size - N_BYTES):
        if ids.size < 2:
            logger.warning("tokenizer training stopped after %d merges: text fully merged", rank)
            break
        n_tokens = N_BYTES + rank
        codes = ids[:-1] * n_tokens + ids[1:]
        counts = np.bincount(codes, minlength=n_tokens * n_tokens)
        best = int(np.argmax(counts))  # first maximum == lowest (left, right)
        left, right = divmod(best, n_tokens)
        merges.append((left, right))
        ids = _apply_merge(ids, left, right, n_tokens)
    return Tokenizer.from_merges(merges)
