"""Byte-level BPE: training, encoding, vocabulary extension, decomposition.

Ids 0..255 are the raw bytes, special ids come next, merge outputs follow in
rank order, so any input round-trips losslessly (byte fallback) and an
extended tokenizer keeps every base id and merge rank verbatim.

Pre-tokenization splits before every Unicode whitespace character; each
whitespace character is carried as a prefix of the chunk that follows it,
which bounds merge contexts without losing bytes.
"""

from __future__ import annotations

import json
import logging
import os
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Iterator

from .errors import ContractError, ParameterError, TokenIdError, ValidationError

logger = logging.getLogger("upscale_kit.tokenizer")

N_BYTES = 256
TOKENIZER_FORMAT_VERSION = 1
DEFAULT_SPECIALS = ("pad", "eos")

_PRETOKEN_STR = re.compile(r"\s\S*|\S+")
_PRETOKEN_BYTES = re.compile(rb"\s\S*|\S+")

# Encode caches are cleared once they reach this many distinct pretokens.
_CACHE_LIMIT = 1 << 16


@dataclass
class TpcReport:
    """Token-efficiency measurement: tokens emitted per Unicode character."""
    total_tokens: int
    total_characters: int
    tpc: float


class Tokenizer:
    """Immutable byte-level BPE tokenizer; encode/decode are thread-safe."""

    def __init__(self, vocab: list[bytes], merges: list[tuple[int, int]],
                 base_size: int, specials: dict[str, int]):
        self.vocab = vocab
        self.merges = merges
        self.base_size = base_size
        self.specials = specials
        self._ranks = {pair: (rank, N_BYTES + len(specials) + rank)
                       for rank, pair in enumerate(merges)}
        self._cache: dict[tuple[bytes, int], tuple[int, ...]] = {}
        self._validate()

    # -- construction ------------------------------------------------------

    @classmethod
    def byte_tokenizer(cls, specials: Iterable[str] = DEFAULT_SPECIALS) -> "Tokenizer":
        vocab = [bytes([i]) for i in range(N_BYTES)]
        special_map = {}
        for name in specials:
            special_map[name] = len(vocab)
            vocab.append(f"<{name}>".encode("utf-8"))
        return cls(vocab, [], base_size=0, specials=special_map)

    def _validate(self) -> None:
        n_special = len(self.specials)
        if len(self.vocab) != N_BYTES + n_special + len(self.merges):
            raise ValidationError(
                f"vocab size {len(self.vocab)} inconsistent with {n_special} specials "
                f"and {len(self.merges)} merges")
        special_ids = set(self.specials.values())
        if special_ids and (min(special_ids) < N_BYTES
                            or max(special_ids) >= N_BYTES + n_special):
            raise ValidationError("special ids must directly follow the byte ids")
        for rank, (left, right) in enumerate(self.merges):
            out_id = N_BYTES + n_special + rank
            for side in (left, right):
                if not 0 <= side < out_id:
                    raise ValidationError(f"merge {rank} references id {side} >= {out_id}")
                if side in special_ids:
                    raise ValidationError(f"merge {rank} references special id {side}")
            if self.vocab[out_id] != self.vocab[left] + self.vocab[right]:
                raise ValidationError(
                    f"merge {rank}: output bytes do not equal the concatenated inputs")
        if self.base_size and not (N_BYTES + n_special <= self.base_size <= len(self.vocab)):
            raise ValidationError(f"base_size {self.base_size} out of range")

    # -- basic properties --------------------------------------------------

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    @property
    def n_base_merges(self) -> int:
        """Merge count of the base tokenizer this one extends (all, if base)."""
        if self.base_size == 0:
            return len(self.merges)
        return self.base_size - N_BYTES - len(self.specials)

    @property
    def pad_id(self) -> int:
        return self.specials["pad"]

    @property
    def eos_id(self) -> int:
        return self.specials["eos"]

    # -- encode / decode ---------------------------------------------------

    def encode(self, text: str | bytes) -> list[int]:
        """Apply merges lowest rank first, leftmost occurrence first."""
        out: list[int] = []
        for chunk in _pretokenize(text):
            out.extend(self._encode_chunk(chunk, len(self.merges)))
        return out

    def _encode_chunk(self, chunk: bytes, merge_limit: int) -> tuple[int, ...]:
        key = (chunk, merge_limit)
        hit = self._cache.get(key)
        if hit is not None:
            return hit
        ids = self._apply_merges(list(chunk), merge_limit)
        if len(self._cache) >= _CACHE_LIMIT:
            self._cache.clear()
        self._cache[key] = ids
        return ids

    def _apply_merges(self, ids: list[int], merge_limit: int) -> tuple[int, ...]:
        ranks = self._ranks
        while len(ids) > 1:
            best_rank = merge_limit
            best = None
            for pair in zip(ids, ids[1:]):
                hit = ranks.get(pair)
                if hit is not None and hit[0] < best_rank:
                    best_rank, best = hit[0], (pair, hit[1])
            if best is None:
                break
            ids = _merge_pair(ids, best[0], best[1])
        return tuple(ids)

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        parts = []
        for i in ids:
            if not 0 <= i < len(self.vocab):
                raise TokenIdError(f"id {i} out of range for vocab of {len(self.vocab)}")
            parts.append(self.vocab[i])
        return b"".join(parts)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    # -- extension machinery -------------------------------------------------

    def decompose(self, new_token_id: int) -> list[int]:
        """Origin-token matching: re-encode a new token with base merges only."""
        if self.base_size == 0:
            raise ContractError("decompose requires an extended tokenizer")
        if not self.base_size <= new_token_id < len(self.vocab):
            raise ContractError(
                f"id {new_token_id} is not a new token (base_size={self.base_size}, "
                f"vocab={len(self.vocab)})")
        ids = self._apply_merges(list(self.vocab[new_token_id]), self.n_base_merges)
        return list(ids)

    # -- persistence ---------------------------------------------------------

    def save(self, path: str | os.PathLike) -> None:
        doc = {
            "version": TOKENIZER_FORMAT_VERSION,
            "base_size": self.base_size,
            "specials": self.specials,
            "vocab": {str(i): b.hex() for i, b in enumerate(self.vocab)},
            "merges": [list(m) for m in self.merges],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=1)
            f.write("\n")

    @classmethod
    def load(cls, path: str | os.PathLike) -> "Tokenizer":
        with open(path, "r", encoding="utf-8") as f:
            doc = json.load(f)
        version = doc.get("version")
        if version != TOKENIZER_FORMAT_VERSION:
            raise ValidationError(f"{path}: tokenizer version {version!r} not supported")
        raw_vocab = doc["vocab"]
        vocab = []
        for i in range(len(raw_vocab)):
            if str(i) not in raw_vocab:
                raise ValidationError(f"{path}: vocab ids are not dense (missing {i})")
            vocab.append(bytes.fromhex(raw_vocab[str(i)]))
        merges = [tuple(m) for m in doc["merges"]]
        return cls(vocab, merges, int(doc["base_size"]), dict(doc["specials"]))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def train_bpe(corpus: str | Iterable[str], num_merges: int,
              specials: Iterable[str] = DEFAULT_SPECIALS) -> Tokenizer:
    """Greedy highest-frequency pair merging over pre-tokenized chunks.

    Frequency ties break toward the lexicographically smaller left
    byte-string, then the smaller right one, so training is deterministic
    across platforms.
    """
    if num_merges < 0:
        raise ParameterError(f"num_merges must be >= 0, got {num_merges}")
    tok = Tokenizer.byte_tokenizer(specials)
    words = _count_words(corpus, tok, merge_limit=0)
    if not words:
        raise ParameterError("corpus is empty")
    _grow_merges(tok, words, num_merges, what="merges")
    return tok


def extend_vocab(base: Tokenizer, corpus: str | Iterable[str],
                 target_total: int) -> Tokenizer:
    """Learn extra merges from `corpus` on top of a frozen base tokenizer."""
    if target_total < base.vocab_size:
        raise ParameterError(
            f"target_total {target_total} is below the base vocab size {base.vocab_size}")
    extended = Tokenizer(list(base.vocab), list(base.merges),
                         base_size=base.vocab_size, specials=dict(base.specials))
    budget = target_total - base.vocab_size
    if budget:
        words = _count_words(corpus, base, merge_limit=len(base.merges))
        _grow_merges(extended, words, budget, what="new tokens")
    return extended


def _count_words(corpus: str | Iterable[str], tok: Tokenizer,
                 merge_limit: int) -> Counter:
    texts = [corpus] if isinstance(corpus, (str, bytes)) else corpus
    words: Counter = Counter()
    for text in texts:
        for chunk in _pretokenize(text):
            words[tok._encode_chunk(chunk, merge_limit)] += 1
    return words


def _grow_merges(tok: Tokenizer, words: Counter, budget: int, what: str) -> None:
    """Append up to `budget` merges to `tok` in place (construction only)."""
    for step in range(budget):
        pairs: Counter = Counter()
        for word, count in words.items():
            for pair in zip(word, word[1:]):
                pairs[pair] += count
        if not pairs:
            logger.warning("pair supply exhausted after %d of %d %s",
                           step, budget, what)
            break
        best = min(pairs.items(),
                   key=lambda kv: (-kv[1], tok.vocab[kv[0][0]], tok.vocab[kv[0][1]]))[0]
        new_id = len(tok.vocab)
        tok.vocab.append(tok.vocab[best[0]] + tok.vocab[best[1]])
        tok.merges.append(best)
        tok._ranks[best] = (len(tok.merges) - 1, new_id)
        merged: Counter = Counter()
        for word, count in words.items():
            if best in zip(word, word[1:]):
                word = _merge_pair(list(word), best, new_id)
            merged[word] += count
        words = merged
    tok._cache.clear()


def _merge_pair(ids: list[int], pair: tuple[int, int], new_id: int) -> tuple[int, ...]:
    out = []
    i = 0
    n = len(ids)
    while i < n:
        if i + 1 < n and ids[i] == pair[0] and ids[i + 1] == pair[1]:
            out.append(new_id)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return tuple(out)


def _pretokenize(text: str | bytes) -> Iterator[bytes]:
    if isinstance(text, bytes):
        for m in _PRETOKEN_BYTES.finditer(text):
            yield m.group(0)
    else:
        for m in _PRETOKEN_STR.finditer(text):
            yield m.group(0).encode("utf-8")


# ---------------------------------------------------------------------------
# efficiency metric
# ---------------------------------------------------------------------------

def tokens_per_character(tok: Tokenizer, corpus: str | Iterable[str]) -> TpcReport:
    """Total emitted tokens over total Unicode scalar values; lower is better."""
    texts = [corpus] if isinstance(corpus, str) else list(corpus)
    total_tokens = 0
    total_characters = 0
    for text in texts:
        total_tokens += len(tok.encode(text))
        total_characters += len(text)
    if total_characters == 0:
        raise ParameterError("corpus is empty")
    return TpcReport(total_tokens, total_characters, total_tokens / total_characters)


def read_corpus(path: str | os.PathLike) -> list[str]:
    """Read a UTF-8 text file, or newline-delimited JSON with a "text" field."""
    path = os.fspath(path)
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    if path.endswith(".jsonl"):
        docs = []
        for line_no, line in enumerate(raw.splitlines(), 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                docs.append(record["text"])
            except (json.JSONDecodeError, TypeError, KeyError) as exc:
                raise ValidationError(f"{path}:{line_no}: bad JSONL record ({exc})") from exc
        return docs
    return [raw]
