#!/usr/bin/env python3
"""Byte-level BPE tokenizer: training, encode/decode, bilingual merging.

Layout of a vocabulary:
- ids 0..255 are the single bytes 0x00..0xFF
- special tokens follow immediately after the bytes
- learned merge results come after that, in selection order

Merging two tokenizers keeps every base id unchanged, so the rows of a base
model's embedding table stay valid after the vocabulary is extended.
"""

import base64
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from errors import (
    AlphabetMismatch,
    EmptyCorpus,
    IdOutOfRange,
    MalformedFile,
    TargetTooSmall,
)


logger = logging.getLogger(__name__)

BYTE_ALPHABET_SIZE = 256
FILE_VERSION = 1
FILE_TYPE = "byte_bpe"
DEFAULT_SPECIAL_TOKENS = ("bos", "eos", "pad", "unk")


def special_token_bytes(name: str) -> bytes:
    """Byte-string stored in the vocab for a special token name."""
    return f"<|{name}|>".encode("utf-8")


def merge_pair(ids: List[int], pair: Tuple[int, int], result: int) -> List[int]:
    """Replace every non-overlapping occurrence of ``pair`` (left to right) with ``result``."""
    left, right = pair
    out: List[int] = []
    i = 0
    n = len(ids)
    while i < n:
        if i < n - 1 and ids[i] == left and ids[i + 1] == right:
            out.append(result)
            i += 2
        else:
            out.append(ids[i])
            i += 1
    return out


@dataclass(frozen=True)
class MergeRule:
    """One learned merge; lower priority is applied earlier."""
    left: int
    right: int
    result: int
    priority: int


@dataclass
class TokenizerMergeReport:
    """Accounting for ``merge_tokenizers``."""
    base_size: int
    extension_size: int
    merged_size: int
    duplicates_dropped: int
    id_mapping: Dict[int, int]
    merges_dropped: int = 0

    def to_dict(self) -> dict:
        return {
            "base_size": self.base_size,
            "extension_size": self.extension_size,
            "merged_size": self.merged_size,
            "duplicates_dropped": self.duplicates_dropped,
            "merges_dropped": self.merges_dropped,
        }


@dataclass
class Tokenizer:
    """Immutable byte-level BPE tokenizer.

    Safe to share between threads once built; all lookup tables are derived
    in ``__post_init__`` and never mutated afterwards.
    """
    vocab: List[bytes]
    merges: List[MergeRule]
    special_tokens: Dict[str, int] = field(default_factory=dict)
    base_alphabet_size: int = BYTE_ALPHABET_SIZE
    # set by train_bpe when the corpus ran out of pairs before the target size
    exhausted: bool = field(default=False, compare=False)

    _ranks: Dict[Tuple[int, int], Tuple[int, int]] = field(
        init=False, repr=False, compare=False, default_factory=dict)
    _ids: Dict[bytes, int] = field(init=False, repr=False, compare=False, default_factory=dict)
    _special_ids: frozenset = field(init=False, repr=False, compare=False, default=frozenset())

    def __post_init__(self):
        self.vocab = list(self.vocab)
        self.merges = list(self.merges)
        self._ranks = {(m.left, m.right): (m.priority, m.result) for m in self.merges}
        self._ids = {tok: i for i, tok in enumerate(self.vocab)}
        self._special_ids = frozenset(self.special_tokens.values())

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def token_id(self, token: bytes) -> Optional[int]:
        return self._ids.get(token)

    def special_id(self, name: str) -> int:
        return self.special_tokens[name]

    def is_special(self, token_id: int) -> bool:
        return token_id in self._special_ids

    def validate(self) -> None:
        """Check the structural invariants; raises MalformedFile naming the field."""
        if self.base_alphabet_size != BYTE_ALPHABET_SIZE:
            raise MalformedFile("base alphabet must be 256 bytes", field="base_alphabet_size")
        non_special = [tok for i, tok in enumerate(self.vocab) if i not in self._special_ids]
        if non_special[:BYTE_ALPHABET_SIZE] != [bytes([b]) for b in range(BYTE_ALPHABET_SIZE)]:
            raise MalformedFile("first 256 non-special entries must be the single bytes", field="vocab")
        if len(self._ids) != len(self.vocab):
            raise MalformedFile("duplicate byte-strings in vocab", field="vocab")
        for name, sid in self.special_tokens.items():
            if not 0 <= sid < len(self.vocab):
                raise MalformedFile(f"special token {name!r} id {sid} out of range", field="special_tokens")
        seen_results = set()
        for expected_priority, m in enumerate(self.merges):
            if m.priority != expected_priority:
                raise MalformedFile("merge priorities must be dense and ordered", field="merges")
            if not (0 <= m.left < m.result and 0 <= m.right < m.result < len(self.vocab)):
                raise MalformedFile(f"merge {expected_priority} references invalid ids", field="merges")
            if self.vocab[m.left] + self.vocab[m.right] != self.vocab[m.result]:
                raise MalformedFile(f"merge {expected_priority} result does not match its inputs",
                                    field="merges")
            if m.result in seen_results:
                raise MalformedFile(f"merge {expected_priority} repeats a result id", field="merges")
            seen_results.add(m.result)

    def encode(self, text: str) -> List[int]:
        """Encode UTF-8 text, applying merges lowest priority first until fixpoint."""
        return self.encode_bytes(text.encode("utf-8"))

    def encode_bytes(self, data: bytes) -> List[int]:
        ids = list(data)
        ranks = self._ranks
        while len(ids) >= 2:
            best = None
            for pair in zip(ids, ids[1:]):
                rank = ranks.get(pair)
                if rank is not None and (best is None or rank[0] < best[0]):
                    best = (rank[0], pair, rank[1])
            if best is None:
                break
            _, pair, result = best
            ids = merge_pair(ids, pair, result)
        return ids

    def decode_with_status(self, ids: Sequence[int]) -> Tuple[str, bool]:
        """Decode ids to text; returns (text, lossy) where lossy flags invalid UTF-8."""
        parts = []
        size = len(self.vocab)
        for token_id in ids:
            token_id = int(token_id)
            if not 0 <= token_id < size:
                raise IdOutOfRange(f"token id {token_id} outside vocab of {size}")
            if token_id in self._special_ids:
                continue
            parts.append(self.vocab[token_id])
        data = b"".join(parts)
        try:
            return data.decode("utf-8"), False
        except UnicodeDecodeError:
            logger.warning("Lossy decode: %d bytes are not valid UTF-8", len(data))
            return data.decode("utf-8", errors="replace"), True

    def decode(self, ids: Sequence[int]) -> str:
        return self.decode_with_status(ids)[0]


def byte_tokenizer(special_tokens: Sequence[str] = ()) -> Tokenizer:
    """Merge-free tokenizer: pure byte fallback plus the requested specials."""
    vocab = [bytes([b]) for b in range(BYTE_ALPHABET_SIZE)]
    specials = {}
    for name in special_tokens:
        specials[name] = len(vocab)
        vocab.append(special_token_bytes(name))
    return Tokenizer(vocab=vocab, merges=[], special_tokens=specials)


def train_bpe(corpus: Iterable[str], target_vocab_size: int,
              special_tokens: Sequence[str] = (), progress_every: int = 500) -> Tokenizer:
    """Train a byte-level BPE tokenizer.

    Pairs are counted over raw bytes of each document line (no pre-tokenization).
    Each step merges the most frequent pair; ties go to the smallest
    (left_id, right_id). Pairs whose concatenation is already a vocab entry
    are skipped so byte-strings stay unique.
    """
    documents = list(corpus)
    if not documents:
        raise EmptyCorpus("corpus has no documents")

    base = byte_tokenizer(special_tokens)
    if target_vocab_size < base.vocab_size:
        raise TargetTooSmall(
            f"target {target_vocab_size} < {BYTE_ALPHABET_SIZE} bytes + {len(special_tokens)} specials")

    lines: Counter = Counter()
    for doc in documents:
        for line in doc.split("\n"):
            if line:
                lines[tuple(line.encode("utf-8"))] += 1
    sequences = [(list(seq), count) for seq, count in lines.items()]

    vocab = list(base.vocab)
    existing = set(vocab)
    merges: List[MergeRule] = []
    exhausted = False

    while len(vocab) < target_vocab_size:
        counts: Counter = Counter()
        for ids, count in sequences:
            for pair in zip(ids, ids[1:]):
                counts[pair] += count

        best = None
        for pair, count in counts.items():
            if vocab[pair[0]] + vocab[pair[1]] in existing:
                continue
            key = (-count, pair)
            if best is None or key < best:
                best = key
        if best is None:
            exhausted = True
            logger.warning("Corpus exhausted mergeable pairs at vocab size %d (target %d)",
                           len(vocab), target_vocab_size)
            break

        pair = best[1]
        new_id = len(vocab)
        token = vocab[pair[0]] + vocab[pair[1]]
        vocab.append(token)
        existing.add(token)
        merges.append(MergeRule(pair[0], pair[1], new_id, len(merges)))
        sequences = [(merge_pair(ids, pair, new_id), count) for ids, count in sequences]

        if progress_every and len(merges) % progress_every == 0:
            logger.info("BPE training: %d merges, vocab %d/%d", len(merges), len(vocab), target_vocab_size)

    tok = Tokenizer(vocab=vocab, merges=merges, special_tokens=dict(base.special_tokens), exhausted=exhausted)
    logger.info("Trained tokenizer: vocab=%d merges=%d exhausted=%s", tok.vocab_size, len(merges), exhausted)
    return tok


def read_jsonl_corpus(path: Path, key: str = "text") -> List[str]:
    """Read one document per JSONL line under ``key``; blank lines are skipped."""
    documents = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as e:
                raise MalformedFile(f"{path}:{line_no}: invalid JSON ({e})", field=f"line {line_no}")
            if not isinstance(record, dict) or not isinstance(record.get(key), str):
                raise MalformedFile(f"{path}:{line_no}: missing string field {key!r}", field=key)
            documents.append(record[key])
    return documents


def train_bpe_from_jsonl(path: Path, target_vocab_size: int,
                         special_tokens: Sequence[str] = ()) -> Tokenizer:
    return train_bpe(read_jsonl_corpus(Path(path)), target_vocab_size, special_tokens)


def merge_tokenizers(base: Tokenizer, extension: Tokenizer) -> Tuple[Tokenizer, TokenizerMergeReport]:
    """Merge ``extension`` into ``base`` keeping every base id stable.

    Extension tokens already present in base (by byte-string) map onto the base
    id; the rest get fresh ids in extension order. Extension merges are rewritten
    through the id mapping and dropped when their result collapsed into a base token.
    """
    byte_row = [bytes([b]) for b in range(BYTE_ALPHABET_SIZE)]
    for name, tok in (("base", base), ("extension", extension)):
        if tok.base_alphabet_size != BYTE_ALPHABET_SIZE or tok.vocab[:BYTE_ALPHABET_SIZE] != byte_row:
            raise AlphabetMismatch(f"{name} tokenizer is not byte-level with a 256-byte alphabet")

    vocab = list(base.vocab)
    index = {tok: i for i, tok in enumerate(vocab)}
    id_mapping: Dict[int, int] = {}
    duplicates = 0
    for ext_id, token in enumerate(extension.vocab):
        if token in index:
            id_mapping[ext_id] = index[token]
            duplicates += 1
        else:
            new_id = len(vocab)
            vocab.append(token)
            index[token] = new_id
            id_mapping[ext_id] = new_id

    specials = dict(base.special_tokens)
    for name, ext_id in extension.special_tokens.items():
        specials.setdefault(name, id_mapping[ext_id])

    merges = list(base.merges)
    dropped = 0
    for m in extension.merges:
        result = id_mapping[m.result]
        if result < base.vocab_size:
            dropped += 1
            continue
        merges.append(MergeRule(id_mapping[m.left], id_mapping[m.right], result, len(merges)))

    merged = Tokenizer(vocab=vocab, merges=merges, special_tokens=specials)
    report = TokenizerMergeReport(
        base_size=base.vocab_size,
        extension_size=extension.vocab_size,
        merged_size=merged.vocab_size,
        duplicates_dropped=duplicates,
        id_mapping=id_mapping,
        merges_dropped=dropped,
    )
    logger.info("Merged tokenizers: base=%d extension=%d merged=%d duplicates=%d merges_dropped=%d",
                report.base_size, report.extension_size, report.merged_size, duplicates, dropped)
    return merged, report


def tokenizer_to_dict(tok: Tokenizer) -> dict:
    return {
        "version": FILE_VERSION,
        "type": FILE_TYPE,
        "vocab": [base64.b64encode(t).decode("ascii") for t in tok.vocab],
        "merges": [[m.left, m.right] for m in tok.merges],
        "special_tokens": dict(tok.special_tokens),
    }


def tokenizer_from_dict(data: dict) -> Tokenizer:
    if not isinstance(data, dict):
        raise MalformedFile("tokenizer file must hold a JSON object", field="root")
    if data.get("version") != FILE_VERSION:
        raise MalformedFile(f"unsupported tokenizer version {data.get('version')!r}", field="version")
    if data.get("type") != FILE_TYPE:
        raise MalformedFile(f"unsupported tokenizer type {data.get('type')!r}", field="type")
    for key, kind in (("vocab", list), ("merges", list), ("special_tokens", dict)):
        if not isinstance(data.get(key), kind):
            raise MalformedFile(f"missing or invalid {key!r}", field=key)

    try:
        vocab = [base64.b64decode(t, validate=True) for t in data["vocab"]]
    except (TypeError, ValueError) as e:
        raise MalformedFile(f"vocab entry is not base64 ({e})", field="vocab")
    index = {t: i for i, t in enumerate(vocab)}

    merges = []
    for priority, pair in enumerate(data["merges"]):
        if (not isinstance(pair, list) or len(pair) != 2
                or not all(isinstance(x, int) and 0 <= x < len(vocab) for x in pair)):
            raise MalformedFile(f"merge {priority} is not a valid [left, right] pair", field="merges")
        result = index.get(vocab[pair[0]] + vocab[pair[1]])
        if result is None:
            raise MalformedFile(f"merge {priority} produces a token missing from vocab", field="merges")
        merges.append(MergeRule(pair[0], pair[1], result, priority))

    specials = data["special_tokens"]
    if not all(isinstance(k, str) and isinstance(v, int) for k, v in specials.items()):
        raise MalformedFile("special_tokens must map names to ids", field="special_tokens")

    tok = Tokenizer(vocab=vocab, merges=merges, special_tokens=dict(specials))
    tok.validate()
    return tok


def save_tokenizer(tok: Tokenizer, path: Path) -> None:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(tokenizer_to_dict(tok), f)
    logger.info("Saved tokenizer (%d tokens) to %s", tok.vocab_size, path)


def load_tokenizer(path: Path) -> Tokenizer:
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        raw = f.read()
    try:
        data = json.loads(raw)
    except json.JSONDecodeError as e:
        raise MalformedFile(f"{path}: not valid JSON ({e})", field="root")
    return tokenizer_from_dict(data)
