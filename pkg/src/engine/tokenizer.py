from __future__ import annotations

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import regex

from engine.tensor_ops import ContractError
from util.paths import merges_path, vocab_path

_log = logging.getLogger(__name__)

# GPT-2 pre-tokenization: contractions, letter runs, digit runs, punctuation runs, whitespace
PRETOKENIZE_PATTERN = regex.compile(
    r"""'s|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+"""
)


class VocabError(Exception):
    pass


@lru_cache(maxsize=1)
def bytes_to_unicode() -> dict[int, str]:
    """Map every byte to a printable code point, keeping printable latin-1 bytes as themselves."""
    printable = (
        list(range(ord("!"), ord("~") + 1))
        + list(range(ord("¡"), ord("¬") + 1))
        + list(range(ord("®"), ord("ÿ") + 1))
    )
    codes = printable[:]
    shift = 0
    for b in range(256):
        if b not in printable:
            printable.append(b)
            codes.append(256 + shift)
            shift += 1
    return {b: chr(c) for b, c in zip(printable, codes)}


def _pairs(word: Sequence[str]) -> set[tuple[str, str]]:
    return set(zip(word, word[1:]))


class BpeTokenizer:
    def __init__(self, token_to_id: Mapping[str, int], merges: Iterable[tuple[str, str]]) -> None:
        self.token_to_id: dict[str, int] = dict(token_to_id)
        self.merge_rank: dict[tuple[str, str], int] = {}
        for rank, pair in enumerate(merges):
            self.merge_rank.setdefault(tuple(pair), rank)
        self.id_to_token: list[str] = self._invert(self.token_to_id)
        self.byte_encoder = bytes_to_unicode()
        self.byte_decoder = {c: b for b, c in self.byte_encoder.items()}
        missing = [c for c in self.byte_encoder.values() if c not in self.token_to_id]
        if missing:
            raise VocabError(f"vocabulary lacks {len(missing)} single-byte tokens (first: {missing[0]!r})")
        self._cache: dict[str, tuple[str, ...]] = {}

    @staticmethod
    def _invert(token_to_id: Mapping[str, int]) -> list[str]:
        size = len(token_to_id)
        id_to_token: list[str | None] = [None] * size
        for token, idx in token_to_id.items():
            if not isinstance(idx, int) or not 0 <= idx < size:
                raise VocabError(f"token {token!r} has id {idx!r} outside [0, {size})")
            if id_to_token[idx] is not None:
                raise VocabError(f"id {idx} assigned to both {id_to_token[idx]!r} and {token!r}")
            id_to_token[idx] = token
        return [tok for tok in id_to_token if tok is not None]

    @property
    def vocab_size(self) -> int:
        return len(self.id_to_token)

    def _bpe(self, piece: str) -> tuple[str, ...]:
        cached = self._cache.get(piece)
        if cached is not None:
            return cached
        word: tuple[str, ...] = tuple(piece)
        while len(word) > 1:
            pair = min(_pairs(word), key=lambda p: self.merge_rank.get(p, float("inf")))
            if pair not in self.merge_rank:
                break
            first, second = pair
            merged: list[str] = []
            i = 0
            while i < len(word):
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    merged.append(first + second)
                    i += 2
                else:
                    merged.append(word[i])
                    i += 1
            word = tuple(merged)
        self._cache[piece] = word
        return word

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for piece in PRETOKENIZE_PATTERN.findall(text):
            mapped = "".join(self.byte_encoder[b] for b in piece.encode("utf-8"))
            for symbol in self._bpe(mapped):
                idx = self.token_to_id.get(symbol)
                if idx is None:
                    raise VocabError(f"merge result {symbol!r} is not in the vocabulary")
                ids.append(idx)
        return ids

    def decode_bytes(self, ids: Iterable[int]) -> bytes:
        out = bytearray()
        for idx in ids:
            idx = int(idx)
            if not 0 <= idx < self.vocab_size:
                raise ContractError(f"token id {idx} outside vocabulary of {self.vocab_size}")
            out.extend(self.byte_decoder[c] for c in self.id_to_token[idx])
        return bytes(out)

    def decode(self, ids: Iterable[int]) -> str:
        return self.decode_bytes(ids).decode("utf-8", errors="replace")

    def token_text(self, idx: int) -> str:
        return self.decode([idx])

    def as_single_token(self, word: str, with_leading_space: bool = True) -> int | None:
        if not word:
            raise ContractError("as_single_token needs a non-empty word")
        ids = self.encode(" " + word if with_leading_space else word)
        return ids[0] if len(ids) == 1 else None


def load_tokenizer_files(vocab_file: str | Path, merges_file: str | Path) -> BpeTokenizer:
    try:
        token_to_id = json.loads(Path(vocab_file).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise VocabError(f"cannot read vocabulary {vocab_file}: {exc}") from exc
    if not isinstance(token_to_id, dict):
        raise VocabError(f"vocabulary {vocab_file} must be a JSON object")
    merges: list[tuple[str, str]] = []
    try:
        lines = Path(merges_file).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise VocabError(f"cannot read merges {merges_file}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#version"):
            continue
        parts = line.split(" ")
        if len(parts) != 2:
            raise VocabError(f"{merges_file}:{lineno}: expected two symbols, got {line!r}")
        merges.append((parts[0], parts[1]))
    tokenizer = BpeTokenizer(token_to_id, merges)
    _log.info("Loaded tokenizer with %d tokens and %d merges", tokenizer.vocab_size, len(merges))
    return tokenizer


def load_vocab(model_dir: str | Path) -> BpeTokenizer:
    return load_tokenizer_files(vocab_path(model_dir), merges_path(model_dir))


def write_vocab(tokenizer: BpeTokenizer, model_dir: str | Path) -> None:
    model_dir = Path(model_dir)
    model_dir.mkdir(parents=True, exist_ok=True)
    vocab_path(model_dir).write_text(json.dumps(tokenizer.token_to_id, ensure_ascii=False), encoding="utf-8")
    ranked = sorted(tokenizer.merge_rank.items(), key=lambda item: item[1])
    body = "\n".join(f"{a} {b}" for (a, b), _ in ranked)
    merges_path(model_dir).write_text("#version: 0.2\n" + body + ("\n" if body else ""), encoding="utf-8")
