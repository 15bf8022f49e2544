"""Text tokenizers: byte-pair encoding for the published model, plus a
deterministic hash tokenizer for the synthetic backend."""

from __future__ import annotations

import gzip
import hashlib
import html
from functools import lru_cache
from pathlib import Path

import regex as re

__all__ = ["BPETokenizer", "HashTokenizer"]

SOT_TOKEN = "<|startoftext|>"
EOT_TOKEN = "<|endoftext|>"

_TOKEN_PATTERN = re.compile(
    r"""<\|startoftext\|>|<\|endoftext\|>|'s|'t|'re|'ve|'m|'ll|'d|[\p{L}]+|[\p{N}]|[^\s\p{L}\p{N}]+""",
    re.IGNORECASE,
)


@lru_cache()
def bytes_to_unicode() -> dict[int, str]:
    """Reversible byte -> printable-unicode mapping used by the BPE vocab."""
    bs = list(range(ord("!"), ord("~") + 1)) + list(range(ord("\xa1"), ord("\xac") + 1)) + list(
        range(ord("\xae"), ord("\xff") + 1)
    )
    cs = bs[:]
    n = 0
    for b in range(256):
        if b not in bs:
            bs.append(b)
            cs.append(256 + n)
            n += 1
    return dict(zip(bs, [chr(c) for c in cs]))


def _get_pairs(word: tuple[str, ...]) -> set[tuple[str, str]]:
    return set(zip(word[:-1], word[1:]))


def _clean(text: str) -> str:
    text = html.unescape(html.unescape(text))
    return " ".join(text.strip().split()).lower()


class BPETokenizer:
    """Byte-pair tokenizer compatible with the published model's vocabulary.

    ``vocab_path`` points at the gzip'd merges file shipped with the
    reference weights (one merge rule per line, header line first).
    """

    def __init__(self, vocab_path: str | Path, vocab_size: int = 49408):
        self.byte_encoder = bytes_to_unicode()
        merges_text = gzip.open(str(vocab_path), "rt", encoding="utf-8").read()
        merge_lines = merges_text.split("\n")[1:]
        n_merges = vocab_size - 2 * len(self.byte_encoder) - 2
        merges = [tuple(line.split()) for line in merge_lines[:n_merges]]
        vocab = list(self.byte_encoder.values())
        vocab += [v + "</w>" for v in vocab]
        vocab += ["".join(m) for m in merges]
        vocab += [SOT_TOKEN, EOT_TOKEN]
        self.encoder = {tok: i for i, tok in enumerate(vocab)}
        self.bpe_ranks = {m: i for i, m in enumerate(merges)}
        self.cache: dict[str, str] = {SOT_TOKEN: SOT_TOKEN, EOT_TOKEN: EOT_TOKEN}
        self.vocab_size = len(vocab)
        self.sot_id = self.encoder[SOT_TOKEN]
        self.eot_id = self.encoder[EOT_TOKEN]

    def _bpe(self, token: str) -> str:
        if token in self.cache:
            return self.cache[token]
        word = tuple(token[:-1]) + (token[-1] + "</w>",)
        pairs = _get_pairs(word)
        if not pairs:
            return token + "</w>"
        while True:
            bigram = min(pairs, key=lambda p: self.bpe_ranks.get(p, float("inf")))
            if bigram not in self.bpe_ranks:
                break
            first, second = bigram
            new_word: list[str] = []
            i = 0
            while i < len(word):
                try:
                    j = word.index(first, i)
                except ValueError:
                    new_word.extend(word[i:])
                    break
                new_word.extend(word[i:j])
                i = j
                if i < len(word) - 1 and word[i] == first and word[i + 1] == second:
                    new_word.append(first + second)
                    i += 2
                else:
                    new_word.append(word[i])
                    i += 1
            word = tuple(new_word)
            if len(word) == 1:
                break
            pairs = _get_pairs(word)
        out = " ".join(word)
        self.cache[token] = out
        return out

    def encode(self, text: str) -> list[int]:
        """Text -> ids, wrapped in start/end tokens."""
        ids = [self.sot_id]
        for token in _TOKEN_PATTERN.findall(_clean(text)):
            token = "".join(self.byte_encoder[b] for b in token.encode("utf-8"))
            ids.extend(self.encoder[t] for t in self._bpe(token).split(" "))
        ids.append(self.eot_id)
        return ids


class HashTokenizer:
    """Deterministic keyword hasher; stands in for BPE in the synthetic backend.

    Word ids are stable across runs and platforms (md5-based). The end token
    carries the largest id so sequence ends can be located by argmax, same as
    with the BPE vocabulary.
    """

    def __init__(self, vocab_size: int = 997):
        if vocab_size < 8:
            raise ValueError("vocab too small")
        self.vocab_size = vocab_size
        self.sot_id = vocab_size - 2
        self.eot_id = vocab_size - 1

    def _word_id(self, word: str) -> int:
        digest = hashlib.md5(word.encode("utf-8")).hexdigest()
        return 1 + int(digest[:8], 16) % (self.sot_id - 1)

    def encode(self, text: str) -> list[int]:
        words = _clean(text).split()
        return [self.sot_id] + [self._word_id(w) for w in words] + [self.eot_id]
