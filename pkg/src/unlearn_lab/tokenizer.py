"""Byte-level tokenizer with a small learned merge table.

Built from the training corpus itself, so the lab has zero external
assets and every run is deterministic: merges are learned greedily by
pair frequency with ties broken by byte order, and encoding applies
merges in learned-rank order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field

PAD, BOS, EOS, UNK = 0, 1, 2, 3
_RESERVED = ["<pad>", "<bos>", "<eos>", "<unk>"]
_NUM_RESERVED = len(_RESERVED)


@dataclass
class Vocabulary:
    """Token <-> id bijection with dense ids and reserved specials.

    ``tokens[i]`` is the byte string for id ``i``; reserved ids 0..3
    (pad/bos/eos/unk) have no byte form. ``merges`` lists learned byte
    pair merges in rank order, each pair given as (left_id, right_id).
    """

    tokens: list[bytes]
    merges: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        self._ranks = {pair: i for i, pair in enumerate(self.merges)}
        self._merged_id = {
            pair: _NUM_RESERVED + 256 + i for i, pair in enumerate(self.merges)
        }
        self._byte_id = {bytes([b]): _NUM_RESERVED + b for b in range(256)}

    @property
    def size(self) -> int:
        return _NUM_RESERVED + len(self.tokens)

    def token_bytes(self, token_id: int) -> bytes:
        if token_id < _NUM_RESERVED:
            return b""
        return self.tokens[token_id - _NUM_RESERVED]

    @classmethod
    def train(cls, texts: list[str], vocab_size: int) -> "Vocabulary":
        """Learn merges from ``texts`` until the vocabulary reaches
        ``vocab_size`` or no adjacent pair occurs at least twice."""
        if vocab_size < _NUM_RESERVED + 256:
            raise ValueError(
                f"vocab_size must be at least {_NUM_RESERVED + 256}, got {vocab_size}"
            )
        tokens = [bytes([b]) for b in range(256)]
        seen = set(tokens)
        merges: list[tuple[int, int]] = []
        # work on each text as a list of current token ids
        seqs = [
            [_NUM_RESERVED + b for b in text.encode("utf-8")] for text in texts
        ]
        while _NUM_RESERVED + len(tokens) < vocab_size:
            counts: Counter = Counter()
            for seq in seqs:
                for pair in zip(seq, seq[1:]):
                    counts[pair] += 1
            best = None
            for pair, count in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
                if count < 2:
                    break
                # two merge paths can concatenate to the same bytes; skip
                # duplicates to keep the token <-> id map a bijection
                cand = tokens[pair[0] - _NUM_RESERVED] + tokens[pair[1] - _NUM_RESERVED]
                if cand not in seen:
                    best = pair
                    new_bytes = cand
                    break
            if best is None:
                break
            new_id = _NUM_RESERVED + len(tokens)
            tokens.append(new_bytes)
            seen.add(new_bytes)
            merges.append(best)
            for seq in seqs:
                _apply_merge(seq, best, new_id)
        return cls(tokens=tokens, merges=merges)

    def encode(self, text: str) -> list[int]:
        seq = [_NUM_RESERVED + b for b in text.encode("utf-8")]
        while len(seq) > 1:
            best_rank = None
            best_pos = -1
            for i in range(len(seq) - 1):
                rank = self._ranks.get((seq[i], seq[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
                    best_pos = i
            if best_rank is None:
                break
            pair = (seq[best_pos], seq[best_pos + 1])
            _apply_merge(seq, pair, self._merged_id[pair])
        return seq

    def decode(self, ids: list[int]) -> str:
        chunks = [self.token_bytes(i) for i in ids]
        return b"".join(chunks).decode("utf-8", errors="replace")

    def save(self, path) -> None:
        payload = {
            "tokens": [t.hex() for t in self.tokens],
            "merges": [[a, b] for a, b in self.merges],
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, sort_keys=True, separators=(",", ":"))

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            payload = json.load(f)
        return cls(
            tokens=[bytes.fromhex(t) for t in payload["tokens"]],
            merges=[(a, b) for a, b in payload["merges"]],
        )


def _apply_merge(seq: list[int], pair: tuple[int, int], new_id: int) -> None:
    """Replace every non-overlapping left-to-right occurrence of ``pair``."""
    i = 0
    write = 0
    n = len(seq)
    while i < n:
        if i + 1 < n and seq[i] == pair[0] and seq[i + 1] == pair[1]:
            seq[write] = new_id
            i += 2
        else:
            seq[write] = seq[i]
            i += 1
        write += 1
    del seq[write:]
