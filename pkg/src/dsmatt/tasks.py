"""Synthetic sequence-to-sequence tasks and token-count batching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import Rng

PAD, BOS, EOS = 0, 1, 2
FIRST_SYMBOL = 3
TASK_KINDS = ("copy", "reverse", "sort")


@dataclass(frozen=True)
class SyntheticTask:
    kind: str = "copy"
    vocab: int = 64
    min_len: int = 1
    max_len: int = 12

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task {self.kind!r}; expected one of {TASK_KINDS}")
        if self.vocab <= FIRST_SYMBOL:
            raise ValueError(f"vocab must exceed {FIRST_SYMBOL} reserved ids, got {self.vocab}")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError(f"bad length range [{self.min_len}, {self.max_len}]")

    def target_for(self, src: list[int]) -> list[int]:
        if self.kind == "copy":
            return list(src)
        if self.kind == "reverse":
            return list(reversed(src))
        return sorted(src)

    def sample(self, rng: Rng, n: int) -> list[tuple[list[int], list[int]]]:
        """Draw ``n`` (source, target) pairs; targets carry no EOS yet."""
        pairs = []
        for _ in range(n):
            length = int(rng.integers(self.min_len, self.max_len + 1))
            src = [int(t) for t in rng.integers(FIRST_SYMBOL, self.vocab, length)]
            pairs.append((src, self.target_for(src)))
        return pairs


@dataclass
class Batch:
    """Padded id arrays; ``tgt_in`` is the target shifted right behind BOS."""
    src: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray

    @property
    def src_valid(self) -> np.ndarray:
        return self.src != PAD

    @property
    def tgt_valid(self) -> np.ndarray:
        return self.tgt_out != PAD

    @property
    def ntokens(self) -> int:
        return int(self.tgt_valid.sum())

    def __len__(self) -> int:
        return self.src.shape[0]


def collate(pairs, pad_to: tuple[int, int] | None = None) -> Batch:
    n = max(len(s) for s, _ in pairs)
    m = max(len(t) for _, t in pairs) + 1
    if pad_to is not None:
        n, m = max(n, pad_to[0]), max(m, pad_to[1])
    src = np.full((len(pairs), n), PAD, dtype=np.int64)
    tgt_in = np.full((len(pairs), m), PAD, dtype=np.int64)
    tgt_out = np.full((len(pairs), m), PAD, dtype=np.int64)
    for i, (s, t) in enumerate(pairs):
        src[i, :len(s)] = s
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:len(t) + 1] = t
        tgt_out[i, :len(t)] = t
        tgt_out[i, len(t)] = EOS
    return Batch(src, tgt_in, tgt_out)


def target_tokens(pair) -> int:
    return len(pair[1]) + 1


def make_batches(pairs, batch_tokens: int, count=target_tokens) -> list[list]:
    """Greedy in-order packing: start a new batch when the next pair would overflow.

    ``count`` gives the target-token cost of one pair (by default its length
    plus the EOS).
    """
    batches, cur, used = [], [], 0
    for pair in pairs:
        c = count(pair)
        if c > batch_tokens:
            raise ValueError(f"sentence of {c} target tokens exceeds batch size {batch_tokens}")
        if used + c > batch_tokens:
            batches.append(cur)
            cur, used = [], 0
        cur.append(pair)
        used += c
    if cur:
        batches.append(cur)
    return batches


def batch_stream(task: SyntheticTask, batch_tokens: int, rng: Rng, chunk: int = 512):
    """Endless stream of collated batches drawn from ``task``.

    Each chunk is sorted by length before packing to keep padding low, and
    the resulting batches are visited in a seeded random order.
    """
    while True:
        pairs = sorted(task.sample(rng, chunk), key=lambda p: (len(p[1]), len(p[0])))
        packed = make_batches(pairs, batch_tokens)
        # the tail batch is under-full; it is dropped so every batch is near bs
        packed = packed[:-1]
        for i in rng.permutation(len(packed)):
            yield collate(packed[i])


def fixed_batch(task: SyntheticTask, rng: Rng, target_budget: int) -> Batch:
    """One batch holding roughly ``target_budget`` target tokens."""
    pairs, used = [], 0
    while used < target_budget:
        pair = task.sample(rng, 1)[0]
        pairs.append(pair)
        used += target_tokens(pair)
    return collate(pairs)
