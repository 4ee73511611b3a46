"""Whole-word masking: turn tokenized sentences into MLM training examples.

Words are visited in a seeded random order and selected whole until the
masked-token budget is met; each selected token is then independently
replaced with [MASK] (80%), a random non-special id (10%), or kept (10%).
Examples are single segments; there is no sentence-pair input anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .tokenizer import MASK_ID, PAD_ID, TokenizedSequence, Vocab

IGNORE_INDEX = -100


@dataclass
class MaskedExample:
    """Fixed-length model input with MLM labels (-100 = not predicted)."""

    input_ids: np.ndarray
    attention_mask: np.ndarray
    labels: np.ndarray


@dataclass
class Batch:
    input_ids: np.ndarray       # [batch, max_len] int64
    attention_mask: np.ndarray  # [batch, max_len] int64
    labels: np.ndarray          # [batch, max_len] int64

    def __len__(self) -> int:
        return self.input_ids.shape[0]


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


def make_example(seq: TokenizedSequence, rng, vocab: Vocab,
                 max_len: int = 128, mask_rate: float = 0.15,
                 ignore_index: int = IGNORE_INDEX) -> MaskedExample:
    """Mask whole words of seq until ceil(mask_rate * N) tokens are covered."""
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError(f"mask_rate must be in [0, 1], got {mask_rate}")
    if len(seq.ids) > max_len:
        raise ValueError(f"sequence length {len(seq.ids)} exceeds "
                         f"max_len {max_len}")
    rng = _as_rng(rng)

    input_ids = np.full(max_len, PAD_ID, dtype=np.int64)
    input_ids[:len(seq.ids)] = seq.ids
    attention_mask = np.zeros(max_len, dtype=np.int64)
    attention_mask[:len(seq.ids)] = 1
    labels = np.full(max_len, ignore_index, dtype=np.int64)

    spans = seq.word_spans
    maskable = sum(end - start for start, end in spans)
    target = math.ceil(mask_rate * maskable)
    if target > 0 and spans:
        selected: list[tuple[int, int]] = []
        covered = 0
        for idx in rng.permutation(len(spans)):
            start, end = spans[idx]
            selected.append((start, end))
            covered += end - start
            if covered >= target:
                break
        num_specials = vocab.num_specials
        for start, end in selected:
            for pos in range(start, end):
                labels[pos] = input_ids[pos]
                roll = rng.random()
                if roll < 0.8:
                    input_ids[pos] = MASK_ID
                elif roll < 0.9:
                    input_ids[pos] = rng.integers(num_specials, len(vocab))
                # else: keep the original token

    return MaskedExample(input_ids=input_ids, attention_mask=attention_mask,
                         labels=labels)


def make_batch(examples: Sequence[MaskedExample],
               batch_size: int) -> Iterator[Batch]:
    """Stack examples into [batch, max_len] arrays; last batch may be short."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    if not examples:
        return
    length = examples[0].input_ids.shape[0]
    for ex in examples:
        if ex.input_ids.shape[0] != length:
            raise ValueError(f"mixed example lengths: {length} vs "
                             f"{ex.input_ids.shape[0]}")
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        yield Batch(
            input_ids=np.stack([e.input_ids for e in chunk]),
            attention_mask=np.stack([e.attention_mask for e in chunk]),
            labels=np.stack([e.labels for e in chunk]),
        )


def dump_examples(examples: Iterable[MaskedExample], path) -> None:
    """Debug dump, one example per line: ids|mask|labels (space-separated)."""
    with open(path, "w", encoding="ascii") as f:
        for ex in examples:
            f.write("|".join(" ".join(str(int(v)) for v in arr)
                             for arr in (ex.input_ids, ex.attention_mask,
                                         ex.labels)))
            f.write("\n")


def load_examples(path) -> list[MaskedExample]:
    examples = []
    with open(path, encoding="ascii") as f:
        for line in f:
            ids, mask, labels = (np.array([int(v) for v in part.split()],
                                          dtype=np.int64)
                                 for part in line.rstrip("\n").split("|"))
            examples.append(MaskedExample(ids, mask, labels))
    return examples
