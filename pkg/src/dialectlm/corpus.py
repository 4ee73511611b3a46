"""Build a dialectal corpus from raw text dumps.

Stages: ingest (normalize, repair, drop blanks), exact-match dedup, then
routing through a binary MSA/dialect classifier. Counts obey the
conservation identity dialect + msa_filtered + duplicates = ingested.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .model import Checkpoint, CheckpointError, ModelConfig, classify_probs
from .tokenizer import Vocab, encode, normalize
from .training import TrainConfig, _plain_example, finetune

MSA_LABEL, DIALECT_LABEL = 0, 1


@dataclass
class CorpusStats:
    sentence_count: int = 0
    token_count: int = 0
    duplicate_count: int = 0
    msa_filtered_count: int = 0
    byte_size: int = 0

    def format(self) -> str:
        return (f"sentences={self.sentence_count} tokens={self.token_count} "
                f"duplicates={self.duplicate_count} "
                f"msa_filtered={self.msa_filtered_count} "
                f"bytes={self.byte_size}")


@dataclass
class IngestCounts:
    lines: int = 0
    blank: int = 0
    repaired: int = 0

    @property
    def sentences(self) -> int:
        return self.lines - self.blank


def ingest(paths: Sequence, counts: Optional[IngestCounts] = None
           ) -> Iterator[str]:
    """Stream normalized non-empty lines; repair and count bad bytes."""
    if counts is None:
        counts = IngestCounts()
    for path in paths:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"corpus file not found: {path}")
        with open(path, "rb") as f:
            for raw in f:
                counts.lines += 1
                try:
                    line = raw.decode("utf-8")
                except UnicodeDecodeError:
                    line = raw.decode("utf-8", errors="replace")
                    counts.repaired += 1
                sentence = normalize(line)
                if not sentence:
                    counts.blank += 1
                    continue
                yield sentence


def dedup(stream: Iterable[str]) -> tuple[list[str], int]:
    """Exact-match dedup keeping first occurrences in order."""
    seen: set[str] = set()
    unique: list[str] = []
    duplicates = 0
    for sentence in stream:
        if sentence in seen:
            duplicates += 1
        else:
            seen.add(sentence)
            unique.append(sentence)
    return unique, duplicates


@dataclass
class FilterModel:
    """Binary MSA(0)/Dialect(1) classifier plus a routing threshold."""

    checkpoint: Checkpoint
    threshold: float = 0.5
    held_out_accuracy: float = float("nan")

    def __post_init__(self):
        if self.checkpoint.config.num_labels != 2:
            raise CheckpointError(
                f"filter checkpoint must have 2 labels, found "
                f"{self.checkpoint.config.num_labels}")
        if not 0.0 <= self.threshold <= 1.0:
            raise ValueError(f"threshold {self.threshold} out of [0, 1]")


def train_filter(msa_corpus: Sequence[str], dialect_corpus: Sequence[str],
                 vocab: Vocab, config: TrainConfig, *,
                 start: Optional[Checkpoint] = None,
                 model_config: Optional[ModelConfig] = None,
                 threshold: float = 0.5) -> FilterModel:
    """Fine-tune a binary MSA/dialect filter on a balanced dataset."""
    msa = [normalize(s) for s in msa_corpus if normalize(s)]
    dialect = [normalize(s) for s in dialect_corpus if normalize(s)]
    if not msa or not dialect:
        raise ValueError("both corpora must be nonempty")
    overlap = len(set(msa) & set(dialect)) / max(len(set(msa)),
                                                 len(set(dialect)))
    if overlap > 0.5:
        warnings.warn("MSA and dialect corpora overlap heavily; classes are "
                      "near-indistinguishable and the filter will be "
                      "degenerate", stacklevel=2)
    n = min(len(msa), len(dialect))
    labeled = ([(s, MSA_LABEL) for s in msa[:n]]
               + [(s, DIALECT_LABEL) for s in dialect[:n]])
    examples = [(encode(text, vocab, config.max_len), label)
                for text, label in labeled]

    if start is None:
        if model_config is None:
            raise ValueError("either start checkpoint or model_config "
                             "is required")
        from .model import init_params
        start = Checkpoint.from_tensors(model_config,
                                        init_params(model_config,
                                                    seed=config.seed))
    best, _, accuracy = finetune(start, examples, config, num_labels=2)
    return FilterModel(checkpoint=best, threshold=threshold,
                       held_out_accuracy=accuracy)


def filter_dialect(stream: Iterable[str], model: FilterModel, vocab: Vocab,
                   max_len: int = 128, batch_size: int = 256,
                   duplicate_count: int = 0
                   ) -> tuple[list[str], list[str], CorpusStats]:
    """Route sentences by thresholded dialect probability."""
    config = model.checkpoint.config
    if config.vocab_size != len(vocab):
        raise CheckpointError(
            f"filter checkpoint vocab_size {config.vocab_size} does not "
            f"match vocabulary of size {len(vocab)}")
    params = model.checkpoint.to_tensors()
    sentences = list(stream)
    dialect: list[str] = []
    msa: list[str] = []
    for i in range(0, len(sentences), batch_size):
        chunk = sentences[i:i + batch_size]
        examples = [_plain_example(encode(s, vocab, max_len), max_len)
                    for s in chunk]
        ids = np.stack([e.input_ids for e in examples])
        mask = np.stack([e.attention_mask for e in examples])
        probs = classify_probs(ids, mask, params, config)
        for sentence, p in zip(chunk, probs[:, DIALECT_LABEL]):
            if p >= model.threshold:
                dialect.append(sentence)
            else:
                msa.append(sentence)
    stats = CorpusStats(
        sentence_count=len(dialect),
        token_count=sum(len(s.split()) for s in dialect),
        duplicate_count=duplicate_count,
        msa_filtered_count=len(msa),
        byte_size=sum(len(s.encode("utf-8")) + 1 for s in dialect),
    )
    return dialect, msa, stats


def build_corpus(paths: Sequence, model: FilterModel, vocab: Vocab,
                 max_len: int = 128, batch_size: int = 256
                 ) -> tuple[list[str], list[str], CorpusStats, IngestCounts]:
    """Full pipeline: ingest -> dedup -> filter, with conserved counts."""
    counts = IngestCounts()
    unique, duplicates = dedup(ingest(paths, counts))
    dialect, msa, stats = filter_dialect(unique, model, vocab,
                                         max_len=max_len,
                                         batch_size=batch_size,
                                         duplicate_count=duplicates)
    return dialect, msa, stats, counts


def corpus_stats(paths: Sequence) -> CorpusStats:
    """Dedup-aware statistics of a dump without any filtering."""
    counts = IngestCounts()
    unique, duplicates = dedup(ingest(paths, counts))
    return CorpusStats(
        sentence_count=len(unique),
        token_count=sum(len(s.split()) for s in unique),
        duplicate_count=duplicates,
        msa_filtered_count=0,
        byte_size=sum(len(s.encode("utf-8")) + 1 for s in unique),
    )
