"""Desk-scale Arabic dialectal MLM pipeline.

Corpus filtering, WordPiece tokenization, whole-word-masked encoder
pretraining on a hand-rolled autodiff core, CLS-head fine-tuning, and a
multi-seed evaluation harness with significance testing.
"""

__version__ = "0.1.0"

from .corpus import (
    CorpusStats,
    FilterModel,
    build_corpus,
    dedup,
    filter_dialect,
    ingest,
    train_filter,
)
from .evaluation import (
    EvalReport,
    LabeledDataset,
    accuracy,
    load_dataset,
    macro_f1,
    run_multiseed,
    t_test,
)
from .masking import MaskedExample, make_batch, make_example
from .model import (
    Checkpoint,
    ModelConfig,
    base_config,
    classify,
    count_params,
    forward,
    init_params,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import Tape, Tensor, backward
from .tokenizer import (
    TokenizedSequence,
    Vocab,
    decode,
    encode,
    normalize,
    train_vocab,
)
from .training import TrainConfig, TrainLog, finetune, optimizer_step, pretrain

__all__ = [
    "CorpusStats", "FilterModel", "build_corpus", "dedup", "filter_dialect",
    "ingest", "train_filter",
    "EvalReport", "LabeledDataset", "accuracy", "load_dataset", "macro_f1",
    "run_multiseed", "t_test",
    "MaskedExample", "make_batch", "make_example",
    "Checkpoint", "ModelConfig", "base_config", "classify", "count_params",
    "forward", "init_params", "load_checkpoint", "save_checkpoint",
    "Tape", "Tensor", "backward",
    "TokenizedSequence", "Vocab", "decode", "encode", "normalize",
    "train_vocab",
    "TrainConfig", "TrainLog", "finetune", "optimizer_step", "pretrain",
]
