"""Pretraining (MLM only) and fine-tuning loops.

Defaults follow the target recipe: batch 64, max length 128, 5 epochs,
learning rate 5e-5. The optimizer is decoupled-weight-decay adaptive
moments with linear warmup then linear decay and global-norm gradient
clipping. Everything is deterministic given a seed.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .masking import MaskedExample, make_batch, make_example
from .model import (
    Checkpoint,
    ConfigError,
    ModelConfig,
    classify,
    classify_probs,
    forward,
    init_classifier_head,
    init_params,
    save_checkpoint,
)
from .tensor import Tape, Tensor, backward, cross_entropy
from .tokenizer import TokenizedSequence, Vocab


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64
    max_len: int = 128
    epochs: int = 5
    learning_rate: float = 5e-5
    weight_decay: float = 0.01
    warmup_fraction: float = 0.1
    seed: int = 1
    grad_clip_norm: float = 1.0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got "
                              f"{self.learning_rate}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be at least 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be at least 1, got "
                              f"{self.batch_size}")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError(f"warmup_fraction {self.warmup_fraction} "
                              "out of range")
        if self.seed < 0:
            raise ConfigError(f"seed must be non-negative, got {self.seed}")


@dataclass
class TrainLog:
    steps: list[tuple[int, float]] = field(default_factory=list)
    epoch_means: list[float] = field(default_factory=list)
    wall_time: float = 0.0

    @property
    def step_count(self) -> int:
        return len(self.steps)

    def add(self, step: int, loss: float) -> None:
        if not math.isfinite(loss):
            raise TrainingError(f"non-finite loss {loss} at step {step}")
        if self.steps and step <= self.steps[-1][0]:
            raise TrainingError("step counter must strictly increase")
        self.steps.append((step, loss))

    def write(self, path) -> None:
        with open(path, "w", encoding="ascii") as f:
            for step, loss in self.steps:
                f.write(f"step={step} loss={loss:.6f}\n")
            for epoch, mean in enumerate(self.epoch_means, start=1):
                f.write(f"epoch={epoch} mean_loss={mean:.6f}\n")


# ---------------------------------------------------------------------------
# optimizer: decoupled weight decay + adaptive moments, warmup/decay schedule

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8


def init_optimizer_state(params: dict[str, Tensor],
                         total_steps: int,
                         warmup_fraction: float) -> dict:
    state: dict = {"step": 0, "total_steps": total_steps,
                   "warmup_steps": int(round(warmup_fraction * total_steps))}
    for name, p in params.items():
        state[f"m.{name}"] = np.zeros_like(p.data)
        state[f"v.{name}"] = np.zeros_like(p.data)
    return state


def schedule(step: int, total_steps: int, warmup_steps: int) -> float:
    """Multiplier for the base learning rate at a 1-indexed step."""
    if warmup_steps > 0 and step <= warmup_steps:
        return step / warmup_steps
    if total_steps <= warmup_steps:
        return 1.0
    return max(0.0, (total_steps - step) / (total_steps - warmup_steps))


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm."""
    total = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum())
                          for g in grads.values()))
    if max_norm > 0 and total > max_norm:
        factor = max_norm / total
        for g in grads.values():
            g *= factor
    return total


def optimizer_step(params: dict[str, Tensor], grads: dict[str, np.ndarray],
                   state: dict, config: TrainConfig) -> None:
    """One update, in place; parameters without gradients are untouched."""
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise T.ShapeError(f"gradient shape {g.shape} does not match "
                               f"parameter {name} {params[name].shape}")
    clip_gradients(grads, config.grad_clip_norm)
    state["step"] += 1
    t = state["step"]
    lr = config.learning_rate * schedule(t, state["total_steps"],
                                         state["warmup_steps"])
    bias1 = 1.0 - BETA1 ** t
    bias2 = 1.0 - BETA2 ** t
    for name, g in grads.items():
        p = params[name]
        m = state[f"m.{name}"]
        v = state[f"v.{name}"]
        m *= BETA1
        m += (1.0 - BETA1) * g
        v *= BETA2
        v += (1.0 - BETA2) * g * g
        update = (m / bias1) / (np.sqrt(v / bias2) + ADAM_EPS)
        if config.weight_decay:
            update = update + config.weight_decay * p.data
        p.data -= (lr * update).astype(p.data.dtype, copy=False)


def _collect_grads(params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    return {name: p.grad for name, p in params.items() if p.grad is not None}


def _zero_grads(params: dict[str, Tensor]) -> None:
    for p in params.values():
        p.zero_grad()


def _derive_rng(*entropy: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(list(entropy)))


# ---------------------------------------------------------------------------
# pretraining


def pretrain(corpus: Sequence[TokenizedSequence], config: TrainConfig,
             model_config: ModelConfig, vocab: Vocab, *,
             out_dir=None) -> tuple[Checkpoint, TrainLog]:
    """MLM-only pretraining with per-epoch seeded reshuffles.

    Masks are generated once per sequence from seed = config.seed XOR index,
    so identical seeds give bit-identical runs. A checkpoint is written at
    the end of every epoch when out_dir is given.
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("empty corpus")
    if len(vocab) != model_config.vocab_size:
        raise ConfigError(f"vocab size {len(vocab)} does not match model "
                          f"vocab_size {model_config.vocab_size}")
    if config.max_len > model_config.max_position:
        raise ConfigError(f"max_len {config.max_len} exceeds model "
                          f"max_position {model_config.max_position}")

    examples = [make_example(seq, rng=config.seed ^ idx, vocab=vocab,
                             max_len=config.max_len)
                for idx, seq in enumerate(corpus)]

    params = init_params(model_config, seed=config.seed)
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    state = init_optimizer_state(params, config.epochs * steps_per_epoch,
                                 config.warmup_fraction)
    log = TrainLog()
    started = time.monotonic()
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = _derive_rng(config.seed, 0xA, epoch).permutation(len(examples))
        epoch_losses = []
        for batch in make_batch([examples[i] for i in order],
                                config.batch_size):
            step += 1
            drop_rng = _derive_rng(config.seed, 0xD, step)
            with Tape():
                _, logits = forward(batch.input_ids, batch.attention_mask,
                                    params, model_config, train=True,
                                    rng=drop_rng)
                loss = cross_entropy(logits, batch.labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite MLM loss at epoch {epoch} step {step}")
            backward(loss)
            optimizer_step(params, _collect_grads(params), state, config)
            _zero_grads(params)
            log.add(step, loss_val)
            epoch_losses.append(loss_val)
        log.epoch_means.append(float(np.mean(epoch_losses)))
        if out_dir is not None:
            ckpt = Checkpoint.from_tensors(model_config, params, step=step)
            Path(out_dir).mkdir(parents=True, exist_ok=True)
            save_checkpoint(ckpt, Path(out_dir) / f"ckpt-epoch{epoch}")
    log.wall_time = time.monotonic() - started
    final = Checkpoint.from_tensors(
        model_config, params, step=step,
        optimizer_state={k: v for k, v in state.items()})
    return final, log


# ---------------------------------------------------------------------------
# fine-tuning


def _stack_classification_batches(examples: Sequence[tuple[MaskedExample, int]],
                                  batch_size: int):
    for i in range(0, len(examples), batch_size):
        chunk = examples[i:i + batch_size]
        yield (np.stack([e.input_ids for e, _ in chunk]),
               np.stack([e.attention_mask for e, _ in chunk]),
               np.array([label for _, label in chunk], dtype=np.int64))


def _plain_example(seq: TokenizedSequence, max_len: int) -> MaskedExample:
    ex_ids = np.zeros(max_len, dtype=np.int64)
    ex_ids[:len(seq.ids)] = seq.ids
    mask = np.zeros(max_len, dtype=np.int64)
    mask[:len(seq.ids)] = 1
    return MaskedExample(input_ids=ex_ids, attention_mask=mask,
                         labels=np.full(max_len, -100, dtype=np.int64))


def predict_labels(params: dict[str, Tensor], config: ModelConfig,
                   dataset: Sequence[TokenizedSequence], max_len: int,
                   batch_size: int = 64) -> np.ndarray:
    """Argmax class predictions for a sequence of tokenized inputs."""
    examples = [(_plain_example(seq, max_len), 0) for seq in dataset]
    preds = []
    for ids, mask, _ in _stack_classification_batches(examples, batch_size):
        probs = classify_probs(ids, mask, params, config)
        preds.append(probs.argmax(axis=-1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def finetune(start: Checkpoint,
             dataset: Sequence[tuple[TokenizedSequence, int]],
             config: TrainConfig, num_labels: int, *,
             dev: Optional[Sequence[tuple[TokenizedSequence, int]]] = None
             ) -> tuple[Checkpoint, TrainLog, float]:
    """Joint training of a fresh classifier head and all encoder weights.

    Holds out 10% of the training data for best-epoch selection when no dev
    split is supplied. Returns (best checkpoint, log, best dev accuracy).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("empty dataset")
    if num_labels < 2:
        raise ConfigError(f"num_labels must be at least 2, got {num_labels}")
    for _, label in dataset:
        if not 0 <= label < num_labels:
            raise ValueError(f"label {label} out of range [0, {num_labels})")

    model_config = replace(start.config, num_labels=num_labels)
    if config.max_len > model_config.max_position:
        raise ConfigError(f"max_len {config.max_len} exceeds model "
                          f"max_position {model_config.max_position}")
    params = start.to_tensors()
    init_classifier_head(params, model_config, seed=config.seed)

    if dev is None:
        order = _derive_rng(config.seed, 0xE).permutation(len(dataset))
        held = max(1, len(dataset) // 10)
        dev = [dataset[i] for i in order[:held]]
        train_set = [dataset[i] for i in order[held:]]
        if not train_set:
            raise ValueError("dataset too small to hold out a dev split")
    else:
        dev = list(dev)
        train_set = dataset

    train_examples = [(_plain_example(seq, config.max_len), label)
                      for seq, label in train_set]
    dev_seqs = [seq for seq, _ in dev]
    dev_labels = np.array([label for _, label in dev], dtype=np.int64)

    steps_per_epoch = math.ceil(len(train_examples) / config.batch_size)
    state = init_optimizer_state(params, config.epochs * steps_per_epoch,
                                 config.warmup_fraction)
    log = TrainLog()
    started = time.monotonic()
    best_acc = -1.0
    best_params: dict[str, np.ndarray] = {}
    best_step = 0
    step = 0
    for epoch in range(1, config.epochs + 1):
        order = _derive_rng(config.seed, 0xA, epoch).permutation(
            len(train_examples))
        epoch_losses = []
        for ids, mask, labels in _stack_classification_batches(
                [train_examples[i] for i in order], config.batch_size):
            step += 1
            drop_rng = _derive_rng(config.seed, 0xD, step)
            with Tape():
                hidden, _ = forward(ids, mask, params, model_config,
                                    train=True, rng=drop_rng)
                loss = cross_entropy(classify(hidden, params, model_config),
                                     labels)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise TrainingError(
                    f"non-finite classification loss at epoch {epoch} "
                    f"step {step}")
            backward(loss)
            optimizer_step(params, _collect_grads(params), state, config)
            _zero_grads(params)
            log.add(step, loss_val)
            epoch_losses.append(loss_val)
        log.epoch_means.append(float(np.mean(epoch_losses)))
        preds = predict_labels(params, model_config, dev_seqs,
                               config.max_len, config.batch_size)
        acc = float((preds == dev_labels).mean())
        if acc > best_acc:
            best_acc = acc
            best_params = {k: np.array(t.data) for k, t in params.items()}
            best_step = step
    log.wall_time = time.monotonic() - started
    best = Checkpoint(config=model_config, params=best_params,
                      step=best_step)
    return best, log, best_acc
