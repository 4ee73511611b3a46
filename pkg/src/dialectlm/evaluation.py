"""Multi-seed fine-tuning evaluation with significance testing.

Reports mean and sample standard deviation of macro-F1 (unweighted; a class
absent from both predictions and golds contributes 0) and accuracy over the
configured seeds, plus a two-sided Welch t-test against an optional baseline.
A paired t-test is available behind a flag.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.special import stdtr

from .model import Checkpoint
from .tokenizer import Vocab, encode
from .training import TrainConfig, finetune, predict_labels


@dataclass
class LabeledDataset:
    name: str
    train: list[tuple[str, int]]
    test: list[tuple[str, int]]
    dev: Optional[list[tuple[str, int]]] = None
    label_names: list[str] = field(default_factory=list)

    @property
    def num_labels(self) -> int:
        return len(self.label_names)

    def __post_init__(self):
        if not self.test:
            raise ValueError("test split must be nonempty")


def _read_tsv(path) -> list[tuple[str, str]]:
    with open(path, encoding="utf-8", newline="") as f:
        reader = csv.reader(f, delimiter="\t")
        header = next(reader, None)
        if header != ["text", "label"]:
            raise ValueError(f"{path}: expected header 'text<TAB>label', "
                             f"got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2:
                raise ValueError(f"{path}:{lineno}: expected 2 columns, "
                                 f"got {len(row)}")
            rows.append((row[0], row[1]))
    return rows


def load_dataset(path, name: Optional[str] = None) -> LabeledDataset:
    """Load a TSV dataset.

    A directory must contain train.tsv and test.tsv (dev.tsv optional). A
    single .tsv file is split 80/20 into train/test by example index. Label
    names map to ids in first-appearance order of the train split.
    """
    path = Path(path)
    if path.is_dir():
        raw_train = _read_tsv(path / "train.tsv")
        raw_test = _read_tsv(path / "test.tsv")
        dev_path = path / "dev.tsv"
        raw_dev = _read_tsv(dev_path) if dev_path.exists() else None
    else:
        rows = _read_tsv(path)
        if len(rows) < 5:
            raise ValueError(f"{path}: too few examples to split")
        cut = (len(rows) * 4) // 5
        raw_train, raw_test, raw_dev = rows[:cut], rows[cut:], None

    label_names: list[str] = []
    label_ids: dict[str, int] = {}
    for _, label in raw_train:
        if label not in label_ids:
            label_ids[label] = len(label_names)
            label_names.append(label)

    def to_ids(rows, split):
        out = []
        for text, label in rows:
            if label not in label_ids:
                raise ValueError(f"label {label!r} in {split} split never "
                                 "appears in train")
            out.append((text, label_ids[label]))
        return out

    return LabeledDataset(
        name=name or path.stem,
        train=to_ids(raw_train, "train"),
        test=to_ids(raw_test, "test"),
        dev=to_ids(raw_dev, "dev") if raw_dev else None,
        label_names=label_names,
    )


# ---------------------------------------------------------------------------
# metrics


def accuracy(preds: Sequence[int], golds: Sequence[int]) -> float:
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {golds.shape}")
    return float((preds == golds).mean())


def macro_f1(preds: Sequence[int], golds: Sequence[int],
             num_labels: int) -> float:
    """Unweighted mean per-class F1; absent classes contribute 0."""
    preds = np.asarray(preds)
    golds = np.asarray(golds)
    if preds.shape != golds.shape:
        raise ValueError(f"length mismatch: {preds.shape} vs {golds.shape}")
    for arr, which in ((preds, "preds"), (golds, "golds")):
        if arr.size and (arr.min() < 0 or arr.max() >= num_labels):
            raise ValueError(f"{which} contain ids outside "
                             f"[0, {num_labels})")
    scores = []
    for c in range(num_labels):
        tp = int(((preds == c) & (golds == c)).sum())
        fp = int(((preds == c) & (golds != c)).sum())
        fn = int(((preds != c) & (golds == c)).sum())
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def t_test(a: Sequence[float], b: Sequence[float],
           paired: bool = False) -> float:
    """Two-sided Welch t-test p-value (or paired t-test when asked)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise ValueError("each sample needs at least 2 observations")
    if paired:
        if a.size != b.size:
            raise ValueError("paired test needs equal sample sizes")
        d = a - b
        var = d.var(ddof=1)
        if var == 0.0:
            return 1.0 if d.mean() == 0.0 else 0.0
        t = d.mean() / math.sqrt(var / d.size)
        df = d.size - 1
    else:
        va, vb = a.var(ddof=1), b.var(ddof=1)
        if va == 0.0 and vb == 0.0:
            return 1.0 if a.mean() == b.mean() else 0.0
        sa, sb = va / a.size, vb / b.size
        t = (a.mean() - b.mean()) / math.sqrt(sa + sb)
        df = (sa + sb) ** 2 / (sa ** 2 / (a.size - 1)
                               + sb ** 2 / (b.size - 1))
    return float(2.0 * stdtr(df, -abs(t)))


def _sample_std(values: np.ndarray) -> float:
    return float(values.std(ddof=1)) if values.size > 1 else 0.0


# ---------------------------------------------------------------------------
# multi-seed protocol


@dataclass
class SeedResult:
    seed: int
    macro_f1: float
    accuracy: float


@dataclass
class Comparison:
    baseline_name: str
    baseline_f1: list[float]
    baseline_accuracy: list[float]
    p_value_f1: float
    p_value_accuracy: float

    @property
    def significant_f1(self) -> bool:
        return self.p_value_f1 < 0.05

    @property
    def significant_accuracy(self) -> bool:
        return self.p_value_accuracy < 0.05


@dataclass
class EvalReport:
    dataset: str
    num_labels: int
    results: list[SeedResult]
    f1_mean: float
    f1_std: float
    accuracy_mean: float
    accuracy_std: float
    comparison: Optional[Comparison] = None

    def to_lines(self) -> list[str]:
        lines = [f"dataset={self.dataset}",
                 f"num_labels={self.num_labels}",
                 "metric_averaging=macro",
                 f"num_seeds={len(self.results)}",
                 "seeds=" + ",".join(str(r.seed) for r in self.results)]
        for r in self.results:
            lines.append(f"seed={r.seed} macro_f1={r.macro_f1:.6f} "
                         f"accuracy={r.accuracy:.6f}")
        lines.append(f"macro_f1_mean={self.f1_mean:.6f}")
        lines.append(f"macro_f1_std={self.f1_std:.6f}")
        lines.append(f"accuracy_mean={self.accuracy_mean:.6f}")
        lines.append(f"accuracy_std={self.accuracy_std:.6f}")
        if self.comparison is not None:
            c = self.comparison
            lines.append(f"baseline={c.baseline_name}")
            lines.append(f"p_value_macro_f1={c.p_value_f1:.6g}")
            lines.append(f"p_value_accuracy={c.p_value_accuracy:.6g}")
            lines.append("significant_macro_f1="
                         + ("yes" if c.significant_f1 else "no"))
            lines.append("significant_accuracy="
                         + ("yes" if c.significant_accuracy else "no"))
        return lines

    def write(self, path) -> None:
        Path(path).write_text("\n".join(self.to_lines()) + "\n",
                              encoding="utf-8")


def parse_report_scores(path) -> tuple[list[float], list[float]]:
    """Per-seed (macro_f1 list, accuracy list) from a written report."""
    f1s, accs = [], []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("seed=") and " macro_f1=" in line:
            fields = dict(part.split("=", 1) for part in line.split())
            f1s.append(float(fields["macro_f1"]))
            accs.append(float(fields["accuracy"]))
    if not f1s:
        raise ValueError(f"{path}: no per-seed scores found")
    return f1s, accs


def run_multiseed(dataset: LabeledDataset, start: Checkpoint, vocab: Vocab,
                  config: TrainConfig,
                  seeds: Sequence[int] = (1, 2, 3, 4, 5), *,
                  baseline_name: Optional[str] = None,
                  baseline_scores: Optional[tuple[Sequence[float],
                                                  Sequence[float]]] = None,
                  paired: bool = False) -> EvalReport:
    """One fine-tune + test evaluation per seed, then aggregate."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("seeds must be nonempty")
    if len(set(seeds)) != len(seeds):
        raise ValueError("seeds must be distinct")
    if len(seeds) == 1:
        warnings.warn("single-seed run: standard deviation is defined as 0",
                      stacklevel=2)

    train = [(encode(text, vocab, config.max_len), label)
             for text, label in dataset.train]
    dev = ([(encode(text, vocab, config.max_len), label)
            for text, label in dataset.dev] if dataset.dev else None)
    test_seqs = [encode(text, vocab, config.max_len)
                 for text, _ in dataset.test]
    golds = np.array([label for _, label in dataset.test], dtype=np.int64)

    results = []
    for seed in seeds:
        cfg = replace(config, seed=seed)
        best, _, _ = finetune(start, train, cfg, dataset.num_labels, dev=dev)
        preds = predict_labels(best.to_tensors(), best.config, test_seqs,
                               cfg.max_len, cfg.batch_size)
        results.append(SeedResult(
            seed=seed,
            macro_f1=macro_f1(preds, golds, dataset.num_labels),
            accuracy=accuracy(preds, golds)))

    f1s = np.array([r.macro_f1 for r in results])
    accs = np.array([r.accuracy for r in results])
    comparison = None
    if baseline_scores is not None:
        base_f1, base_acc = baseline_scores
        comparison = Comparison(
            baseline_name=baseline_name or "baseline",
            baseline_f1=list(base_f1),
            baseline_accuracy=list(base_acc),
            p_value_f1=t_test(f1s, base_f1, paired=paired),
            p_value_accuracy=t_test(accs, base_acc, paired=paired))
    return EvalReport(dataset=dataset.name, num_labels=dataset.num_labels,
                      results=results,
                      f1_mean=float(f1s.mean()), f1_std=_sample_std(f1s),
                      accuracy_mean=float(accs.mean()),
                      accuracy_std=_sample_std(accs),
                      comparison=comparison)
