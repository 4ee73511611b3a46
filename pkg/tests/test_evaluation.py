import numpy as np
import pytest
from sklearn.metrics import f1_score

from dialectlm.evaluation import (
    EvalReport,
    LabeledDataset,
    SeedResult,
    accuracy,
    load_dataset,
    macro_f1,
    parse_report_scores,
    run_multiseed,
    t_test,
)
from dialectlm.model import Checkpoint, ModelConfig, init_params
from dialectlm.tokenizer import train_vocab
from dialectlm.training import TrainConfig

# frozen extended-precision value for the worked Welch example
WELCH_P_WORKED = 0.34659350708733425


class TestMacroF1:
    def test_perfect_prediction(self):
        assert macro_f1([0, 1, 2], [0, 1, 2], 3) == 1.0

    def test_hand_computed_confusion(self):
        # each class: precision 0.5, recall 0.5, F1 0.5
        assert macro_f1([0, 1, 0, 1], [0, 0, 1, 1], 2) == 0.5

    def test_zero_overlap(self):
        assert macro_f1([1, 1], [0, 0], 2) == 0.0

    def test_absent_class_contributes_zero(self):
        # class 2 never predicted nor gold: mean over 3 classes
        got = macro_f1([0, 1], [0, 1], 3)
        assert got == pytest.approx(2 / 3)

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            macro_f1([0], [0, 1], 2)

    def test_out_of_range_ids(self):
        with pytest.raises(ValueError, match="outside"):
            macro_f1([0, 5], [0, 1], 2)

    def test_matches_sklearn_on_random_cases(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            k = int(rng.integers(2, 6))
            n = int(rng.integers(5, 60))
            golds = rng.integers(0, k, n)
            preds = rng.integers(0, k, n)
            want = f1_score(golds, preds, labels=range(k), average="macro",
                            zero_division=0)
            assert macro_f1(preds, golds, k) == pytest.approx(want)

    def test_invariant_under_label_permutation(self):
        rng = np.random.default_rng(1)
        golds = rng.integers(0, 4, 50)
        preds = rng.integers(0, 4, 50)
        perm = rng.permutation(4)
        assert macro_f1(perm[preds], perm[golds], 4) == pytest.approx(
            macro_f1(preds, golds, 4))

    def test_bounded(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            golds = rng.integers(0, 3, 20)
            preds = rng.integers(0, 3, 20)
            assert 0.0 <= macro_f1(preds, golds, 3) <= 1.0


class TestAccuracy:
    def test_identical(self):
        assert accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_disjoint(self):
        assert accuracy([0, 0], [1, 1]) == 0.0

    def test_three_of_four(self):
        assert accuracy([1, 1, 1, 0], [1, 1, 1, 1]) == 0.75

    def test_length_mismatch(self):
        with pytest.raises(ValueError, match="length"):
            accuracy([0], [0, 1])

    def test_invariant_under_label_permutation(self):
        rng = np.random.default_rng(3)
        golds = rng.integers(0, 5, 40)
        preds = rng.integers(0, 5, 40)
        perm = rng.permutation(5)
        assert accuracy(perm[preds], perm[golds]) == accuracy(preds, golds)


class TestTTest:
    def test_identical_samples_give_one(self):
        assert t_test([0.5, 0.6, 0.7], [0.5, 0.6, 0.7]) == 1.0

    def test_worked_example(self):
        p = t_test([1, 2, 3, 4, 5], [2, 3, 4, 5, 6])
        assert p == pytest.approx(WELCH_P_WORKED, abs=1e-9)

    def test_degenerate_zero_variance_separation(self):
        p = t_test([0.0, 0.0, 0.0], [1.0, 1.0, 1.0])
        assert p < 1e-12

    def test_zero_variance_equal_means(self):
        assert t_test([2.0, 2.0], [2.0, 2.0]) == 1.0

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        a = rng.normal(0.0, 1.0, 8)
        b = rng.normal(0.3, 1.5, 6)
        assert t_test(a, b) == pytest.approx(t_test(b, a), rel=1e-12)

    def test_small_sample_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            t_test([1.0], [1.0, 2.0])

    def test_paired_variant(self):
        a = [1.0, 2.0, 3.0, 4.0]
        b = [1.1, 2.1, 3.1, 4.1]
        # constant shift: paired test is certain, unpaired is not
        assert t_test(a, b, paired=True) < 1e-12
        assert t_test(a, b) > 0.05

    def test_paired_identical(self):
        assert t_test([1.0, 2.0], [1.0, 2.0], paired=True) == 1.0


class TestLoadDataset:
    def write_tsv(self, path, rows):
        path.write_text("text\tlabel\n"
                        + "".join(f"{t}\t{l}\n" for t, l in rows),
                        encoding="utf-8")

    def test_directory_layout(self, tmp_path):
        self.write_tsv(tmp_path / "train.tsv",
                       [("a b", "pos"), ("c d", "neg"), ("e", "pos")])
        self.write_tsv(tmp_path / "test.tsv", [("f", "neg")])
        ds = load_dataset(tmp_path)
        assert ds.label_names == ["pos", "neg"]
        assert ds.train == [("a b", 0), ("c d", 1), ("e", 0)]
        assert ds.test == [("f", 1)]
        assert ds.dev is None

    def test_single_file_split(self, tmp_path):
        rows = [(f"text {i}", "x" if i % 2 else "y") for i in range(10)]
        path = tmp_path / "data.tsv"
        self.write_tsv(path, rows)
        ds = load_dataset(path)
        assert len(ds.train) == 8
        assert len(ds.test) == 2
        assert ds.name == "data"

    def test_first_appearance_label_order(self, tmp_path):
        self.write_tsv(tmp_path / "train.tsv",
                       [("a", "zebra"), ("b", "ant"), ("c", "zebra")])
        self.write_tsv(tmp_path / "test.tsv", [("d", "ant")])
        ds = load_dataset(tmp_path)
        assert ds.label_names == ["zebra", "ant"]

    def test_unseen_test_label_rejected(self, tmp_path):
        self.write_tsv(tmp_path / "train.tsv", [("a", "x")])
        self.write_tsv(tmp_path / "test.tsv", [("b", "q")])
        with pytest.raises(ValueError, match="never appears"):
            load_dataset(tmp_path)

    def test_bad_header_rejected(self, tmp_path):
        p = tmp_path / "bad.tsv"
        p.write_text("foo\tbar\na\tx\n", encoding="utf-8")
        with pytest.raises(ValueError, match="header"):
            load_dataset(p)


class TestReportAggregation:
    def test_hand_computed_mean_and_std(self):
        scores = [0.6, 0.62, 0.64, 0.66, 0.68]
        results = [SeedResult(seed=i + 1, macro_f1=s, accuracy=s)
                   for i, s in enumerate(scores)]
        arr = np.array(scores)
        report = EvalReport(dataset="toy", num_labels=2, results=results,
                            f1_mean=float(arr.mean()),
                            f1_std=float(arr.std(ddof=1)),
                            accuracy_mean=float(arr.mean()),
                            accuracy_std=float(arr.std(ddof=1)))
        assert report.f1_mean == pytest.approx(0.64)
        assert report.f1_std == pytest.approx(0.0316227766, abs=1e-9)

    def test_report_lines_parse_back(self, tmp_path):
        results = [SeedResult(1, 0.5, 0.6), SeedResult(2, 0.7, 0.8)]
        report = EvalReport(dataset="toy", num_labels=2, results=results,
                            f1_mean=0.6, f1_std=0.1, accuracy_mean=0.7,
                            accuracy_std=0.1)
        path = tmp_path / "report.txt"
        report.write(path)
        f1s, accs = parse_report_scores(path)
        assert f1s == [0.5, 0.7]
        assert accs == [0.6, 0.8]


@pytest.fixture(scope="module")
def multiseed_setup():
    rng = np.random.default_rng(6)
    letters_a, letters_b = list("abcdef"), list("ghijkl")

    def sentence(cls):
        pool = letters_a if cls == 0 else letters_b
        return " ".join(rng.choice(pool) for _ in range(6))

    train = [(sentence(i % 2), "zero" if i % 2 == 0 else "one")
             for i in range(160)]
    test = [(sentence(i % 2), "zero" if i % 2 == 0 else "one")
            for i in range(40)]
    vocab = train_vocab([t for t, _ in train + test], target_size=20,
                        min_frequency=10 ** 9)
    mc = ModelConfig(num_layers=1, hidden_size=16, num_heads=2,
                     intermediate_size=32, vocab_size=len(vocab),
                     max_position=12, dropout_rate=0.1)
    start = Checkpoint.from_tensors(mc, init_params(mc, seed=0))
    tc = TrainConfig(batch_size=32, max_len=10, epochs=2, learning_rate=2e-3,
                     seed=1)

    label_ids = {"zero": 0, "one": 1}
    ds = LabeledDataset(name="sep", label_names=["zero", "one"],
                        train=[(t, label_ids[l]) for t, l in train],
                        test=[(t, label_ids[l]) for t, l in test])
    return ds, start, vocab, tc


class TestRunMultiseed:
    def test_five_seed_report(self, multiseed_setup):
        ds, start, vocab, tc = multiseed_setup
        report = run_multiseed(ds, start, vocab, tc, seeds=(1, 2, 3, 4, 5))
        assert len(report.results) == 5
        assert [r.seed for r in report.results] == [1, 2, 3, 4, 5]
        f1s = np.array([r.macro_f1 for r in report.results])
        assert report.f1_std == pytest.approx(float(f1s.std(ddof=1)))

    def test_byte_identical_reports(self, multiseed_setup, tmp_path):
        ds, start, vocab, tc = multiseed_setup
        p1, p2 = tmp_path / "r1.txt", tmp_path / "r2.txt"
        run_multiseed(ds, start, vocab, tc, seeds=(1, 2)).write(p1)
        run_multiseed(ds, start, vocab, tc, seeds=(1, 2)).write(p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_single_seed_warns_with_zero_std(self, multiseed_setup):
        ds, start, vocab, tc = multiseed_setup
        with pytest.warns(UserWarning, match="single-seed"):
            report = run_multiseed(ds, start, vocab, tc, seeds=(1,))
        assert report.f1_std == 0.0
        assert report.accuracy_std == 0.0

    def test_duplicate_seeds_rejected(self, multiseed_setup):
        ds, start, vocab, tc = multiseed_setup
        with pytest.raises(ValueError, match="distinct"):
            run_multiseed(ds, start, vocab, tc, seeds=(1, 1))

    def test_empty_seeds_rejected(self, multiseed_setup):
        ds, start, vocab, tc = multiseed_setup
        with pytest.raises(ValueError, match="nonempty"):
            run_multiseed(ds, start, vocab, tc, seeds=())

    def test_comparison_block(self, multiseed_setup, tmp_path):
        ds, start, vocab, tc = multiseed_setup
        report = run_multiseed(
            ds, start, vocab, tc, seeds=(1, 2, 3),
            baseline_name="other",
            baseline_scores=([0.1, 0.12, 0.14], [0.2, 0.22, 0.24]))
        assert report.comparison is not None
        assert 0.0 <= report.comparison.p_value_f1 <= 1.0
        lines = report.to_lines()
        assert any(line.startswith("baseline=other") for line in lines)
        assert any(line.startswith("significant_macro_f1=") for line in lines)
