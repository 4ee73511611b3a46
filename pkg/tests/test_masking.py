import math

import numpy as np
import pytest

from dialectlm.masking import (
    IGNORE_INDEX,
    MaskedExample,
    dump_examples,
    load_examples,
    make_batch,
    make_example,
)
from dialectlm.tokenizer import (
    CLS_ID,
    MASK_ID,
    PAD_ID,
    SEP_ID,
    TokenizedSequence,
    Vocab,
)


def toy_vocab(size=40):
    tokens = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]
    tokens += [f"t{i}" for i in range(size - 5)]
    return Vocab(tokens)


def toy_sequence(num_words=10, pieces_per_word=1, vocab=None):
    vocab = vocab or toy_vocab()
    ids = [CLS_ID]
    spans = []
    nxt = 5
    for _ in range(num_words):
        start = len(ids)
        for _ in range(pieces_per_word):
            ids.append(nxt)
            nxt = 5 + (nxt - 4) % (len(vocab) - 5)
        spans.append((start, len(ids)))
    ids.append(SEP_ID)
    return TokenizedSequence(ids=ids, word_spans=spans)


class TestMakeExample:
    def test_zero_rate_changes_nothing(self):
        vocab = toy_vocab()
        seq = toy_sequence(8, vocab=vocab)
        ex = make_example(seq, rng=0, vocab=vocab, max_len=16, mask_rate=0.0)
        np.testing.assert_array_equal(ex.input_ids[:len(seq.ids)], seq.ids)
        assert (ex.labels == IGNORE_INDEX).all()

    def test_full_rate_selects_every_word(self):
        vocab = toy_vocab()
        seq = toy_sequence(6, pieces_per_word=2, vocab=vocab)
        ex = make_example(seq, rng=0, vocab=vocab, max_len=20, mask_rate=1.0)
        for start, end in seq.word_spans:
            assert (ex.labels[start:end] != IGNORE_INDEX).all()
        assert ex.labels[0] == IGNORE_INDEX  # CLS
        assert ex.labels[len(seq.ids) - 1] == IGNORE_INDEX  # SEP

    def test_labels_hold_original_ids(self):
        vocab = toy_vocab()
        seq = toy_sequence(10, vocab=vocab)
        ex = make_example(seq, rng=3, vocab=vocab, max_len=16, mask_rate=1.0)
        for start, end in seq.word_spans:
            for pos in range(start, end):
                assert ex.labels[pos] == seq.ids[pos]

    def test_attention_mask_marks_non_pad(self):
        vocab = toy_vocab()
        seq = toy_sequence(4, vocab=vocab)
        ex = make_example(seq, rng=1, vocab=vocab, max_len=12)
        n = len(seq.ids)
        assert (ex.attention_mask[:n] == 1).all()
        assert (ex.attention_mask[n:] == 0).all()
        assert (ex.input_ids[n:] == PAD_ID).all()

    def test_whole_word_property(self):
        vocab = toy_vocab()
        for seed in range(50):
            seq = toy_sequence(7, pieces_per_word=3, vocab=vocab)
            ex = make_example(seq, rng=seed, vocab=vocab, max_len=32)
            for start, end in seq.word_spans:
                masked = ex.labels[start:end] != IGNORE_INDEX
                assert masked.all() or (~masked).all()

    def test_selected_count_within_stated_bounds(self):
        vocab = toy_vocab()
        for seed in range(50):
            seq = toy_sequence(9, pieces_per_word=2, vocab=vocab)
            n = seq.maskable_count
            target = math.ceil(0.15 * n)
            ex = make_example(seq, rng=seed, vocab=vocab, max_len=32)
            realized = int((ex.labels != IGNORE_INDEX).sum())
            longest = max(e - s for s, e in seq.word_spans)
            assert target <= realized <= target + longest - 1

    def test_deterministic_given_seed(self):
        vocab = toy_vocab()
        seq = toy_sequence(10, pieces_per_word=2, vocab=vocab)
        a = make_example(seq, rng=1234, vocab=vocab, max_len=32)
        b = make_example(seq, rng=1234, vocab=vocab, max_len=32)
        assert np.array_equal(a.input_ids, b.input_ids)
        assert np.array_equal(a.labels, b.labels)

    def test_no_maskable_tokens_is_not_an_error(self):
        vocab = toy_vocab()
        seq = TokenizedSequence(ids=[CLS_ID, SEP_ID], word_spans=[])
        ex = make_example(seq, rng=0, vocab=vocab, max_len=8)
        assert (ex.labels == IGNORE_INDEX).all()

    def test_replacement_statistics(self):
        # aggregate over many long sequences: 15% selection, 80/10/10 policy
        vocab = toy_vocab(200)
        total_maskable = 0
        selected = masked = random_sub = kept = 0
        seq = toy_sequence(100, pieces_per_word=1, vocab=vocab)
        for seed in range(1200):
            ex = make_example(seq, rng=seed, vocab=vocab, max_len=128)
            total_maskable += seq.maskable_count
            chosen = ex.labels != IGNORE_INDEX
            selected += int(chosen.sum())
            for pos in np.nonzero(chosen)[0]:
                if ex.input_ids[pos] == MASK_ID:
                    masked += 1
                elif ex.input_ids[pos] == ex.labels[pos]:
                    kept += 1
                else:
                    random_sub += 1
        assert 0.145 <= selected / total_maskable <= 0.155
        assert abs(masked / selected - 0.80) < 0.01
        assert abs(random_sub / selected - 0.10) < 0.01
        assert abs(kept / selected - 0.10) < 0.01

    def test_random_replacement_never_special(self):
        vocab = toy_vocab(12)
        seq = toy_sequence(40, vocab=vocab)
        for seed in range(40):
            ex = make_example(seq, rng=seed, vocab=vocab, max_len=64,
                              mask_rate=1.0)
            chosen = ex.labels != IGNORE_INDEX
            replaced = ex.input_ids[chosen]
            non_mask = replaced[replaced != MASK_ID]
            assert (non_mask >= vocab.num_specials).all()

    def test_bad_mask_rate(self):
        vocab = toy_vocab()
        with pytest.raises(ValueError, match="mask_rate"):
            make_example(toy_sequence(3), rng=0, vocab=vocab, max_len=16,
                         mask_rate=1.5)


class TestMakeBatch:
    def test_partial_final_batch(self):
        vocab = toy_vocab()
        seq = toy_sequence(4, vocab=vocab)
        examples = [make_example(seq, rng=i, vocab=vocab, max_len=12)
                    for i in range(130)]
        sizes = [len(b) for b in make_batch(examples, 64)]
        assert sizes == [64, 64, 2]

    def test_empty_input(self):
        assert list(make_batch([], 64)) == []

    def test_mixed_lengths_rejected(self):
        vocab = toy_vocab()
        seq = toy_sequence(4, vocab=vocab)
        examples = [make_example(seq, rng=0, vocab=vocab, max_len=12),
                    make_example(seq, rng=0, vocab=vocab, max_len=16)]
        with pytest.raises(ValueError, match="mixed"):
            list(make_batch(examples, 2))

    def test_batch_shapes(self):
        vocab = toy_vocab()
        seq = toy_sequence(4, vocab=vocab)
        examples = [make_example(seq, rng=i, vocab=vocab, max_len=12)
                    for i in range(8)]
        batch = next(make_batch(examples, 8))
        assert batch.input_ids.shape == (8, 12)
        assert batch.attention_mask.shape == (8, 12)
        assert batch.labels.shape == (8, 12)


class TestDumpFormat:
    def test_round_trip(self, tmp_path):
        vocab = toy_vocab()
        seq = toy_sequence(5, vocab=vocab)
        examples = [make_example(seq, rng=i, vocab=vocab, max_len=16)
                    for i in range(4)]
        path = tmp_path / "dump.txt"
        dump_examples(examples, path)
        loaded = load_examples(path)
        assert len(loaded) == 4
        for orig, back in zip(examples, loaded):
            assert np.array_equal(orig.input_ids, back.input_ids)
            assert np.array_equal(orig.attention_mask, back.attention_mask)
            assert np.array_equal(orig.labels, back.labels)

    def test_golden_line_shape(self, tmp_path):
        ex = MaskedExample(np.array([2, 7, 3, 0]), np.array([1, 1, 1, 0]),
                           np.array([-100, 7, -100, -100]))
        path = tmp_path / "one.txt"
        dump_examples([ex], path)
        assert path.read_text() == "2 7 3 0|1 1 1 0|-100 7 -100 -100\n"
