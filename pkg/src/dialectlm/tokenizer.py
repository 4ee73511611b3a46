"""Arabic-aware normalization and WordPiece subword tokenization.

Vocabulary training is frequency-greedy pair merging over whitespace-split
words; word-internal pieces carry the ## continuation marker. Encoding uses
greedy longest-match-first segmentation with whole-word UNK fallback so that
word boundaries stay meaningful for whole-word masking.
"""

from __future__ import annotations

import re
import unicodedata
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, UNK, CLS, SEP, MASK = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, MASK)
PAD_ID, UNK_ID, CLS_ID, SEP_ID, MASK_ID = range(5)
CONTINUATION = "##"

VOCAB_HEADER = "#wordpiece-v1"

# harakat and Quranic annotation marks U+064B..U+065F plus dagger alef U+0670
_DIACRITICS = re.compile("[ً-ٰٟ]")
_TATWEEL = "ـ"
_ALEF_VARIANTS = str.maketrans({"أ": "ا",   # hamza above
                                "إ": "ا",   # hamza below
                                "آ": "ا",   # madda
                                "ى": "ي"})  # alef maqsura -> yeh


def normalize(text: str) -> str:
    """Canonical form: NFC, no diacritics/tatweel, unified alef, one space."""
    text = unicodedata.normalize("NFC", text)
    text = text.replace(_TATWEEL, "")
    text = _DIACRITICS.sub("", text)
    text = text.translate(_ALEF_VARIANTS)
    return " ".join(text.split())


class VocabError(ValueError):
    pass


@dataclass
class Vocab:
    """Bidirectional token/id mapping; ids dense, specials pinned to 0..4."""

    tokens: list[str]
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        if tuple(self.tokens[:5]) != SPECIAL_TOKENS:
            raise VocabError("vocabulary must start with the special tokens "
                             f"{SPECIAL_TOKENS}")
        self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise VocabError("duplicate token in vocabulary")

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def id(self, token: str) -> int:
        return self.token_to_id[token]

    def token(self, token_id: int) -> str:
        if not 0 <= token_id < len(self.tokens):
            raise VocabError(f"token id {token_id} out of range "
                             f"[0, {len(self.tokens)})")
        return self.tokens[token_id]

    @property
    def num_specials(self) -> int:
        return len(SPECIAL_TOKENS)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{VOCAB_HEADER} size={len(self.tokens)}\n")
            for tok in self.tokens:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as f:
            header = f.readline().rstrip("\n")
            m = re.fullmatch(rf"{re.escape(VOCAB_HEADER)} size=(\d+)", header)
            if not m:
                raise VocabError(f"bad vocab header: {header!r}")
            tokens = [line.rstrip("\n") for line in f]
        if len(tokens) != int(m.group(1)):
            raise VocabError(f"vocab has {len(tokens)} tokens, header "
                             f"declares {m.group(1)}")
        return cls(tokens)


@dataclass
class TokenizedSequence:
    """Token ids framed with CLS/SEP plus the word grouping used for WWM."""

    ids: list[int]
    word_spans: list[tuple[int, int]]

    @property
    def token_count(self) -> int:
        return len(self.ids)

    @property
    def maskable_count(self) -> int:
        return sum(end - start for start, end in self.word_spans)


def _word_pieces(word: str) -> list[str]:
    return [word[0]] + [CONTINUATION + ch for ch in word[1:]]


def _strip_marker(piece: str) -> str:
    return piece[len(CONTINUATION):] if piece.startswith(CONTINUATION) else piece


def train_vocab(corpus: Iterable[str], target_size: int,
                min_frequency: int = 2) -> Vocab:
    """Greedy pair-merge vocabulary training over whitespace-split words.

    Merging stops at target_size or when no adjacent pair reaches
    min_frequency; frequency ties break toward the lexicographically
    smallest pair, so the result is deterministic for a given corpus.
    """
    word_freq: Counter[str] = Counter()
    for sentence in corpus:
        word_freq.update(normalize(sentence).split())
    if not word_freq:
        raise VocabError("empty corpus")

    alphabet = sorted({piece for word in word_freq
                       for piece in _word_pieces(word)})
    floor = len(alphabet) + len(SPECIAL_TOKENS)
    if target_size <= floor:
        raise VocabError(f"target_size {target_size} must exceed alphabet "
                         f"plus specials ({floor})")

    tokens = list(SPECIAL_TOKENS) + alphabet
    known = set(tokens)
    segments = {word: _word_pieces(word) for word in word_freq}

    while len(tokens) < target_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for word, pieces in segments.items():
            freq = word_freq[word]
            for left, right in zip(pieces, pieces[1:]):
                pair_freq[(left, right)] += freq
        if not pair_freq:
            break
        pair, freq = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0]))
        if freq < min_frequency:
            break
        merged = pair[0] + _strip_marker(pair[1])
        for word, pieces in segments.items():
            out = []
            i = 0
            while i < len(pieces):
                if (i + 1 < len(pieces)
                        and (pieces[i], pieces[i + 1]) == pair):
                    out.append(merged)
                    i += 2
                else:
                    out.append(pieces[i])
                    i += 1
            segments[word] = out
        if merged not in known:
            tokens.append(merged)
            known.add(merged)

    return Vocab(tokens)


def segment_word(word: str, vocab: Vocab) -> list[str] | None:
    """Greedy longest-match-first pieces, or None if any residue is unknown.

    Special tokens are never matched, so text spelling out e.g. "[MASK]"
    cannot smuggle a special id into a word span.
    """
    pieces = []
    pos = 0
    while pos < len(word):
        prefix = CONTINUATION if pos else ""
        match = None
        for end in range(len(word), pos, -1):
            candidate = prefix + word[pos:end]
            if (candidate in vocab
                    and vocab.id(candidate) >= vocab.num_specials):
                match = candidate
                pos = end
                break
        if match is None:
            return None
        pieces.append(match)
    return pieces


def encode(text: str, vocab: Vocab, max_len: int = 128) -> TokenizedSequence:
    """Normalize, segment, and frame as [CLS] pieces... [SEP], truncated."""
    if max_len < 3:
        raise ValueError(f"max_len must be at least 3, got {max_len}")
    ids = [CLS_ID]
    spans = []
    for word in normalize(text).split():
        pieces = segment_word(word, vocab)
        start = len(ids)
        if pieces is None:
            ids.append(UNK_ID)
        else:
            ids.extend(vocab.id(p) for p in pieces)
        spans.append((start, len(ids)))
    ids.append(SEP_ID)
    if len(ids) > max_len:
        cut = max_len - 1
        ids = ids[:cut] + [SEP_ID]
        spans = [(s, min(e, cut)) for s, e in spans if s < cut]
    return TokenizedSequence(ids=ids, word_spans=spans)


def decode(ids: Sequence[int], vocab: Vocab) -> str:
    """Inverse of encode for unmasked text: drop specials, rejoin pieces."""
    words: list[str] = []
    for token_id in ids:
        token = vocab.token(int(token_id))
        if token_id < vocab.num_specials:
            continue
        if token.startswith(CONTINUATION) and words:
            words[-1] += token[len(CONTINUATION):]
        else:
            words.append(token)
    return " ".join(words)
