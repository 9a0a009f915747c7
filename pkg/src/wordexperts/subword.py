"""Subword vocabulary learning and greedy longest-match encoding.

This is the "default" tokenization of the system: a small learned subword
vocabulary plus a deterministic encoder. Words are split on whitespace; each
word is emitted as a word-boundary marker token followed by greedily matched
pieces, which makes decoding an exact inverse on single-spaced text.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

PAD = "<pad>"
EOS = "</s>"
UNK = "<unk>"
BOUNDARY = "▁"  # word-boundary marker piece, emitted before every word

PAD_ID = 0
EOS_ID = 1
UNK_ID = 2
BOUNDARY_ID = 3

MIN_RESERVED = 4  # pad, eos, unk, boundary marker
DEFAULT_RESERVED = 16  # the above plus 12 span sentinels


class VocabError(ValueError):
    """Raised for invalid vocabulary construction or lookup requests."""


def _special_pieces(reserved: int) -> list[str]:
    if reserved < MIN_RESERVED:
        raise VocabError(f"reserved must be >= {MIN_RESERVED}, got {reserved}")
    sentinels = [f"<x{i}>" for i in range(reserved - MIN_RESERVED)]
    return [PAD, EOS, UNK, BOUNDARY] + sentinels


@dataclass
class SubwordVocab:
    """Immutable subword vocabulary with dense 0-based piece ids.

    The first ``reserved`` ids are specials (pad, eos, unk, boundary marker,
    span sentinels); the rest come from corpus-driven learning.
    """

    pieces: list[str]
    reserved: int
    piece_id: dict[str, int] = field(init=False, repr=False)
    _max_piece_len: int = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if self.reserved < MIN_RESERVED:
            raise VocabError(f"reserved must be >= {MIN_RESERVED}")
        if self.pieces[: self.reserved] != _special_pieces(self.reserved):
            raise VocabError("reserved block does not match the expected specials")
        self.piece_id = {}
        for i, p in enumerate(self.pieces):
            if p in self.piece_id:
                raise VocabError(f"duplicate piece {p!r}")
            self.piece_id[p] = i
        learned = self.pieces[self.reserved :]
        self._max_piece_len = max((len(p) for p in learned), default=1)

    @property
    def size(self) -> int:
        return len(self.pieces)

    @property
    def num_sentinels(self) -> int:
        return self.reserved - MIN_RESERVED

    def sentinel_id(self, k: int) -> int:
        """Id of the k-th span sentinel."""
        if not 0 <= k < self.num_sentinels:
            raise VocabError(f"sentinel index {k} out of range [0, {self.num_sentinels})")
        return MIN_RESERVED + k

    def save(self, path: str | Path) -> None:
        """One piece per line, ids are line numbers; header line holds the reserved count."""
        lines = [str(self.reserved)] + self.pieces
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "SubwordVocab":
        raw = Path(path).read_text(encoding="utf-8").split("\n")
        if raw and raw[-1] == "":
            raw = raw[:-1]
        if not raw:
            raise VocabError(f"empty vocab file: {path}")
        try:
            reserved = int(raw[0])
        except ValueError as exc:
            raise VocabError(f"bad header line in {path}: {raw[0]!r}") from exc
        return cls(pieces=raw[1:], reserved=reserved)


def _corpus_words(corpus: list[str]) -> Counter[str]:
    words: Counter[str] = Counter()
    for line in corpus:
        for w in line.split():
            words[w] += 1
    return words


def learn_vocab(
    corpus: list[str],
    target_size: int,
    reserved: int = DEFAULT_RESERVED,
    max_piece_len: int | None = None,
) -> SubwordVocab:
    """Learn a subword vocabulary by frequency-greedy pair merging.

    Words are whitespace-split; merging repeatedly fuses the most frequent
    adjacent symbol pair, with ties broken by the lexicographically smallest
    merged string, so the result is fully determined by the corpus. Every
    character seen in the corpus keeps its own piece, so encoding never fails
    on corpus text. ``max_piece_len`` optionally skips merges whose result
    would exceed that many characters.
    """
    word_freq = _corpus_words(corpus)
    if not word_freq:
        raise VocabError("corpus is empty")

    alphabet = sorted({ch for w in word_freq for ch in w})
    minimum = reserved + len(alphabet)
    if target_size < minimum:
        raise VocabError(
            f"target_size {target_size} too small: need >= {minimum} "
            f"({reserved} reserved + {len(alphabet)} distinct characters)"
        )

    pieces = _special_pieces(reserved) + alphabet
    splits: dict[str, list[str]] = {w: list(w) for w in word_freq}

    while len(pieces) < target_size:
        pair_freq: Counter[tuple[str, str]] = Counter()
        for w, freq in word_freq.items():
            sym = splits[w]
            for i in range(len(sym) - 1):
                pair_freq[(sym[i], sym[i + 1])] += freq
        if max_piece_len is not None:
            pair_freq = Counter(
                {p: c for p, c in pair_freq.items() if len(p[0]) + len(p[1]) <= max_piece_len}
            )
        if not pair_freq:
            raise VocabError(
                f"corpus exhausted at {len(pieces)} pieces before reaching "
                f"target_size {target_size}; lower target_size"
            )
        best = min(pair_freq.items(), key=lambda kv: (-kv[1], kv[0][0] + kv[0][1]))[0]
        merged = best[0] + best[1]
        for w in word_freq:
            sym = splits[w]
            if len(sym) < 2:
                continue
            out: list[str] = []
            i = 0
            while i < len(sym):
                if i + 1 < len(sym) and (sym[i], sym[i + 1]) == best:
                    out.append(merged)
                    i += 2
                else:
                    out.append(sym[i])
                    i += 1
            splits[w] = out
        pieces.append(merged)

    return SubwordVocab(pieces=pieces, reserved=reserved)


def encode(vocab: SubwordVocab, text: str) -> list[int]:
    """Encode text as piece ids: per word, a boundary marker then greedy longest matches.

    Characters with no piece fall back to the unk id, so encoding is total.
    """
    ids: list[int] = []
    lookup = vocab.piece_id
    max_len = vocab._max_piece_len
    for word in text.split():
        ids.append(BOUNDARY_ID)
        j = 0
        n = len(word)
        while j < n:
            match_id = UNK_ID
            step = 1
            for length in range(min(max_len, n - j), 0, -1):
                pid = lookup.get(word[j : j + length])
                if pid is not None and pid >= vocab.reserved:
                    match_id = pid
                    step = length
                    break
            ids.append(match_id)
            j += step
    return ids


def decode(vocab: SubwordVocab, ids: list[int]) -> str:
    """Exact inverse of :func:`encode` on encoder outputs over corpus text."""
    out: list[str] = []
    for i in ids:
        if not 0 <= i < vocab.size:
            raise VocabError(f"piece id {i} out of range [0, {vocab.size})")
        if i == BOUNDARY_ID:
            out.append(" ")
        else:
            out.append(vocab.pieces[i])
    return "".join(out).lstrip(" ")
