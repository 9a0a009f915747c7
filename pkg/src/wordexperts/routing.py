"""Knowledge-rich routing vocabulary and hash-based routing-id assignment.

The routing vocabulary is a large word list used only for expert selection.
It is built from entity/relation names ranked by corpus frequency, extended
with the default subword vocabulary, and compiled into a hash table keyed by
default-token-id sequences. Online assignment gives every input position the
routing id of the longest known id subsequence ending there.
"""

from __future__ import annotations

import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .subword import SubwordVocab, encode

log = logging.getLogger(__name__)

MAX_KEY_LEN = 9  # online lookup probes subsequence lengths 1..9


class RoutingError(ValueError):
    """Raised for invalid routing vocabulary construction or lookups."""


def normalize_word(token: str) -> str:
    """Lowercase and strip non-alphanumeric edge characters, keeping interior ones."""
    w = token.lower()
    start, end = 0, len(w)
    while start < end and not w[start].isalnum():
        start += 1
    while end > start and not w[end - 1].isalnum():
        end -= 1
    return w[start:end]


@dataclass
class RoutingVocab:
    """Routing-id assignment for knowledge words and appended default pieces.

    ``entries`` lists knowledge words first (descending corpus frequency),
    with the default pieces appended by :func:`extend_with_default`. Routing
    ids are dense: the appended default pieces occupy [0, knowledge_threshold)
    so that ``routing_id >= knowledge_threshold`` identifies knowledge words,
    and knowledge words keep their frequency rank order above the threshold.
    """

    entries: list[str]
    routing_id: dict[str, int]
    freq: dict[int, int]
    knowledge_threshold: int = 0
    word_of: dict[int, str] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        ids = sorted(self.routing_id.values())
        if ids != list(range(len(ids))):
            raise RoutingError("routing ids are not dense in [0, size)")
        self.word_of = {i: w for w, i in self.routing_id.items()}

    @property
    def size(self) -> int:
        return len(self.routing_id)

    @property
    def extended(self) -> bool:
        return self.knowledge_threshold > 0

    def save(self, path: str | Path) -> None:
        """TSV rows ``word<TAB>frequency<TAB>routing_id`` in entry order."""
        lines = [str(self.knowledge_threshold)]
        for w in self.entries:
            rid = self.routing_id[w]
            lines.append(f"{w}\t{self.freq.get(rid, 0)}\t{rid}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RoutingVocab":
        raw = Path(path).read_text(encoding="utf-8").splitlines()
        if not raw:
            raise RoutingError(f"empty routing vocab file: {path}")
        threshold = int(raw[0])
        entries: list[str] = []
        routing_id: dict[str, int] = {}
        freq: dict[int, int] = {}
        for line in raw[1:]:
            word, count, rid = line.split("\t")
            entries.append(word)
            routing_id[word] = int(rid)
            freq[int(rid)] = int(count)
        return cls(entries=entries, routing_id=routing_id, freq=freq, knowledge_threshold=threshold)


def count_corpus_words(corpus: list[str]) -> Counter[str]:
    """Occurrence counts of normalized whitespace tokens."""
    counts: Counter[str] = Counter()
    for line in corpus:
        for tok in line.split():
            w = normalize_word(tok)
            if w:
                counts[w] += 1
    return counts


def build_routing_vocab(name_list: list[str], corpus: list[str], top_k: int) -> RoutingVocab:
    """Build the knowledge-word routing vocabulary.

    Names are lowercased, whitespace-split and punctuation-stripped, then
    deduplicated and ranked by corpus frequency (ties lexicographic; words
    absent from the corpus get frequency 0 and rank last). The top_k words
    are kept, with routing ids equal to rank.
    """
    if top_k <= 0:
        raise RoutingError(f"top_k must be positive, got {top_k}")
    if not name_list:
        raise RoutingError("name list is empty")
    words: set[str] = set()
    for name in name_list:
        for tok in name.split():
            w = normalize_word(tok)
            if w:
                words.add(w)
    corpus_counts = count_corpus_words(corpus)
    ranked = sorted(words, key=lambda w: (-corpus_counts.get(w, 0), w))[:top_k]
    routing_id = {w: i for i, w in enumerate(ranked)}
    freq = {i: corpus_counts.get(w, 0) for i, w in enumerate(ranked)}
    return RoutingVocab(entries=ranked, routing_id=routing_id, freq=freq)


def extend_with_default(rv: RoutingVocab, dv: SubwordVocab) -> RoutingVocab:
    """Merge the default pieces into the routing vocabulary.

    Default pieces take the low routing-id range [0, dv.size) and knowledge
    words are renumbered above them, so ``knowledge_threshold == dv.size``
    mirrors the frequent/knowledge split used by expert deactivation. A
    knowledge word identical to a default piece keeps the piece's low id.
    """
    piece_set = set(dv.pieces)
    kept = [w for w in rv.entries if w not in piece_set]
    routing_id: dict[str, int] = {p: i for i, p in enumerate(dv.pieces)}
    for j, w in enumerate(kept):
        routing_id[w] = dv.size + j
    freq: dict[int, int] = {}
    old_freq = {w: rv.freq.get(rv.routing_id[w], 0) for w in rv.entries}
    for p in dv.pieces:
        freq[routing_id[p]] = old_freq.get(p, 0)
    for w in kept:
        freq[routing_id[w]] = old_freq[w]
    return RoutingVocab(
        entries=kept + list(dv.pieces),
        routing_id=routing_id,
        freq=freq,
        knowledge_threshold=dv.size,
    )


@dataclass
class RoutingHashTable:
    """Maps default-token-id sequences to routing ids.

    Every single default token id has a length-1 key, so lookup is total on
    encoder output; no key is longer than ``max_key_len``.
    """

    map: dict[tuple[int, ...], int]
    max_key_len: int = MAX_KEY_LEN
    num_dropped_too_long: int = 0
    num_collisions: int = 0

    def save(self, path: str | Path) -> None:
        """TSV rows ``id,id,...<TAB>routing_id``."""
        lines = [
            ",".join(str(i) for i in key) + f"\t{rid}"
            for key, rid in sorted(self.map.items())
        ]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "RoutingHashTable":
        table: dict[tuple[int, ...], int] = {}
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            key_s, rid = line.split("\t")
            table[tuple(int(x) for x in key_s.split(","))] = int(rid)
        return cls(map=table)


def build_hash_table(rv: RoutingVocab, dv: SubwordVocab) -> RoutingHashTable:
    """Compile the offline lookup table from an extended routing vocabulary.

    Knowledge words are keyed by their default tokenization in word-initial
    form; entries tokenizing to more than ``MAX_KEY_LEN`` ids are unreachable
    by the online probe and dropped (counted). Each default piece id gets a
    length-1 key, guaranteeing total coverage. When two words share a
    tokenization the higher-frequency word keeps the key.
    """
    if not rv.extended:
        raise RoutingError("routing vocab must be extended with the default vocab first")
    table: dict[tuple[int, ...], int] = {}
    dropped = 0
    collisions = 0
    for pid, piece in enumerate(dv.pieces):
        table[(pid,)] = rv.routing_id[piece]
    knowledge = [w for w in rv.entries if rv.routing_id[w] >= rv.knowledge_threshold]
    knowledge.sort(key=lambda w: rv.routing_id[w])  # descending frequency order
    for w in knowledge:
        key = tuple(encode(dv, w))
        if len(key) > MAX_KEY_LEN:
            dropped += 1
            continue
        if key in table:
            collisions += 1
            prev = rv.word_of.get(table[key], "?")
            log.info("routing tokenization collision: %r keeps key over %r", prev, w)
            continue
        table[key] = rv.routing_id[w]
    return RoutingHashTable(map=table, num_dropped_too_long=dropped, num_collisions=collisions)


@dataclass
class RoutingAssignment:
    """Per-position routing ids and the matched subsequence lengths."""

    routing_ids: list[int]
    match_len: list[int]


def assign_routing_ids(table: RoutingHashTable, seq: list[int]) -> RoutingAssignment:
    """Assign each position the routing id of the longest table key ending there.

    For position i the keys ``seq[i-k : i+1]`` are probed for k from
    ``max_key_len - 1`` down to 0; the first hit wins. A missing length-1 key
    means the coverage invariant was violated and raises.
    """
    lookup = table.map
    max_len = table.max_key_len
    ids: list[int] = []
    lens: list[int] = []
    for i in range(len(seq)):
        hit = -1
        hit_len = 0
        for length in range(min(max_len, i + 1), 0, -1):
            rid = lookup.get(tuple(seq[i - length + 1 : i + 1]))
            if rid is not None:
                hit = rid
                hit_len = length
                break
        if hit < 0:
            raise RoutingError(f"no routing id for default token {seq[i]} (missing length-1 key)")
        ids.append(hit)
        lens.append(hit_len)
    return RoutingAssignment(routing_ids=ids, match_len=lens)
