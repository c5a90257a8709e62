"""Greedy BPE segmentation, vocabularies, and vocabulary expansion.

Words are whitespace-delimited and carry a leading boundary marker symbol
(``▁``) so decoding can restore spaces. Ids 0-3 are reserved for the special
symbols ``<pad> <s> </s> <unk>``.
"""

from __future__ import annotations

import heapq
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from .sampling import language_distribution

MARKER = "▁"
SPECIALS = ("<pad>", "<s>", "</s>", "<unk>")
PAD, BOS, EOS, UNK = 0, 1, 2, 3
UNK_TEXT = "⁇"

# weighted counts are integers in units of 1/_UNIT; divisible by 1..16 so equal
# per-language weights stay exact
_UNIT = 720720

HEADER = "#pixelrep-bpe"
FORMAT_VERSION = 1


class Vocabulary:
    """Bijective token <-> id map with the four specials at ids 0-3."""

    def __init__(self, tokens=()):
        self.token_of = list(SPECIALS)
        self.id_of = {t: i for i, t in enumerate(SPECIALS)}
        for tok in tokens:
            self.add(tok)

    def add(self, token):
        if token in self.id_of:
            return self.id_of[token]
        self.id_of[token] = len(self.token_of)
        self.token_of.append(token)
        return self.id_of[token]

    @property
    def size(self):
        return len(self.token_of)

    def __len__(self):
        return len(self.token_of)

    def __contains__(self, token):
        return token in self.id_of

    @property
    def tokens(self):
        """Non-special tokens in id order."""
        return self.token_of[len(SPECIALS):]

    @property
    def specials(self):
        return {"PAD": PAD, "BOS": BOS, "EOS": EOS, "UNK": UNK}

    def __eq__(self, other):
        return isinstance(other, Vocabulary) and self.token_of == other.token_of

    def __repr__(self):
        return f"Vocabulary(size={self.size})"


def pretokenize(text, marker=MARKER):
    return [marker + w for w in text.split()]


def _apply_merge(symbols, pair, merged):
    a, b = pair
    out = []
    i = 0
    n = len(symbols)
    while i < n:
        if i < n - 1 and symbols[i] == a and symbols[i + 1] == b:
            out.append(merged)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


@dataclass
class SegmenterModel:
    merges: list
    alphabet: list
    marker: str = MARKER
    _ranks: dict = field(default=None, init=False, repr=False, compare=False)
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge rules")
        self._ranks = {m: r for r, m in enumerate(self.merges)}

    def segment_word(self, word):
        cached = self._cache.get(word)
        if cached is not None:
            return cached
        symbols = list(word)
        ranks = self._ranks
        while len(symbols) > 1:
            best = None
            best_rank = None
            for pair in zip(symbols, symbols[1:]):
                r = ranks.get(pair)
                if r is not None and (best_rank is None or r < best_rank):
                    best, best_rank = pair, r
            if best is None:
                break
            symbols = _apply_merge(symbols, best, best[0] + best[1])
        result = tuple(symbols)
        self._cache[word] = result
        return result

    def segment(self, text):
        pieces = []
        for word in pretokenize(text, self.marker):
            pieces.extend(self.segment_word(word))
        return pieces


class Tokenizer:
    """A segmenter bound to a vocabulary."""

    def __init__(self, segmenter, vocab):
        self.segmenter = segmenter
        self.vocab = vocab

    @property
    def marker(self):
        return self.segmenter.marker

    def pieces(self, text):
        return self.segmenter.segment(text)

    def encode(self, text):
        id_of = self.vocab.id_of
        marker = self.marker
        ids = []
        pending = False  # a bare boundary marker waiting for the next piece
        for p in self.segmenter.segment(text):
            i = id_of.get(p, UNK)
            if pending:
                pending = False
                if i != UNK:
                    ids.append(id_of[marker])
            if p == marker and i != UNK:
                pending = True
                continue
            ids.append(i)
        if pending:
            ids.append(id_of[marker])
        return ids

    def decode(self, ids):
        parts = []
        for i in ids:
            i = int(i)
            if i in (PAD, BOS, EOS):
                continue
            parts.append(UNK_TEXT if i == UNK else self.vocab.token_of[i])
        text = "".join(parts).replace(self.marker, " ")
        return text[1:] if text.startswith(" ") else text

    def save(self, path):
        seg = self.segmenter
        lines = [
            f"{HEADER} {FORMAT_VERSION} marker={seg.marker} merges={len(seg.merges)} vocab={self.vocab.size}"
        ]
        lines += [f"{a} {b}" for a, b in seg.merges]
        lines += [f"{i}\t{t}" for i, t in enumerate(self.vocab.token_of)]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        head = lines[0].split(" ")
        if head[0] != HEADER:
            raise ValueError(f"{path}: not a pixelrep BPE model file")
        if int(head[1]) != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {head[1]}")
        fields = dict(kv.split("=", 1) for kv in head[2:])
        n_merges, n_vocab = int(fields["merges"]), int(fields["vocab"])
        merges = [tuple(line.split(" ")) for line in lines[1:1 + n_merges]]
        vocab_lines = lines[1 + n_merges:1 + n_merges + n_vocab]
        token_of = []
        for expected, line in enumerate(vocab_lines):
            idx, tok = line.split("\t", 1)
            if int(idx) != expected:
                raise ValueError(f"{path}: vocabulary ids are not contiguous at {idx}")
            token_of.append(tok)
        if tuple(token_of[:len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: special symbols missing or out of place")
        vocab = Vocabulary(token_of[len(SPECIALS):])
        alphabet = sorted(t for t in vocab.tokens if len(t) == 1)
        return cls(SegmenterModel(merges, alphabet, fields["marker"]), vocab)

    def __repr__(self):
        return f"Tokenizer(vocab={self.vocab.size}, merges={len(self.segmenter.merges)})"


def _word_counts(corpus, marker):
    counts = Counter()
    for line in corpus:
        counts.update(pretokenize(line, marker))
    return counts


def _train_from_counts(word_counts, target_size, marker, unit):
    """Core BPE loop over integer-weighted word counts (``unit`` = one occurrence)."""
    words = sorted(w for w, c in word_counts.items() if c > 0)
    if not words:
        raise ValueError("corpus is empty")
    weights = [word_counts[w] for w in words]
    symbols = [list(w) for w in words]
    alphabet = sorted({ch for w in words for ch in w})
    if target_size <= len(alphabet) + len(SPECIALS):
        raise ValueError(
            f"target_size {target_size} must exceed alphabet size {len(alphabet)} + {len(SPECIALS)} specials"
        )

    pair_counts = defaultdict(int)
    pair_words = defaultdict(set)
    for wi, syms in enumerate(symbols):
        for pair in zip(syms, syms[1:]):
            pair_counts[pair] += weights[wi]
            pair_words[pair].add(wi)
    heap = [(-c, p) for p, c in pair_counts.items()]
    heapq.heapify(heap)

    vocab = Vocabulary(alphabet)
    merges = []
    threshold = 2 * unit
    while vocab.size < target_size and heap:
        neg, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg:
            continue  # stale entry
        if count < threshold:
            break
        merged = pair[0] + pair[1]
        merges.append(pair)
        vocab.add(merged)
        touched = {}
        for wi in sorted(pair_words.pop(pair, ())):
            old = symbols[wi]
            new = _apply_merge(old, pair, merged)
            if new == old:
                continue
            wt = weights[wi]
            for p in zip(old, old[1:]):
                pair_counts[p] -= wt
                touched[p] = True
            for p in zip(new, new[1:]):
                pair_counts[p] += wt
                pair_words[p].add(wi)
                touched[p] = True
            symbols[wi] = new
        pair_counts.pop(pair, None)
        for p in touched:
            c = pair_counts.get(p, 0)
            if c <= 0:
                pair_counts.pop(p, None)
                pair_words.pop(p, None)
            elif p != pair:
                heapq.heappush(heap, (-c, p))
    return SegmenterModel(merges, alphabet, marker), vocab


def train_segmenter(corpus, target_size, marker=MARKER):
    """Greedy BPE: merge the most frequent adjacent pair until the vocabulary
    (specials included) has ``target_size`` entries or no pair occurs twice.
    Ties go to the lexicographically smallest pair."""
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus is empty")
    counts = _word_counts(corpus, marker)
    weighted = {w: c * _UNIT for w, c in counts.items()}
    seg, vocab = _train_from_counts(weighted, target_size, marker, _UNIT)
    return Tokenizer(seg, vocab)


def build_joint(corpora, total_size, T=5.0, marker=MARKER):
    """Train one segmenter on all languages pooled.

    Each language's word counts are reweighted so its share of the pool
    matches the temperature distribution over line counts; this is the
    expected-count form of temperature line sampling.
    """
    if total_size <= 0:
        raise ValueError("vocabulary size must be positive")
    corpora = {lang: list(lines) for lang, lines in corpora.items()}
    line_counts = {lang: len(lines) for lang, lines in corpora.items()}
    probs = language_distribution(line_counts, T)
    mean_n = sum(line_counts[l] for l in probs) / len(probs)
    pooled = Counter()
    for lang, p in probs.items():
        scale = int(round(_UNIT * p * mean_n / line_counts[lang]))
        for word, c in _word_counts(corpora[lang], marker).items():
            pooled[word] += c * scale
    seg, vocab = _train_from_counts(pooled, total_size, marker, _UNIT)
    return Tokenizer(seg, vocab)


def build_union(models):
    """Set-union of per-language vocabularies, ids assigned by (language order,
    within-language id). Merge lists are concatenated in the same order."""
    models = list(models)
    if not models:
        raise ValueError("need at least one model")
    marker = models[0].marker
    vocab = Vocabulary()
    merges, seen = [], set()
    for m in models:
        if m.marker != marker:
            raise ValueError("models use different boundary markers")
        for tok in m.vocab.tokens:
            vocab.add(tok)
        for pair in m.segmenter.merges:
            if pair not in seen:
                seen.add(pair)
                merges.append(pair)
    alphabet = sorted({a for m in models for a in m.segmenter.alphabet})
    return Tokenizer(SegmenterModel(merges, alphabet, marker), vocab)


@dataclass(frozen=True)
class GrowthPlan:
    """Rows to append to a source embedding matrix after expansion."""

    old_size: int
    new_ids: tuple

    @property
    def new_size(self):
        return self.old_size + len(self.new_ids)


def expand_vocabulary(base, addition):
    """Append tokens of ``addition`` missing from ``base``; base ids are kept."""
    expanded = build_union([base, addition])
    assert expanded.vocab.token_of[:base.vocab.size] == base.vocab.token_of
    new_ids = tuple(range(base.vocab.size, expanded.vocab.size))
    return expanded, GrowthPlan(base.vocab.size, new_ids)
