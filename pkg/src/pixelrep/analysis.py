"""Translation metrics and representation analyses."""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .model import TokenBatch, mean_pooled_repr
from .pixeltok import collate, tokenize
from .subword import SPECIALS

log = logging.getLogger(__name__)


# -- metrics ------------------------------------------------------------------------------------


def _check_lengths(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(hyps, refs, max_order=4):
    """Corpus sufficient statistics: matches and totals per order, lengths."""
    _check_lengths(hyps, refs)
    correct = [0] * max_order
    total = [0] * max_order
    hyp_len = ref_len = 0
    for h, r in zip(hyps, refs):
        ht, rt = h.split(), r.split()
        hyp_len += len(ht)
        ref_len += len(rt)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(ht, n), _ngrams(rt, n)
            correct[n - 1] += sum(min(c, rc[g]) for g, c in hc.items())
            total[n - 1] += max(len(ht) - n + 1, 0)
    return correct, total, hyp_len, ref_len


def bleu(hyps, refs, max_order=4):
    """Corpus BLEU on whitespace tokens, 0-100.

    Orders with zero matches use exponential smoothing: the k-th such order
    gets precision ``1 / (2**k * total)``. An order with no hypothesis
    n-grams at all gives 0.
    """
    correct, total, hyp_len, ref_len = bleu_stats(hyps, refs, max_order)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    k = 1.0
    for c, t in zip(correct, total):
        if t == 0:
            return 0.0
        if c == 0:
            k *= 2.0
            p = 1.0 / (k * t)
        else:
            p = c / t
        log_p += math.log(p)
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_p / max_order)


def chrf(hyps, refs, order=6, beta=2.0):
    """Corpus chrF, 0-100: character n-grams (whitespace removed) pooled over
    the corpus, F-beta per order averaged over orders present on both sides."""
    _check_lengths(hyps, refs)
    stats = np.zeros((order, 3))  # hyp count, ref count, matches
    for h, r in zip(hyps, refs):
        hc, rc = "".join(h.split()), "".join(r.split())
        for n in range(1, order + 1):
            hg, rg = _ngrams(hc, n), _ngrams(rc, n)
            stats[n - 1] += (sum(hg.values()), sum(rg.values()), sum(min(c, rg[g]) for g, c in hg.items()))
    b2 = beta * beta
    score, effective = 0.0, 0
    for n_hyp, n_ref, n_match in stats:
        if n_hyp > 0 and n_ref > 0:
            effective += 1
            prec, rec = n_match / n_hyp, n_match / n_ref
            if prec + rec > 0:
                score += (1 + b2) * prec * rec / (b2 * prec + rec)
    return float(100.0 * score / effective) if effective else 0.0


# -- embeddings and projections -------------------------------------------------------------------


@dataclass
class EmbeddingSet:
    vectors: np.ndarray
    labels: list
    freq_rank: np.ndarray | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be [N, d]")
        if len(self.labels) != self.vectors.shape[0]:
            raise ValueError(f"{len(self.labels)} labels for {self.vectors.shape[0]} vectors")
        if self.freq_rank is not None:
            self.freq_rank = np.asarray(self.freq_rank)
            if sorted(self.freq_rank.tolist()) != list(range(1, len(self.labels) + 1)):
                raise ValueError("freq_rank must be a permutation of 1..N")

    def __len__(self):
        return len(self.labels)

    def subset(self, idx):
        idx = np.asarray(idx)
        ranks = None
        if self.freq_rank is not None:
            ranks = np.argsort(np.argsort(self.freq_rank[idx], kind="stable"), kind="stable") + 1
        return EmbeddingSet(self.vectors[idx], [self.labels[i] for i in idx], ranks)

    def write_tsv(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for i, (label, vec) in enumerate(zip(self.labels, self.vectors)):
                rank = "" if self.freq_rank is None else str(int(self.freq_rank[i]))
                fh.write("\t".join([str(label), rank] + [repr(float(v)) for v in vec]) + "\n")


@dataclass
class Projection:
    coords: np.ndarray  # [N, 2]
    explained_variance: np.ndarray  # fraction of total variance, per component
    singular_values: np.ndarray
    keep: np.ndarray  # bool mask after trimming


def svd2d(emb, trim=None):
    """Rank-2 projection of mean-centered vectors.

    Each axis is flipped so its largest-magnitude coordinate is positive.
    ``trim`` (e.g. 98) marks the points whose 2-D distance from the origin
    lies within that percentile; the rest are outliers in ``keep``.
    """
    X = emb.vectors if isinstance(emb, EmbeddingSet) else np.asarray(emb)
    X = np.asarray(X, dtype=np.float64)
    Xc = X - X.mean(axis=0, keepdims=True)
    U, S, _ = np.linalg.svd(Xc, full_matrices=False)
    k = min(2, len(S))
    coords = np.zeros((X.shape[0], 2))
    coords[:, :k] = U[:, :k] * S[:k]
    for j in range(2):
        col = coords[:, j]
        if col.size and col[np.argmax(np.abs(col))] < 0:
            coords[:, j] = -col
    total = float((S ** 2).sum())
    sv = np.zeros(2)
    sv[:k] = S[:k]
    ev = sv ** 2 / total if total > 0 else np.zeros(2)
    keep = np.ones(X.shape[0], dtype=bool)
    if trim is not None:
        r = np.linalg.norm(coords, axis=1)
        keep = r <= np.percentile(r, trim)
    return Projection(coords, ev, sv, keep)


def frequency_ranks(counts, keys):
    """Rank ``keys`` by descending count (1 = most frequent), ties by position."""
    c = np.array([counts.get(k, 0) for k in keys], dtype=np.int64)
    order = np.lexsort((np.arange(len(keys)), -c))
    ranks = np.empty(len(keys), dtype=np.int64)
    ranks[order] = np.arange(1, len(keys) + 1)
    return ranks


def token_counts(tokenizer, texts):
    counts = Counter()
    for t in texts:
        counts.update(tokenizer.encode(t))
    return counts


def subword_embeddings(model, tokenizer, counts=None):
    """Source embedding rows (scaled as the encoder sees them) for every
    non-special token."""
    ids = list(range(len(SPECIALS), tokenizer.vocab.size))
    vecs = mean_pooled_repr(model, TokenBatch.from_lists([[i] for i in ids]))
    ranks = frequency_ranks(counts, ids) if counts is not None else None
    return EmbeddingSet(vecs, [tokenizer.vocab.token_of[i] for i in ids], ranks)


def pixel_token_embeddings_for_vocab(model, source, tokenizer, counts=None, batch=256):
    """Render every non-special vocabulary token and mean-pool its projected
    window vectors. Tokens that are empty once the boundary marker is removed
    are skipped. ``counts`` maps token id to training frequency."""
    ids, texts = [], []
    for i in range(len(SPECIALS), tokenizer.vocab.size):
        text = tokenizer.vocab.token_of[i].replace(tokenizer.marker, " ").strip()
        if not text:
            log.info("skipping token %r: nothing to render", tokenizer.vocab.token_of[i])
            continue
        ids.append(i)
        texts.append(text)
    vecs = []
    for s in range(0, len(texts), batch):
        vecs.append(mean_pooled_repr(model, source.batch(texts[s:s + batch])))
    vecs = np.concatenate(vecs) if vecs else np.zeros((0, model.cfg.d_model))
    ranks = frequency_ranks(counts, ids) if counts is not None else None
    return EmbeddingSet(vecs, [tokenizer.vocab.token_of[i] for i in ids], ranks), ids


def mean_pairwise_cosine(vectors, center=None):
    """Mean cosine similarity over distinct pairs, after subtracting ``center``."""
    X = np.asarray(vectors, dtype=np.float64)
    if center is not None:
        X = X - center
    if len(X) < 2:
        raise ValueError("need at least two vectors")
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    Xn = X / np.where(norms > 0, norms, 1.0)
    G = Xn @ Xn.T
    n = len(X)
    return float((G.sum() - np.trace(G)) / (n * (n - 1)))


def low_frequency_decile(ranks):
    """Indices of the least frequent 10% (at least two)."""
    n = len(ranks)
    k = max(2, n // 10)
    return np.argsort(-np.asarray(ranks), kind="stable")[:k]


# -- update fraction -------------------------------------------------------------------------------


@dataclass
class UpdateReport:
    fraction: float
    updated: int
    total: int
    per_param: dict = field(default_factory=dict)

    @property
    def percent(self):
        return 100.0 * self.fraction


def update_fraction(model, source_batch, targets):
    """Share of source-embedder parameters with nonzero gradient after one
    forward/backward pass on a batch.

    The pass mirrors a training step (batch-statistics normalization) with
    dropout disabled so that masking noise does not zero gradient entries.
    """
    if not targets or source_batch.pad_mask.shape[0] == 0 or (~source_batch.pad_mask).sum() == 0:
        raise ValueError("empty batch")
    params = list(model.src_embed.named_parameters())
    all_params = model.parameters()
    saved_p = model.cfg.dropout
    # running statistics must not drift because of an analysis pass
    saved_buffers = {n: b.copy() for n, b in model.named_buffers()}
    model.cfg.dropout = 0.0
    was = model.training
    model.train()
    try:
        for p in all_params:
            p.grad = None
        T.get_tape().clear()
        loss = model.loss(source_batch, targets, eps=0.0)
        T.backward(loss, leaves=all_params)
        per, updated, total = {}, 0, 0
        for name, p in params:
            nz = int(np.count_nonzero(p.grad))
            per[name] = (nz, p.size)
            updated += nz
            total += p.size
    finally:
        model.cfg.dropout = saved_p
        model.train(was)
        for n, b in model.named_buffers():
            b[...] = saved_buffers[n]
        for p in all_params:
            p.grad = None
    return UpdateReport(updated / total, updated, total, per)


# -- feature activation similarity -------------------------------------------------------------------


def word_activations(model, source, word):
    """Post-ReLU conv activations of a rendered word, mean-pooled over its
    windows and flattened."""
    if model.cfg.source_mode != "pixel":
        raise ValueError("activation similarity needs a pixel model")
    seq = tokenize(source.image(word).astype(np.float32) / np.float32(255.0), source.window)
    was = model.training
    model.eval()
    try:
        with T.no_grad():
            act = model.src_embed.activations(seq.windows).data
    finally:
        model.train(was)
    return act.mean(axis=0).reshape(-1).astype(np.float64)


def cosine(a, b):
    """Cosine similarity; two zero vectors count as identical (1.0) and one
    zero vector against a nonzero one as 0.0."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 and nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def activation_similarity(model, source, word_a, word_b):
    return cosine(word_activations(model, source, word_a), word_activations(model, source, word_b))


# -- script coverage --------------------------------------------------------------------------------------


@dataclass
class CoverageReport:
    percent: dict  # n -> coverage in [0, 100]
    token_weighted: bool = False

    def to_dict(self):
        return {"percent": {str(n): v for n, v in self.percent.items()}, "token_weighted": self.token_weighted}


def char_ngrams(texts, n, boundary=True):
    """Character n-gram counts within whitespace-delimited words. With
    ``boundary`` each word is wrapped in ``▁`` markers first; n-grams made
    only of markers are not counted."""
    counts = Counter()
    for line in texts:
        for word in line.split():
            w = f"▁{word}▁" if boundary else word
            counts.update(g for g in (w[i:i + n] for i in range(len(w) - n + 1)) if g.strip("▁"))
    return counts


def script_coverage(pretrain, new, ns=(1, 2, 3), token_weighted=False, boundary=True):
    """Percentage of the new corpus's character n-grams that occur in the
    pretraining corpus, by type (or by occurrence with ``token_weighted``)."""
    out = {}
    for n in ns:
        seen = char_ngrams(pretrain, n, boundary)
        target = char_ngrams(new, n, boundary)
        if not target:
            out[n] = 0.0
            continue
        if token_weighted:
            hit = sum(c for g, c in target.items() if g in seen)
            out[n] = 100.0 * hit / sum(target.values())
        else:
            out[n] = 100.0 * sum(1 for g in target if g in seen) / len(target)
    return CoverageReport(out, token_weighted)


def write_json(obj, path):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")
