"""Corpora, temperature-sampled batching, training and finetuning loops, and
synthetic desk-scale corpora."""

from __future__ import annotations

import json
import logging
import math
import warnings
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint, save_checkpoint
from .model import TokenBatch, TranslationModel, grow_source_embeddings, target_arrays
from .pixeltok import WindowConfig, collate, tokenize
from .sampling import language_distribution
from .subword import PAD, expand_vocabulary, train_segmenter
from .textimage import RenderConfig, load_fonts, quantize, render_sentence

log = logging.getLogger(__name__)


# -- corpora ---------------------------------------------------------------------------------------


@dataclass(frozen=True)
class Example:
    lang: str
    source: str
    target: str


class ParallelCorpus:
    def __init__(self, examples, languages=None):
        self.examples = list(examples)
        langs = list(dict.fromkeys(e.lang for e in self.examples))
        if languages is not None:
            unknown = set(langs) - set(languages)
            if unknown:
                raise ValueError(f"undeclared language tags: {sorted(unknown)}")
            langs = list(languages)
        self.languages = langs
        for e in self.examples:
            if not e.source.strip() or not e.target.strip():
                raise ValueError(f"empty source or target in example {e}")

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, i):
        return self.examples[i]

    def __eq__(self, other):
        return isinstance(other, ParallelCorpus) and self.examples == other.examples

    @property
    def counts(self):
        c = Counter(e.lang for e in self.examples)
        return {lang: c.get(lang, 0) for lang in self.languages}

    def by_language(self):
        out = {lang: [] for lang in self.languages}
        for i, e in enumerate(self.examples):
            out[e.lang].append(i)
        return out

    def sources(self, lang=None):
        return [e.source for e in self.examples if lang is None or e.lang == lang]

    def targets(self, lang=None):
        return [e.target for e in self.examples if lang is None or e.lang == lang]

    def filter(self, langs):
        langs = list(langs)
        return ParallelCorpus([e for e in self.examples if e.lang in langs], langs)

    def sample(self, n, seed=0):
        """Random subset of ``n`` examples (the whole corpus, with a warning, if
        ``n`` exceeds its size)."""
        if n > len(self):
            warnings.warn(f"sample size {n} exceeds corpus size {len(self)}; using the full corpus", stacklevel=2)
            return ParallelCorpus(self.examples, self.languages)
        idx = np.sort(np.random.default_rng(seed).choice(len(self), size=n, replace=False))
        return ParallelCorpus([self.examples[i] for i in idx], self.languages)

    def split(self, n_valid, n_test=0, seed=0):
        """Per-language shuffled split into (train, valid, test)."""
        rng = np.random.default_rng(seed)
        parts = ([], [], [])
        for lang, idx in self.by_language().items():
            idx = np.asarray(idx)[rng.permutation(len(idx))]
            if n_valid + n_test >= len(idx):
                raise ValueError(f"language {lang} has only {len(idx)} examples")
            parts[1].extend(idx[:n_valid])
            parts[2].extend(idx[n_valid:n_valid + n_test])
            parts[0].extend(idx[n_valid + n_test:])
        return tuple(ParallelCorpus([self.examples[i] for i in sorted(p)], self.languages) for p in parts)

    def write_tsv(self, path):
        lines = []
        for e in self.examples:
            for field_ in (e.lang, e.source, e.target):
                if "\t" in field_ or "\n" in field_:
                    raise ValueError(f"tab or newline inside a field: {field_!r}")
            lines.append(f"{e.lang}\t{e.source}\t{e.target}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def read_tsv(cls, path, languages=None):
        examples = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.rstrip("\n")
                if not line:
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(parts)}")
                examples.append(Example(*parts))
        return cls(examples, languages)


# -- configs -------------------------------------------------------------------------------------------


@dataclass
class SamplerConfig:
    T: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.T < 1:
            raise ValueError(f"temperature must be >= 1, got {self.T}")


@dataclass
class TrainConfig:
    batch_tokens: int = 4000
    validate_every: int = 200
    patience: int = 10
    max_steps: int = 100_000
    warmup_steps: int = 4000
    peak_lr: float = 5e-4
    decay: str = "inverse_sqrt"
    seed: int = 0

    def __post_init__(self):
        for name in ("batch_tokens", "validate_every", "patience", "max_steps", "warmup_steps"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.peak_lr <= 0:
            raise ValueError("peak_lr must be positive")


@dataclass
class FinetuneConfig:
    max_epochs: int = 30
    patience: int = 5
    sample_size: int | None = None
    batch_tokens: int = 4000
    warmup_steps: int = 100
    peak_lr: float = 5e-4
    decay: str = "constant"
    expand_size: int = 5000
    seed: int = 0

    def __post_init__(self):
        for name in ("max_epochs", "patience", "batch_tokens", "warmup_steps", "expand_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.sample_size is not None and self.sample_size < 1:
            raise ValueError("sample_size must be positive")


# -- source/target encoders -----------------------------------------------------------------------


class PixelSource:
    """Renders source sentences (memoized as 8-bit images) and cuts windows."""

    mode = "pixel"

    def __init__(self, render=None, window=None, atlas=None):
        self.render = render or RenderConfig()
        self.window = window or WindowConfig(h=self.render.canvas_height)
        if self.window.h != self.render.canvas_height:
            raise ValueError("window height must equal canvas height")
        self.atlas = atlas or load_fonts()
        self._images = {}

    def image(self, text):
        img = self._images.get(text)
        if img is None:
            img = quantize(render_sentence(text, self.atlas, self.render).pixels)
            self._images[text] = img
        return img

    def n_tokens(self, text):
        from .pixeltok import window_count
        return window_count(self.image(text).shape[1], self.window)

    def batch(self, texts, tags=None):
        seqs = [tokenize(self.image(t).astype(np.float32) / np.float32(255.0), self.window) for t in texts]
        return collate(seqs, tags)


class SubwordSource:
    mode = "subword"

    def __init__(self, tokenizer):
        self.tokenizer = tokenizer
        self._ids = {}

    def ids(self, text):
        ids = self._ids.get(text)
        if ids is None:
            ids = self.tokenizer.encode(text)
            if not ids:
                raise ValueError(f"source encodes to no tokens: {text!r}")
            self._ids[text] = ids
        return ids

    def n_tokens(self, text):
        return len(self.ids(text))

    def batch(self, texts, tags=None):
        return TokenBatch.from_lists([self.ids(t) for t in texts])


class TargetEncoder:
    def __init__(self, tokenizer):
        self.tokenizer = tokenizer
        self._ids = {}

    def ids(self, text):
        ids = self._ids.get(text)
        if ids is None:
            ids = self.tokenizer.encode(text)
            self._ids[text] = ids
        return ids

    def decode(self, ids):
        return self.tokenizer.decode(ids)


@dataclass
class Batch:
    indices: list
    source: object
    targets: list
    langs: list

    @property
    def size(self):
        return len(self.indices)


def _pack(corpus, order, source, target, batch_tokens):
    """Group ``order`` into consecutive batches of at most ``batch_tokens``
    source+target tokens (a single oversize example gets its own batch)."""
    batches, cur, used = [], [], 0
    for i in order:
        e = corpus[i]
        cost = source.n_tokens(e.source) + len(target.ids(e.target)) + 1
        if cur and used + cost > batch_tokens:
            batches.append(cur)
            cur, used = [], 0
        cur.append(i)
        used += cost
    if cur:
        batches.append(cur)
    return batches


def _materialize(corpus, idx, source, target):
    ex = [corpus[i] for i in idx]
    langs = [e.lang for e in ex]
    return Batch(list(idx), source.batch([e.source for e in ex], langs), [target.ids(e.target) for e in ex], langs)


def build_batches(corpus, source, target, batch_tokens, sampler=None):
    """Endless stream of temperature-sampled batches.

    Each example slot draws a language from the temperature distribution and
    then takes that language's next example from a per-language shuffled
    cycle. Examples are added until the source+target token budget would be
    exceeded; every batch holds at least one example.
    """
    sampler = sampler or SamplerConfig()
    if batch_tokens < 1:
        raise ValueError("batch_tokens must be positive")
    if not len(corpus):
        raise ValueError("corpus is empty")
    probs = language_distribution(corpus.counts, sampler.T)
    langs = list(probs)
    p = np.array([probs[l] for l in langs])
    rng = np.random.default_rng(sampler.seed)
    pools = corpus.by_language()
    cursors = {l: len(pools[l]) for l in langs}
    perms = {l: None for l in langs}
    pending = None
    while True:
        cur, used = [], 0
        while True:
            if pending is None:
                lang = langs[int(rng.choice(len(langs), p=p))]
                if cursors[lang] >= len(pools[lang]):
                    perms[lang] = np.asarray(pools[lang])[rng.permutation(len(pools[lang]))]
                    cursors[lang] = 0
                pending = int(perms[lang][cursors[lang]])
                cursors[lang] += 1
            e = corpus[pending]
            cost = source.n_tokens(e.source) + len(target.ids(e.target)) + 1
            if cur and used + cost > batch_tokens:
                break
            cur.append(pending)
            used += cost
            pending = None
        yield _materialize(corpus, cur, source, target)


def epoch_batches(corpus, source, target, batch_tokens, rng=None):
    """One pass over ``corpus`` (shuffled when ``rng`` is given)."""
    order = np.arange(len(corpus)) if rng is None else rng.permutation(len(corpus))
    for idx in _pack(corpus, order, source, target, batch_tokens):
        yield _materialize(corpus, idx, source, target)


def eval_batches(corpus, source, target, batch_tokens):
    """Length-sorted deterministic batches for evaluation."""
    order = sorted(range(len(corpus)), key=lambda i: (source.n_tokens(corpus[i].source), i))
    for idx in _pack(corpus, order, source, target, batch_tokens):
        yield _materialize(corpus, idx, source, target)


# -- evaluation helpers ---------------------------------------------------------------------------------


def perplexity(model, corpus, source, target, batch_tokens=4000):
    """exp(mean target-token NLL) without label smoothing, in eval mode."""
    was = model.training
    model.eval()
    total, count = 0.0, 0
    try:
        with T.no_grad():
            for b in eval_batches(corpus, source, target, batch_tokens):
                tgt_in, tgt_out = target_arrays(b.targets)
                logits = model.forward_logits(b.source, tgt_in).data.astype(np.float64)
                m = logits.max(axis=-1, keepdims=True)
                logz = (m + np.log(np.exp(logits - m).sum(axis=-1, keepdims=True)))[..., 0]
                picked = np.take_along_axis(logits, tgt_out[..., None], axis=-1)[..., 0]
                keep = tgt_out != PAD
                total += float(((logz - picked) * keep).sum())
                count += int(keep.sum())
    finally:
        model.train(was)
    return math.exp(min(total / max(count, 1), 700.0))


def translate_corpus(model, corpus, source, target, batch_tokens=4000, max_len=None, beam=1):
    """Return ``(hypothesis id lists, hypothesis strings)`` in corpus order."""
    from .model import translate

    hyps = [None] * len(corpus)
    for b in eval_batches(corpus, source, target, batch_tokens):
        limit = max_len or (2 * max(len(t) for t in b.targets) + 10)
        out = translate(model, b.source, limit, beam)
        for i, ids in zip(b.indices, out):
            hyps[i] = ids
    return hyps, [target.decode(h) for h in hyps]


# -- training ---------------------------------------------------------------------------------------------


class TrainingDiverged(FloatingPointError):
    pass


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list = field(default_factory=list)
    stop_reason: str = ""
    best_valid_ppl: float = float("inf")


def _snapshot(model):
    return {n: p.data.copy() for n, p in model.named_parameters()}, {n: b.copy() for n, b in model.named_buffers()}


def _restore(model, snap):
    params, buffers = snap
    for n, p in model.named_parameters():
        p.data[...] = params[n]
    for n, b in model.named_buffers():
        b[...] = buffers[n]


def _step(model, opt, batch):
    opt.zero_grad()
    T.get_tape().clear()
    loss = model.loss(batch.source, batch.targets)
    value = float(loss.data)
    if not math.isfinite(value):
        T.get_tape().clear()
        raise TrainingDiverged(f"loss became {value} at step {opt.t + 1} (lr {opt.lr:.3g})")
    T.backward(loss, leaves=opt.params)
    lr = T.adam_step(opt)
    return value, lr


def train(model, train_corpus, valid_corpus, source, target, cfg=None, sampler=None,
          resume=None, out_dir=None, log_path=None, tokenizers=None, render=None):
    """Train with temperature-sampled batches and early stopping on validation
    perplexity. The model ends up holding the best parameters seen.

    ``resume`` is a Checkpoint whose optimizer state and step counter are
    continued. With ``out_dir`` the best checkpoint is written there at every
    improvement.
    """
    cfg = cfg or TrainConfig()
    sampler = sampler or SamplerConfig(seed=cfg.seed)
    if resume is not None and resume.optimizer is not None:
        opt = resume.optimizer
        step0, history = resume.step, list(resume.history)
    else:
        opt = T.AdamState(model.parameters(), T.WarmupSchedule(cfg.warmup_steps, cfg.peak_lr, cfg.decay))
        step0, history = 0, []
    model.reseed(cfg.seed + step0)
    # fast-forward the stream so a resumed run sees the batches an uninterrupted run would
    stream = build_batches(train_corpus, source, target, cfg.batch_tokens, sampler)
    for _ in range(step0):
        next(stream)
    best = min((h["valid_ppl"] for h in history), default=float("inf"))
    best_snap = _snapshot(model)
    bad = 0
    log_lines = []
    losses = []
    reason = "max_steps"
    log_fh = open(log_path, "a", encoding="utf-8") if log_path else None
    model.train()
    try:
        step = step0
        while step < cfg.max_steps:
            batch = next(stream)
            loss, lr = _step(model, opt, batch)
            step += 1
            losses.append(loss)
            if step % cfg.validate_every == 0 or step == cfg.max_steps:
                ppl = perplexity(model, valid_corpus, source, target, cfg.batch_tokens)
                entry = {"step": step, "loss": float(np.mean(losses)), "lr": lr, "valid_ppl": ppl}
                losses = []
                history.append(entry)
                log_lines.append(entry)
                if log_fh:
                    log_fh.write(json.dumps(entry, sort_keys=True) + "\n")
                    log_fh.flush()
                if ppl < best:
                    best, bad = ppl, 0
                    best_snap = _snapshot(model)
                    if out_dir is not None:
                        save_checkpoint(out_dir, Checkpoint(model, opt, step, history, tokenizers or {}, render))
                else:
                    bad += 1
                    if bad >= cfg.patience:
                        reason = "patience"
                        break
    finally:
        if log_fh:
            log_fh.close()
    _restore(model, best_snap)
    ckpt = Checkpoint(model, opt, step, history, tokenizers or {}, render)
    return TrainResult(ckpt, log_lines, reason, best)


def finetune(ckpt, train_corpus, valid_corpus, mode, cfg=None, source=None, target=None):
    """Finetune a trained checkpoint on a new language.

    ``direct`` keeps every parameter shape (pixel models always; subword
    models reuse the old vocabulary). ``vocab_expand`` trains a segmenter on
    the new sources, appends unseen tokens to the source vocabulary and grows
    the embedding matrix to match. Epoch-based with early stopping on
    validation perplexity; returns ``(Checkpoint, TrainResult)``.
    """
    cfg = cfg or FinetuneConfig()
    model = ckpt.model
    if mode not in ("direct", "vocab_expand"):
        raise ValueError(f"unknown finetuning mode {mode!r}")
    if model.cfg.source_mode == "pixel" and mode == "vocab_expand":
        raise ValueError("pixel models are vocabulary-free")
    if cfg.sample_size is not None:
        train_corpus = train_corpus.sample(cfg.sample_size, cfg.seed)
    target = target or TargetEncoder(ckpt.tokenizers["tgt"])
    tokenizers = dict(ckpt.tokenizers)
    shapes_before = {n: p.shape for n, p in model.named_parameters()}

    if model.cfg.source_mode == "pixel":
        source = source or PixelSource(ckpt.render or RenderConfig(), model.cfg.window)
    elif mode == "direct":
        source = source or SubwordSource(ckpt.tokenizers["src"])
    else:
        base = ckpt.tokenizers["src"]
        size = cfg.expand_size
        try:
            addition = train_segmenter(train_corpus.sources(), size, base.marker)
        except ValueError:
            # tiny corpora: fall back to the largest size the alphabet allows
            alphabet = {ch for s in train_corpus.sources() for ch in base.marker.join([""] + s.split())}
            addition = train_segmenter(train_corpus.sources(), len(alphabet) + 5, base.marker)
        expanded, plan = expand_vocabulary(base, addition)
        grow_source_embeddings(model, plan, seed=cfg.seed)
        tokenizers["src"] = expanded
        source = SubwordSource(expanded)

    if mode == "direct":
        after = {n: p.shape for n, p in model.named_parameters()}
        assert after == shapes_before, "direct finetuning changed parameter shapes"

    opt = T.AdamState(model.parameters(), T.WarmupSchedule(cfg.warmup_steps, cfg.peak_lr, cfg.decay))
    rng = np.random.default_rng(cfg.seed)
    model.reseed(cfg.seed)
    model.train()
    best = perplexity(model, valid_corpus, source, target, cfg.batch_tokens)
    history = [{"epoch": 0, "step": 0, "loss": None, "lr": 0.0, "valid_ppl": best}]
    best_snap = _snapshot(model)
    bad, step, reason = 0, 0, "max_epochs"
    for epoch in range(1, cfg.max_epochs + 1):
        losses = []
        lr = opt.lr
        for batch in epoch_batches(train_corpus, source, target, cfg.batch_tokens, rng):
            loss, lr = _step(model, opt, batch)
            losses.append(loss)
            step += 1
        ppl = perplexity(model, valid_corpus, source, target, cfg.batch_tokens)
        history.append({"epoch": epoch, "step": step, "loss": float(np.mean(losses)), "lr": lr, "valid_ppl": ppl})
        if ppl < best:
            best, bad = ppl, 0
            best_snap = _snapshot(model)
        else:
            bad += 1
            if bad >= cfg.patience:
                reason = "patience"
                break
    _restore(model, best_snap)
    out = Checkpoint(model, opt, step, history, tokenizers, ckpt.render, {"finetune_mode": mode})
    return out, TrainResult(out, history, reason, best)


# -- synthetic corpora ---------------------------------------------------------------------------------------

LEXICON = (
    "the of and to in is was that for on are with as his they be at one have this from or had by "
    "word but what some we can out other were all there when up use your how said an each she which "
    "do their time if will way about many then them write would like so these her long make thing see "
    "him two has look more day could go come did number sound no most people my over know water than "
    "call first who may down side been now find any new work part take get place made live where after "
    "back little only round man year came show every good me give our under name very through just form "
    "sentence great think say help low line differ turn cause much mean before move right boy old too "
    "same tell does set three want air well also play small end put home read hand port large spell add "
    "even land here must big high such follow act why ask men change went light kind off need house "
    "picture try us again animal point mother world near build self earth father head stand own page "
    "should country found answer school grow study still learn plant cover food sun four between state "
    "keep eye never last let thought city tree cross farm hard start might story saw far sea draw left "
    "late run while press close night real life few north open seem together next white children begin "
    "got walk example ease paper group always music those both mark often letter until mile river car "
    "feet care second book carry took science eat room friend began idea fish mountain stop once base "
    "hear horse cut sure watch color face wood main enough plain girl usual young ready above ever red "
    "list though feel talk bird soon body dog family direct pose leave song measure door product black "
    "short numeral class wind question happen complete ship area half rock order fire south problem "
    "piece told knew pass since top whole king space heard best hour better true during hundred five "
    "remember step early hold west ground interest reach fast verb sing listen six table travel less "
    "morning ten simple several vowel toward war lay against pattern slow center love person money "
    "serve appear road map rain rule govern pull cold notice voice unit power town fine certain fly "
    "fall lead cry dark machine note wait plan figure star box noun field rest correct able pound done "
    "beauty drive stood contain front teach week final gave green quick develop ocean warm free minute "
    "strong special mind behind clear tail produce fact street inch multiply nothing course stay wheel "
    "full force blue object decide surface deep moon island foot system busy test record boat common "
    "gold possible plane stead dry wonder laugh thousand ago ran check game shape equate hot miss "
    "brought heat snow tire bring yes distant fill east paint language among"
).split()

SCRIPT_MAPS = {
    "latin": "abcdefghijklmnopqrstuvwxyz",
    "cyrillic": "абцдефгхийклмнопярстувшжыз",
    "greek": "αβψδεφγηιξκλμνοπθρστυϑωχϒζ",
    "hebrew": "אבצדעףגהיחכלמנופקרסתטןשךםז",
}

_ONES = "zero one two three four five six seven eight nine ten eleven twelve thirteen fourteen fifteen sixteen seventeen eighteen nineteen".split()
_TENS = "_ _ twenty thirty forty fifty sixty seventy eighty ninety".split()


def number_words(n):
    if n < 20:
        return _ONES[n]
    if n < 100:
        return _TENS[n // 10] + ("" if n % 10 == 0 else " " + _ONES[n % 10])
    rest = n % 100
    return _ONES[n // 100] + " hundred" + ("" if rest == 0 else " " + number_words(rest))


def transliterate(text, script):
    table = str.maketrans(SCRIPT_MAPS["latin"], SCRIPT_MAPS[script])
    return text.translate(table)


def untransliterate(text, script):
    table = str.maketrans(SCRIPT_MAPS[script], SCRIPT_MAPS["latin"])
    return text.translate(table)


def make_synthetic_corpus(scripts, size, task="transliterate", seed=0, min_words=2, max_words=4,
                          lexicon=LEXICON, zipf=1.0, lexicon_size=None):
    """Deterministic parallel corpus with English targets.

    ``transliterate``: the source is the target sentence written in the
    script through a 1:1 letter map (Latin is the identity, i.e. a copy
    task). ``copy``: source equals target for every language tag.
    ``number-words``: the source is a list of numerals, the target spells
    them in English. Words are drawn from a Zipf distribution over the
    lexicon (its first ``lexicon_size`` words, if given) so that token
    frequencies are skewed.
    """
    if size < 1:
        raise ValueError("size per language must be positive")
    scripts = list(scripts)
    unknown = [s for s in scripts if s not in SCRIPT_MAPS]
    if unknown:
        raise ValueError(f"unknown scripts {unknown}; choose from {sorted(SCRIPT_MAPS)}")
    if task not in ("copy", "transliterate", "number-words"):
        raise ValueError(f"unknown task {task!r}")
    if not 1 <= min_words <= max_words:
        raise ValueError("need 1 <= min_words <= max_words")
    lexicon = list(lexicon)[:lexicon_size]
    if not lexicon:
        raise ValueError("empty lexicon")
    ranks = np.arange(1, len(lexicon) + 1, dtype=np.float64)
    p = ranks ** -zipf
    p /= p.sum()
    examples = []
    for k, script in enumerate(scripts):
        rng = np.random.default_rng([seed, k])
        for _ in range(size):
            n = int(rng.integers(min_words, max_words + 1))
            if task == "number-words":
                nums = rng.integers(0, 1000, size=n)
                src = " ".join(str(int(x)) for x in nums)
                tgt = " ".join(number_words(int(x)) for x in nums)
            else:
                tgt = " ".join(lexicon[int(i)] for i in rng.choice(len(lexicon), size=n, p=p))
                src = tgt if task == "copy" else transliterate(tgt, script)
            examples.append(Example(script, src, tgt))
    return ParallelCorpus(examples, scripts)


def token_accuracy(hyps, refs):
    """Position-wise token matches over the longer of each pair, corpus-pooled."""
    if len(hyps) != len(refs):
        raise ValueError(f"{len(hyps)} hypotheses vs {len(refs)} references")
    hits = total = 0
    for h, r in zip(hyps, refs):
        hits += sum(a == b for a, b in zip(h, r))
        total += max(len(h), len(r))
    return hits / total if total else 1.0


def config_dict(obj):
    return asdict(obj)
