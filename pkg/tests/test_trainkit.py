import json
import warnings

import numpy as np
import pytest

from pixelrep.checkpoint import Checkpoint, load_checkpoint
from pixelrep.model import ModelConfig, TranslationModel, count_params
from pixelrep.pixeltok import WindowConfig
from pixelrep.sampling import language_distribution
from pixelrep.subword import train_segmenter
from pixelrep.trainkit import (
    SCRIPT_MAPS,
    Example,
    FinetuneConfig,
    ParallelCorpus,
    PixelSource,
    SamplerConfig,
    SubwordSource,
    TargetEncoder,
    TrainConfig,
    build_batches,
    eval_batches,
    finetune,
    make_synthetic_corpus,
    perplexity,
    token_accuracy,
    train,
    translate_corpus,
    transliterate,
    untransliterate,
    number_words,
)


class FixedCost:
    """Source stub where every sentence costs a fixed number of tokens."""

    def __init__(self, n):
        self.n = n

    def n_tokens(self, text):
        return self.n

    def batch(self, texts, tags=None):
        return list(texts)


class NoTarget:
    def ids(self, text):
        return []


def tiny_setup(n=40, seed=0):
    corpus = make_synthetic_corpus(["latin", "cyrillic"], n, seed=seed, max_words=2)
    tr, va, _ = corpus.split(4, 0, seed=1)
    tok = train_segmenter(tr.targets(), 60)
    stok = train_segmenter(tr.sources(), 80)
    cfg = ModelConfig(source_mode="subword", V_src=stok.vocab.size, V_tgt=tok.vocab.size, enc_layers=1,
                      dec_layers=1, d_model=16, ff_width=32, heads=2, dropout=0.0)
    return tr, va, SubwordSource(stok), TargetEncoder(tok), cfg, {"src": stok, "tgt": tok}


# -- corpus ---------------------------------------------------------------------------------------


def test_corpus_validation():
    with pytest.raises(ValueError, match="undeclared"):
        ParallelCorpus([Example("xx", "a", "b")], ["en"])
    with pytest.raises(ValueError, match="empty"):
        ParallelCorpus([Example("en", " ", "b")])


def test_tsv_round_trip(tmp_path):
    corpus = make_synthetic_corpus(["latin", "hebrew"], 5)
    corpus.write_tsv(tmp_path / "c.tsv")
    assert ParallelCorpus.read_tsv(tmp_path / "c.tsv") == corpus


def test_sample_larger_than_corpus_warns():
    corpus = make_synthetic_corpus(["latin"], 5)
    with pytest.warns(UserWarning, match="full corpus"):
        assert len(corpus.sample(50)) == 5
    assert len(corpus.sample(3)) == 3


def test_split_is_per_language():
    tr, va, te = make_synthetic_corpus(["latin", "greek"], 20).split(3, 2, seed=0)
    assert va.counts == {"latin": 3, "greek": 3}
    assert te.counts == {"latin": 2, "greek": 2}
    assert tr.counts == {"latin": 15, "greek": 15}


# -- synthetic data -----------------------------------------------------------------------------------


def test_synthetic_size_and_determinism():
    with pytest.raises(ValueError):
        make_synthetic_corpus(["latin"], 0)
    a = make_synthetic_corpus(["latin", "cyrillic"], 30, seed=4)
    b = make_synthetic_corpus(["latin", "cyrillic"], 30, seed=4)
    assert a == b and len(a) == 60


def test_transliteration_is_recoverable():
    corpus = make_synthetic_corpus(list(SCRIPT_MAPS), 50)
    for e in corpus:
        assert untransliterate(e.source, e.lang) == e.target
    for script, letters in SCRIPT_MAPS.items():
        assert len(set(letters)) == 26
        assert transliterate("abc", script) == letters[:3]


def test_number_words():
    assert number_words(0) == "zero"
    assert number_words(42) == "forty two"
    assert number_words(310) == "three hundred ten"
    corpus = make_synthetic_corpus(["latin"], 3, task="number-words")
    assert all(e.source.replace(" ", "").isdigit() for e in corpus)


def test_token_accuracy():
    assert token_accuracy([[1, 2, 3]], [[1, 2, 3]]) == 1.0
    assert token_accuracy([[1, 9]], [[1, 2, 3]]) == pytest.approx(1 / 3)
    assert token_accuracy([[1, 2, 3, 4]], [[1, 2]]) == pytest.approx(0.5)


# -- batching -----------------------------------------------------------------------------------------


def test_budget_limits_batch_size():
    corpus = ParallelCorpus([Example("en", f"s{i}", "t") for i in range(20)])
    stream = build_batches(corpus, FixedCost(3), NoTarget(), batch_tokens=10)  # 3 + 0 + 1 = 4 per example
    for _ in range(10):
        assert next(stream).size <= 2


def test_oversize_example_gets_own_batch():
    corpus = ParallelCorpus([Example("en", "s", "t")] * 3)
    stream = build_batches(corpus, FixedCost(50), NoTarget(), batch_tokens=10)
    assert next(stream).size == 1


def test_language_frequencies_match_temperature():
    corpus = ParallelCorpus([Example("a", "x", "y")] * 100 + [Example("b", "x", "y")] * 6400)
    stream = build_batches(corpus, FixedCost(1), NoTarget(), batch_tokens=2, sampler=SamplerConfig(5, seed=3))
    langs = [next(stream).langs[0] for _ in range(10_000)]
    p = language_distribution(corpus.counts, 5)
    assert abs(langs.count("a") / 10_000 - p["a"]) < 0.02


def test_same_seed_same_batches():
    corpus = make_synthetic_corpus(["latin", "greek"], 30)
    a = build_batches(corpus, FixedCost(2), NoTarget(), 12, SamplerConfig(seed=9))
    b = build_batches(corpus, FixedCost(2), NoTarget(), 12, SamplerConfig(seed=9))
    for _ in range(20):
        assert next(a).indices == next(b).indices


def test_eval_batches_cover_everything_once():
    corpus = make_synthetic_corpus(["latin"], 25)
    seen = [i for b in eval_batches(corpus, FixedCost(2), NoTarget(), 9) for i in b.indices]
    assert sorted(seen) == list(range(25))


def test_pixel_source_batches(atlas):
    src = PixelSource(atlas=atlas)
    batch = src.batch(["hello", "a much longer sentence"], ["en", "en"])
    assert batch.data.shape[2:] == (32, 32)
    assert (~batch.pad_mask[1]).sum() == src.n_tokens("a much longer sentence")
    assert batch.data.max() <= 1.0


# -- training -------------------------------------------------------------------------------------------


def test_patience_stops_after_two_validations():
    tr, va, src, tgt, cfg, toks = tiny_setup()
    model = TranslationModel(cfg)
    # a learning rate this large makes validation worse after the first check
    res = train(model, tr, va, src, tgt, TrainConfig(batch_tokens=60, validate_every=2, patience=1,
                                                     max_steps=50, warmup_steps=1, peak_lr=5.0, decay="constant"))
    ppls = [h["valid_ppl"] for h in res.log]
    if res.stop_reason == "patience":
        assert len(res.log) == 2 and ppls[1] >= ppls[0]
    else:
        pytest.fail(f"expected early stop, got {res.stop_reason} with {ppls}")


def test_training_reduces_perplexity():
    tr, va, src, tgt, cfg, _ = tiny_setup()
    model = TranslationModel(cfg)
    before = perplexity(model, va, src, tgt)
    res = train(model, tr, va, src, tgt, TrainConfig(batch_tokens=80, validate_every=20, max_steps=60,
                                                     warmup_steps=10, peak_lr=3e-3))
    assert res.best_valid_ppl < before
    assert perplexity(model, va, src, tgt) == pytest.approx(res.best_valid_ppl)


def test_resume_continues_steps_and_matches_uninterrupted(tmp_path):
    tr, va, src, tgt, cfg, toks = tiny_setup()
    tcfg = dict(batch_tokens=80, validate_every=5, patience=100, warmup_steps=5, peak_lr=1e-3)
    full = TranslationModel(cfg, seed=1)
    train(full, tr, va, src, tgt, TrainConfig(max_steps=10, **tcfg))

    half = TranslationModel(cfg, seed=1)
    r1 = train(half, tr, va, src, tgt, TrainConfig(max_steps=5, **tcfg), out_dir=tmp_path / "ck", tokenizers=toks)
    ckpt = load_checkpoint(tmp_path / "ck")
    assert ckpt.step == 5
    r2 = train(ckpt.model, tr, va, src, tgt, TrainConfig(max_steps=10, **tcfg), resume=ckpt)
    assert r2.checkpoint.step == 10
    assert [h["step"] for h in r2.checkpoint.history] == [5, 10]
    for (n, p), (_, q) in zip(full.named_parameters(), ckpt.model.named_parameters()):
        np.testing.assert_allclose(p.data, q.data, rtol=1e-5, atol=1e-6, err_msg=n)


def test_log_file_is_json_lines(tmp_path):
    tr, va, src, tgt, cfg, _ = tiny_setup()
    train(TranslationModel(cfg), tr, va, src, tgt, TrainConfig(batch_tokens=80, validate_every=3, max_steps=6,
                                                               warmup_steps=2), log_path=tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [3, 6]
    assert set(rows[0]) == {"step", "loss", "lr", "valid_ppl"}


def test_translate_corpus_shapes():
    tr, va, src, tgt, cfg, _ = tiny_setup()
    ids, strings = translate_corpus(TranslationModel(cfg), va, src, tgt, max_len=5)
    assert len(ids) == len(strings) == len(va)
    assert all(len(h) <= 5 for h in ids)


# -- finetuning ------------------------------------------------------------------------------------------


def test_direct_finetune_keeps_shapes():
    tr, va, src, tgt, cfg, toks = tiny_setup()
    model = TranslationModel(cfg)
    before = count_params(model.cfg)
    new = make_synthetic_corpus(["greek"], 20, seed=5, max_words=2)
    ntr, nva, _ = new.split(4, 0)
    out, res = finetune(Checkpoint(model, tokenizers=toks), ntr, nva, "direct",
                        FinetuneConfig(max_epochs=2, batch_tokens=80))
    assert count_params(out.model.cfg) == before
    assert res.log[0]["epoch"] == 0 and len(res.log) == 3


def test_vocab_expand_grows_embeddings():
    tr, va, src, tgt, cfg, toks = tiny_setup()
    model = TranslationModel(cfg)
    before = count_params(model.cfg)
    old_rows = model.src_embed.weight.data.copy()
    new = make_synthetic_corpus(["hebrew"], 30, seed=5, max_words=2)
    ntr, nva, _ = new.split(4, 0)
    out, _ = finetune(Checkpoint(model, tokenizers=toks), ntr, nva, "vocab_expand",
                      FinetuneConfig(max_epochs=1, batch_tokens=80, expand_size=40))
    grown = out.model.cfg.V_src - cfg.V_src
    assert grown > 0
    assert count_params(out.model.cfg) - before == grown * cfg.d_model
    assert out.tokenizers["src"].vocab.token_of[: cfg.V_src] == toks["src"].vocab.token_of


def test_pixel_expand_is_rejected(atlas):
    cfg = ModelConfig(source_mode="pixel", enc_layers=1, dec_layers=1, d_model=8, ff_width=16, heads=2,
                      V_tgt=10, conv_channels=1)
    corpus = make_synthetic_corpus(["greek"], 6)
    tok = train_segmenter(corpus.targets(), 30)
    with pytest.raises(ValueError, match="vocabulary-free"):
        finetune(Checkpoint(TranslationModel(cfg), tokenizers={"tgt": tok}), corpus, corpus, "vocab_expand")


def test_finetune_sample_size_warns_when_too_large():
    tr, va, src, tgt, cfg, toks = tiny_setup()
    with pytest.warns(UserWarning, match="full corpus"):
        finetune(Checkpoint(TranslationModel(cfg), tokenizers=toks), tr, va, "direct",
                 FinetuneConfig(max_epochs=1, batch_tokens=80, sample_size=10_000))
