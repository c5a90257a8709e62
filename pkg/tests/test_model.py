import numpy as np
import pytest

from pixelrep import tensor as T
from pixelrep.model import (
    ModelConfig,
    MultiHeadAttention,
    TokenBatch,
    TranslationModel,
    beam_search,
    count_params,
    enumerate_params,
    greedy_decode,
    grow_source_embeddings,
    mean_pooled_repr,
    sequence_score,
    target_arrays,
    translate,
)
from pixelrep.pixeltok import PixelBatch, TokenSequence, WindowConfig, collate
from pixelrep.subword import BOS, EOS, PAD
from pixelrep.subword import GrowthPlan
from pixelrep.tensor import Tensor


def micro(mode, **kw):
    base = dict(source_mode=mode, enc_layers=2, dec_layers=2, d_model=16, ff_width=32, heads=4, V_tgt=12,
                conv_channels=2, dropout=0.0, window=WindowConfig(8, 8, 4))
    if mode == "subword":
        base["V_src"] = 20
    base.update(kw)
    return ModelConfig(**base)


def pixel_batch(rng, lengths, extra_pad=0, h=8, w=8):
    seqs = [TokenSequence(rng.random((n, h, w)).astype(np.float32), 0) for n in lengths]
    batch = collate(seqs)
    if extra_pad:
        B, L = batch.pad_mask.shape
        data = np.zeros((B, L + extra_pad, h, w), np.float32)
        data[:, :L] = batch.data
        pad = np.ones((B, L + extra_pad), bool)
        pad[:, :L] = batch.pad_mask
        batch = PixelBatch(data, pad, batch.lang_tags)
    return batch


# -- configuration ----------------------------------------------------------------------------


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=30, heads=4)
    with pytest.raises(ValueError):
        ModelConfig(source_mode="subword")
    with pytest.raises(ValueError):
        ModelConfig(source_mode="pixel", V_src=100)
    cfg = micro("pixel")
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_conv_output_shape():
    assert ModelConfig().conv_out_hw == (30, 32)


@pytest.mark.parametrize("mode", ["pixel", "subword"])
@pytest.mark.parametrize("tie", [False, True])
def test_closed_form_equals_enumeration(mode, tie):
    cfg = micro(mode, tie_target_embeddings=tie)
    assert count_params(cfg) == enumerate_params(TranslationModel(cfg, init="empty"))


def test_pixel_model_has_no_vocabulary_parameters():
    a = count_params(micro("pixel"))
    b = count_params(micro("pixel", V_tgt=12))
    assert a == b
    names = [n for n, _ in TranslationModel(micro("pixel")).named_parameters()]
    assert all("src_embed" not in n or "conv" in n or "bn" in n or "proj" in n for n in names)


# -- attention ----------------------------------------------------------------------------------


def test_hand_computed_attention():
    attn = MultiHeadAttention(2, 1)
    for lin in (attn.q, attn.k, attn.v, attn.o):
        lin.weight.data[:] = np.eye(2)
        lin.bias.data[:] = 0.0
    x = Tensor(np.array([[[1.0, 0.0], [0.0, 1.0]]]), dtype=np.float64)
    out = attn(x, x).data[0]
    a = np.exp(1 / np.sqrt(2))
    row0 = np.array([a, 1.0]) / (a + 1.0)
    assert np.allclose(out[0], row0)
    assert np.allclose(out[1], row0[::-1])


# -- masking --------------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["pixel", "subword"])
@pytest.mark.parametrize("training", [False, True])
def test_source_pad_invariance_is_exact(mode, training, rng):
    model = TranslationModel(micro(mode), seed=3)
    model.train(training)
    tgt_in = np.array([[BOS, 5, 6, 7]])
    outs = []
    for extra in (0, 1, 4, 9):
        if mode == "pixel":
            src = pixel_batch(np.random.default_rng(0), [3], extra)
        else:
            ids = np.zeros((1, 3 + extra), np.int64)
            ids[0, :3] = [4, 9, 11]
            src = TokenBatch(ids, ids == PAD)
        with T.no_grad():
            outs.append(model.forward_logits(src, tgt_in).data)
    for o in outs[1:]:
        assert np.array_equal(o, outs[0])


def test_permuting_pad_windows_is_harmless(rng):
    model = TranslationModel(micro("pixel"), seed=1).eval()
    src = pixel_batch(rng, [4, 2])
    memory, _ = model.encode_source(src)
    shuffled = PixelBatch(src.data.copy(), src.pad_mask.copy(), src.lang_tags)
    shuffled.data[1, 2:] = rng.random(shuffled.data[1, 2:].shape)  # pad content must not matter
    memory2, _ = model.encode_source(shuffled)
    assert np.allclose(memory.data[1, :2], memory2.data[1, :2])


def test_decoder_is_causal(rng):
    model = TranslationModel(micro("subword"), seed=2).eval()
    src = TokenBatch.from_lists([[4, 5, 6]])
    memory, pad = model.encode_source(src)
    with T.no_grad():
        a = model.decode(memory, pad, np.array([[BOS, 5, 6, 7]])).data
        b = model.decode(memory, pad, np.array([[BOS, 5, 9, 9]])).data
    assert np.allclose(a[0, :2], b[0, :2])
    assert not np.allclose(a[0, 2], b[0, 2])


def test_bos_prefix_logits_shape():
    model = TranslationModel(micro("subword"))
    memory, pad = model.encode_source(TokenBatch.from_lists([[4, 5]]))
    assert model.decode_step(memory, pad, [[BOS]]).shape == (1, 12)


def test_window_shape_check(rng):
    model = TranslationModel(micro("pixel"))
    with pytest.raises(ValueError, match="window shape"):
        model.embed_source(pixel_batch(rng, [2], h=8, w=6))
    with pytest.raises(TypeError):
        model.embed_source(TokenBatch.from_lists([[4]]))


# -- embedders --------------------------------------------------------------------------------------


def test_blank_windows_share_one_embedding(rng):
    model = TranslationModel(micro("pixel")).eval()
    src = pixel_batch(rng, [2, 5])
    with T.no_grad():
        emb, pad = model.embed_source(src)
    assert np.array_equal(emb.data[0, 2], emb.data[0, 4])


def test_same_glyphs_same_embedding(rng):
    model = TranslationModel(micro("pixel")).eval()
    w = rng.random((8, 8)).astype(np.float32)
    a = TokenSequence(np.stack([w, rng.random((8, 8)).astype(np.float32)]), 0)
    b = TokenSequence(np.stack([rng.random((8, 8)).astype(np.float32), w]), 0)
    with T.no_grad():
        ea, _ = model.embed_source(collate([a]))
        eb, _ = model.embed_source(collate([b]))
    u, v = ea.data[0, 0], eb.data[0, 1]
    assert np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v)) == pytest.approx(1.0)


def test_subword_lookup_and_sparse_grad():
    model = TranslationModel(micro("subword"))
    emb = model.src_embed
    assert np.array_equal(emb(np.array([0])).data[0], emb.weight.data[0])
    loss = model.loss(TokenBatch.from_lists([[4, 7, 7]]), [[5, 6]])
    T.backward(loss, leaves=model.parameters())
    rows = np.nonzero(np.abs(emb.weight.grad).sum(axis=1))[0]
    assert rows.tolist() == [4, 7]


def test_mean_pooled_repr(rng):
    model = TranslationModel(micro("subword"))
    one = mean_pooled_repr(model, TokenBatch.from_lists([[7]]))
    assert np.allclose(one[0], model.src_embed.weight.data[7] * 4.0)
    padded = TokenBatch(np.array([[7, 8, 0, 0]]), np.array([[False, False, True, True]]))
    plain = TokenBatch.from_lists([[7, 8]])
    assert np.allclose(mean_pooled_repr(model, padded), mean_pooled_repr(model, plain))
    dup = mean_pooled_repr(model, TokenBatch.from_lists([[7, 8], [7, 8]]))
    assert np.array_equal(dup[0], dup[1])


# -- gradients ------------------------------------------------------------------------------------


@pytest.mark.parametrize("mode", ["pixel", "subword"])
def test_micro_model_grad_check(mode):
    with T.precision(np.float64):
        cfg = micro(mode, enc_layers=1, dec_layers=1, d_model=8, ff_width=16, heads=2, V_tgt=7,
                    label_smoothing=0.1, window=WindowConfig(6, 4, 2), V_src=9 if mode == "subword" else None)
        model = TranslationModel(cfg, seed=1)
        model.eval()
        r = np.random.default_rng(0)
        if mode == "pixel":
            src = collate([TokenSequence(r.random((3, 6, 4)), 0), TokenSequence(r.random((2, 6, 4)), 0)])
        else:
            src = TokenBatch.from_lists([[4, 5, 6], [7, 8]])
        err = T.grad_check(lambda: model.loss(src, [[4, 5], [6]]), model.parameters(), max_coords=12, rng=r)
    assert err < 1e-4


def test_target_arrays():
    tin, tout = target_arrays([[5, 6], [7]])
    assert tin.tolist() == [[BOS, 5, 6], [BOS, 7, PAD]]
    assert tout.tolist() == [[5, 6, EOS], [7, EOS, PAD]]


# -- decoding ----------------------------------------------------------------------------------------


def test_greedy_is_argmax_chain():
    model = TranslationModel(micro("subword"), seed=5)
    src = TokenBatch.from_lists([[4, 5, 6]])
    hyp = greedy_decode(model, src, 6)[0]
    memory, pad = model.encode_source(src)
    prefix = [BOS]
    for t in hyp:
        assert int(model.decode_step(memory, pad, [prefix]).argmax()) == t
        prefix.append(t)


@pytest.mark.parametrize("seed", range(3))
def test_beam_never_below_greedy(seed):
    model = TranslationModel(micro("subword"), seed=seed)
    src = TokenBatch.from_lists([[4, 5, 6, 9]])
    greedy = translate(model, src, max_len=8, beam=1)[0]
    beam = beam_search(model, src, 8, beam=3)
    assert sequence_score(model, src, beam) >= sequence_score(model, src, greedy) - 1e-9


def test_empty_source_error():
    model = TranslationModel(micro("subword"))
    with pytest.raises(ValueError, match="empty source"):
        translate(model, TokenBatch(np.zeros((1, 2), np.int64), np.ones((1, 2), bool)))


def test_batched_greedy_matches_single():
    model = TranslationModel(micro("subword"), seed=4)
    batch = TokenBatch.from_lists([[4, 5], [6, 7, 8, 9]])
    both = greedy_decode(model, batch, 7)
    assert both[1] == greedy_decode(model, TokenBatch.from_lists([[6, 7, 8, 9]]), 7)[0]


# -- vocabulary growth --------------------------------------------------------------------------------


def test_grow_source_embeddings():
    model = TranslationModel(micro("subword"))
    old = model.src_embed.weight.data.copy()
    before = count_params(model.cfg)
    grow_source_embeddings(model, GrowthPlan(20, (20, 21, 22)))
    assert model.src_embed.weight.shape == (23, 16)
    assert np.array_equal(model.src_embed.weight.data[:20], old)
    assert count_params(model.cfg) - before == 3 * 16
    with pytest.raises(ValueError, match="vocabulary-free"):
        grow_source_embeddings(TranslationModel(micro("pixel")), GrowthPlan(1, (1,)))
