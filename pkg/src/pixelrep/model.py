"""Transformer encoder-decoder with a pixel or subword source embedder."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import tensor as T
from .pixeltok import PixelBatch, WindowConfig
from .subword import BOS, EOS, PAD
from .tensor import Tensor

NEG_INF = -1e9


# -- configuration -----------------------------------------------------------------


@dataclass
class ModelConfig:
    source_mode: str = "pixel"
    enc_layers: int = 6
    dec_layers: int = 6
    d_model: int = 512
    ff_width: int = 1024
    heads: int = 8
    dropout: float = 0.1
    label_smoothing: float = 0.2
    V_src: int | None = None
    V_tgt: int = 5000
    window: WindowConfig = field(default_factory=WindowConfig)
    conv_channels: int = 1
    conv_kernel: tuple = (3, 1)
    conv_stride: tuple = (1, 1)
    tie_target_embeddings: bool = False

    def __post_init__(self):
        if isinstance(self.window, dict):
            self.window = WindowConfig(**self.window)
        self.conv_kernel = tuple(self.conv_kernel)
        self.conv_stride = tuple(self.conv_stride)
        self.validate()

    def validate(self):
        if self.source_mode not in ("pixel", "subword"):
            raise ValueError(f"source_mode must be 'pixel' or 'subword', got {self.source_mode!r}")
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} is not divisible by heads {self.heads}")
        if self.source_mode == "pixel" and self.V_src is not None:
            raise ValueError("pixel models have no source vocabulary (V_src must be None)")
        if self.source_mode == "subword" and not self.V_src:
            raise ValueError("subword models need V_src")
        for name in ("enc_layers", "dec_layers", "d_model", "ff_width", "heads", "V_tgt", "conv_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")

    @property
    def conv_out_hw(self):
        (kh, kw), (sh, sw) = self.conv_kernel, self.conv_stride
        return (self.window.h - kh) // sh + 1, (self.window.w - kw) // sw + 1

    def to_dict(self):
        d = asdict(self)
        d["conv_kernel"] = list(self.conv_kernel)
        d["conv_stride"] = list(self.conv_stride)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def count_params(cfg):
    """Closed-form parameter count for ``cfg``."""
    d, ff = cfg.d_model, cfg.ff_width
    if cfg.source_mode == "pixel":
        (kh, kw) = cfg.conv_kernel
        C = cfg.conv_channels
        oh, ow = cfg.conv_out_hw
        src = C * kh * kw + C + 2 * C + C * oh * ow * d + d
    else:
        src = cfg.V_src * d
    attn = 4 * (d * d + d)
    ffn = d * ff + ff + ff * d + d
    ln = 2 * d
    enc = cfg.enc_layers * (attn + ffn + 2 * ln) + ln
    dec = cfg.dec_layers * (2 * attn + ffn + 3 * ln) + ln
    tgt = cfg.V_tgt * d
    out = cfg.V_tgt if cfg.tie_target_embeddings else d * cfg.V_tgt + cfg.V_tgt
    return src + enc + dec + tgt + out


# -- modules -----------------------------------------------------------------------------


def _alloc(shape, init, rng, fill):
    dtype = T.default_dtype()
    if init == "empty":
        return np.empty(shape, dtype=dtype)
    if rng is None:
        rng = np.random.default_rng(0)
    return np.asarray(fill(rng, shape), dtype=dtype)


def _param(shape, init, rng, fill):
    return Tensor(_alloc(shape, init, rng, fill), requires_grad=True)


class Module:
    training = True

    def named_parameters(self, prefix=""):
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Tensor) and value.requires_grad:
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix=""):
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if name == "_buffers":
                for bname, arr in value.items():
                    yield f"{prefix}{bname}", arr
            elif name.startswith("_"):
                continue
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def train(self, mode=True):
        self.training = mode
        for value in vars(self).values():
            if isinstance(value, Module):
                value.train(mode)
            elif isinstance(value, list):
                for item in value:
                    if isinstance(item, Module):
                        item.train(mode)
        return self

    def eval(self):
        return self.train(False)


class Linear(Module):
    def __init__(self, n_in, n_out, rng=None, init="random", bias=True):
        limit = math.sqrt(6.0 / (n_in + n_out))
        self.weight = _param((n_in, n_out), init, rng, lambda r, s: r.uniform(-limit, limit, s))
        self.bias = _param((n_out,), init, rng, lambda r, s: np.zeros(s)) if bias else None

    def __call__(self, x):
        y = x @ self.weight
        return y + self.bias if self.bias is not None else y


class LayerNorm(Module):
    def __init__(self, d, init="random"):
        self.gamma = _param((d,), init, None, lambda r, s: np.ones(s))
        self.beta = _param((d,), init, None, lambda r, s: np.zeros(s))

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta)


class Embedding(Module):
    def __init__(self, V, d, rng=None, init="random"):
        self.weight = _param((V, d), init, rng, lambda r, s: r.normal(0.0, d ** -0.5, s))

    def __call__(self, ids):
        return T.embedding(self.weight, ids)


class MultiHeadAttention(Module):
    def __init__(self, d, heads, rng=None, init="random"):
        self.heads = heads
        self.q = Linear(d, d, rng, init)
        self.k = Linear(d, d, rng, init)
        self.v = Linear(d, d, rng, init)
        self.o = Linear(d, d, rng, init)

    def _split(self, x):
        B, L, d = x.shape
        return x.reshape(B, L, self.heads, d // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, query, memory, bias=None, dropout=0.0, rng=None):
        B, Lq, d = query.shape
        q, k, v = self._split(self.q(query)), self._split(self.k(memory)), self._split(self.v(memory))
        scores = (q @ k.swapaxes(-1, -2)) * (1.0 / math.sqrt(d // self.heads))
        if bias is not None:
            scores = scores + Tensor(bias, dtype=scores.dtype)
        attn = T.dropout(T.softmax(scores, axis=-1), dropout, rng, self.training)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, Lq, d)
        return self.o(ctx)


class FeedForward(Module):
    def __init__(self, d, ff, rng=None, init="random"):
        self.fc1 = Linear(d, ff, rng, init)
        self.fc2 = Linear(ff, d, rng, init)

    def __call__(self, x, dropout=0.0, rng=None):
        return self.fc2(T.dropout(T.relu(self.fc1(x)), dropout, rng, self.training))


class EncoderLayer(Module):
    def __init__(self, cfg, rng=None, init="random"):
        self.ln1 = LayerNorm(cfg.d_model, init)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, init)
        self.ln2 = LayerNorm(cfg.d_model, init)
        self.ff = FeedForward(cfg.d_model, cfg.ff_width, rng, init)

    def __call__(self, x, bias, p, rng):
        h = self.ln1(x)
        x = x + T.dropout(self.self_attn(h, h, bias, p, rng), p, rng, self.training)
        return x + T.dropout(self.ff(self.ln2(x), p, rng), p, rng, self.training)


class DecoderLayer(Module):
    def __init__(self, cfg, rng=None, init="random"):
        self.ln1 = LayerNorm(cfg.d_model, init)
        self.self_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, init)
        self.ln2 = LayerNorm(cfg.d_model, init)
        self.cross_attn = MultiHeadAttention(cfg.d_model, cfg.heads, rng, init)
        self.ln3 = LayerNorm(cfg.d_model, init)
        self.ff = FeedForward(cfg.d_model, cfg.ff_width, rng, init)

    def __call__(self, y, memory, self_bias, cross_bias, p, rng):
        h = self.ln1(y)
        y = y + T.dropout(self.self_attn(h, h, self_bias, p, rng), p, rng, self.training)
        y = y + T.dropout(self.cross_attn(self.ln2(y), memory, cross_bias, p, rng), p, rng, self.training)
        return y + T.dropout(self.ff(self.ln3(y), p, rng), p, rng, self.training)


class PixelEmbedder(Module):
    """Conv (one input channel) -> batch norm -> ReLU -> flatten -> linear."""

    def __init__(self, cfg, rng=None, init="random"):
        C = cfg.conv_channels
        kh, kw = cfg.conv_kernel
        oh, ow = cfg.conv_out_hw
        fan_in = kh * kw
        bound = 1.0 / math.sqrt(fan_in)
        self.stride = cfg.conv_stride
        self.conv_weight = _param((C, 1, kh, kw), init, rng, lambda r, s: r.uniform(-bound, bound, s))
        self.conv_bias = _param((C,), init, rng, lambda r, s: r.uniform(-bound, bound, s))
        self.bn_gamma = _param((C,), init, None, lambda r, s: np.ones(s))
        self.bn_beta = _param((C,), init, None, lambda r, s: np.zeros(s))
        self._buffers = {
            "bn_running_mean": np.zeros(C, dtype=T.default_dtype()),
            "bn_running_var": np.ones(C, dtype=T.default_dtype()),
        }
        self.proj = Linear(C * oh * ow, cfg.d_model, rng, init)

    def activations(self, windows, pad_mask=None):
        """Post-ReLU conv activations, ``[N, C, oh, ow]`` for ``N`` windows.

        Windows flagged in ``pad_mask`` are excluded from batch statistics.
        """
        N, h, w = windows.shape
        x = Tensor(windows.reshape(N, 1, h, w), dtype=self.conv_weight.dtype)
        y = T.conv2d(x, self.conv_weight, self.conv_bias, self.stride)
        keep = None if pad_mask is None else ~np.asarray(pad_mask, dtype=bool)
        if keep is not None and not keep.any():
            keep = None
        y = T.batchnorm2d(
            y, self.bn_gamma, self.bn_beta,
            self._buffers["bn_running_mean"], self._buffers["bn_running_var"],
            training=self.training, sample_mask=keep,
        )
        return T.relu(y)

    def __call__(self, windows, pad_mask=None):
        """Embed ``[N, h, w]`` windows to ``[N, d_model]``.

        Padding windows share one blank-window embedding. Real windows go
        through the projection as one block whose shape does not depend on
        the amount of padding, which keeps outputs bit-identical when
        trailing pads are added.
        """
        N, h, w = windows.shape
        pad = np.zeros(N, dtype=bool) if pad_mask is None else np.asarray(pad_mask, dtype=bool)
        real = np.flatnonzero(~pad)
        stack = np.concatenate([windows[real], np.zeros((1, h, w), windows.dtype)])
        mask = np.zeros(len(stack), dtype=bool)
        mask[-1] = True
        act = self.activations(stack, mask)
        flat = act.reshape(len(stack), -1)
        parts = []
        if len(real):
            parts.append(self.proj(flat[: len(real)]))
        parts.append(self.proj(flat[len(real):]))
        rows = T.concat(parts, axis=0) if len(parts) > 1 else parts[0]
        index = np.full(N, len(real), dtype=np.int64)
        index[real] = np.arange(len(real))
        return rows[index]


def sinusoidal_positions(length, d, dtype):
    pos = np.arange(length)[:, None]
    i = np.arange(0, d, 2)[None, :]
    angle = pos / np.power(10000.0, i / d)
    pe = np.zeros((length, d))
    pe[:, 0::2] = np.sin(angle)
    pe[:, 1::2] = np.cos(angle[:, : d // 2])
    return pe.astype(dtype)


@dataclass
class TokenBatch:
    ids: np.ndarray  # [B, T] int, PAD-filled
    pad_mask: np.ndarray  # [B, T] True marks padding

    @classmethod
    def from_lists(cls, seqs):
        if not seqs:
            raise ValueError("cannot batch an empty list")
        L = max(max(len(s) for s in seqs), 1)
        ids = np.full((len(seqs), L), PAD, dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, :len(s)] = s
        pad = np.ones_like(ids, dtype=bool)
        for i, s in enumerate(seqs):
            pad[i, :len(s)] = False
        return cls(ids, pad)

    @property
    def lengths(self):
        return (~self.pad_mask).sum(axis=1)


def _key_bias(pad_mask):
    return np.where(pad_mask, NEG_INF, 0.0)[:, None, None, :]


def _causal_bias(L):
    return np.triu(np.full((L, L), NEG_INF), k=1)[None, None]


class TranslationModel(Module):
    def __init__(self, cfg, seed=0, init="random"):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self._rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
        d = cfg.d_model
        if cfg.source_mode == "pixel":
            self.src_embed = PixelEmbedder(cfg, rng, init)
        else:
            self.src_embed = Embedding(cfg.V_src, d, rng, init)
        self.encoder = [EncoderLayer(cfg, rng, init) for _ in range(cfg.enc_layers)]
        self.enc_ln = LayerNorm(d, init)
        self.tgt_embed = Embedding(cfg.V_tgt, d, rng, init)
        self.decoder = [DecoderLayer(cfg, rng, init) for _ in range(cfg.dec_layers)]
        self.dec_ln = LayerNorm(d, init)
        if cfg.tie_target_embeddings:
            self.out_bias = _param((cfg.V_tgt,), init, None, lambda r, s: np.zeros(s))
            self.out_proj = None
        else:
            self.out_proj = Linear(d, cfg.V_tgt, rng, init)

    @property
    def rng(self):
        return self._rng

    def reseed(self, seed):
        self._rng = np.random.default_rng(seed)

    # -- source side
    def embed_source(self, src):
        """Return ``(vectors [B, T, d], pad_mask [B, T])`` before positions."""
        cfg = self.cfg
        if cfg.source_mode == "pixel":
            if not isinstance(src, PixelBatch):
                raise TypeError("pixel models take a PixelBatch")
            B, L, h, w = src.data.shape
            if (h, w) != (cfg.window.h, cfg.window.w):
                raise ValueError(f"window shape {(h, w)} does not match config {(cfg.window.h, cfg.window.w)}")
            flat = self.src_embed(src.data.reshape(B * L, h, w), src.pad_mask.reshape(-1))
            return flat.reshape(B, L, cfg.d_model), src.pad_mask
        if not isinstance(src, TokenBatch):
            raise TypeError("subword models take a TokenBatch")
        return self.src_embed(src.ids) * math.sqrt(cfg.d_model), src.pad_mask

    def encode(self, embedded, pad_mask):
        B, L, d = embedded.shape
        x = embedded + Tensor(sinusoidal_positions(L, d, embedded.dtype))
        p = self.cfg.dropout
        x = T.dropout(x, p, self._rng, self.training)
        bias = _key_bias(pad_mask)
        for layer in self.encoder:
            x = layer(x, bias, p, self._rng)
        return self.enc_ln(x)

    # -- target side
    def decode(self, memory, src_pad, tgt_in):
        B, L = tgt_in.shape
        d = self.cfg.d_model
        y = self.tgt_embed(tgt_in) * math.sqrt(d) + Tensor(sinusoidal_positions(L, d, memory.dtype))
        p = self.cfg.dropout
        y = T.dropout(y, p, self._rng, self.training)
        self_bias = _causal_bias(L) + _key_bias(tgt_in == PAD)
        # BOS is never PAD, so every query row keeps at least one key
        cross_bias = _key_bias(src_pad)
        for layer in self.decoder:
            y = layer(y, memory, self_bias, cross_bias, p, self._rng)
        y = self.dec_ln(y)
        if self.out_proj is not None:
            return self.out_proj(y)
        return y @ T.transpose(self.tgt_embed.weight) + self.out_bias

    def forward_logits(self, src, tgt_in):
        emb, pad = self.embed_source(src)
        memory = self.encode(emb, pad)
        return self.decode(memory, pad, tgt_in)

    def loss(self, src, targets, eps=None):
        """Label-smoothed cross entropy; ``targets`` is a list of id lists
        without BOS/EOS."""
        tgt_in, tgt_out = target_arrays(targets)
        logits = self.forward_logits(src, tgt_in)
        B, L, V = logits.shape
        eps = self.cfg.label_smoothing if eps is None else eps
        return T.cross_entropy_label_smoothed(logits.reshape(B * L, V), tgt_out.reshape(-1), eps, ignore_index=PAD)

    def decode_step(self, memory, src_pad, prefix):
        """Next-token logits ``[k, V]`` for prefixes ``[k, L]`` (starting with BOS)."""
        with T.no_grad():
            logits = self.decode(memory, src_pad, np.asarray(prefix, dtype=np.int64))
        return logits.data[:, -1, :]

    def encode_source(self, src):
        with T.no_grad():
            emb, pad = self.embed_source(src)
            return self.encode(emb, pad), pad


def target_arrays(targets):
    """Teacher-forcing input ``[BOS] + y`` and output ``y + [EOS]``, PAD-filled."""
    L = max(len(t) for t in targets) + 1
    tgt_in = np.full((len(targets), L), PAD, dtype=np.int64)
    tgt_out = np.full((len(targets), L), PAD, dtype=np.int64)
    for i, t in enumerate(targets):
        tgt_in[i, 0] = BOS
        tgt_in[i, 1:len(t) + 1] = t
        tgt_out[i, :len(t)] = t
        tgt_out[i, len(t)] = EOS
    return tgt_in, tgt_out


def enumerate_params(model):
    """Total parameter count by walking the instantiated model."""
    return int(sum(p.size for p in model.parameters()))


# -- decoding ------------------------------------------------------------------------------


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def _slice_source(src, i):
    if isinstance(src, PixelBatch):
        n = int(src.lengths[i])
        return PixelBatch(src.data[i:i + 1, :n], src.pad_mask[i:i + 1, :n], src.lang_tags[i:i + 1])
    n = int(src.lengths[i])
    return TokenBatch(src.ids[i:i + 1, :n], src.pad_mask[i:i + 1, :n])


def greedy_decode(model, src, max_len):
    """Batched argmax decoding; returns one id list per example (no BOS/EOS)."""
    was_training = model.training
    model.eval()
    try:
        memory, pad = model.encode_source(src)
        B = memory.shape[0]
        prefix = np.full((B, 1), BOS, dtype=np.int64)
        done = np.zeros(B, dtype=bool)
        for _ in range(max_len):
            nxt = model.decode_step(memory, pad, prefix).argmax(axis=-1)
            nxt = np.where(done, PAD, nxt)
            prefix = np.concatenate([prefix, nxt[:, None]], axis=1)
            done |= nxt == EOS
            if done.all():
                break
    finally:
        model.train(was_training)
    out = []
    for row in prefix[:, 1:]:
        seq = []
        for t in row:
            if t in (EOS, PAD):
                break
            seq.append(int(t))
        out.append(seq)
    return out


def sequence_score(model, src, tokens):
    """Length-normalized log-probability of ``tokens + [EOS]`` for one source."""
    was_training = model.training
    model.eval()
    try:
        memory, pad = model.encode_source(src)
        full = [BOS, *tokens, EOS]
        with T.no_grad():
            logits = model.decode(memory, pad, np.asarray([full[:-1]], dtype=np.int64)).data[0]
    finally:
        model.train(was_training)
    logp = _log_softmax(logits)
    total = float(sum(logp[i, t] for i, t in enumerate(full[1:])))
    return total / len(full[1:])


def beam_search(model, src, max_len, beam=4):
    """Length-normalized beam search for a single source example.

    The greedy hypothesis is always among the candidates, so the returned
    score is never below the greedy one.
    """
    was_training = model.training
    model.eval()
    try:
        memory, pad = model.encode_source(src)
        live = [((BOS,), 0.0)]
        finished = []
        for _ in range(max_len):
            prefixes = np.asarray([p for p, _ in live], dtype=np.int64)
            mem = np.repeat(memory.data, len(live), axis=0)
            logp = _log_softmax(model.decode_step(Tensor(mem, dtype=mem.dtype), np.repeat(pad, len(live), axis=0), prefixes))
            cands = []
            for (p, s), row in zip(live, logp):
                top = np.argsort(-row, kind="stable")[:beam]
                cands.extend((p + (int(t),), s + float(row[t])) for t in top)
            cands.sort(key=lambda c: -c[1])
            live = []
            for p, s in cands:
                if p[-1] == EOS:
                    finished.append((p, s))
                else:
                    live.append((p, s))
                if len(live) == beam:
                    break
            if not live or len(finished) >= beam:
                break
        finished.extend(live)
    finally:
        model.train(was_training)

    def norm(entry):
        p, s = entry
        return s / max(len(p) - 1, 1)

    best = max(finished, key=norm)
    tokens = [t for t in best[0][1:] if t != EOS]
    greedy = greedy_decode(model, src, max_len)[0]
    if sequence_score(model, src, greedy) > sequence_score(model, src, tokens):
        return greedy
    return tokens


def translate(model, src, max_len=64, beam=1):
    """Decode every example in ``src``; greedy when ``beam == 1``."""
    if src.pad_mask.shape[0] == 0 or (~src.pad_mask).sum() == 0:
        raise ValueError("empty source")
    if beam <= 1:
        return greedy_decode(model, src, max_len)
    return [beam_search(model, _slice_source(src, i), max_len, beam) for i in range(src.pad_mask.shape[0])]


# -- representations -----------------------------------------------------------------------------


def mean_pooled_repr(model, src):
    """Mean over non-pad positions of the encoder input vectors, ``[B, d]``."""
    was_training = model.training
    model.eval()
    try:
        with T.no_grad():
            emb, pad = model.embed_source(src)
    finally:
        model.train(was_training)
    keep = (~pad).astype(emb.dtype)[:, :, None]
    return (emb.data * keep).sum(axis=1) / np.maximum(keep.sum(axis=1), 1)


def grow_source_embeddings(model, plan, seed=0, noise_std=0.01):
    """Append rows for ``plan.new_ids``: mean of existing rows plus seeded noise.

    Existing rows are copied bit-for-bit; the model's config is updated.
    """
    if model.cfg.source_mode != "subword":
        raise ValueError("pixel models are vocabulary-free")
    old = model.src_embed.weight.data
    if old.shape[0] != plan.old_size:
        raise ValueError(f"embedding has {old.shape[0]} rows, plan expects {plan.old_size}")
    rng = np.random.default_rng(seed)
    n_new = len(plan.new_ids)
    new_rows = old.mean(axis=0, keepdims=True) + noise_std * rng.standard_normal((n_new, old.shape[1]))
    grown = np.concatenate([old, new_rows.astype(old.dtype)], axis=0)
    model.src_embed.weight = Tensor(grown, requires_grad=True, dtype=old.dtype)
    model.cfg = replace(model.cfg, V_src=plan.new_size)
    return model
