"""``pixelrep`` command-line entry point.

Global flags ``--seed``, ``--out`` and ``--threads`` may also come from the
environment as ``PIXELREP_SEED``, ``PIXELREP_OUT`` and ``PIXELREP_THREADS``
(flags win). ``PIXELREP_NUMBA=0`` selects the pure-numpy kernels.

Every command that writes artifacts leaves ``manifest.json`` in its output
directory: the command line, the full config echo and its hash, the seed,
and sha256 digests of every output file.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

ENV_PREFIX = "PIXELREP_"


def _env(name, default=None, cast=str):
    value = os.environ.get(ENV_PREFIX + name)
    return default if value is None else cast(value)


def _set_threads(n):
    if n is None:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ[var] = str(n)


def _sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, seed, config=None, extra=None):
    """Record outputs under ``out`` (excluding the manifest and logs)."""
    out = Path(out)
    files = {}
    for p in sorted(out.rglob("*")):
        rel = p.relative_to(out).as_posix()
        if p.is_file() and rel != "manifest.json" and not rel.endswith(".log.jsonl"):
            files[rel] = _sha256(p)
    manifest = {"command": command, "seed": seed, "outputs": files}
    if config is not None:
        manifest["config"] = config.to_dict()
        manifest["config_hash"] = config.hash()
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                                       encoding="utf-8")
    return manifest


def _read_lines(path):
    with open(path, encoding="utf-8") as fh:
        return [line.rstrip("\n") for line in fh]


def _write_lines(path, lines):
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _experiment(args):
    from .config import from_dict, load_config, load_preset

    if getattr(args, "config", None):
        cfg = load_config(args.config)
    elif getattr(args, "preset", None):
        cfg = load_preset(args.preset)
    else:
        cfg = from_dict({})
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


# -- commands ------------------------------------------------------------------------------------------


def cmd_render(args):
    import dataclasses

    from .textimage import RenderConfig, load_fonts, render_sentence, write_render_cache

    rc = RenderConfig(canvas_height=args.height, font_pt=args.pt, dpi=args.dpi, antialias=not args.no_antialias)
    fonts = [f for f in (args.fonts or "").split(",") if f]
    atlas = load_fonts(fonts or None)
    lines = [l for l in _read_lines(args.input) if l]
    images = [render_sentence(l, atlas, rc) for l in lines]
    target = Path(args.out)
    if target.suffix == ".pxr":
        target.parent.mkdir(parents=True, exist_ok=True)
        cache = target
        manifest_path = target.with_name(target.name + ".manifest.json")
    else:
        cache = _out_dir(args) / "render.pxr"
        manifest_path = cache.parent / "manifest.json"
    write_render_cache(cache, images, rc.canvas_height)
    manifest = {
        "command": "render", "seed": args.seed, "render": dataclasses.asdict(rc),
        "fonts": [Path(f).name for f in fonts], "lines": len(lines), "outputs": {cache.name: _sha256(cache)},
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True, ensure_ascii=False) + "\n",
                             encoding="utf-8")
    print(f"rendered {len(lines)} lines to {cache}")
    return 0


def cmd_vocab(args):
    from . import subword

    out = _out_dir(args)
    if args.vocab_cmd == "train":
        tok = subword.train_segmenter([l for l in _read_lines(args.input) if l], args.size)
    elif args.vocab_cmd == "joint":
        corpora = {}
        for item in args.input:
            lang, _, path = item.partition("=")
            if not path:
                raise SystemExit(f"vocab joint: expected lang=path, got {item!r}")
            corpora[lang] = [l for l in _read_lines(path) if l]
        tok = subword.build_joint(corpora, args.size, args.T)
    elif args.vocab_cmd == "union":
        tok = subword.build_union([subword.Tokenizer.load(p) for p in args.models])
    else:
        base = subword.Tokenizer.load(args.base)
        tok, plan = subword.expand_vocabulary(base, subword.Tokenizer.load(args.add))
        print(f"added {len(plan.new_ids)} tokens ({plan.old_size} -> {plan.new_size})")
    tok.save(out / "vocab.bpe")
    write_manifest(out, f"vocab {args.vocab_cmd}", args.seed)
    print(f"vocabulary of {tok.vocab.size} entries written to {out / 'vocab.bpe'}")
    return 0


def cmd_synth(args):
    from .trainkit import make_synthetic_corpus

    scripts = [s for s in args.scripts.split(",") if s]
    seed = args.seed or 0
    corpus = make_synthetic_corpus(scripts, args.n + args.valid + args.test, args.task, seed,
                                   zipf=args.zipf, lexicon_size=args.lexicon_size)
    train, valid, test = corpus.split(args.valid, args.test, seed)
    out = _out_dir(args)
    train.write_tsv(out / "train.tsv")
    valid.write_tsv(out / "valid.tsv")
    if args.test:
        test.write_tsv(out / "test.tsv")
    write_manifest(out, "synth", seed, extra={"scripts": scripts, "task": args.task, "n": args.n,
                                              "zipf": args.zipf, "lexicon_size": args.lexicon_size})
    print(f"wrote {len(train)}/{len(valid)}/{len(test)} examples to {out}")
    return 0


def _load_split(data, name, required=True):
    from .trainkit import ParallelCorpus

    path = Path(data) / f"{name}.tsv"
    if not path.exists():
        if required:
            raise SystemExit(f"missing {path}")
        return None
    return ParallelCorpus.read_tsv(path)


def cmd_train(args):
    import dataclasses

    from .checkpoint import save_checkpoint
    from .model import TranslationModel
    from .subword import build_joint, train_segmenter
    from .trainkit import PixelSource, SubwordSource, TargetEncoder, train

    cfg = _experiment(args)
    data = args.data or cfg.data
    if data is None:
        raise SystemExit("train: no data directory (use --data or set 'data' in the config)")
    train_c, valid_c = _load_split(data, "train"), _load_split(data, "valid")
    tgt_tok = train_segmenter(train_c.targets(), cfg.vocab.tgt_size)
    tokenizers = {"tgt": tgt_tok}
    mcfg = dataclasses.replace(cfg.model, V_tgt=tgt_tok.vocab.size)
    if mcfg.source_mode == "pixel":
        source = PixelSource(cfg.render, cfg.window)
        render = cfg.render
    else:
        src_tok = build_joint({l: train_c.sources(l) for l in train_c.languages}, cfg.vocab.src_size, cfg.sampler.T)
        tokenizers["src"] = src_tok
        mcfg = dataclasses.replace(mcfg, V_src=src_tok.vocab.size)
        source = SubwordSource(src_tok)
        render = None
    model = TranslationModel(mcfg, seed=cfg.seed)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    scfg = dataclasses.replace(cfg.sampler, seed=cfg.seed)
    out = _out_dir(args)
    log_path = out / "train.log.jsonl"
    if log_path.exists():
        log_path.unlink()
    result = train(model, train_c, valid_c, source, TargetEncoder(tgt_tok), tcfg, scfg,
                   log_path=log_path, tokenizers=tokenizers, render=render)
    save_checkpoint(out / "ckpt", result.checkpoint)
    cfg.model = mcfg
    cfg.save(out / "config.json")
    write_manifest(out, "train", cfg.seed, cfg, {"stop_reason": result.stop_reason,
                                                 "best_valid_ppl": result.best_valid_ppl})
    print(f"trained {result.checkpoint.step} steps ({result.stop_reason}); best valid ppl {result.best_valid_ppl:.3f}")
    return 0


def cmd_finetune(args):
    import dataclasses

    from .checkpoint import load_checkpoint, save_checkpoint
    from .trainkit import finetune

    cfg = _experiment(args)
    ckpt = load_checkpoint(args.ckpt)
    train_c, valid_c = _load_split(args.data, "train"), _load_split(args.data, "valid")
    mode = "vocab_expand" if args.mode == "expand" else "direct"
    fcfg = dataclasses.replace(cfg.finetune, sample_size=args.samples, seed=cfg.seed)
    out_ckpt, result = finetune(ckpt, train_c, valid_c, mode, fcfg)
    out = _out_dir(args)
    save_checkpoint(out / "ckpt", out_ckpt)
    write_manifest(out, "finetune", cfg.seed, cfg, {"mode": mode, "stop_reason": result.stop_reason})
    print(f"finetuned ({mode}) for {out_ckpt.step} steps; best valid ppl {result.best_valid_ppl:.3f}")
    return 0


def _sources_for(ckpt):
    from .trainkit import PixelSource, SubwordSource, TargetEncoder

    if ckpt.model.cfg.source_mode == "pixel":
        source = PixelSource(ckpt.render, ckpt.model.cfg.window)
    else:
        source = SubwordSource(ckpt.tokenizers["src"])
    return source, TargetEncoder(ckpt.tokenizers["tgt"])


def cmd_translate(args):
    from .checkpoint import load_checkpoint
    from .model import translate

    ckpt = load_checkpoint(args.ckpt, with_optimizer=False)
    source, target = _sources_for(ckpt)
    lines = _read_lines(args.input)
    hyps = []
    for start in range(0, len(lines), args.batch):
        chunk = lines[start:start + args.batch]
        if any(not l.strip() for l in chunk):
            raise SystemExit("translate: empty source line")
        ids = translate(ckpt.model, source.batch(chunk), args.max_len, args.beam)
        hyps.extend(target.decode(h) for h in ids)
    if args.out:
        out = _out_dir(args)
        _write_lines(out / "hyp.txt", hyps)
        write_manifest(out, "translate", args.seed, extra={"beam": args.beam})
    else:
        for h in hyps:
            print(h)
    return 0


def cmd_evaluate(args):
    from .analysis import bleu, chrf

    hyps, refs = _read_lines(args.hyp), _read_lines(args.ref)
    metrics = {"bleu": bleu, "chrf": chrf}
    wanted = [m.strip() for m in args.metric.split(",") if m.strip()]
    unknown = [m for m in wanted if m not in metrics]
    if unknown:
        raise SystemExit(f"evaluate: unknown metric(s) {unknown}; choose from bleu, chrf")
    scores = {m: round(metrics[m](hyps, refs), 4) for m in wanted}
    print(json.dumps(scores, sort_keys=True))
    if args.out:
        out = _out_dir(args)
        (out / "scores.json").write_text(json.dumps(scores, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        write_manifest(out, "evaluate", args.seed)
    return 0


def cmd_analyze(args):
    import numpy as np

    from . import analysis as A
    from .checkpoint import load_checkpoint

    out = _out_dir(args)
    kind = args.analysis
    if kind == "coverage":
        rep = A.script_coverage(_read_lines(args.pretrain), _read_lines(args.new), token_weighted=args.token_weighted,
                                boundary=not args.no_boundary)
        with open(out / "coverage.tsv", "w", encoding="utf-8") as fh:
            for n, v in rep.percent.items():
                fh.write(f"{n}\t{v:.4f}\n")
        A.write_json(rep.to_dict(), out / "coverage.json")
        summary = rep.to_dict()
    else:
        ckpt = load_checkpoint(args.ckpt, with_optimizer=False)
        source, target = _sources_for(ckpt)
        model = ckpt.model
        if kind == "similarity":
            sim = A.activation_similarity(model, source, args.a, args.b)
            summary = {"a": args.a, "b": args.b, "cosine": sim}
        elif kind == "updates":
            corpus = _load_split(args.data, "valid")
            ex = corpus.examples[: args.batch]
            rep = A.update_fraction(model, source.batch([e.source for e in ex]), [target.ids(e.target) for e in ex])
            summary = {"percent": rep.percent, "updated": rep.updated, "total": rep.total}
        elif kind == "repr-export":
            lines = [l for l in _read_lines(args.input) if l]
            from .model import mean_pooled_repr
            vecs = np.concatenate([mean_pooled_repr(model, source.batch(lines[i:i + 64])) for i in range(0, len(lines), 64)])
            A.EmbeddingSet(vecs, lines).write_tsv(out / "vectors.tsv")
            summary = {"sentences": len(lines), "dim": int(vecs.shape[1])}
        else:  # svd
            if model.cfg.source_mode == "pixel":
                vocab = load_checkpoint(args.vocab_ckpt, with_optimizer=False).tokenizers["src"] if args.vocab_ckpt else None
                if vocab is None:
                    raise SystemExit("analyze svd: pixel checkpoints need --vocab-ckpt for the token list")
                emb, _ = A.pixel_token_embeddings_for_vocab(model, source, vocab)
            else:
                emb = A.subword_embeddings(model, ckpt.tokenizers["src"])
            proj = A.svd2d(emb, trim=args.trim)
            with open(out / "svd.tsv", "w", encoding="utf-8") as fh:
                for label, (x, y), k in zip(emb.labels, proj.coords, proj.keep):
                    fh.write(f"{label}\t{x!r}\t{y!r}\t{int(k)}\n")
            summary = {"explained_variance": proj.explained_variance.tolist(), "points": len(emb)}
        A.write_json(summary, out / f"{kind}.json")
    write_manifest(out, f"analyze {kind}", args.seed)
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_params(args):
    from .model import count_params

    cfg = _experiment(args)
    n = count_params(cfg.model)
    print(f"{n} parameters ({n / 1e6:.2f}M)")
    return 0


# -- parser ----------------------------------------------------------------------------------------------


def _global_flags(parser, default):
    parser.add_argument("--seed", type=int, default=default(_env("SEED", None, int)), help="global random seed")
    parser.add_argument("--out", default=default(_env("OUT", None)), help="output directory (or .pxr file for render)")
    parser.add_argument("--threads", type=int, default=default(_env("THREADS", None, int)),
                        help="BLAS/numba thread count")


def build_parser():
    p = argparse.ArgumentParser(prog="pixelrep", description="Pixel and subword source representations for translation.")
    _global_flags(p, lambda d: d)
    # the same flags after the subcommand; SUPPRESS keeps them from clobbering earlier values
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, lambda d: argparse.SUPPRESS)
    sub = p.add_subparsers(dest="command", required=True)
    _add = sub.add_parser

    def add_parser(name, **kw):
        return _add(name, parents=[common], **kw)

    sub.add_parser = add_parser

    r = sub.add_parser("render", help="render text lines to a PXR1 image cache")
    r.add_argument("--in", dest="input", required=True)
    r.add_argument("--fonts", help="comma-separated font files, in fallback order (default: bundled fonts)")
    r.add_argument("--height", type=int, default=32, help="canvas height in pixels")
    r.add_argument("--pt", type=float, default=10.0, help="font size in points")
    r.add_argument("--dpi", type=float, default=120.0)
    r.add_argument("--no-antialias", action="store_true")
    r.set_defaults(func=cmd_render)

    v = sub.add_parser("vocab", help="build subword vocabularies")
    vs = v.add_subparsers(dest="vocab_cmd", required=True)
    _vadd = vs.add_parser
    vs.add_parser = lambda name, **kw: _vadd(name, parents=[common], **kw)
    vt = vs.add_parser("train")
    vt.add_argument("--in", dest="input", required=True)
    vt.add_argument("--size", type=int, required=True)
    vj = vs.add_parser("joint")
    vj.add_argument("--in", dest="input", nargs="+", required=True, metavar="LANG=PATH")
    vj.add_argument("--size", type=int, required=True)
    vj.add_argument("--T", type=float, default=5.0)
    vu = vs.add_parser("union")
    vu.add_argument("--models", nargs="+", required=True)
    ve = vs.add_parser("expand")
    ve.add_argument("--base", required=True)
    ve.add_argument("--add", required=True)
    v.set_defaults(func=cmd_vocab)

    s = sub.add_parser("synth", help="write a synthetic parallel corpus")
    s.add_argument("--scripts", required=True)
    s.add_argument("--n", type=int, required=True, help="training examples per language")
    s.add_argument("--valid", type=int, default=100)
    s.add_argument("--test", type=int, default=100)
    s.add_argument("--task", default="transliterate", choices=["copy", "transliterate", "number-words"])
    s.add_argument("--lexicon-size", type=int, help="use only the most frequent N lexicon words")
    s.add_argument("--zipf", type=float, default=1.0, help="Zipf exponent of the word distribution")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    g = t.add_mutually_exclusive_group()
    g.add_argument("--config")
    g.add_argument("--preset")
    t.add_argument("--data")
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="finetune a checkpoint on a new language")
    f.add_argument("--ckpt", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--mode", choices=["direct", "expand"], default="direct")
    f.add_argument("--samples", type=int)
    g = f.add_mutually_exclusive_group()
    g.add_argument("--config")
    g.add_argument("--preset")
    f.set_defaults(func=cmd_finetune)

    tr = sub.add_parser("translate", help="decode source lines")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--in", dest="input", required=True)
    tr.add_argument("--beam", type=int, default=1)
    tr.add_argument("--max-len", type=int, default=128)
    tr.add_argument("--batch", type=int, default=64)
    tr.set_defaults(func=cmd_translate)

    e = sub.add_parser("evaluate", help="score hypotheses against references")
    e.add_argument("--metric", default="bleu,chrf")
    e.add_argument("--hyp", required=True)
    e.add_argument("--ref", required=True)
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="representation analyses")
    a.add_argument("analysis", choices=["svd", "coverage", "updates", "similarity", "repr-export"])
    a.add_argument("--ckpt")
    a.add_argument("--vocab-ckpt", help="subword checkpoint whose vocabulary is rendered (svd on pixel models)")
    a.add_argument("--data")
    a.add_argument("--in", dest="input")
    a.add_argument("--pretrain")
    a.add_argument("--new")
    a.add_argument("--token-weighted", action="store_true")
    a.add_argument("--no-boundary", action="store_true", help="count n-grams without word boundary markers")
    a.add_argument("--a")
    a.add_argument("--b")
    a.add_argument("--batch", type=int, default=32)
    a.add_argument("--trim", type=float)
    a.set_defaults(func=cmd_analyze)

    pa = sub.add_parser("params", help="count model parameters")
    g = pa.add_mutually_exclusive_group(required=True)
    g.add_argument("--config")
    g.add_argument("--preset")
    pa.set_defaults(func=cmd_params)
    return p


_NEEDS = {
    "analyze": {"coverage": ("pretrain", "new"), "similarity": ("ckpt", "a", "b"), "updates": ("ckpt", "data"),
                "repr-export": ("ckpt", "input"), "svd": ("ckpt",)},
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    _set_threads(args.threads)
    writes = args.command not in ("params", "evaluate", "translate")
    if args.out is None and writes:
        args.out = "pixelrep-out"
    if args.command == "analyze":
        missing = [n for n in _NEEDS["analyze"][args.analysis] if getattr(args, n) is None]
        if missing:
            parser.error(f"analyze {args.analysis} requires " + ", ".join("--" + m.replace("_", "-") for m in missing))
    from .config import ConfigError

    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
