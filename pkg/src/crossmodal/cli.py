"""Command-line pipeline: synth, preprocess, train, evaluate, query.

Progress goes to stderr, data to stdout. Every command exits 0 on success
and nonzero with one machine-parsable ``error <Class>: <message>`` line on
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint, vocab_digest
from .corpus import (
    generate_synthetic_corpus,
    load_captions,
    load_image_features,
    load_word_embeddings,
    split_dataset,
    write_captions,
    write_features,
)
from .errors import ConfigError, CrossmodalError, ZeroNormError
from .metrics import build_rankings, evaluate_rankings, format_report, report_to_kv
from .nets import NetSpec, forward, init_net
from .ranker import (
    RetrievalDataset,
    ScoreModel,
    TrainConfig,
    cosine_score,
    train,
    write_history,
)
from .text import (
    MODES,
    build_vocabulary,
    encode_sequence,
    featurize,
    load_vocabulary,
    normalize_tokenize,
    save_vocabulary,
)

MODE_FLAGS = {"unigram": "unigram", "2g": "bigram", "3g": "trigram", "tk3": "trigram_skip"}

# defaults mirror the best-validated hyperparameters; lr decays linearly to
# a 0.01 factor over 100 epochs and stays there
DEFAULTS: dict[str, str] = {
    "margin": "0.15",
    "lr": "0.001",
    "epochs": "50",
    "methodology": "i2t",
    "weighting": "binary",
    "seed": "0",
    "n_hu": "0",
    "n_emb": "300",
    "visual_n_hu": "0",
    "textual": "bag",
    "word_dim": "300",
    "kernels": "300",
    "window": "5",
    "n_test": "1000",
    "val_frac": "0.05",
    "val_pairs": "500",
}

LR_DECAY_DESC = "linear to 0.01 factor over 100 epochs"
NONLINEARITY = "relu"


def parse_config_file(path: str) -> dict[str, str]:
    """Flat ``key = value`` lines; blank lines and # comments ignored."""
    values: dict[str, str] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = value.strip()
    return values


def resolve_config(args: argparse.Namespace) -> dict[str, str]:
    """Defaults, overlaid by the config file, overlaid by explicit flags."""
    resolved = dict(DEFAULTS)
    if getattr(args, "config", None):
        resolved.update(parse_config_file(args.config))
    for key in DEFAULTS:
        flag = getattr(args, key, None)
        if flag is not None:
            resolved[key] = str(flag)
    return resolved


def _typed_config(resolved: dict[str, str]) -> dict:
    try:
        typed = {
            "margin": float(resolved["margin"]),
            "lr": float(resolved["lr"]),
            "epochs": int(resolved["epochs"]),
            "methodology": resolved["methodology"].upper(),
            "weighting": resolved["weighting"],
            "seed": int(resolved["seed"]),
            "n_hu": int(resolved["n_hu"]),
            "n_emb": int(resolved["n_emb"]),
            "visual_n_hu": int(resolved["visual_n_hu"]),
            "textual": resolved["textual"],
            "word_dim": int(resolved["word_dim"]),
            "kernels": int(resolved["kernels"]),
            "window": int(resolved["window"]),
            "n_test": int(resolved["n_test"]),
            "val_frac": float(resolved["val_frac"]),
            "val_pairs": int(resolved["val_pairs"]),
        }
    except ValueError as exc:
        raise ConfigError(f"bad config value: {exc}") from None
    if typed["margin"] <= 0:
        raise ConfigError(f"margin must be positive, got {typed['margin']}")
    if typed["lr"] <= 0:
        raise ConfigError(f"lr must be positive, got {typed['lr']}")
    if typed["methodology"] not in ("I2T", "T2I"):
        raise ConfigError(f"methodology must be i2t or t2i, got {resolved['methodology']!r}")
    if typed["weighting"] not in ("binary", "tfidf"):
        raise ConfigError(f"weighting must be binary or tfidf, got {typed['weighting']!r}")
    if typed["textual"] not in ("bag", "sse"):
        raise ConfigError(f"textual must be bag or sse, got {typed['textual']!r}")
    return typed


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _progress(msg: str) -> None:
    print(msg, file=sys.stderr)


def cmd_synth(args: argparse.Namespace) -> int:
    images, captions = generate_synthetic_corpus(
        n_clusters=args.clusters,
        images_per_cluster=args.images_per_cluster,
        feature_dim=args.feature_dim,
        vocab_per_cluster=args.vocab_per_cluster,
        noise_sigma=args.noise_sigma,
        seed=args.seed,
    )
    os.makedirs(args.out, exist_ok=True)
    write_captions(captions, os.path.join(args.out, "captions.tsv"))
    write_features(images, args.feature_dim, os.path.join(args.out, "features.txt"))
    _progress(f"wrote {len(images)} images and {len(captions)} captions to {args.out}")
    return 0


def cmd_preprocess(args: argparse.Namespace) -> int:
    captions = load_captions(args.captions, strict=not args.lenient)
    for cap in captions:
        cap.tokens = normalize_tokenize(cap.text)
    mode = MODE_FLAGS[args.mode]
    vocab = build_vocabulary(captions, mode, args.max_size)
    os.makedirs(args.out, exist_ok=True)
    save_vocabulary(vocab, os.path.join(args.out, "vocab.tsv"))
    cache_path = os.path.join(args.out, f"caption_features_{args.weighting}.tsv")
    with open(cache_path, "w", encoding="utf-8") as fh:
        for cap in sorted(captions, key=lambda c: (c.image_id, c.caption_index)):
            vec = featurize(cap.tokens, vocab, args.weighting)
            cells = " ".join(f"{i}:{v!r}" for i, v in zip(vec.indices, vec.values))
            fh.write(f"{cap.image_id}\t{cap.caption_index}\t{cells}\n")
    _progress(f"vocabulary of {vocab.size} {mode} terms; features cached at {cache_path}")
    return 0


def _write_manifest(path: str, typed: dict, inputs: dict[str, str | None]) -> None:
    manifest = {
        "tool_version": __version__,
        "seed": typed["seed"],
        "config": {**typed, "lr_decay": LR_DECAY_DESC, "nonlinearity": NONLINEARITY},
        "inputs": {
            name: ({"path": p, "sha256": _sha256(p)} if p else None)
            for name, p in inputs.items()
        },
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_train(args: argparse.Namespace) -> int:
    typed = _typed_config(resolve_config(args))
    vocab = load_vocabulary(args.vocab)
    captions = load_captions(args.captions, strict=not args.lenient)
    features = load_image_features(args.features)
    os.makedirs(args.out, exist_ok=True)
    _write_manifest(
        os.path.join(args.out, "manifest.json"),
        typed,
        {
            "captions": args.captions,
            "features": args.features,
            "vocab": args.vocab,
            "embeddings": args.embeddings,
        },
    )
    split = split_dataset(
        features.records(), captions, typed["n_test"], typed["val_frac"], typed["seed"]
    )
    textual_kind = "sequence" if typed["textual"] == "sse" else "bag"
    data = RetrievalDataset(
        features, captions, split, vocab,
        weighting=typed["weighting"], textual_kind=textual_kind, lenient=args.lenient,
    )
    if textual_kind == "bag":
        tspec = NetSpec(kind="bag", input_dim=vocab.size, n_emb=typed["n_emb"], n_hu=typed["n_hu"])
    else:
        tspec = NetSpec(
            kind="sequence", input_dim=vocab.size, n_emb=typed["n_emb"],
            word_dim=typed["word_dim"], kernel_count=typed["kernels"], window=typed["window"],
        )
    vspec = NetSpec(
        kind="bag", input_dim=features.feature_dim, n_emb=typed["n_emb"], n_hu=typed["visual_n_hu"]
    )
    pretrained = load_word_embeddings(args.embeddings) if args.embeddings else None
    model = ScoreModel(
        textual_net=init_net(tspec, typed["seed"], pretrained=pretrained, vocab=vocab),
        visual_net=init_net(vspec, typed["seed"] + 1),
    )
    config = TrainConfig(
        margin=typed["margin"],
        lr0=typed["lr"],
        max_epochs=typed["epochs"],
        methodology=typed["methodology"],
        seed=typed["seed"],
        weighting=typed["weighting"],
        val_pairs_per_epoch=typed["val_pairs"],
    )
    best, history = train(
        model, data, config,
        progress=lambda s: _progress(
            f"epoch {s.epoch} lr {s.lr:.6g} train_err {s.train_err:.2f}% val_err {s.val_err:.2f}%"
        ),
    )
    write_history(history, os.path.join(args.out, "history.tsv"))
    save_checkpoint(
        os.path.join(args.out, "checkpoint.bin"),
        best,
        vocab,
        config,
        history,
        data_config={"n_test": typed["n_test"], "val_frac": typed["val_frac"]},
    )
    _progress(f"best epoch {history.best_epoch}; checkpoint written to {args.out}")
    return 0


def _dataset_for_checkpoint(ckpt, captions_path: str, features_path: str, lenient: bool):
    captions = load_captions(captions_path, strict=not lenient)
    features = load_image_features(features_path)
    split = split_dataset(
        features.records(),
        captions,
        ckpt.data_config["n_test"],
        ckpt.data_config["val_frac"],
        ckpt.train_config.seed,
    )
    textual_kind = ckpt.model.textual_net.spec.kind
    return RetrievalDataset(
        features, captions, split, ckpt.vocabulary,
        weighting=ckpt.train_config.weighting, textual_kind=textual_kind, lenient=lenient,
    )


def cmd_evaluate(args: argparse.Namespace) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    if args.vocab:
        given = vocab_digest(load_vocabulary(args.vocab))
        if given != ckpt.vocab_digest:
            raise ConfigError(
                f"vocabulary digest mismatch: {args.vocab} does not match the checkpoint's vocabulary"
            )
    data = _dataset_for_checkpoint(ckpt, args.captions, args.features, args.lenient)
    ks = tuple(int(k) for k in args.ks.split(","))
    annotation, search = build_rankings(ckpt.model, data, subset="test")
    os.makedirs(args.out, exist_ok=True)
    for rankings in (annotation, search):
        report = evaluate_rankings(rankings, ks=ks, rnd_seed=args.seed)
        text = format_report(report)
        sys.stdout.write(text)
        base = os.path.join(args.out, f"report_{report.direction}")
        with open(base + ".txt", "w", encoding="utf-8") as fh:
            fh.write(text)
        with open(base + ".kv", "w", encoding="utf-8") as fh:
            fh.write(report_to_kv(report))
    _progress(f"reports written to {args.out}")
    return 0


def cmd_query(args: argparse.Namespace) -> int:
    if (args.sentence is None) == (args.image_id is None):
        raise ConfigError("provide exactly one of --sentence or --image-id")
    ckpt = load_checkpoint(args.checkpoint)
    features = load_image_features(args.features)
    if args.sentence is not None:
        tokens = normalize_tokenize(args.sentence)
        if ckpt.model.textual_net.spec.kind == "sequence":
            enc = encode_sequence(tokens, ckpt.vocabulary)
        else:
            enc = featurize(tokens, ckpt.vocabulary, ckpt.train_config.weighting)
            if not len(enc):
                raise ZeroNormError("sentence has no in-vocabulary terms")
        q_emb, _ = forward(ckpt.model.textual_net, enc)
        scored = []
        for image_id in features.ids():
            i_emb, _ = forward(ckpt.model.visual_net, features.get(image_id))
            scored.append((-cosine_score(i_emb, q_emb), image_id))
        scored.sort()
        for rank, (neg_s, image_id) in enumerate(scored[: args.top_k], start=1):
            print(f"{rank}\t{-neg_s:.6f}\t{image_id}")
        return 0
    if args.image_id not in features:
        raise KeyError(f"unknown image id {args.image_id!r}")
    if not args.captions:
        raise ConfigError("--captions is required for image queries")
    captions = load_captions(args.captions, strict=False)
    q_emb, _ = forward(ckpt.model.visual_net, features.get(args.image_id))
    scored = []
    for cap in captions:
        tokens = normalize_tokenize(cap.text)
        try:
            if ckpt.model.textual_net.spec.kind == "sequence":
                enc = encode_sequence(tokens, ckpt.vocabulary)
            else:
                enc = featurize(tokens, ckpt.vocabulary, ckpt.train_config.weighting)
                if not len(enc):
                    continue
            c_emb, _ = forward(ckpt.model.textual_net, enc)
            s = cosine_score(q_emb, c_emb)
        except (CrossmodalError, ValueError):
            continue
        scored.append((-s, f"{cap.image_id}#{cap.caption_index}", cap.text))
    scored.sort()
    for rank, (neg_s, cid, text) in enumerate(scored[: args.top_k], start=1):
        print(f"{rank}\t{-neg_s:.6f}\t{cid}\t{text}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="crossmodal", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic captioned corpus")
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--images-per-cluster", type=int, default=10)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--vocab-per-cluster", type=int, default=12)
    p.add_argument("--noise-sigma", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="build a vocabulary and feature cache")
    p.add_argument("--captions", required=True)
    p.add_argument("--mode", choices=sorted(MODE_FLAGS), default="unigram")
    p.add_argument("--max-size", type=int, default=5000)
    p.add_argument("--weighting", choices=("binary", "tfidf"), default="binary")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train a ranking model")
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--embeddings", help="optional word2vec text file for first-layer init")
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--margin", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--methodology", choices=("i2t", "t2i"))
    p.add_argument("--weighting", choices=("binary", "tfidf"))
    p.add_argument("--seed", type=int)
    p.add_argument("--n-hu", type=int, dest="n_hu")
    p.add_argument("--n-emb", type=int, dest="n_emb")
    p.add_argument("--visual-n-hu", type=int, dest="visual_n_hu")
    p.add_argument("--textual", choices=("bag", "sse"))
    p.add_argument("--word-dim", type=int, dest="word_dim")
    p.add_argument("--kernels", type=int)
    p.add_argument("--window", type=int)
    p.add_argument("--n-test", type=int, dest="n_test")
    p.add_argument("--val-frac", type=float, dest="val_frac")
    p.add_argument("--val-pairs", type=int, dest="val_pairs")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--captions", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--vocab", help="optional vocabulary file to cross-check against the checkpoint")
    p.add_argument("--ks", default="1,2,5,10")
    p.add_argument("--seed", type=int, default=0, help="seed for the rnd_txt caption draw")
    p.add_argument("--lenient", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("query", help="rank images for a sentence or captions for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--captions")
    p.add_argument("--sentence")
    p.add_argument("--image-id", dest="image_id")
    p.add_argument("--top-k", type=int, default=10, dest="top_k")
    p.set_defaults(func=cmd_query)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CrossmodalError, ValueError, KeyError, OSError, RuntimeError) as exc:
        message = str(exc) or type(exc).__name__
        print(f"error {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


def entry() -> None:
    raise SystemExit(main())
