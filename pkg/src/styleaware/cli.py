"""Command-line entry point.

Exit codes: 0 success, 1 runtime error, 2 usage error.  Failures print a
single ``error: <kind>: <message>`` line on stderr.
"""

import argparse
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import torch

from . import __version__
from .errors import StyleAwareError
from .evaluation import evaluate_suite
from .grouping import (
    ArtistClassifier,
    ClassifierSpec,
    EmbeddingIndex,
    StyleSet,
    build_embedding_index,
    build_style_set,
    train_artist_classifier,
)
from .imaging import corpus_files, list_images, load_corpus, load_image, save_image, stylize_image, stylize_video
from .training import TrainConfig, load_config, load_stylizer, train

DEVICE_ENV = "STYLEAWARE_DEVICE"
log = logging.getLogger("styleaware")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def resolve_device(name=None) -> torch.device:
    name = name or os.environ.get(DEVICE_ENV, "cpu")
    device = torch.device(name)
    if device.type == "cuda" and not torch.cuda.is_available():
        raise StyleAwareError(f"device {name!r} requested but CUDA is not available")
    return device


def _seed_everything(seed: int) -> None:
    torch.manual_seed(seed)


# --------------------------------------------------------------------------
# manifest files

def write_manifest(path, style_set: StyleSet, query_path: str) -> None:
    lines = [
        f"# query: {query_path}",
        f"# quantile: {style_set.quantile}",
        f"# threshold: {style_set.threshold!r}",
        f"# members: {len(style_set.member_ids)}",
        *style_set.member_ids,
    ]
    text = "\n".join(lines) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_manifest(path):
    """Returns ``(header dict, member paths)``; relative paths resolve
    against the manifest's directory."""
    header, members = {}, []
    base = Path(path).parent
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.startswith("#"):
            key, _, value = line[1:].partition(":")
            header[key.strip()] = value.strip()
        elif line.strip():
            p = Path(line.strip())
            members.append(p if p.is_absolute() else base / p)
    return header, members


# --------------------------------------------------------------------------
# subcommands

def cmd_train(args) -> int:
    if args.desk:
        config = TrainConfig.desk(seed=args.seed)
    else:
        config = TrainConfig(seed=args.seed)
    if args.config:
        config = load_config(args.config, base=config)
    overrides = {k: v for k, v in (("total_iters", args.iters), ("patch_size", args.patch_size),
                                   ("width_scale", args.width_scale)) if v is not None}
    if overrides:
        params = config.to_dict()
        params.update(overrides)
        if "total_iters" in overrides and params["lr_drop_iter"] >= params["total_iters"]:
            params["lr_drop_iter"] = max(0, (2 * params["total_iters"]) // 3)
        config = TrainConfig(**params)

    content = [img for imgs in load_corpus(args.content).values() for img in imgs]
    if args.style_manifest:
        _, paths = read_manifest(args.style_manifest)
        style = [load_image(p)[0] for p in paths]
    else:
        style = [img for imgs in load_corpus(args.style).values() for img in imgs]
    result = train(config, content, style, checkpoint_dir=args.output, resume_from=args.resume,
                   device=resolve_device(args.device))
    print(result.final_checkpoint)
    return 0


def cmd_stylize(args) -> int:
    nets = load_stylizer(args.checkpoint, resolve_device(args.device))
    x = load_image(args.input).to(next(nets.parameters()).device)
    save_image(stylize_image(nets, x).cpu(), args.output)
    return 0


def cmd_stylize_video(args) -> int:
    nets = load_stylizer(args.checkpoint, resolve_device(args.device))
    n = stylize_video(args.input, nets, args.output)
    print(n)
    return 0


def cmd_classifier_train(args) -> int:
    corpus = load_corpus(args.corpus)
    if "" in corpus:
        raise StyleAwareError(f"{args.corpus}: classifier training needs one sub-directory per artist")
    spec = ClassifierSpec(width_scale=args.width_scale, image_size=args.image_size)
    clf = train_artist_classifier(corpus, spec, epochs=args.epochs, holdout_fraction=args.holdout,
                                  seed=args.seed)
    clf.save(args.output)
    print(json.dumps({"classifier": str(args.output), "holdout_accuracy": clf.holdout_accuracy}))
    return 0


def cmd_group(args) -> int:
    corpus_root = Path(args.corpus)
    files = [f for fs in corpus_files(corpus_root).values() for f in fs]
    if args.classifier:
        clf = ArtistClassifier.load(args.classifier)
    else:
        corpus = load_corpus(corpus_root)
        if "" in corpus:
            raise UsageError("--classifier is required for a flat corpus")
        clf = train_artist_classifier(corpus, ClassifierSpec(width_scale=args.width_scale,
                                                             image_size=args.image_size),
                                      seed=args.seed)
    query = Path(args.query)
    ids = {str(f.resolve()): f for f in files}
    images = {key: load_image(path)[0] for key, path in ids.items()}
    query_key = str(query.resolve())
    if query_key not in images:
        images[query_key] = load_image(query)[0]
    index = build_embedding_index(images, clf, source=str(corpus_root))
    if args.index_out:
        index.save(args.index_out)
    style_set = build_style_set(query_key, index, args.quantile, seed=args.seed)
    write_manifest(args.output, style_set, query_key)
    return 0


def cmd_evaluate(args) -> int:
    clf = ArtistClassifier.load(args.classifier)
    content_files = [f for fs in corpus_files(args.content).values() for f in fs]
    content = {f.name: load_image(f) for f in content_files}
    device = resolve_device(args.device)
    styles, stylizers = [], {}
    for spec in args.style:
        artist, sep, ckpt = spec.partition("=")
        if not sep:
            raise UsageError(f"--style expects ARTIST=CHECKPOINT, got {spec!r}")
        styles.append(StyleSet(artist, [], float("nan"), artist=artist))
        stylizers[artist] = load_stylizer(ckpt, device)
    report = evaluate_suite(stylizers, content, styles, clf, args.n_per_style, seed=args.seed)
    if args.report:
        report.write(args.report)
    print(json.dumps(report.summary(), sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="styleaware", description="Style-aware content loss style transfer.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--device", default=None, help=f"torch device (default: ${DEVICE_ENV} or cpu)")
        p.set_defaults(func=func)
        return p

    p = add("train", cmd_train, "train a stylizer on content images and a style set")
    p.add_argument("--content", required=True, help="directory of content images")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--style", help="directory of style images")
    group.add_argument("--style-manifest", help="style-set manifest written by 'group'")
    p.add_argument("--output", required=True, help="checkpoint directory")
    p.add_argument("--config", help="key = value file with TrainConfig fields")
    p.add_argument("--desk", action="store_true", help="start from small CPU-sized defaults")
    p.add_argument("--iters", type=int)
    p.add_argument("--patch-size", type=int)
    p.add_argument("--width-scale", type=float)
    p.add_argument("--resume", help="checkpoint to continue from")

    p = add("stylize", cmd_stylize, "stylize one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)

    p = add("stylize-video", cmd_stylize_video, "stylize a directory of numbered frames")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="directory of frames")
    p.add_argument("--output", required=True, help="output directory")

    p = add("classifier-train", cmd_classifier_train, "train the artist classifier")
    p.add_argument("--corpus", required=True, help="directory with one sub-directory per artist")
    p.add_argument("--output", required=True)
    p.add_argument("--width-scale", type=float, default=1.0)
    p.add_argument("--image-size", type=int, default=224)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--holdout", type=float, default=0.2)

    p = add("group", cmd_group, "retrieve the style set of a query image")
    p.add_argument("--query", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--quantile", type=float, default=0.10)
    p.add_argument("--classifier", help="trained classifier; trained on the corpus if omitted")
    p.add_argument("--width-scale", type=float, default=0.0625)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--output", default="-", help="manifest path ('-' for stdout)")
    p.add_argument("--index-out", help="also write the embedding index here")

    p = add("evaluate", cmd_evaluate, "deception rate of trained stylizers")
    p.add_argument("--classifier", required=True)
    p.add_argument("--content", required=True)
    p.add_argument("--style", action="append", required=True, metavar="ARTIST=CHECKPOINT")
    p.add_argument("--n-per-style", type=int, default=300)
    p.add_argument("--report", help="line-delimited JSON report path")
    return parser


def _fail(kind: str, message: str, code: int) -> int:
    message = " ".join(str(message).split())
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
    except UsageError as exc:
        return _fail("usage", exc, 2)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    _seed_everything(args.seed)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except UsageError as exc:
        return _fail("usage", exc, 2)
    except (StyleAwareError, OSError, ValueError, RuntimeError) as exc:
        return _fail(type(exc).__name__, exc, 1)


if __name__ == "__main__":
    sys.exit(main())
