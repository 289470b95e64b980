"""story-embed: turn story text into SLMB embedding files."""

from __future__ import annotations

import argparse
import sys

from .encoder import EncoderConfig
from .formats import ValidationError
from .pipeline import embed_cloze_set, embed_corpus


def _add_encoder_flags(sub) -> None:
    sub.add_argument("--model", required=True,
                     help="pretrained masked LM name or local path")
    sub.add_argument("--layer", type=int, default=-2,
                     help="hidden layer to pool (default: second-to-last)")
    sub.add_argument("--include-special-tokens", action="store_true",
                     help="keep boundary tokens in the mean")
    sub.add_argument("--batch-size", type=int, default=32)
    sub.add_argument("--max-length", type=int,
                     help="token truncation limit (default: model maximum)")


def _encoder_config(args) -> EncoderConfig:
    return EncoderConfig(model=args.model, layer=args.layer,
                         include_special_tokens=args.include_special_tokens,
                         batch_size=args.batch_size, max_length=args.max_length)


def cmd_corpus(args) -> int:
    summary = embed_corpus(args.input, _encoder_config(args), args.out,
                           context_len=args.context_len)
    print(f"embedded {summary['sentences']} sentences from {summary['stories']} "
          f"stories (dim {summary['dim']}, {summary['truncated']} truncated)")
    return 0


def cmd_cloze(args) -> int:
    summary = embed_cloze_set(args.input, _encoder_config(args), args.out)
    print(f"embedded {summary['items']} items, {summary['sentences']} sentences "
          f"(dim {summary['dim']}, {summary['truncated']} truncated)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="story-embed",
        description="Embed story text into the SLMB format with a pretrained "
                    "bidirectional masked language model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_corpus = sub.add_parser("corpus", help="one story per line, tab-separated sentences")
    p_corpus.add_argument("--input", required=True)
    p_corpus.add_argument("--out", required=True)
    p_corpus.add_argument("--context-len", type=int,
                          help="default: sentences per story minus one")
    _add_encoder_flags(p_corpus)
    p_corpus.set_defaults(func=cmd_corpus)

    p_cloze = sub.add_parser("cloze",
                             help="one item per line: context sentences, two endings, label")
    p_cloze.add_argument("--input", required=True)
    p_cloze.add_argument("--out", required=True)
    _add_encoder_flags(p_cloze)
    p_cloze.set_defaults(func=cmd_cloze)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (ValidationError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
