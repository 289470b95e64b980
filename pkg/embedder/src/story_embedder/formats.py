"""Writers for the sentence-embedding exchange formats.

These mirror the byte/line layouts consumed by the scorer package:

    SLMB:   "SLMB" | version u32 LE = 1 | count u64 LE | dim u32 LE |
            count*dim float32 LE, row-major
    index:  "sentences_per_story=<k>\\tcontext_len=<t>" header, then one
            story per line as tab-separated sentence ids
    cloze:  t context ids, ending_a id, ending_b id, label "a"|"b"
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SLMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")


class ValidationError(ValueError):
    """Input rows or text that cannot produce a valid output file."""


def write_embeddings(rows: np.ndarray, path) -> None:
    rows = np.ascontiguousarray(rows, dtype=np.float32)
    if rows.ndim != 2 or rows.shape[1] < 1:
        raise ValidationError(f"embedding rows must be 2-D with positive dim, got {rows.shape}")
    if not np.isfinite(rows).all():
        raise ValidationError("non-finite embedding values")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, rows.shape[0], rows.shape[1]))
        fh.write(rows.astype("<f4").tobytes())


def write_corpus_index(stories: list[list[int]], sentences_per_story: int,
                       context_len: int, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"sentences_per_story={sentences_per_story}\tcontext_len={context_len}\n")
        for story in stories:
            fh.write("\t".join(str(i) for i in story) + "\n")


def write_cloze(items: list[tuple[list[int], int, int, str]], path) -> None:
    """Items are (context ids, ending_a id, ending_b id, label); labels pass
    through verbatim and must already be "a" or "b"."""
    with open(path, "w", encoding="utf-8") as fh:
        for context, ending_a, ending_b, label in items:
            if label not in ("a", "b"):
                raise ValidationError(f"cloze label must be 'a' or 'b', got {label!r}")
            cols = [str(i) for i in context] + [str(ending_a), str(ending_b), label]
            fh.write("\t".join(cols) + "\n")


def write_sentences(sentences: list[str], path) -> None:
    """Human-readable sidecar: one sentence per embedding row, same order."""
    with open(path, "w", encoding="utf-8") as fh:
        for sentence in sentences:
            fh.write(sentence + "\n")
