"""Embedding file format and corpus model.

Sentence embeddings travel between components as a single binary file
(magic ``SLMB``) holding one float32 row per sentence. Story structure
lives in a separate text index file so the embedding matrix stays a pure
array and sentence ids stay plain integers:

    SLMB file:   "SLMB" | version u32 LE | count u64 LE | dim u32 LE |
                 count*dim float32 LE values, row-major
    index file:  header "sentences_per_story=<k>\\tcontext_len=<t>",
                 then one story per line, tab-separated sentence ids
    cloze file:  one item per line: t context ids, ending_a id,
                 ending_b id, label "a"|"b", tab-separated

Embeddings are stored and consumed unnormalized.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

MAGIC = b"SLMB"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIQI")  # magic, version, count, dim
HEADER_SIZE = _HEADER.size


class FormatError(ValueError):
    """File bytes do not match the declared layout (magic, version, field)."""


class LengthError(FormatError):
    """File is truncated or carries trailing bytes."""


class ValidationError(ValueError):
    """Well-formed input whose content violates an invariant."""


@dataclass(eq=False)
class EmbeddingMatrix:
    """Immutable count x dim float32 matrix; row i is the embedding of sentence i."""

    data: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.data, dtype=np.float32)
        if arr.ndim != 2:
            raise ValidationError(f"embedding data must be 2-D, got shape {arr.shape}")
        if arr.shape[1] < 1:
            raise ValidationError("embedding dim must be positive")
        bad = _first_nonfinite_row(arr)
        if bad is not None:
            raise ValidationError(f"non-finite value in embedding row {bad}")
        self.data = arr

    @property
    def count(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def rows(self, ids) -> np.ndarray:
        return self.data[np.asarray(ids)]


def _first_nonfinite_row(arr: np.ndarray) -> int | None:
    if np.isfinite(arr).all():
        return None
    return int(np.where(~np.isfinite(arr).all(axis=1))[0][0])


def write_embeddings(matrix: EmbeddingMatrix, path) -> None:
    """Write `matrix` to `path` in the SLMB binary layout."""
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, matrix.count, matrix.dim)
    payload = np.ascontiguousarray(matrix.data, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_embeddings(path) -> EmbeddingMatrix:
    """Read and validate an SLMB file; round-trips write_embeddings bitwise."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < HEADER_SIZE:
        raise LengthError(f"{path}: file shorter than the {HEADER_SIZE}-byte header")
    magic, version, count, dim = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    if dim < 1:
        raise FormatError(f"{path}: embedding dim must be positive, got {dim}")
    expected = HEADER_SIZE + count * dim * 4
    if len(raw) != expected:
        raise LengthError(
            f"{path}: expected {expected} bytes for count={count} dim={dim}, got {len(raw)}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=HEADER_SIZE).reshape(count, dim)
    try:
        return EmbeddingMatrix(data.copy())
    except ValidationError as err:
        raise ValidationError(f"{path}: {err}") from None


@dataclass(eq=False)
class CorpusIndex:
    """Story structure over an embedding matrix.

    `stories` is an (n_stories, sentences_per_story) int64 array of sentence
    ids; each id occurs in exactly one story.
    """

    stories: np.ndarray
    sentences_per_story: int
    context_len: int

    def __post_init__(self) -> None:
        self.stories = np.ascontiguousarray(self.stories, dtype=np.int64)
        if self.stories.ndim != 2 or self.stories.shape[1] != self.sentences_per_story:
            raise ValidationError(
                f"stories array shape {self.stories.shape} does not match "
                f"sentences_per_story={self.sentences_per_story}"
            )
        if self.sentences_per_story < 1 or self.context_len < 1:
            raise ValidationError("sentences_per_story and context_len must be positive")
        if self.context_len >= self.sentences_per_story:
            raise ValidationError(
                f"context_len={self.context_len} must be smaller than "
                f"sentences_per_story={self.sentences_per_story}"
            )

    @property
    def num_stories(self) -> int:
        return self.stories.shape[0]


def write_corpus_index(corpus: CorpusIndex, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(
            f"sentences_per_story={corpus.sentences_per_story}\t"
            f"context_len={corpus.context_len}\n"
        )
        for story in corpus.stories:
            fh.write("\t".join(str(int(i)) for i in story) + "\n")


def _parse_header_field(field: str, key: str, path) -> int:
    name, _, value = field.partition("=")
    if name != key:
        raise FormatError(f"{path}:1: expected '{key}=<int>', got {field!r}")
    try:
        parsed = int(value)
    except ValueError:
        raise FormatError(f"{path}:1: {key} is not an integer: {value!r}") from None
    return parsed


def load_corpus_index(path) -> CorpusIndex:
    """Parse a story index file; reports the offending line on error."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty index file")
    fields = lines[0].split("\t")
    if len(fields) != 2:
        raise FormatError(f"{path}:1: header must have exactly two tab-separated fields")
    sentences_per_story = _parse_header_field(fields[0], "sentences_per_story", path)
    context_len = _parse_header_field(fields[1], "context_len", path)

    stories = []
    seen: set[int] = set()
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split("\t")
        try:
            ids = [int(p) for p in parts]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-integer sentence id") from None
        if len(ids) != sentences_per_story:
            raise ValidationError(
                f"{path}:{lineno}: story has {len(ids)} sentences, "
                f"expected {sentences_per_story}"
            )
        for sid in ids:
            if sid < 0:
                raise ValidationError(f"{path}:{lineno}: negative sentence id {sid}")
            if sid in seen:
                raise ValidationError(f"{path}:{lineno}: duplicate sentence id {sid}")
            seen.add(sid)
        stories.append(ids)

    arr = np.asarray(stories, dtype=np.int64).reshape(len(stories), sentences_per_story)
    try:
        return CorpusIndex(arr, sentences_per_story, context_len)
    except ValidationError as err:
        raise ValidationError(f"{path}: {err}") from None


def validate_corpus(corpus: CorpusIndex, count: int, path="corpus index") -> None:
    """Cross-check sentence ids against an embedding matrix of `count` rows."""
    out = np.where((corpus.stories < 0) | (corpus.stories >= count))
    if out[0].size:
        row, col = int(out[0][0]), int(out[1][0])
        raise ValidationError(
            f"{path}:{row + 2}: sentence id {int(corpus.stories[row, col])} "
            f"out of range for {count} embeddings"
        )


def load_corpus(embeddings_path, index_path) -> tuple[EmbeddingMatrix, CorpusIndex]:
    """Load embeddings plus story index and cross-validate the ids."""
    matrix = read_embeddings(embeddings_path)
    corpus = load_corpus_index(index_path)
    validate_corpus(corpus, matrix.count, path=index_path)
    return matrix, corpus


def candidate_pool(corpus: CorpusIndex, position: int) -> np.ndarray:
    """Ids of every sentence occupying `position` in its story, in story order."""
    if not 0 <= position < corpus.sentences_per_story:
        raise ValidationError(
            f"position {position} out of range for "
            f"{corpus.sentences_per_story}-sentence stories"
        )
    return corpus.stories[:, position].copy()


@dataclass(eq=False)
class ClozeEvalSet:
    """Binary-choice items: t context ids, two candidate endings, gold label."""

    contexts: np.ndarray  # (n, t) int64
    ending_a: np.ndarray  # (n,) int64
    ending_b: np.ndarray  # (n,) int64
    labels: np.ndarray    # (n,) uint8; 0 = ending_a, 1 = ending_b

    def __post_init__(self) -> None:
        self.contexts = np.ascontiguousarray(self.contexts, dtype=np.int64)
        self.ending_a = np.ascontiguousarray(self.ending_a, dtype=np.int64)
        self.ending_b = np.ascontiguousarray(self.ending_b, dtype=np.int64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        n = self.contexts.shape[0]
        if self.contexts.ndim != 2:
            raise ValidationError("cloze contexts must be a 2-D id array")
        for name, arr in (("ending_a", self.ending_a), ("ending_b", self.ending_b),
                          ("labels", self.labels)):
            if arr.shape != (n,):
                raise ValidationError(f"cloze field {name} has shape {arr.shape}, expected ({n},)")
        if self.labels.size and self.labels.max() > 1:
            raise ValidationError("cloze labels must be 0 (ending_a) or 1 (ending_b)")

    @property
    def num_items(self) -> int:
        return self.contexts.shape[0]

    @property
    def context_len(self) -> int:
        return self.contexts.shape[1]


def write_cloze(eval_set: ClozeEvalSet, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ctx, ea, eb, lab in zip(eval_set.contexts, eval_set.ending_a,
                                    eval_set.ending_b, eval_set.labels):
            cols = [str(int(i)) for i in ctx] + [str(int(ea)), str(int(eb)),
                                                 "b" if lab else "a"]
            fh.write("\t".join(cols) + "\n")


def read_cloze(path) -> ClozeEvalSet:
    """Parse a cloze eval file; context length is inferred from the first line."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise FormatError(f"{path}: empty cloze file")
    width = len(lines[0].split("\t"))
    if width < 4:
        raise FormatError(f"{path}:1: need at least 1 context id, two endings and a label")
    t = width - 3
    contexts, ending_a, ending_b, labels = [], [], [], []
    for lineno, line in enumerate(lines, start=1):
        parts = line.split("\t")
        if len(parts) != width:
            raise ValidationError(f"{path}:{lineno}: expected {width} fields, got {len(parts)}")
        try:
            ids = [int(p) for p in parts[:-1]]
        except ValueError:
            raise ValidationError(f"{path}:{lineno}: non-integer id") from None
        if parts[-1] not in ("a", "b"):
            raise ValidationError(f"{path}:{lineno}: label must be 'a' or 'b', got {parts[-1]!r}")
        contexts.append(ids[:t])
        ending_a.append(ids[t])
        ending_b.append(ids[t + 1])
        labels.append(0 if parts[-1] == "a" else 1)
    return ClozeEvalSet(np.asarray(contexts, dtype=np.int64),
                        np.asarray(ending_a, dtype=np.int64),
                        np.asarray(ending_b, dtype=np.int64),
                        np.asarray(labels, dtype=np.uint8))


def validate_cloze(eval_set: ClozeEvalSet, count: int, path="cloze file") -> None:
    for name, arr in (("context", eval_set.contexts), ("ending_a", eval_set.ending_a),
                      ("ending_b", eval_set.ending_b)):
        if arr.size and (arr.min() < 0 or arr.max() >= count):
            raise ValidationError(f"{path}: {name} id out of range for {count} embeddings")


def load_sentences(path) -> list[str]:
    """Optional sidecar: one sentence of text per embedding row, same order."""
    with open(path, "r", encoding="utf-8") as fh:
        return fh.read().splitlines()
