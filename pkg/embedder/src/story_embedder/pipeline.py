"""Corpus and cloze-set embedding pipelines.

Inputs are plain text: one story per line with tab-separated sentences,
or one labeled cloze item per line (t context sentences, two endings and
an "a"/"b" label). Outputs are the SLMB embedding file, the story index
or cloze id file, a sentence sidecar, and a manifest recording the model
id, layer and pooling choices.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict
from pathlib import Path

from .encoder import EncoderConfig, SentenceEncoder
from .formats import (ValidationError, write_cloze, write_corpus_index,
                      write_embeddings, write_sentences)


def _read_story_lines(path) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty input")
    stories = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        sentences = line.split("\t")
        if width is None:
            width = len(sentences)
        elif len(sentences) != width:
            raise ValidationError(
                f"{path}:{lineno}: {len(sentences)} sentences, expected {width}")
        for col, sentence in enumerate(sentences):
            if not sentence.strip():
                raise ValidationError(f"{path}:{lineno}: empty sentence in column {col}")
        stories.append(sentences)
    return stories


def _digest(path) -> str:
    sha = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            sha.update(chunk)
    return "sha256:" + sha.hexdigest()


def _write_manifest(out_dir: Path, command: str, config: EncoderConfig,
                    input_path, outputs: list[str], extra: dict) -> None:
    doc = {
        "command": command,
        "encoder": asdict(config),
        "inputs": {"text": {"path": str(input_path), "digest": _digest(input_path)}},
        "outputs": sorted(outputs),
        **extra,
    }
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def embed_corpus(input_path, config: EncoderConfig, out_dir,
                 context_len: int | None = None,
                 encoder: SentenceEncoder | None = None) -> dict:
    """Embed a story corpus into SLMB + index files; returns a summary dict."""
    stories = _read_story_lines(input_path)
    sentences_per_story = len(stories[0])
    if context_len is None:
        context_len = sentences_per_story - 1
    if not 1 <= context_len < sentences_per_story:
        raise ValidationError(
            f"context_len={context_len} out of range for "
            f"{sentences_per_story}-sentence stories")

    flat = [s for story in stories for s in story]
    encoder = encoder or SentenceEncoder(config)
    result = encoder.encode(flat)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(result.rows, out / "embeddings.slmb")
    ids = iter(range(len(flat)))
    story_ids = [[next(ids) for _ in story] for story in stories]
    write_corpus_index(story_ids, sentences_per_story, context_len, out / "corpus.idx")
    write_sentences(flat, out / "sentences.txt")
    summary = {
        "stories": len(stories),
        "sentences": len(flat),
        "dim": encoder.dim,
        "truncated": result.num_truncated,
    }
    _write_manifest(out, "embed-corpus", config, input_path,
                    ["embeddings.slmb", "corpus.idx", "sentences.txt"], summary)
    return summary


def _read_cloze_lines(path) -> list[list[str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ValidationError(f"{path}: empty input")
    items = []
    width = None
    for lineno, line in enumerate(lines, start=1):
        fields = line.split("\t")
        if width is None:
            width = len(fields)
            if width < 4:
                raise ValidationError(
                    f"{path}:{lineno}: need context sentences, two endings and a label")
        elif len(fields) != width:
            raise ValidationError(f"{path}:{lineno}: {len(fields)} fields, expected {width}")
        if fields[-1] not in ("a", "b"):
            raise ValidationError(
                f"{path}:{lineno}: label must be 'a' or 'b', got {fields[-1]!r}")
        for col, sentence in enumerate(fields[:-1]):
            if not sentence.strip():
                raise ValidationError(f"{path}:{lineno}: empty sentence in column {col}")
        items.append(fields)
    return items


def embed_cloze_set(input_path, config: EncoderConfig, out_dir,
                    encoder: SentenceEncoder | None = None) -> dict:
    """Embed labeled two-ending items into SLMB + cloze files."""
    items = _read_cloze_lines(input_path)
    t = len(items[0]) - 3
    flat = [s for item in items for s in item[:-1]]
    encoder = encoder or SentenceEncoder(config)
    result = encoder.encode(flat)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_embeddings(result.rows, out / "embeddings.slmb")
    per_item = t + 2
    cloze_rows = []
    for i, item in enumerate(items):
        base = i * per_item
        cloze_rows.append((list(range(base, base + t)), base + t, base + t + 1,
                           item[-1]))
    write_cloze(cloze_rows, out / "cloze.tsv")
    write_sentences(flat, out / "sentences.txt")
    summary = {
        "items": len(items),
        "context_len": t,
        "sentences": len(flat),
        "dim": encoder.dim,
        "truncated": result.num_truncated,
    }
    _write_manifest(out, "embed-cloze", config, input_path,
                    ["embeddings.slmb", "cloze.tsv", "sentences.txt"], summary)
    return summary
