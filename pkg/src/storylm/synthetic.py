"""Synthetic corpora with a known generative structure.

Stories whose true next-sentence embedding is a fixed random linear map
of the concatenated context plus Gaussian noise. A model that recovers
the map separates true endings from other stories' endings, which makes
these corpora an oracle for end-to-end training behaviour.
"""

from __future__ import annotations

import numpy as np

from .store import ClozeEvalSet, CorpusIndex, EmbeddingMatrix, ValidationError


def make_linear_corpus(n_stories: int, dim: int = 64, context_len: int = 4,
                       sentences_per_story: int = 5, noise: float = 0.1,
                       seed: int = 0) -> tuple[EmbeddingMatrix, CorpusIndex]:
    """Build a corpus where sentence[t] = A @ concat(sentences[:t]) + noise.

    Context sentences are iid standard normal; A has variance 1/(t*dim) so
    the signal is unit-scale; the per-story noise vector is scaled to
    `noise` times the signal norm. Sentences after position t (when
    sentences_per_story > context_len + 1) are filler noise.
    """
    if n_stories < 1:
        raise ValidationError("need at least one story")
    if context_len + 1 > sentences_per_story:
        raise ValidationError("stories must have room for context plus a truth")
    rng = np.random.default_rng(seed)
    t = context_len
    ctx = rng.standard_normal((n_stories, t, dim))
    lin_map = rng.standard_normal((t * dim, dim)) / np.sqrt(t * dim)
    signal = ctx.reshape(n_stories, t * dim) @ lin_map
    noise_vec = rng.standard_normal((n_stories, dim))
    scale = noise * np.linalg.norm(signal, axis=1, keepdims=True) / np.sqrt(dim)
    truth = signal + scale * noise_vec

    sentences = np.empty((n_stories, sentences_per_story, dim), dtype=np.float64)
    sentences[:, :t] = ctx
    sentences[:, t] = truth
    trailing = sentences_per_story - t - 1
    if trailing:
        sentences[:, t + 1:] = rng.standard_normal((n_stories, trailing, dim))

    matrix = EmbeddingMatrix(sentences.reshape(-1, dim).astype(np.float32))
    stories = np.arange(n_stories * sentences_per_story,
                        dtype=np.int64).reshape(n_stories, sentences_per_story)
    corpus = CorpusIndex(stories, sentences_per_story, context_len)
    return matrix, corpus


def make_pairwise_cloze(corpus: CorpusIndex, seed: int = 0,
                        n_items: int | None = None) -> ClozeEvalSet:
    """Two-ending items: each story's truth against another story's truth."""
    if corpus.num_stories < 2:
        raise ValidationError("pairwise items need at least two stories")
    rng = np.random.default_rng(seed)
    t = corpus.context_len
    n = corpus.num_stories if n_items is None else min(n_items, corpus.num_stories)
    picks = np.arange(n)
    truths = corpus.stories[:, t]
    offsets = rng.integers(1, corpus.num_stories, size=n)
    wrong = truths[(picks + offsets) % corpus.num_stories]
    labels = rng.integers(0, 2, size=n).astype(np.uint8)
    ending_a = np.where(labels == 0, truths[picks], wrong)
    ending_b = np.where(labels == 0, wrong, truths[picks])
    return ClozeEvalSet(corpus.stories[picks, :t], ending_a, ending_b, labels)
