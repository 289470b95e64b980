"""Sentence embeddings from a pretrained bidirectional masked LM.

A sentence is represented by the mean of its contextual token vectors
from one hidden layer (default: second-to-last). Boundary/special tokens
and padding are excluded from the mean unless asked otherwise. Sentences
are embedded in isolation, never with story context.

Unique sentence texts are embedded once, in lexicographic order, so
identical sentences always share bitwise-identical rows and reordering
the corpus cannot change any row.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModel, AutoTokenizer

from .formats import ValidationError


@dataclass(frozen=True)
class EncoderConfig:
    model: str
    layer: int = -2
    include_special_tokens: bool = False
    batch_size: int = 32
    max_length: int | None = None


@dataclass(eq=False)
class EncodeResult:
    rows: np.ndarray          # (n_sentences, hidden) float32, input order
    num_truncated: int


class SentenceEncoder:
    def __init__(self, config: EncoderConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model)
        self.model = AutoModel.from_pretrained(config.model, output_hidden_states=True)
        self.model.eval()
        limit = getattr(self.tokenizer, "model_max_length", None)
        if config.max_length is not None:
            self.max_length = config.max_length
        elif limit is not None and limit < 1_000_000:
            self.max_length = int(limit)
        else:
            self.max_length = 512

    @property
    def dim(self) -> int:
        return int(self.model.config.hidden_size)

    def _embed_batch(self, sentences: list[str]) -> tuple[np.ndarray, int]:
        enc = self.tokenizer(sentences, padding=True, truncation=True,
                             max_length=self.max_length,
                             return_special_tokens_mask=True, return_tensors="pt")
        lengths = [len(ids) for ids in
                   self.tokenizer(sentences, truncation=False)["input_ids"]]
        truncated = sum(1 for n in lengths if n > self.max_length)
        special = enc.pop("special_tokens_mask")
        with torch.no_grad():
            out = self.model(**enc)
        hidden = out.hidden_states[self.config.layer]
        mask = enc["attention_mask"]
        if not self.config.include_special_tokens:
            mask = mask * (1 - special)
        mask = mask.to(hidden.dtype)
        denom = mask.sum(dim=1, keepdim=True)
        if (denom == 0).any():
            bad = int((denom == 0).nonzero()[0, 0])
            raise ValidationError(f"sentence {sentences[bad]!r} has no tokens to pool")
        pooled = (hidden * mask.unsqueeze(-1)).sum(dim=1) / denom
        return pooled.to(torch.float32).cpu().numpy(), truncated

    def encode(self, sentences: list[str]) -> EncodeResult:
        """Embed every sentence; duplicates get identical rows."""
        for i, s in enumerate(sentences):
            if not s.strip():
                raise ValidationError(f"sentence {i} is empty")
        unique = sorted(set(sentences))
        index = {s: i for i, s in enumerate(unique)}
        unique_rows = np.empty((len(unique), self.dim), dtype=np.float32)
        truncated = 0
        for start in range(0, len(unique), self.config.batch_size):
            batch = unique[start:start + self.config.batch_size]
            rows, n_trunc = self._embed_batch(batch)
            unique_rows[start:start + len(batch)] = rows
            truncated += n_trunc
        pick = np.asarray([index[s] for s in sentences], dtype=np.int64)
        return EncodeResult(unique_rows[pick], truncated)
