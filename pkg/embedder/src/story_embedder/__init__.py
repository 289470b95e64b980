"""Embed story text into the SLMB sentence-embedding exchange format."""

from .encoder import EncoderConfig, SentenceEncoder
from .formats import ValidationError, write_cloze, write_corpus_index, write_embeddings
from .pipeline import embed_cloze_set, embed_corpus

__version__ = "0.1.0"
