import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from storylm.store import CorpusIndex, EmbeddingMatrix


@pytest.fixture
def tiny_matrix():
    rng = np.random.default_rng(7)
    return EmbeddingMatrix(rng.standard_normal((30, 4)).astype(np.float32))


@pytest.fixture
def tiny_corpus():
    # 6 stories x 5 sentences over the 30-row matrix
    stories = np.arange(30, dtype=np.int64).reshape(6, 5)
    return CorpusIndex(stories, sentences_per_story=5, context_len=4)
