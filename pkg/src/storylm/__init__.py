"""Sentence-level story language model.

Given embeddings of the previous sentences of a story, predict an
embedding for the next sentence and rank candidate sentences by how
coherently they continue the story.
"""

from .model import (ModelConfig, ModelParams, ScoreResult, forward, init_params,
                    layer_norm, load_checkpoint, param_count, save_checkpoint,
                    score_candidates)
from .store import (ClozeEvalSet, CorpusIndex, EmbeddingMatrix, FormatError,
                    LengthError, ValidationError, candidate_pool, load_corpus,
                    read_cloze, read_embeddings, write_cloze, write_embeddings)
from .training import (AdamState, TrainConfig, TrainExample, TrainingDiverged,
                       TrainResult, adam_step, backward, cs_loss, init_adam,
                       nll_loss, sample_distractors, total_loss, train)
from .evaluation import (ClozeReport, RankReport, eval_cloze, eval_ranking,
                         rank_of_true, sweep_distractors, topk_scores)

__version__ = "0.1.0"
