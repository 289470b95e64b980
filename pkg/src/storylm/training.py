"""Sampled-softmax training.

The objective is the negative log-likelihood of the true next sentence
against N-1 distractor sentences, optionally plus a weighted auxiliary
loss whose candidate set is only the context sentences (so the model
stops scoring context repeats highly). Gradients are exact reverse-mode
derivatives of the fixed forward graph; the optimizer is bias-corrected
Adam. Candidate embeddings are constants and are never updated.

Distractors are drawn uniformly without replacement, excluding the true
next sentence and the example's own context sentences. In static mode
one draw is shared across all steps (per-example exclusions applied by
masking); in dynamic mode every example in every batch gets a fresh
draw.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields, replace

import numpy as np

from .model import (ModelConfig, ModelParams, backward_from_output, forward_batch,
                    init_params, score_candidates)
from .rng import derive_seed, seeded_rng
from .store import (CorpusIndex, EmbeddingMatrix, FormatError, LengthError,
                    ValidationError, candidate_pool)

_DISTRACTOR_MODES = ("static", "dynamic")


@dataclass(frozen=True)
class TrainConfig:
    num_distractors: int = 255
    distractor_mode: str = "dynamic"
    cs_loss_weight: float = 1.0
    learning_rate: float = 1e-4
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 64
    max_steps: int = 1000
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self) -> None:
        if self.num_distractors < 1:
            raise ValidationError("num_distractors must be positive")
        if self.distractor_mode not in _DISTRACTOR_MODES:
            raise ValidationError(
                f"distractor_mode must be one of {_DISTRACTOR_MODES}, "
                f"got {self.distractor_mode!r}")
        if self.cs_loss_weight < 0:
            raise ValidationError("cs_loss_weight must be non-negative")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValidationError(f"{name} must lie in (0, 1)")
        if self.adam_eps <= 0:
            raise ValidationError("adam_eps must be positive")
        for name in ("batch_size", "max_steps", "eval_every"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")


_CONFIG_PARSERS = {
    "num_distractors": int, "distractor_mode": str, "cs_loss_weight": float,
    "learning_rate": float, "adam_beta1": float, "adam_beta2": float,
    "adam_eps": float, "batch_size": int, "max_steps": int, "seed": int,
    "eval_every": int,
}


def read_train_config(path, base: TrainConfig | None = None) -> TrainConfig:
    """Parse a "key = value" config file; keys must match TrainConfig fields."""
    values = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            key, sep, value = stripped.partition("=")
            key, value = key.strip(), value.strip()
            if not sep:
                raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
            if key not in _CONFIG_PARSERS:
                raise ValidationError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                values[key] = _CONFIG_PARSERS[key](value)
            except ValueError:
                raise ValidationError(
                    f"{path}:{lineno}: bad value for config key {key!r}: {value!r}"
                ) from None
    return replace(base or TrainConfig(), **values)


def write_train_config(config: TrainConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in fields(config):
            fh.write(f"{f.name} = {getattr(config, f.name)}\n")


@dataclass(eq=False)
class TrainExample:
    """One (context, true next sentence, distractors) instance."""

    context: np.ndarray
    true_id: int
    distractors: np.ndarray

    def __post_init__(self) -> None:
        self.context = np.ascontiguousarray(self.context, dtype=np.int64)
        self.distractors = np.ascontiguousarray(self.distractors, dtype=np.int64)
        if self.true_id in self.distractors:
            raise ValidationError(f"true id {self.true_id} appears among the distractors")


def sample_distractors(rng: np.random.Generator, pool, n: int, exclude=()) -> np.ndarray:
    """Draw n distinct ids uniformly from pool minus the excluded ids."""
    pool = np.asarray(pool, dtype=np.int64)
    if n < 0:
        raise ValidationError("cannot draw a negative number of distractors")
    if n == 0:
        return np.empty(0, dtype=np.int64)
    excl = np.unique(np.asarray(list(exclude), dtype=np.int64)) if len(exclude) else None
    need = n + (excl.size if excl is not None else 0)
    if pool.size < n:
        raise ValidationError(f"pool of {pool.size} cannot supply {n} distractors")
    idx = rng.choice(pool.size, size=min(pool.size, need), replace=False)
    drawn = pool[idx]
    if excl is not None:
        drawn = drawn[np.isin(drawn, excl, invert=True)]
    if drawn.size < n:
        raise ValidationError(
            f"pool minus excluded ids cannot supply {n} distractors")
    return drawn[:n]


def _softmax_loss_rows(logits: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-row NLL of column 0 plus dLoss/dlogits; -inf marks padded entries."""
    m = np.max(logits, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(logits - m), axis=1, keepdims=True))
    losses = lse[:, 0] - logits[:, 0]
    d_logits = np.exp(logits - lse)
    d_logits[:, 0] -= 1.0
    return losses, d_logits


def _gathered_loss(H, cand_embs, valid=None):
    """Sampled softmax over per-example candidate sets; target at column 0."""
    logits = np.einsum("bnd,bd->bn", cand_embs, H, dtype=np.float64)
    if valid is not None:
        logits = np.where(valid, logits, -np.inf)
    losses, d_logits = _softmax_loss_rows(logits)
    dH = np.einsum("bn,bnd->bd", d_logits, cand_embs, dtype=np.float64)
    return losses, dH


def _shared_pool_loss(H, true_embs, pool_embs, exclude_mask):
    """Sampled softmax where all examples share one distractor pool.

    exclude_mask (batch, pool) marks pool columns that are this example's
    true ending or one of its context sentences.
    """
    pool_logits = np.einsum("bd,nd->bn", H, pool_embs, dtype=np.float64)
    pool_logits[exclude_mask] = -np.inf
    true_logits = np.einsum("bd,bd->b", H, true_embs, dtype=np.float64)
    logits = np.concatenate([true_logits[:, None], pool_logits], axis=1)
    losses, d_logits = _softmax_loss_rows(logits)
    dH = d_logits[:, 0, None] * true_embs.astype(np.float64)
    dH += np.einsum("bn,nd->bd", d_logits[:, 1:], pool_embs, dtype=np.float64)
    return losses, dH


def nll_loss(h: np.ndarray, true_emb: np.ndarray, distractor_embs) -> float:
    """Negative log-probability of the true candidate among the distractors."""
    true_emb = np.asarray(true_emb)
    distractor_embs = np.asarray(distractor_embs, dtype=true_emb.dtype)
    if distractor_embs.size == 0:
        distractor_embs = distractor_embs.reshape(0, true_emb.shape[-1])
    cands = np.concatenate([true_emb[None, :], distractor_embs], axis=0)
    return -float(score_candidates(h, cands).log_probs[0])


def cs_loss(h: np.ndarray, true_emb: np.ndarray, context_embs) -> float:
    """NLL of the true candidate when only the context sentences compete."""
    context_embs = np.asarray(context_embs)
    if context_embs.ndim != 2 or context_embs.shape[0] < 1:
        raise ValidationError("cs_loss needs at least one context sentence")
    return nll_loss(h, true_emb, context_embs)


def _stack_examples(examples):
    contexts = np.stack([ex.context for ex in examples])
    trues = np.asarray([ex.true_id for ex in examples], dtype=np.int64)
    counts = [ex.distractors.size for ex in examples]
    width = 1 + max(counts)
    cand_ids = np.zeros((len(examples), width), dtype=np.int64)
    cand_ids[:, 0] = trues
    valid = np.zeros((len(examples), width), dtype=bool)
    valid[:, 0] = True
    for i, ex in enumerate(examples):
        cand_ids[i, 1:1 + counts[i]] = ex.distractors
        valid[i, 1:1 + counts[i]] = True
    if all(c == counts[0] for c in counts):
        valid = None
    return contexts, trues, cand_ids, valid


def _batch_loss(examples, params, config: ModelConfig, matrix: EmbeddingMatrix,
                cs_weight: float, train: bool, dropout_rng, want_grads: bool):
    if not examples:
        raise ValidationError("empty example batch")
    contexts, trues, cand_ids, valid = _stack_examples(examples)
    X = matrix.data[contexts].reshape(len(examples), -1)
    H, cache = forward_batch(params, config, X, train=train, dropout_rng=dropout_rng)

    losses, dH = _gathered_loss(H, matrix.data[cand_ids], valid)
    if cs_weight > 0.0:
        cs_ids = np.concatenate([trues[:, None], contexts], axis=1)
        cs_losses, cs_dH = _gathered_loss(H, matrix.data[cs_ids])
        losses = losses + cs_weight * cs_losses
        dH = dH + cs_weight * cs_dH
    loss = float(losses.mean())
    if not want_grads:
        return loss, None
    grads = backward_from_output(params, config, cache, dH / len(examples))
    return loss, grads


def total_loss(examples, params: ModelParams, config: ModelConfig,
               matrix: EmbeddingMatrix, cs_weight: float = 1.0, train: bool = False,
               dropout_rng: np.random.Generator | None = None) -> float:
    """Mean over the batch of nll_loss + cs_weight * cs_loss."""
    if isinstance(examples, TrainExample):
        examples = [examples]
    loss, _ = _batch_loss(examples, params, config, matrix, cs_weight,
                          train, dropout_rng, want_grads=False)
    return loss


def backward(examples, params: ModelParams, config: ModelConfig,
             matrix: EmbeddingMatrix, cs_weight: float = 1.0, train: bool = False,
             dropout_rng: np.random.Generator | None = None):
    """Analytic gradients of total_loss for every parameter tensor.

    Returns (loss, grads) with grads aligned to ModelParams.tensors().
    """
    if isinstance(examples, TrainExample):
        examples = [examples]
    return _batch_loss(examples, params, config, matrix, cs_weight,
                       train, dropout_rng, want_grads=True)


@dataclass(eq=False)
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_adam(params: ModelParams) -> AdamState:
    return AdamState([np.zeros_like(t) for t in params.tensors()],
                     [np.zeros_like(t) for t in params.tensors()])


def adam_step(params: ModelParams, grads, state: AdamState,
              config: TrainConfig) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update, in place."""
    tensors = params.tensors()
    if len(grads) != len(tensors):
        raise ValidationError("gradient list does not match parameter tensors")
    state.step += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(tensors, grads, state.m, state.v):
        g = np.asarray(g, dtype=p.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= config.learning_rate * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


class TrainingDiverged(RuntimeError):
    """Raised when a batch produces a non-finite loss."""

    def __init__(self, step: int, batch_ids):
        self.step = step
        self.batch_ids = list(batch_ids)
        super().__init__(f"non-finite loss at step {step} (batch stories {self.batch_ids})")


@dataclass(eq=False)
class TrainLogRecord:
    step: int
    loss: float
    metric_name: str = "none"
    metric_value: float = float("nan")

    def line(self) -> str:
        return f"{self.step}\t{self.loss!r}\t{self.metric_name}\t{self.metric_value!r}"


@dataclass(eq=False)
class TrainResult:
    params: ModelParams
    log: list[TrainLogRecord]
    loss_history: list[float]
    steps_run: int
    static_distractors: np.ndarray | None = None
    opt_state: AdamState | None = None
    best_metric: float | None = None
    stopped_early: bool = False


def save_opt_state(path, state: AdamState) -> None:
    """Sibling file to a checkpoint: "SLMO" | version | step u64 | m then v tensors."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sIQ", b"SLMO", 1, state.step))
        for group in (state.m, state.v):
            for tensor in group:
                fh.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def load_opt_state(path, params: ModelParams) -> AdamState:
    head = struct.Struct("<4sIQ")
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < head.size:
        raise LengthError(f"{path}: shorter than the optimizer-state header")
    magic, version, step = head.unpack_from(raw)
    if magic != b"SLMO":
        raise FormatError(f"{path}: bad magic {magic!r}, expected b'SLMO'")
    if version != 1:
        raise FormatError(f"{path}: unsupported optimizer-state version {version}")
    shapes = [t.shape for t in params.tensors()]
    total = sum(int(np.prod(s)) for s in shapes)
    if len(raw) != head.size + 8 * total:
        raise LengthError(f"{path}: expected {head.size + 8 * total} bytes, got {len(raw)}")
    offset = head.size
    groups = []
    for _ in range(2):
        tensors = []
        for shape in shapes:
            n = int(np.prod(shape))
            tensors.append(np.frombuffer(raw, dtype="<f4", count=n,
                                         offset=offset).reshape(shape).copy())
            offset += 4 * n
        groups.append(tensors)
    return AdamState(groups[0], groups[1], step)


def _batch_indices(n_examples: int, batch_size: int, rng: np.random.Generator):
    """Yield fixed-size index batches, reshuffling each epoch."""
    buffer = np.empty(0, dtype=np.int64)
    while True:
        while buffer.size < batch_size:
            buffer = np.concatenate([buffer, rng.permutation(n_examples)])
        yield buffer[:batch_size]
        buffer = buffer[batch_size:]


def train(matrix: EmbeddingMatrix, corpus: CorpusIndex, model_config: ModelConfig,
          train_config: TrainConfig, val_cloze=None, patience: int = 10,
          on_batch=None) -> TrainResult:
    """Train a scorer on (context, true next sentence) pairs from the corpus.

    Contexts are the first context_len sentences of each story; the truth is
    the sentence right after them. Fully deterministic given the config seed.
    When a labeled validation set is supplied, pairwise accuracy is logged at
    every eval point and training stops early after `patience` evaluations
    without improvement, returning the best parameters.
    """
    t = corpus.context_len
    if model_config.input_dim != t * matrix.dim:
        raise ValidationError(
            f"input_dim={model_config.input_dim} but corpus supplies "
            f"{t} x {matrix.dim} = {t * matrix.dim}")
    if model_config.output_dim != matrix.dim:
        raise ValidationError(
            f"output_dim={model_config.output_dim} does not match embedding dim {matrix.dim}")
    if corpus.num_stories == 0:
        raise ValidationError("corpus has no stories")

    contexts = corpus.stories[:, :t]
    trues = corpus.stories[:, t]
    pool = candidate_pool(corpus, t)
    cfg = train_config
    n_dis = cfg.num_distractors
    # Context ids never occupy the truth position, so only the true id can
    # collide with a corpus-derived pool.
    if cfg.distractor_mode == "dynamic" and pool.size - 1 < n_dis:
        raise ValidationError(
            f"pool of {pool.size} cannot supply {n_dis} distractors after exclusions")

    sample_rng = seeded_rng(cfg.seed, "distractors")
    shuffle_rng = seeded_rng(cfg.seed, "shuffle")
    dropout_rng = seeded_rng(cfg.seed, "dropout")
    params = init_params(model_config, derive_seed(cfg.seed, "init"))
    opt = init_adam(params)

    static_set = None
    if cfg.distractor_mode == "static":
        static_set = sample_distractors(sample_rng, pool, min(n_dis, pool.size))
        static_embs = matrix.data[static_set]

    log: list[TrainLogRecord] = []
    loss_history: list[float] = []
    window: list[float] = []
    best_metric = None
    best_params = None
    evals_since_best = 0
    stopped_early = False
    cs_w = cfg.cs_loss_weight
    batches = _batch_indices(corpus.num_stories, cfg.batch_size, shuffle_rng)
    step = 0

    for step in range(1, cfg.max_steps + 1):
        idx = next(batches)
        ctx_b = contexts[idx]
        true_b = trues[idx]
        X = matrix.data[ctx_b].reshape(idx.size, -1)
        H, cache = forward_batch(params, model_config, X, train=True,
                                 dropout_rng=dropout_rng)

        if cfg.distractor_mode == "dynamic":
            cand_ids = np.empty((idx.size, 1 + n_dis), dtype=np.int64)
            cand_ids[:, 0] = true_b
            for i in range(idx.size):
                cand_ids[i, 1:] = sample_distractors(
                    sample_rng, pool, n_dis,
                    exclude=np.concatenate([ctx_b[i], true_b[i:i + 1]]))
            losses, dH = _gathered_loss(H, matrix.data[cand_ids])
            if on_batch is not None:
                on_batch(step, cand_ids)
        else:
            exclude = static_set[None, :] == true_b[:, None]
            exclude |= (static_set[None, :, None] == ctx_b[:, None, :]).any(axis=2)
            losses, dH = _shared_pool_loss(H, matrix.data[true_b], static_embs, exclude)
            if on_batch is not None:
                on_batch(step, static_set)

        if cs_w > 0.0:
            cs_ids = np.concatenate([true_b[:, None], ctx_b], axis=1)
            cs_losses, cs_dH = _gathered_loss(H, matrix.data[cs_ids])
            losses = losses + cs_w * cs_losses
            dH = dH + cs_w * cs_dH

        loss = float(losses.mean())
        if not np.isfinite(loss):
            raise TrainingDiverged(step, idx)
        grads = backward_from_output(params, model_config, cache, dH / idx.size)
        adam_step(params, grads, opt, cfg)
        loss_history.append(loss)
        window.append(loss)

        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            record = TrainLogRecord(step, float(np.mean(window)))
            window.clear()
            if val_cloze is not None:
                from .evaluation import eval_cloze
                report = eval_cloze(params, model_config, matrix, val_cloze)
                record.metric_name = "cloze_accuracy"
                record.metric_value = report.accuracy
                if best_metric is None or report.accuracy > best_metric:
                    best_metric = report.accuracy
                    best_params = params.copy()
                    evals_since_best = 0
                else:
                    evals_since_best += 1
            log.append(record)
            if val_cloze is not None and evals_since_best >= patience:
                stopped_early = True
                break

    if best_params is not None:
        params = best_params
    return TrainResult(params, log, loss_history, step, static_set, opt,
                       best_metric, stopped_early)
