"""Evaluation: binary cloze accuracy and large-pool ranking.

Ranking is a total order: candidates sort by descending logit with exact
ties broken toward the lower sentence id, so runs agree bitwise. Logits
accumulate in float64 (inputs stay float32) to keep ties stable, and
evaluation always runs the scorer in eval mode.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .model import ModelConfig, ModelParams, ScoreResult, forward_batch
from .store import ClozeEvalSet, CorpusIndex, EmbeddingMatrix, ValidationError


def rank_of_true(scores: ScoreResult, true_id: int) -> int:
    """1-based rank of `true_id`; ties broken toward the lower candidate id."""
    pos = np.flatnonzero(scores.ids == true_id)
    if pos.size == 0:
        raise ValidationError(f"true id {true_id} is not among the candidates")
    lt = scores.logits[pos[0]]
    above = int((scores.logits > lt).sum())
    tied_lower = int(((scores.logits == lt) & (scores.ids < true_id)).sum())
    return 1 + above + tied_lower


@dataclass(eq=False)
class ClozeReport:
    accuracy: float
    num_items: int
    num_ties: int
    picks: np.ndarray  # (n,) uint8; 0 = ending_a, 1 = ending_b


def _forward_contexts(params, config, matrix, contexts, batch=1024):
    out = np.empty((contexts.shape[0], config.output_dim), dtype=params.dtype)
    for start in range(0, contexts.shape[0], batch):
        chunk = contexts[start:start + batch]
        X = matrix.data[chunk].reshape(chunk.shape[0], -1)
        H, _ = forward_batch(params, config, X, train=False)
        out[start:start + batch] = H
    return out


def eval_cloze(params: ModelParams, config: ModelConfig, matrix: EmbeddingMatrix,
               eval_set: ClozeEvalSet) -> ClozeReport:
    """Pick the ending with the larger dot product; ties go to ending_a."""
    if eval_set.num_items == 0:
        raise ValidationError("empty cloze evaluation set")
    H = _forward_contexts(params, config, matrix, eval_set.contexts)
    la = np.einsum("bd,bd->b", matrix.data[eval_set.ending_a], H, dtype=np.float64)
    lb = np.einsum("bd,bd->b", matrix.data[eval_set.ending_b], H, dtype=np.float64)
    picks = (lb > la).astype(np.uint8)
    ties = int((la == lb).sum())
    accuracy = float((picks == eval_set.labels).mean())
    return ClozeReport(accuracy, eval_set.num_items, ties, picks)


@dataclass(eq=False)
class RankReport:
    ranks: np.ndarray            # (n_queries,) 1-based
    true_ids: np.ndarray
    top1_ids: np.ndarray
    top1_logits: np.ndarray
    precision_at: dict[int, float]
    mrr: float
    median_rank: float
    mean_rank: float
    pool_size: int

    @property
    def num_queries(self) -> int:
        return self.ranks.shape[0]


def _summarize_ranks(ranks, true_ids, top1_ids, top1_logits, ks, pool_size):
    ranks = np.asarray(ranks, dtype=np.int64)
    precision = {int(k): float((ranks <= k).mean()) for k in ks}
    return RankReport(
        ranks=ranks, true_ids=np.asarray(true_ids), top1_ids=np.asarray(top1_ids),
        top1_logits=np.asarray(top1_logits), precision_at=precision,
        mrr=float((1.0 / ranks).mean()), median_rank=float(np.median(ranks)),
        mean_rank=float(ranks.mean()), pool_size=pool_size)


def eval_ranking(params: ModelParams, config: ModelConfig, matrix: EmbeddingMatrix,
                 contexts: np.ndarray, true_ids: np.ndarray, pool_ids,
                 ks=(1, 10), query_batch: int = 128, workers: int = 1) -> RankReport:
    """Rank the true next sentence within the full candidate pool, per query.

    Queries are independent, so workers > 1 shards them across threads;
    per-query results do not depend on the sharding.
    """
    pool_ids = np.asarray(pool_ids, dtype=np.int64)
    if pool_ids.size == 0:
        raise ValidationError("empty ranking pool")
    true_ids = np.asarray(true_ids, dtype=np.int64)
    position = {int(pid): i for i, pid in enumerate(pool_ids)}
    try:
        true_pos = np.asarray([position[int(t)] for t in true_ids], dtype=np.int64)
    except KeyError as err:
        raise ValidationError(f"true id {err.args[0]} is missing from the pool") from None

    pool_embs = matrix.data[pool_ids]
    n = contexts.shape[0]
    ranks = np.empty(n, dtype=np.int64)
    top1_ids = np.empty(n, dtype=np.int64)
    top1_logits = np.empty(n, dtype=np.float64)

    def run_span(lo: int, hi: int) -> None:
        for start in range(lo, hi, query_batch):
            stop = min(start + query_batch, hi)
            H = _forward_contexts(params, config, matrix, contexts[start:stop])
            logits = np.einsum("qd,nd->qn", H, pool_embs, dtype=np.float64)
            lt = logits[np.arange(stop - start), true_pos[start:stop]]
            above = (logits > lt[:, None]).sum(axis=1)
            tied = ((logits == lt[:, None])
                    & (pool_ids[None, :] < true_ids[start:stop, None])).sum(axis=1)
            ranks[start:stop] = 1 + above + tied
            best = logits.max(axis=1)
            masked_ids = np.where(logits == best[:, None], pool_ids[None, :],
                                  np.iinfo(np.int64).max)
            top1_ids[start:stop] = masked_ids.min(axis=1)
            top1_logits[start:stop] = best

    if workers <= 1 or n <= query_batch:
        run_span(0, n)
    else:
        # Spans are whole batches so the float32 forward sees identical batch
        # compositions no matter the worker count; results stay bitwise equal.
        n_batches = -(-n // query_batch)
        bounds = np.linspace(0, n_batches, workers + 1, dtype=np.int64) * query_batch
        spans = [(int(bounds[i]), int(min(bounds[i + 1], n)))
                 for i in range(workers) if bounds[i] < min(bounds[i + 1], n)]
        with ThreadPoolExecutor(max_workers=workers) as pex:
            list(pex.map(lambda s: run_span(*s), spans))
    return _summarize_ranks(ranks, true_ids, top1_ids, top1_logits, ks, pool_ids.size)


def _merge_topk(ids, logits, k):
    order = np.lexsort((ids, -logits))[:k]
    return ids[order], logits[order]


def _topk_shard(h, pool, ids, k, block):
    best_ids = np.empty(0, dtype=np.int64)
    best_logits = np.empty(0, dtype=np.float64)
    for start in range(0, pool.shape[0], block):
        chunk = slice(start, min(start + block, pool.shape[0]))
        logits = np.einsum("nd,d->n", pool[chunk], h, dtype=np.float64)
        best_ids, best_logits = _merge_topk(
            np.concatenate([best_ids, ids[chunk]]),
            np.concatenate([best_logits, logits]), k)
    return best_ids, best_logits


def topk_scores(h: np.ndarray, pool: np.ndarray, k: int, ids=None,
                block: int = 16384, workers: int = 1):
    """The k largest dot products against `h`, ties toward lower id.

    Traverses the pool in blocks keeping a running top-k; with workers > 1
    the pool is split into contiguous shards whose local top-k results are
    merged deterministically, so the outcome is identical to a single
    worker's.
    """
    pool = np.asarray(pool)
    if not 1 <= k <= pool.shape[0]:
        raise ValidationError(f"k={k} out of range for pool of {pool.shape[0]}")
    ids = np.arange(pool.shape[0], dtype=np.int64) if ids is None \
        else np.asarray(ids, dtype=np.int64)
    if workers <= 1 or pool.shape[0] <= block:
        return _topk_shard(h, pool, ids, k, block)
    bounds = np.linspace(0, pool.shape[0], workers + 1, dtype=np.int64)
    with ThreadPoolExecutor(max_workers=workers) as pex:
        parts = list(pex.map(
            lambda se: _topk_shard(h, pool[se[0]:se[1]], ids[se[0]:se[1]], min(k, se[1] - se[0]), block),
            [(int(bounds[i]), int(bounds[i + 1])) for i in range(workers) if bounds[i] < bounds[i + 1]]))
    all_ids = np.concatenate([p[0] for p in parts])
    all_logits = np.concatenate([p[1] for p in parts])
    return _merge_topk(all_ids, all_logits, k)


def write_rank_report(path, report: RankReport) -> None:
    """Per-query lines (query, true id, rank, top-1 id, top-1 logit) + summary footer."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("query\ttrue_id\trank\ttop1_id\ttop1_logit\n")
        for q in range(report.num_queries):
            fh.write(f"{q}\t{int(report.true_ids[q])}\t{int(report.ranks[q])}\t"
                     f"{int(report.top1_ids[q])}\t{report.top1_logits[q]!r}\n")
        pk = "\t".join(f"p_at_{k}={v!r}" for k, v in sorted(report.precision_at.items()))
        fh.write(f"#summary\tpool_size={report.pool_size}\t{pk}\t"
                 f"mrr={report.mrr!r}\tmedian_rank={report.median_rank!r}\t"
                 f"mean_rank={report.mean_rank!r}\n")


@dataclass(eq=False)
class SweepRow:
    num_distractors: int
    median_rank: float | None = None
    mean_rank: float | None = None
    p_at_10: float | None = None
    mrr: float | None = None
    ranks: np.ndarray | None = None
    error: str | None = None


def sweep_distractors(matrix: EmbeddingMatrix, corpus: CorpusIndex,
                      model_config: ModelConfig, train_template, grid,
                      pool_ids=None) -> list[SweepRow]:
    """Train one model per distractor count and rank the true endings.

    Every cell reuses the template's seed and data; per-cell failures are
    recorded in the row and the sweep continues.
    """
    from .store import candidate_pool
    from .training import train

    if not len(grid):
        raise ValidationError("sweep grid is empty")
    t = corpus.context_len
    contexts = corpus.stories[:, :t]
    true_ids = corpus.stories[:, t]
    if pool_ids is None:
        pool_ids = candidate_pool(corpus, t)
    rows = []
    for n in grid:
        row = SweepRow(num_distractors=int(n))
        try:
            cfg = replace(train_template, num_distractors=int(n))
            result = train(matrix, corpus, model_config, cfg)
            report = eval_ranking(result.params, model_config, matrix,
                                  contexts, true_ids, pool_ids, ks=(1, 10))
            row.median_rank = report.median_rank
            row.mean_rank = report.mean_rank
            row.p_at_10 = report.precision_at[10]
            row.mrr = report.mrr
            row.ranks = report.ranks
        except Exception as err:  # noqa: BLE001 - cell failures must not kill the sweep
            row.error = f"{type(err).__name__}: {err}"
        rows.append(row)
    return rows


def write_sweep_table(path, rows: list[SweepRow]) -> None:
    """Tab-separated sweep summary: N median_rank mean_rank p_at_10 mrr."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#N\tmedian_rank\tmean_rank\tp_at_10\tmrr\n")
        for row in rows:
            if row.error is not None:
                fh.write(f"{row.num_distractors}\terror\terror\terror\t{row.error}\n")
            else:
                fh.write(f"{row.num_distractors}\t{row.median_rank!r}\t"
                         f"{row.mean_rank!r}\t{row.p_at_10!r}\t{row.mrr!r}\n")


def write_sweep_ranks(path, rows: list[SweepRow]) -> None:
    """Plot-ready long format: one (N, rank) pair per query per sweep cell."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#N\trank\n")
        for row in rows:
            if row.ranks is None:
                continue
            for r in row.ranks:
                fh.write(f"{row.num_distractors}\t{int(r)}\n")
