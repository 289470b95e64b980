"""Command-line workflows: import, train, eval (cloze/rank), sweep.

Every command resolves its configuration (defaults < config file < flags),
runs deterministically from one seed, and writes a manifest.json with input
digests next to its outputs. Exit codes: 0 success, 1 runtime failure,
2 input validation failure.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import evaluation, model, store, training
from .manifest import write_manifest


def _read_text_matrix(path) -> store.EmbeddingMatrix:
    """One embedding row per line, space-separated decimals."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            try:
                row = [float(p) for p in parts]
            except ValueError:
                raise store.ValidationError(f"{path}:{lineno}: non-numeric value") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise store.ValidationError(
                    f"{path}:{lineno}: row has {len(row)} values, expected {width}")
            rows.append(row)
    if not rows:
        raise store.ValidationError(f"{path}: no embedding rows found")
    return store.EmbeddingMatrix(np.asarray(rows, dtype=np.float32))


def _load_any_embeddings(path) -> store.EmbeddingMatrix:
    with open(path, "rb") as fh:
        head = fh.read(4)
    if head == store.MAGIC:
        return store.read_embeddings(path)
    return _read_text_matrix(path)


def cmd_import(args) -> int:
    matrix = _load_any_embeddings(args.embeddings_in)
    corpus = store.load_corpus_index(args.index_in)
    store.validate_corpus(corpus, matrix.count, path=args.index_in)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    store.write_embeddings(matrix, out / "embeddings.slmb")
    store.write_corpus_index(corpus, out / "corpus.idx")
    outputs = ["embeddings.slmb", "corpus.idx"]
    inputs = {"embeddings": args.embeddings_in, "index": args.index_in}
    if args.cloze_in:
        cloze = store.read_cloze(args.cloze_in)
        store.validate_cloze(cloze, matrix.count, path=args.cloze_in)
        store.write_cloze(cloze, out / "cloze.tsv")
        outputs.append("cloze.tsv")
        inputs["cloze"] = args.cloze_in
    write_manifest(out, "import", {"out": str(out)}, inputs, None, outputs)
    print(f"imported {matrix.count} embeddings (dim {matrix.dim}), "
          f"{corpus.num_stories} stories")
    return 0


def _add_train_flags(sub) -> None:
    sub.add_argument("--config", help="key = value training config file")
    sub.add_argument("--arch", choices=("mlp", "resmlp"))
    sub.add_argument("--hidden-dim", type=int, default=1024)
    sub.add_argument("--num-layers", type=int, default=3)
    sub.add_argument("--num-blocks", type=int, default=1)
    sub.add_argument("--dropout", type=float, default=0.5)
    sub.add_argument("--distractors", type=int, help="number of distractors N-1")
    sub.add_argument("--distractor-mode", choices=("static", "dynamic"))
    sub.add_argument("--cs-loss-weight", type=float)
    sub.add_argument("--seed", type=int)
    sub.add_argument("--steps", type=int, help="override max_steps")
    sub.add_argument("--batch-size", type=int)
    sub.add_argument("--learning-rate", type=float)
    sub.add_argument("--eval-every", type=int)


def _resolve_train_config(args) -> training.TrainConfig:
    cfg = training.TrainConfig()
    if args.config:
        cfg = training.read_train_config(args.config, base=cfg)
    overrides = {
        "num_distractors": args.distractors,
        "distractor_mode": args.distractor_mode,
        "cs_loss_weight": args.cs_loss_weight,
        "seed": args.seed,
        "max_steps": args.steps,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "eval_every": args.eval_every,
    }
    return replace(cfg, **{k: v for k, v in overrides.items() if v is not None})


def _resolve_model_config(args, matrix, corpus) -> model.ModelConfig:
    return model.ModelConfig(
        arch=args.arch or "resmlp",
        input_dim=corpus.context_len * matrix.dim,
        hidden_dim=args.hidden_dim,
        num_layers=args.num_layers,
        num_residual_blocks=args.num_blocks,
        output_dim=matrix.dim,
        dropout_rate=args.dropout,
    )


def cmd_train(args) -> int:
    matrix, corpus = store.load_corpus(args.embeddings, args.index)
    train_cfg = _resolve_train_config(args)
    model_cfg = _resolve_model_config(args, matrix, corpus)
    val = None
    inputs = {"embeddings": args.embeddings, "index": args.index}
    if args.val_cloze:
        val = store.read_cloze(args.val_cloze)
        store.validate_cloze(val, matrix.count, path=args.val_cloze)
        inputs["val_cloze"] = args.val_cloze
    if args.config:
        inputs["config"] = args.config

    result = training.train(matrix, corpus, model_cfg, train_cfg, val_cloze=val)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(out / "checkpoint.slmp", model_cfg, result.params)
    training.save_opt_state(out / "optimizer.slmo", result.opt_state)
    with open(out / "train_log.tsv", "w", encoding="utf-8") as fh:
        for record in result.log:
            fh.write(record.line() + "\n")
    training.write_train_config(train_cfg, out / "train_config.resolved")
    outputs = ["checkpoint.slmp", "optimizer.slmo", "train_log.tsv",
               "train_config.resolved"]
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg)}
    write_manifest(out, "train", config, inputs, train_cfg.seed, outputs)
    last = result.log[-1] if result.log else None
    summary = f"trained {result.steps_run} steps"
    if last is not None:
        summary += f", final mean loss {last.loss:.6f}"
        if last.metric_name != "none":
            summary += f", {last.metric_name} {last.metric_value:.4f}"
    print(summary)
    return 0


def cmd_eval_cloze(args) -> int:
    model_cfg, params = model.load_checkpoint(args.checkpoint)
    matrix = store.read_embeddings(args.embeddings)
    cloze = store.read_cloze(args.cloze)
    store.validate_cloze(cloze, matrix.count, path=args.cloze)
    if cloze.context_len * matrix.dim != model_cfg.input_dim:
        raise store.ValidationError(
            f"cloze context of {cloze.context_len} x {matrix.dim} does not match "
            f"model input_dim={model_cfg.input_dim}")
    report = evaluation.eval_cloze(params, model_cfg, matrix, cloze)
    print(f"cloze_accuracy\t{report.accuracy!r}")
    print(f"items\t{report.num_items}\tties\t{report.num_ties}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "cloze_report.tsv", "w", encoding="utf-8") as fh:
            fh.write(f"accuracy\t{report.accuracy!r}\n")
            fh.write(f"items\t{report.num_items}\n")
            fh.write(f"ties\t{report.num_ties}\n")
        write_manifest(out, "eval-cloze", {"checkpoint": args.checkpoint},
                       {"checkpoint": args.checkpoint, "embeddings": args.embeddings,
                        "cloze": args.cloze}, None, ["cloze_report.tsv"])
    return 0


def _stable_unique(ids: np.ndarray) -> np.ndarray:
    _, first = np.unique(ids, return_index=True)
    return ids[np.sort(first)]


def _resolve_pool(specs: str, corpus, true_ids) -> np.ndarray:
    parts = []
    for spec in specs.split(","):
        spec = spec.strip()
        if spec.startswith("position:"):
            if corpus is None:
                raise store.ValidationError("pool spec 'position:' needs --index")
            parts.append(store.candidate_pool(corpus, int(spec.split(":", 1)[1])))
        elif spec.startswith("file:"):
            path = spec.split(":", 1)[1]
            with open(path, "r", encoding="utf-8") as fh:
                ids = [int(line) for line in fh.read().split()]
            parts.append(np.asarray(ids, dtype=np.int64))
        elif spec == "truths":
            parts.append(np.asarray(true_ids, dtype=np.int64))
        else:
            raise store.ValidationError(
                f"bad pool spec {spec!r}; expected position:<p>, file:<path> or truths")
    if not parts:
        raise store.ValidationError("empty pool specification")
    return _stable_unique(np.concatenate(parts))


def cmd_eval_rank(args) -> int:
    model_cfg, params = model.load_checkpoint(args.checkpoint)
    matrix = store.read_embeddings(args.embeddings)
    corpus = None
    inputs = {"checkpoint": args.checkpoint, "embeddings": args.embeddings}
    if args.index:
        corpus = store.load_corpus_index(args.index)
        store.validate_corpus(corpus, matrix.count, path=args.index)
        inputs["index"] = args.index
    if args.cloze:
        cloze = store.read_cloze(args.cloze)
        store.validate_cloze(cloze, matrix.count, path=args.cloze)
        contexts = cloze.contexts
        true_ids = np.where(cloze.labels == 0, cloze.ending_a, cloze.ending_b)
        inputs["cloze"] = args.cloze
    elif corpus is not None:
        t = corpus.context_len
        contexts = corpus.stories[:, :t]
        true_ids = corpus.stories[:, t]
    else:
        raise store.ValidationError("eval rank needs --cloze or --index for queries")
    if contexts.shape[1] * matrix.dim != model_cfg.input_dim:
        raise store.ValidationError(
            f"query context of {contexts.shape[1]} x {matrix.dim} does not match "
            f"model input_dim={model_cfg.input_dim}")

    pool_ids = _resolve_pool(args.pool, corpus, true_ids)
    ks = tuple(int(k) for k in args.k.split(","))
    report = evaluation.eval_ranking(params, model_cfg, matrix, contexts, true_ids,
                                     pool_ids, ks=ks, workers=args.threads)
    for k in sorted(report.precision_at):
        print(f"p_at_{k}\t{report.precision_at[k]!r}")
    print(f"mrr\t{report.mrr!r}")
    print(f"median_rank\t{report.median_rank!r}")
    print(f"mean_rank\t{report.mean_rank!r}")
    print(f"pool_size\t{report.pool_size}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        evaluation.write_rank_report(out / "rank_report.tsv", report)
        write_manifest(out, "eval-rank",
                       {"pool": args.pool, "k": args.k, "threads": args.threads},
                       inputs, None, ["rank_report.tsv"])
    return 0


def cmd_sweep(args) -> int:
    matrix, corpus = store.load_corpus(args.embeddings, args.index)
    train_cfg = _resolve_train_config(args)
    model_cfg = _resolve_model_config(args, matrix, corpus)
    grid = [int(n) for n in args.grid.split(",") if n.strip()]
    if not grid:
        raise store.ValidationError("sweep grid is empty")
    rows = evaluation.sweep_distractors(matrix, corpus, model_cfg, train_cfg, grid)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    evaluation.write_sweep_table(out / "sweep.tsv", rows)
    evaluation.write_sweep_ranks(out / "sweep_ranks.tsv", rows)
    config = {"model": asdict(model_cfg), "train": asdict(train_cfg),
              "grid": grid}
    write_manifest(out, "sweep", config,
                   {"embeddings": args.embeddings, "index": args.index},
                   train_cfg.seed, ["sweep.tsv", "sweep_ranks.tsv"])
    failures = [row for row in rows if row.error is not None]
    for row in rows:
        if row.error is not None:
            print(f"N={row.num_distractors}\terror\t{row.error}")
        else:
            print(f"N={row.num_distractors}\tmedian_rank={row.median_rank!r}\t"
                  f"p_at_10={row.p_at_10!r}\tmrr={row.mrr!r}")
    if failures:
        print(f"{len(failures)} of {len(rows)} sweep cells failed", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="storylm",
        description="Sentence-level story language model: train and evaluate "
                    "next-sentence coherence scorers over precomputed embeddings.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_import = sub.add_parser("import", help="validate and convert embedding/index files")
    p_import.add_argument("--embeddings-in", required=True,
                          help="SLMB file or text matrix (one row per line)")
    p_import.add_argument("--index-in", required=True)
    p_import.add_argument("--cloze-in")
    p_import.add_argument("--out", required=True)
    p_import.set_defaults(func=cmd_import)

    p_train = sub.add_parser("train", help="train a scorer")
    p_train.add_argument("--embeddings", required=True)
    p_train.add_argument("--index", required=True)
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--val-cloze")
    _add_train_flags(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    eval_sub = p_eval.add_subparsers(dest="eval_command", required=True)

    p_cloze = eval_sub.add_parser("cloze", help="binary two-ending accuracy")
    p_cloze.add_argument("--checkpoint", required=True)
    p_cloze.add_argument("--embeddings", required=True)
    p_cloze.add_argument("--cloze", required=True)
    p_cloze.add_argument("--out")
    p_cloze.set_defaults(func=cmd_eval_cloze)

    p_rank = eval_sub.add_parser("rank", help="large-pool ranking metrics")
    p_rank.add_argument("--checkpoint", required=True)
    p_rank.add_argument("--embeddings", required=True)
    p_rank.add_argument("--index", help="corpus index (queries and position pools)")
    p_rank.add_argument("--cloze", help="use cloze items as queries")
    p_rank.add_argument("--pool", required=True,
                        help="comma-separated: position:<p> | file:<path> | truths")
    p_rank.add_argument("--k", default="1,10")
    p_rank.add_argument("--threads", type=int, default=1)
    p_rank.add_argument("--out")
    p_rank.set_defaults(func=cmd_eval_rank)

    p_sweep = sub.add_parser("sweep", help="train once per distractor count and rank")
    p_sweep.add_argument("--embeddings", required=True)
    p_sweep.add_argument("--index", required=True)
    p_sweep.add_argument("--grid", required=True, help="comma-separated distractor counts")
    p_sweep.add_argument("--out", required=True)
    _add_train_flags(p_sweep)
    p_sweep.set_defaults(func=cmd_sweep)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args) or 0
    except (store.FormatError, store.ValidationError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except training.TrainingDiverged as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
