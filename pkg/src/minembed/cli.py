"""Command-line front end chaining the pipeline.

Subcommands: prepare, triplets, train, embed, eval, stats, gradcheck.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Diagnostics go to stderr; data goes to files or stdout. Every run that
writes files also writes a run-metadata JSON with config, seed, and
SHA-256 digests of inputs and outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import corpus, metrics, storage, trainer, triplets
from .encoder import (
    DEFAULT_D_EMB,
    DEFAULT_D_HID,
    DEFAULT_D_OUT,
    DEFAULT_LORA_ALPHA,
    DEFAULT_LORA_DROPOUT,
    DEFAULT_LORA_RANK,
    DEFAULT_VOCAB_SIZE,
    POOLING_LAST,
    POOLING_MEAN,
    Tokenizer,
    encode_batch,
    init_params,
    load_checkpoint,
)
from .errors import PipelineError, UsageError

_ENCODER_CONFIG_KEYS = {
    "vocab_size": DEFAULT_VOCAB_SIZE,
    "d_emb": DEFAULT_D_EMB,
    "d_hid": DEFAULT_D_HID,
    "d_out": DEFAULT_D_OUT,
    "lora_rank": DEFAULT_LORA_RANK,
    "lora_alpha": DEFAULT_LORA_ALPHA,
    "lora_dropout": DEFAULT_LORA_DROPOUT,
}

_TRAIN_DEFAULTS_HELP = (
    "Hyperparameter defaults: epochs 2, batch size 128, peak learning rate 2e-4, "
    "warmup fraction 0.1, min learning rate 0, temperature 0.05, weight decay 0.01, "
    "betas (0.9, 0.999), eps 1e-8, adapter rank r=16, adapter alpha 32, adapter dropout 0.05, "
    "pooling last_token. A JSON config file passed via --config overrides flags."
)


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage problems as UsageError."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="minembed",
        description="Contrastive sentence-embedding pipeline: corpus prep, triplets, training, evaluation.",
    )
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser(
        "prepare",
        help="clean, segment, deduplicate, and split raw documents into a manifest",
        formatter_class=fmt,
    )
    p.add_argument("--in", dest="input", required=True, help="input: directory of .txt files, a .txt file, or a .jsonl of {doc_id, source_name, text}")
    p.add_argument("--out", required=True, help="output manifest (line-delimited JSON)")
    p.add_argument("--min-chars", type=int, default=20, help="drop sentences shorter than this many characters")
    p.add_argument("--train-frac", type=float, default=0.9, help="per-source training fraction")
    p.add_argument("--test-frac", type=float, default=0.0, help="per-source test fraction (carved before val)")
    p.add_argument("--seed", type=int, required=True, help="split permutation seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads for per-document cleaning")
    p.set_defaults(func=_cmd_prepare)

    p = sub.add_parser(
        "triplets",
        help="build anchor/positive/negative triplets from a split manifest",
        formatter_class=fmt,
    )
    p.add_argument("--corpus", required=True, help="manifest produced by prepare")
    p.add_argument("--out", required=True, help="output triplet file (line-delimited JSON)")
    p.add_argument("--min-distance", type=int, default=500, help="minimum index distance for hard negatives")
    p.add_argument("--cross-source", action="store_true", help="prefer negatives from a different source")
    p.add_argument("--provider", default=None, help="paraphrase provider command (line-JSON protocol); omit for the deterministic built-in fallback")
    p.add_argument("--seed", type=int, required=True, help="negative sampling seed")
    p.add_argument("--threads", type=int, default=1, help="max in-flight paraphrase requests")
    p.set_defaults(func=_cmd_triplets)

    p = sub.add_parser(
        "train",
        help="train the encoder on triplets with the contrastive objective",
        formatter_class=fmt,
        epilog=_TRAIN_DEFAULTS_HELP,
    )
    p.add_argument("--triplets", required=True, help="triplet file; rows with split=train are used")
    p.add_argument("--val", default=None, help="validation triplet file (default: split=val rows of --triplets)")
    p.add_argument("--config", default=None, help="JSON config; keys override flags")
    p.add_argument("--out-dir", required=True, help="directory for checkpoints, logs, and reports")
    p.add_argument("--seed", type=int, default=0, help="master seed (shuffling, dropout, init)")
    p.add_argument("--lora-only", action="store_true", help="train only the low-rank adapters")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser(
        "embed",
        help="encode texts with a trained checkpoint into a CEVX embedding file",
        formatter_class=fmt,
    )
    p.add_argument("--checkpoint", required=True, help="CEMB checkpoint")
    p.add_argument("--texts", required=True, help="manifest/triplet-style .jsonl with sent_id and text, or plain text lines")
    p.add_argument("--out", required=True, help="output embedding file (CEVX; ids go to <out>.ids)")
    p.add_argument("--pooling", choices=[POOLING_LAST, POOLING_MEAN], default=POOLING_LAST, help="sentence pooling strategy")
    p.set_defaults(func=_cmd_embed)

    p = sub.add_parser(
        "eval",
        help="compute retrieval/similarity metrics from embeddings",
        formatter_class=fmt,
    )
    p.add_argument("--embeddings", required=True, help="CEVX embedding file with .ids sidecar")
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--pairs", help="TSV: query_id<TAB>cand_id for retrieval, plus a numeric third column for similarity scoring")
    group.add_argument("--qrels", help="TSV: query_id<TAB>cand_id<TAB>grade for graded retrieval")
    p.add_argument("--k", default="1,5,10", help="comma-separated cutoffs for Acc@K / Recall@K")
    p.add_argument("--gain", choices=[metrics.GAIN_LINEAR, metrics.GAIN_EXP], default=metrics.GAIN_LINEAR, help="NDCG gain function")
    p.add_argument("--table", action="store_true", help="print a plain-text table instead of JSON")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("stats", help="corpus statistics for a manifest", formatter_class=fmt)
    p.add_argument("--corpus", required=True, help="manifest produced by prepare")
    p.add_argument("--vocab-size", type=int, default=DEFAULT_VOCAB_SIZE, help="tokenizer vocabulary size")
    p.set_defaults(func=_cmd_stats)

    p = sub.add_parser(
        "gradcheck",
        help="compare analytic gradients against central finite differences",
        formatter_class=fmt,
    )
    p.add_argument("--checkpoint", required=True, help="CEMB checkpoint to check")
    p.add_argument("--batch", required=True, help="triplet file; the first rows form the probe batch")
    p.add_argument("--h", type=float, default=1e-4, help="finite-difference step")
    p.add_argument("--samples", type=int, default=50, help="number of sampled coordinates")
    p.add_argument("--batch-size", type=int, default=8, help="triplets taken from the batch file")
    p.add_argument("--lora-only", action="store_true", help="check adapter-only training mode")
    p.add_argument("--seed", type=int, default=0, help="coordinate sampling and dropout seed")
    p.set_defaults(func=_cmd_gradcheck)

    return parser


# -- command implementations ---------------------------------------------


def _load_documents(input_path: str) -> list[corpus.RawDocument]:
    path = Path(input_path)
    if path.is_dir():
        docs = []
        for file in sorted(path.glob("*.txt")):
            docs.append(corpus.RawDocument(doc_id=file.stem, source_name=file.stem, text=file.read_text(encoding="utf-8")))
        if not docs:
            raise UsageError(f"no .txt files in {path}")
        return docs
    if not path.exists():
        raise UsageError(f"input {path} does not exist")
    if path.suffix == ".jsonl":
        return [
            corpus.RawDocument(doc_id=str(r["doc_id"]), source_name=str(r["source_name"]), text=str(r["text"]))
            for r in storage.read_jsonl(path)
        ]
    return [corpus.RawDocument(doc_id=path.stem, source_name=path.stem, text=path.read_text(encoding="utf-8"))]


def _cmd_prepare(args: argparse.Namespace) -> int:
    started = time.monotonic()
    docs = _load_documents(args.input)
    manifest = corpus.build_manifest(docs, min_chars=args.min_chars, threads=args.threads)
    manifest = corpus.stratified_split(manifest, train_frac=args.train_frac, seed=args.seed, test_frac=args.test_frac)
    storage.write_jsonl(args.out, corpus.manifest_to_rows(manifest))
    storage.write_run_metadata(
        args.out + ".meta.json",
        command="prepare",
        config={
            "min_chars": args.min_chars,
            "train_frac": args.train_frac,
            "test_frac": args.test_frac,
            "threads": args.threads,
        },
        seed=args.seed,
        inputs=[],
        outputs=[args.out],
        duration_s=time.monotonic() - started,
    )
    counts = {s: len(manifest.subset(s)) for s in corpus.SPLITS}
    print(f"prepare: {len(manifest.records)} sentences ({counts})", file=sys.stderr)
    return 0


def _cmd_triplets(args: argparse.Namespace) -> int:
    started = time.monotonic()
    manifest = corpus.manifest_from_rows(storage.read_jsonl(args.corpus))
    policy = triplets.NegativePolicy(
        min_index_distance=args.min_distance,
        require_different_source=args.cross_source,
        seed=args.seed,
    )
    if args.provider:
        with triplets.SubprocessProvider(args.provider) as provider:
            result = triplets.build_triplets(manifest, policy, provider, threads=args.threads)
    else:
        result = triplets.build_triplets(manifest, policy, threads=args.threads)
    storage.write_jsonl(args.out, triplets.triplets_to_rows(result.triplets))
    storage.write_run_metadata(
        args.out + ".meta.json",
        command="triplets",
        config={
            "min_distance": args.min_distance,
            "cross_source": args.cross_source,
            "provider": args.provider,
            "threads": args.threads,
            "skipped_paraphrase": result.skipped_paraphrase,
            "skipped_negative": result.skipped_negative,
        },
        seed=args.seed,
        inputs=[args.corpus],
        outputs=[args.out],
        duration_s=time.monotonic() - started,
    )
    print(
        f"triplets: {len(result.triplets)} built, "
        f"{result.skipped_paraphrase} paraphrase skips, {result.skipped_negative} negative skips",
        file=sys.stderr,
    )
    return 0


def _train_config_from(args: argparse.Namespace) -> tuple[trainer.TrainConfig, dict]:
    """Defaults, then flags, then config-file keys (highest precedence)."""
    values = {f.name: f.default for f in fields(trainer.TrainConfig)}
    values["seed"] = args.seed
    values["train_lora_only"] = args.lora_only
    encoder_cfg = dict(_ENCODER_CONFIG_KEYS)
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(overrides, dict):
            raise UsageError(f"config {args.config} must be a JSON object")
        for key, value in overrides.items():
            if key in values:
                values[key] = value
            elif key in encoder_cfg:
                encoder_cfg[key] = value
            else:
                raise UsageError(f"unknown config key {key!r}")
    return trainer.TrainConfig(**values), encoder_cfg


def _cmd_train(args: argparse.Namespace) -> int:
    started = time.monotonic()
    config, encoder_cfg = _train_config_from(args)
    rows = storage.read_jsonl(args.triplets)
    all_triplets = triplets.triplets_from_rows(rows)
    train_rows = [t for t in all_triplets if t.split == "train"]
    if args.val:
        val_rows = triplets.triplets_from_rows(storage.read_jsonl(args.val))
    else:
        val_rows = [t for t in all_triplets if t.split == "val"]
    params = init_params(config.seed, **encoder_cfg)
    params, reports = trainer.train(train_rows, params, config, val_triplets=val_rows or None, out_dir=args.out_dir)
    report_rows = [
        {"epoch": r.epoch, "mean_train_loss": r.mean_train_loss, "val_loss": r.val_loss, "checkpoint": r.checkpoint}
        for r in reports
    ]
    out_dir = Path(args.out_dir)
    storage.write_jsonl(out_dir / "train-report.jsonl", report_rows)
    outputs = [out_dir / "train-report.jsonl", out_dir / "train-log.jsonl"]
    outputs += [r.checkpoint for r in reports if r.checkpoint]
    storage.write_run_metadata(
        out_dir / "run-metadata.json",
        command="train",
        config={**config.to_dict(), **encoder_cfg},
        seed=config.seed,
        inputs=[args.triplets] + ([args.val] if args.val else []),
        outputs=outputs,
        duration_s=time.monotonic() - started,
    )
    for r in reports:
        val = f"{r.val_loss:.6f}" if r.val_loss is not None else "n/a"
        print(f"epoch {r.epoch}: train loss {r.mean_train_loss:.6f}, val loss {val}", file=sys.stderr)
    return 0


def _load_texts(path_str: str) -> tuple[list[str], list[str]]:
    """Texts to embed: manifest rows, triplet rows (anchor plus positive,
    the positive id prefixed with ``pos::``), or plain lines."""
    path = Path(path_str)
    if path.suffix == ".jsonl":
        rows = storage.read_jsonl(path)
        ids, texts = [], []
        for i, row in enumerate(rows):
            if "anchor_id" in row:
                ids.append(str(row["anchor_id"]))
                texts.append(str(row["anchor_text"]))
                ids.append(f"pos::{row['anchor_id']}")
                texts.append(str(row["positive_text"]))
            else:
                ids.append(str(row.get("sent_id", f"line-{i + 1:06d}")))
                texts.append(str(row["text"]))
        return ids, texts
    lines = [ln for ln in path.read_text(encoding="utf-8").splitlines() if ln.strip()]
    return [f"line-{i + 1:06d}" for i in range(len(lines))], lines


def _cmd_embed(args: argparse.Namespace) -> int:
    started = time.monotonic()
    params = load_checkpoint(args.checkpoint)
    ids, texts = _load_texts(args.texts)
    vectors = np.vstack(
        [encode_batch(texts[i : i + 256], params, pooling=args.pooling) for i in range(0, len(texts), 256)]
    ) if texts else np.zeros((0, params.w2.shape[1]))
    storage.write_embeddings(args.out, ids, vectors)
    storage.write_run_metadata(
        args.out + ".meta.json",
        command="embed",
        config={"pooling": args.pooling},
        seed=None,
        inputs=[args.checkpoint, args.texts],
        outputs=[args.out, storage.ids_sidecar(args.out)],
        duration_s=time.monotonic() - started,
    )
    print(f"embed: {len(ids)} vectors of dim {vectors.shape[1] if len(ids) else 0}", file=sys.stderr)
    return 0


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise UsageError(f"--k must be comma-separated integers, got {text!r}") from exc
    if not ks or any(k < 1 for k in ks):
        raise UsageError(f"--k values must be >= 1, got {text!r}")
    return ks


def _embedding_lookup(path: str) -> dict[str, np.ndarray]:
    ids, matrix = storage.read_embeddings(path)
    return {sid: matrix[i].astype(np.float64) for i, sid in enumerate(ids)}


def _cmd_eval(args: argparse.Namespace) -> int:
    lookup = _embedding_lookup(args.embeddings)
    ks = _parse_ks(args.k)

    def vec(identifier: str) -> np.ndarray:
        if identifier not in lookup:
            raise PipelineError("E_MISSING_EMBEDDING", f"no embedding for id {identifier!r}")
        return lookup[identifier]

    retrieval_task = graded_task = sts_task = None
    if args.pairs:
        pair_rows = storage.read_pairs(args.pairs)
        if pair_rows and all(score is not None for _, _, score in pair_rows):
            sts_task = metrics.STSTask(pairs=[(vec(q), vec(c), float(s)) for q, c, s in pair_rows])
        else:
            gold = {q: c for q, c, _ in pair_rows}
            seen: dict[str, None] = {}
            for _, c, _ in pair_rows:
                seen.setdefault(c)
            retrieval_task = metrics.RetrievalTask(
                queries=[(q, vec(q)) for q, _, _ in pair_rows],
                candidates=[(c, vec(c)) for c in seen],
                gold=gold,
            )
    else:
        qrels = storage.read_qrels(args.qrels)
        query_ids: dict[str, None] = {}
        for qid, _ in qrels:
            query_ids.setdefault(qid)
        graded_task = metrics.GradedTask(
            queries=[(qid, vec(qid)) for qid in query_ids],
            candidates=[(cid, v) for cid, v in lookup.items() if cid not in query_ids],
            qrels=qrels,
        )
    report = metrics.evaluate(retrieval=retrieval_task, graded=graded_task, sts=sts_task, ks=ks, gain=args.gain)
    if args.table:
        print(report_tables(report.to_dict(), model_name=Path(args.embeddings).stem))
    else:
        print(json.dumps(report.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_stats(args: argparse.Namespace) -> int:
    manifest = corpus.manifest_from_rows(storage.read_jsonl(args.corpus))
    stats = corpus.corpus_stats(manifest, Tokenizer(vocab_size=args.vocab_size))
    print(json.dumps(stats.to_dict(), indent=2, sort_keys=True))
    return 0


def _cmd_gradcheck(args: argparse.Namespace) -> int:
    params = load_checkpoint(args.checkpoint)
    batch = triplets.triplets_from_rows(storage.read_jsonl(args.batch))[: args.batch_size]
    if not batch:
        raise PipelineError("E_EMPTY_BATCH", f"no triplets in {args.batch}")
    config = trainer.TrainConfig(seed=args.seed, train_lora_only=args.lora_only)
    error = trainer.gradient_check(params, batch, h=args.h, samples=args.samples, config=config, seed=args.seed)
    print(json.dumps({"max_rel_error": error, "samples": args.samples, "h": args.h, "lora_only": args.lora_only}))
    return 0


def report_tables(report: dict, model_name: str = "model") -> str:
    """Plain-text table: Model/Acc@1/Acc@5/MRR for retrieval tasks,
    Task/Metric/Score rows otherwise."""
    acc = report.get("acc_at") or {}
    if report.get("mrr") is not None:
        headers = ["Model", "Acc@1", "Acc@5", "MRR"]
        row = [
            model_name,
            _fmt_pct(acc.get("1")),
            _fmt_pct(acc.get("5")),
            f"{report['mrr']:.4f}",
        ]
        return _render_table(headers, [row])
    rows = []
    if report.get("ndcg_at_10") is not None:
        rows.append(["graded-retrieval", "NDCG@10", f"{report['ndcg_at_10']:.4f}"])
        for k, value in sorted(report.get("recall_at", {}).items(), key=lambda kv: int(kv[0])):
            rows.append(["graded-retrieval", f"Recall@{k}", f"{value:.4f}"])
    if report.get("spearman") is not None:
        rows.append(["similarity", "Spearman", f"{report['spearman']:.4f}"])
    return _render_table(["Task", "Metric", "Score"], rows)


def _fmt_pct(value: float | None) -> str:
    return "n/a" if value is None else f"{100.0 * value:.2f}%"


def _render_table(headers: list[str], rows: list[list[str]]) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows)) if rows else len(h) for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(widths[i]) for i, h in enumerate(headers))]
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines)


def run(argv: list[str] | None = None) -> int:
    """Dispatch a command line; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return 1
        if getattr(args, "seed", None) is not None and args.seed < 0:
            raise UsageError(f"--seed must be nonnegative, got {args.seed}")
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code
    except PipelineError as exc:
        print(str(exc), file=sys.stderr)
        return exc.exit_code


def main() -> None:
    raise SystemExit(run())
