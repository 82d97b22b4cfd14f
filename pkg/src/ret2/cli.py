"""Command-line entry point: ``ret2 {synth,train,encode,index,search,eval,diag}``.

Configs are JSON files; ``--set key=value`` overrides win over file values.
Every command writes ``<output>.manifest.json`` before its outputs. Errors
are printed to stderr as one JSON object; exit codes are 0 ok, 2 config
error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import contextlib
import hashlib
import json
import logging
import os
import sys
import warnings

import numpy as np

from . import diagnostics, index as ix
from .cell import RET2, embed, load_checkpoint, save_checkpoint
from .diagnostics import profile_gates, rank_collapse_score
from .embeddings import read_embeddings, write_embeddings
from .errors import ConfigError, DataError, Ret2Error
from .features import read_features, write_features
from .synth import SynthConfig, split_queries, synth_corpus
from .training import TrainConfig, train

logger = logging.getLogger("ret2")


# -- helpers -------------------------------------------------------------

def git_blob_hash(path):
    with open(path, "rb") as fh:
        data = fh.read()
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _load_json(path, what):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}", field=what) from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{what} is not valid JSON: {exc}", field=what) from None


def _overrides(pairs):
    out = {}
    for item in pairs or []:
        key, sep, raw = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not key=value", field="--set")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve(path, overrides, what):
    cfg = _load_json(path, what) if path else {}
    if not isinstance(cfg, dict):
        raise ConfigError(f"{what} must be a JSON object", field=what)
    cfg.update(overrides)
    return cfg


def _write_manifest(args, config, inputs, outputs):
    manifest = {
        "command": args.command,
        "config": config,
        "seed": config.get("seed") if isinstance(config, dict) else None,
        "inputs": {p: git_blob_hash(p) for p in inputs if p},
        "outputs": [p for p in outputs if p],
    }
    with open(outputs[0] + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_relevance(path):
    rel = _load_json(path, "relevance")
    if isinstance(rel, dict) and "relevance" in rel:
        rel = rel["relevance"]
    if not isinstance(rel, dict):
        raise DataError("relevance file must map query ids to document ids", field="relevance")
    return rel


def _need(path, field):
    if not os.path.exists(path):
        raise DataError(f"{field} not found: {path}", field=field)
    return path


# -- commands ------------------------------------------------------------

def cmd_synth(args):
    raw = _resolve(args.config, _overrides(args.set), "config")
    cfg = SynthConfig.from_dict(raw)
    outputs = [args.queries_out, args.docs_out, args.relevance_out, args.heldout_out]
    _write_manifest(args, {**cfg.to_dict(), "seed": args.seed, "holdout": args.holdout},
                    [args.config], outputs)
    corpus = synth_corpus(cfg, args.seed)
    queries = corpus.queries
    if args.holdout:
        queries, held = split_queries(corpus, args.holdout)
        if not args.heldout_out:
            raise ConfigError("--holdout needs --heldout-out", field="--heldout-out")
        write_features(held, args.heldout_out)
    write_features(queries, args.queries_out)
    write_features(corpus.documents, args.docs_out)
    with open(args.relevance_out, "w") as fh:
        json.dump(corpus.relevance, fh, indent=1, sort_keys=True)
    return {"queries": len(queries), "documents": len(corpus.documents)}


def cmd_train(args):
    raw = _resolve(args.config, _overrides(args.set), "config")
    cfg = TrainConfig.from_dict(raw)
    inputs = [_need(args.queries, "queries"), _need(args.docs, "docs"),
              _need(args.relevance, "relevance"), args.eval_queries]
    _write_manifest(args, cfg.to_dict(), inputs, [args.out, args.log])
    queries = read_features(args.queries)
    documents = read_features(args.docs)
    relevance = _read_relevance(args.relevance)
    held = read_features(args.eval_queries) if args.eval_queries else None
    log_fh = open(args.log, "w") if args.log else None
    sink = None
    if log_fh:
        def sink(rec):
            log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
    try:
        result = train(queries, documents, relevance, cfg, eval_queries=held, log_sink=sink)
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out, result.params, result.temperature,
                    meta={"train": cfg.to_dict()})
    last = result.log[-1]
    return {k: v for k, v in last.items() if k != "lr"}


def cmd_encode(args):
    _write_manifest(args, {}, [_need(args.checkpoint, "checkpoint"),
                               _need(args.features, "features")], [args.out])
    params, _, _ = load_checkpoint(args.checkpoint)
    records = read_features(args.features)
    emb = embed(params, records, batch_size=args.batch_size)
    write_embeddings(args.out, [r.id for r in records], emb, params.config.mode)
    return {"encoded": len(records), "shape": list(emb.shape)}


def _scoring_for(mode, requested):
    if requested != "auto":
        return requested
    return ix.DOT if mode in (None, RET2) else ix.MAXSIM


def cmd_index(args):
    _write_manifest(args, {"scoring": args.scoring}, [_need(args.embeddings, "embeddings")],
                    [args.out])
    ids, emb, mode = read_embeddings(args.embeddings)
    shard = ix.build(emb, ids, _scoring_for(mode, args.scoring))
    ix.save_shard(shard, args.out)
    return {"indexed": len(shard), "scoring": shard.scoring}


def cmd_search(args):
    if args.k < 1:
        raise ConfigError("K must be >= 1", field="--k")
    _write_manifest(args, {"k": args.k}, [_need(args.shard, "shard"),
                                          _need(args.queries, "queries")], [args.out])
    shard = ix.load_shard(args.shard)
    qids, qemb, _ = read_embeddings(args.queries)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", ix.TruncatedResultWarning)
        results = ix.search_many(shard, qemb, args.k, qids)
    with open(args.out, "w") as fh:
        for r in results:
            fh.write(json.dumps(r.to_json()) + "\n")
    truncated = any(issubclass(w.category, ix.TruncatedResultWarning) for w in caught)
    if truncated:
        print(json.dumps({"warning": "k_exceeds_index",
                          "message": f"K={args.k} > {len(shard)} documents; returned all"}),
              file=sys.stderr)
    return {"queries": len(results), "truncated": truncated}


def _read_results(path):
    results = []
    try:
        with open(path) as fh:
            for n, line in enumerate(fh, 1):
                if line.strip():
                    try:
                        results.append(ix.RetrievalResult.from_json(json.loads(line)))
                    except json.JSONDecodeError as exc:
                        raise DataError(f"results line {n}: {exc}", field="results") from None
    except FileNotFoundError:
        raise DataError(f"results not found: {path}", field="results") from None
    return results


def cmd_eval(args):
    results = _read_results(args.results)
    relevance = _read_relevance(args.relevance)
    report = {f"recall@{k}": ix.recall_at_k(results, relevance, k) for k in args.k}
    if args.query_features and args.doc_features:
        answers = {r.id: r.label for r in read_features(args.query_features) if r.label}
        raw = {r.id: r.raw_text for r in read_features(args.doc_features)}
        if answers:
            for k in args.k:
                report[f"pseudo_recall@{k}"] = ix.pseudo_recall_at_k(
                    results, answers, raw, k, args.strip_punctuation, args.strip_articles)
    return report


def cmd_diag(args):
    _write_manifest(args, {}, [_need(args.checkpoint, "checkpoint"),
                               _need(args.features, "features")], [args.out, args.collapse_out])
    params, _, _ = load_checkpoint(args.checkpoint)
    records = read_features(args.features)
    profile = profile_gates(records, params)
    diagnostics.write_gate_csv(profile, args.out)
    summary = {"gate_rows": len(profile.rows()), "flags": profile.flags}
    if args.collapse_out:
        if params.config.tokens < 2:
            summary["collapse"] = "skipped: single-token embeddings"
        else:
            emb = embed(params, records)
            scores = [(r.id, rank_collapse_score(m)) for r, m in zip(records, emb)]
            diagnostics.write_collapse_csv(scores, args.collapse_out)
            summary["mean_collapse_score"] = float(np.mean([s for _, s in scores]))
    return summary


# -- parser --------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="ret2", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic feature corpus")
    s.add_argument("--config", help="synth config JSON (defaults used when omitted)")
    s.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--queries-out", required=True, help="output RET2FEAT file for queries")
    s.add_argument("--docs-out", required=True, help="output RET2FEAT file for documents")
    s.add_argument("--relevance-out", required=True, help="output JSON query->document map")
    s.add_argument("--holdout", type=int, default=0,
                   help="queries per entity moved to --heldout-out")
    s.add_argument("--heldout-out", help="output RET2FEAT file for held-out queries")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train the fusion encoder")
    t.add_argument("--config", help="train config JSON")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")
    t.add_argument("--queries", required=True, help="training queries (RET2FEAT)")
    t.add_argument("--docs", required=True, help="documents (RET2FEAT)")
    t.add_argument("--relevance", required=True, help="query->document JSON map")
    t.add_argument("--eval-queries", help="held-out queries evaluated every eval_every steps")
    t.add_argument("--out", required=True, help="output checkpoint (RET2CKPT)")
    t.add_argument("--log", help="line-delimited JSON metrics log")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="embed a feature file with a checkpoint")
    e.add_argument("--checkpoint", required=True, help="RET2CKPT file")
    e.add_argument("--features", required=True, help="RET2FEAT input")
    e.add_argument("--out", required=True, help="RET2EMBD output")
    e.add_argument("--batch-size", type=int, default=256, help="records per forward pass")
    e.set_defaults(func=cmd_encode)

    i = sub.add_parser("index", help="build a flat index from embeddings")
    i.add_argument("--embeddings", required=True, help="RET2EMBD document embeddings")
    i.add_argument("--out", required=True, help="RET2SHRD output")
    i.add_argument("--scoring", choices=["auto", ix.DOT, ix.MAXSIM], default="auto",
                   help="auto picks dot for ret2 embeddings and maxsim for ret")
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("search", help="top-K search of query embeddings")
    q.add_argument("--shard", required=True, help="RET2SHRD index")
    q.add_argument("--queries", required=True, help="RET2EMBD query embeddings")
    q.add_argument("--k", type=int, default=10, help="results per query")
    q.add_argument("--out", required=True, help="results JSONL")
    q.set_defaults(func=cmd_search)

    v = sub.add_parser("eval", help="recall@K (and pseudo-recall@K) of search results")
    v.add_argument("--results", required=True, help="results JSONL from search")
    v.add_argument("--relevance", required=True, help="query->document JSON map")
    v.add_argument("--k", type=int, nargs="+", default=[1, 5, 10], help="cutoffs")
    v.add_argument("--query-features", help="query RET2FEAT carrying answer labels")
    v.add_argument("--doc-features", help="document RET2FEAT carrying raw text")
    v.add_argument("--strip-punctuation", action="store_true",
                   help="drop punctuation before answer matching")
    v.add_argument("--strip-articles", action="store_true",
                   help="drop a/an/the before answer matching")
    v.set_defaults(func=cmd_eval)

    g = sub.add_parser("diag", help="gate profiles and rank-collapse scores")
    g.add_argument("--checkpoint", required=True, help="RET2CKPT file")
    g.add_argument("--features", required=True, help="RET2FEAT sample")
    g.add_argument("--out", required=True, help="gate profile CSV (step,gate,mean,n)")
    g.add_argument("--collapse-out", help="collapse score CSV (matrix_id,score)")
    g.set_defaults(func=cmd_diag)
    return p


def _thread_limit():
    raw = os.environ.get("RET2_THREADS")
    if not raw:
        return contextlib.nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"RET2_THREADS must be a positive integer, got {raw!r}",
                          field="RET2_THREADS") from None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        with _thread_limit():
            summary = args.func(args)
    except Ret2Error as exc:
        print(json.dumps(exc.to_dict()), file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(json.dumps({"error": "data_error", "message": str(exc)}), file=sys.stderr)
        return DataError.exit_code
    print(json.dumps(summary, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
