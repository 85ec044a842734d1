"""``ragbench`` command line.

Exit codes: 0 success, 1 usage error, 2 provider/network error, 3 data error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import vector_index
from .chunking import chunk_corpus, count_tokens
from .corpus import ingest_dir
from .embedding import Provider, RemoteEmbedder, embed_batch
from .evaluation import MetricsReport
from .retrieval import retrieve
from .runner import (DATA_ERRORS, ConfigError, ExperimentConfig, _cache_for, emit_report, load_config,
                     offline_profile, run_experiment)
from .transport import ProviderError
from .vector_index import IndexEntry, build_index

EXIT_OK, EXIT_USAGE, EXIT_PROVIDER, EXIT_DATA = 0, 1, 2, 3

logger = logging.getLogger("ragbench")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_profile_args(p: argparse.ArgumentParser, *, corpus: bool = True) -> None:
    p.add_argument("--profile", required=True, help="profile name (built-in or defined in --config)")
    p.add_argument("--config", help="experiment config file (YAML/JSON)")
    if corpus:
        p.add_argument("--corpus", help="corpus directory (overrides the config)")
    p.add_argument("--offline", action="store_true", default=None, help="use stub embedder and LLM")
    p.add_argument("--seed", type=int)
    p.add_argument("--cache-dir", help="embedding cache directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ragbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("ingest", help="list the documents of a corpus directory")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("chunk", help="chunk the corpus with a profile's splitter (JSON Lines)")
    _add_profile_args(p)

    p = sub.add_parser("index", help="embed chunks and write an RGIDX1 index file")
    _add_profile_args(p)
    p.add_argument("--out", help="index file path (default: <profile>.rgidx)")

    p = sub.add_parser("query", help="retrieve context for one query and print the selection")
    _add_profile_args(p)
    p.add_argument("--text", required=True)

    p = sub.add_parser("run", help="run a full experiment")
    p.add_argument("--config", help="experiment config (default: bundled offline smoke config)")
    p.add_argument("--offline", action="store_true", default=None)
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--output", help="output directory (overrides the config)")
    p.add_argument("--queries", help="queries JSON Lines file (overrides the config)")
    p.add_argument("--corpus", help="corpus directory (overrides the config)")
    p.add_argument("--format", choices=["table", "json", "csv"], default="table",
                   help="report format printed to stdout")

    p = sub.add_parser("report", help="render a report.json")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--format", choices=["table", "json", "csv"], default="table")
    return parser


def _profile_context(args) -> tuple[ExperimentConfig, object]:
    config = load_config(args.config, corpus_dir=getattr(args, "corpus", None), seed=args.seed,
                         offline=args.offline, cache_dir=args.cache_dir,
                         profiles=None if args.config else [args.profile])
    by_name = {p.name: p for p in config.profiles}
    if args.profile not in by_name:
        raise ConfigError(f"profile {args.profile!r} not defined; available: {sorted(by_name)}")
    profile = by_name[args.profile]
    if config.offline:
        profile = offline_profile(profile, config.seed)
    return config, profile


def _build_index(config, profile):
    corpus = ingest_dir(config.corpus_dir)
    chunks = chunk_corpus(corpus, profile.splitter)
    if not chunks:
        raise ConfigError("corpus produced no chunks")
    cache_dir = Path(config.cache_dir) if config.cache_dir else Path(config.output_dir) / "cache"
    cache = _cache_for(cache_dir, profile.embedder.model_name)
    remote = RemoteEmbedder(profile.embedder) if profile.embedder.provider == Provider.REMOTE else None
    vecs = embed_batch(profile.embedder, [c.retrieval_text for c in chunks], cache=cache, remote=remote)
    index = build_index([IndexEntry(c.chunk_id, v) for c, v in zip(chunks, vecs)])
    return chunks, index, cache, remote


def _write_out(data: bytes) -> None:
    sys.stdout.buffer.write(data)
    sys.stdout.flush()


def cmd_ingest(args) -> int:
    corpus = ingest_dir(args.corpus)
    for line in corpus.log:
        print(line, file=sys.stderr)
    for w in corpus.warnings:
        print(f"warning: {w}", file=sys.stderr)
    for d in corpus.documents:
        print(json.dumps({"doc_id": d.doc_id, "source_path": d.source_path, "format": d.format.value,
                          "tokens": count_tokens(d.body)}))
    return EXIT_OK


def cmd_chunk(args) -> int:
    config, profile = _profile_context(args)
    corpus = ingest_dir(config.corpus_dir)
    for c in chunk_corpus(corpus, profile.splitter):
        print(json.dumps(c.to_json(), ensure_ascii=False))
    return EXIT_OK


def cmd_index(args) -> int:
    config, profile = _profile_context(args)
    _, index, _, _ = _build_index(config, profile)
    out = Path(args.out or f"{profile.name}.rgidx")
    vector_index.save(index, out)
    print(json.dumps({"index": str(out), "entries": len(index), "dimension": index.dimension}))
    return EXIT_OK


def cmd_query(args) -> int:
    config, profile = _profile_context(args)
    chunks, index, cache, remote = _build_index(config, profile)
    qvec = embed_batch(profile.embedder, [args.text], cache=cache, remote=remote)[0]
    result = retrieve(index, qvec, profile.retrieval)
    by_id = {c.chunk_id: c for c in chunks}
    payload = {"profile": profile.name, "query": args.text, **result.to_json()}
    for sel in payload["selected"]:
        c = by_id[sel["chunk_id"]]
        sel["header_path"] = list(c.header_path)
        sel["text"] = c.text
    print(json.dumps(payload, indent=2, ensure_ascii=False))
    return EXIT_OK


def cmd_run(args) -> int:
    config = load_config(args.config, seed=args.seed, offline=args.offline, jobs=args.jobs,
                         output_dir=args.output, queries_file=args.queries, corpus_dir=args.corpus)
    report = run_experiment(config)
    _write_out(emit_report(report, args.format))
    aborted = report.notes.get("aborted")
    if aborted:
        kinds = {a["kind"] for a in aborted.values()}
        return EXIT_PROVIDER if "provider" in kinds else EXIT_DATA
    return EXIT_OK


def cmd_report(args) -> int:
    with open(args.infile, encoding="utf-8") as fh:
        report = MetricsReport.from_json(json.load(fh))
    _write_out(emit_report(report, args.format))
    return EXIT_OK


COMMANDS = {"ingest": cmd_ingest, "chunk": cmd_chunk, "index": cmd_index, "query": cmd_query,
            "run": cmd_run, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ProviderError as exc:
        print(f"ragbench: provider error: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except ConfigError as exc:
        print(f"ragbench: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, json.JSONDecodeError, *DATA_ERRORS) as exc:
        print(f"ragbench: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
